//! The online phase, one engine per party.
//!
//! All cross-party interaction is a sequence of lockstep rounds: every party
//! broadcasts exactly one message per round and then gathers everyone
//! else's. Share announcements are optimistic: opened values may be used
//! immediately, but nothing leaves the protocol boundary until the batched
//! MAC check over every opening has passed. A failed check broadcasts ⊥ and
//! tears the whole computation down.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::dealer::PreprocSource;
use crate::ring::{FixedPointCodec, RingElement, RING_BYTES};
use crate::sharing::{AuthShare, MacKeyShare, PartyId};
use crate::transport::{MessageKind, Transport};
use crate::{Error, Result};

/// A value whose shares have been announced and summed.
///
/// `provenance` holds the per-party announced shares in ascending party
/// order; for a plain opening `value` is their sum. `checked` flips to true
/// only once a MAC check covering this opening has succeeded; unchecked
/// values must never cross the protocol boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenedValue {
    pub value: RingElement,
    pub provenance: Vec<RingElement>,
    pub checked: bool,
}

impl OpenedValue {
    pub fn sum_of_provenance(&self) -> RingElement {
        self.provenance.iter().copied().sum()
    }
}

/// One transcript line: who said what in which round.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TranscriptEntry {
    pub round: u32,
    pub sender: u16,
    pub kind: MessageKind,
    pub digest: [u8; 8],
}

/// Append-only audit log. In a deterministic run every honest party's
/// transcript is byte-identical, because all protocol messages are
/// broadcasts consumed in sender order.
#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct ProtocolTranscript {
    entries: Vec<TranscriptEntry>,
}

impl ProtocolTranscript {
    fn push(&mut self, round: u32, sender: u16, kind: MessageKind, payload: &[u8]) {
        let hash = Sha256::digest(payload);
        let mut digest = [0u8; 8];
        digest.copy_from_slice(&hash[..8]);
        self.entries.push(TranscriptEntry {
            round,
            sender,
            kind,
            digest,
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn to_lines(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "round={} sender={} kind={} digest={}",
                e.round,
                e.sender,
                e.kind.name(),
                e.digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
            )
            .unwrap();
        }
        out
    }
}

/// Counter-mode tape of ring elements all parties derive from the dealer's
/// shared randomness seed; supplies the random vector of each MAC check.
struct SharedTape {
    rng: ChaCha20Rng,
}

impl SharedTape {
    fn new(seed: [u8; 32]) -> Self {
        SharedTape {
            rng: ChaCha20Rng::from_seed(seed),
        }
    }

    fn next_vec(&mut self, len: usize) -> Vec<RingElement> {
        (0..len)
            .map(|_| {
                let mut bytes = [0u8; RING_BYTES];
                self.rng.fill_bytes(&mut bytes);
                RingElement::from_le_bytes(bytes)
            })
            .collect()
    }
}

fn ring_vec_to_bytes(v: &[RingElement]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * RING_BYTES);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn bytes_to_ring_vec(bytes: &[u8], expect_len: usize, from: PartyId, round: u32) -> Result<Vec<RingElement>> {
    if bytes.len() != expect_len * RING_BYTES {
        return Err(Error::Protocol(format!(
            "round {round}: {from} announced {} bytes, expected {}",
            bytes.len(),
            expect_len * RING_BYTES
        )));
    }
    Ok(bytes
        .chunks_exact(RING_BYTES)
        .map(|c| RingElement::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Per-party protocol engine.
pub struct ProtocolParty<T: Transport, P: PreprocSource> {
    me: PartyId,
    n: usize,
    codec: FixedPointCodec,
    alpha: MacKeyShare,
    preproc: P,
    transport: T,
    tape: SharedTape,
    /// Openings awaiting the next MAC check: (opened value, own MAC share).
    pending: Vec<(RingElement, RingElement)>,
    transcript: ProtocolTranscript,
    round: u32,
}

impl<T: Transport, P: PreprocSource> ProtocolParty<T, P> {
    pub fn new(transport: T, preproc: P, codec: FixedPointCodec) -> Self {
        let me = transport.me();
        let n = transport.n_parties();
        let alpha = preproc.alpha_share();
        let tape = SharedTape::new(preproc.shared_seed());
        ProtocolParty {
            me,
            n,
            codec,
            alpha,
            preproc,
            transport,
            tape,
            pending: Vec::new(),
            transcript: ProtocolTranscript::default(),
            round: 0,
        }
    }

    pub fn me(&self) -> PartyId {
        self.me
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn alpha_share(&self) -> MacKeyShare {
        self.alpha
    }

    pub fn transcript(&self) -> &ProtocolTranscript {
        &self.transcript
    }

    pub fn preproc_mut(&mut self) -> &mut P {
        &mut self.preproc
    }

    pub fn pending_opens(&self) -> usize {
        self.pending.len()
    }

    /// Broadcast `payload`, gather everyone else's, and log the whole round
    /// in ascending sender order. Returns the n payloads indexed by slot.
    fn exchange(&mut self, kind: MessageKind, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let round = self.round;
        self.round += 1;
        // What actually went out is this party's announcement of record,
        // even if a tampering wrapper rewrote it.
        let sent = self.transport.broadcast(round, kind, payload)?;
        let received = match self.transport.gather(round, kind) {
            Ok(envs) => envs,
            Err(e) => return Err(e),
        };
        let mut slots: Vec<Vec<u8>> = vec![Vec::new(); self.n];
        slots[self.me.slot()] = sent;
        for env in received {
            slots[env.sender.slot()] = env.payload;
        }
        for p in PartyId::all(self.n) {
            self.transcript
                .push(round, p.index(), kind, &slots[p.slot()]);
        }
        Ok(slots)
    }

    /// Signal ⊥ to everyone; best-effort, the computation is over either way.
    fn signal_abort(&mut self) {
        let round = self.round;
        self.round += 1;
        self.transport.broadcast(round, MessageKind::Abort, Vec::new()).ok();
    }

    pub fn round_barrier(&mut self) -> Result<()> {
        self.exchange(MessageKind::Barrier, Vec::new())?;
        Ok(())
    }

    /// Every party contributes the same number of values; returns, per owner,
    /// authenticated shares of that owner's values.
    pub fn input_all(&mut self, my_values: &[RingElement]) -> Result<Vec<Vec<AuthShare>>> {
        let counts = vec![my_values.len(); self.n];
        self.input_all_with_counts(my_values, &counts)
    }

    /// Inject inputs with a per-owner count agreed by all parties.
    ///
    /// Each of owner `j`'s values is injected by opening a dealer mask `[r]`
    /// to `j` offline and having `j` broadcast the public correction `x - r`
    /// here; everyone then holds `[x] = [r] + (x - r)`. Masks are consumed in
    /// ascending owner order so lockstep preprocessing streams line up.
    pub fn input_all_with_counts(
        &mut self,
        my_values: &[RingElement],
        counts: &[usize],
    ) -> Result<Vec<Vec<AuthShare>>> {
        assert_eq!(counts.len(), self.n);
        assert_eq!(my_values.len(), counts[self.me.slot()]);
        let mut all_masks = Vec::with_capacity(self.n);
        for owner in PartyId::all(self.n) {
            all_masks.push(self.preproc.take_masks(owner, counts[owner.slot()])?);
        }
        let corrections: Vec<RingElement> = my_values
            .iter()
            .zip(&all_masks[self.me.slot()])
            .map(|(x, m)| {
                let r = m.plain.expect("owner mask must carry its plaintext");
                *x - r
            })
            .collect();
        let slots = self.exchange(MessageKind::ShareAnnounce, ring_vec_to_bytes(&corrections))?;

        let mut out = Vec::with_capacity(self.n);
        for owner in PartyId::all(self.n) {
            let eps = bytes_to_ring_vec(
                &slots[owner.slot()],
                counts[owner.slot()],
                owner,
                self.round - 1,
            )?;
            let shares: Vec<AuthShare> = all_masks[owner.slot()]
                .iter()
                .zip(&eps)
                .map(|(m, e)| m.share.add_public(*e, self.me, self.alpha))
                .collect();
            out.push(shares);
        }
        Ok(out)
    }

    /// Announce value shares and sum them. The results are *unchecked*; their
    /// MAC shares join the pending batch for the next [`Self::mac_check`].
    pub fn open_batch(&mut self, shares: &[AuthShare]) -> Result<Vec<OpenedValue>> {
        let mine: Vec<RingElement> = shares.iter().map(|s| s.value).collect();
        let slots = self.exchange(MessageKind::ShareAnnounce, ring_vec_to_bytes(&mine))?;
        let announced: Vec<Vec<RingElement>> = PartyId::all(self.n)
            .map(|p| bytes_to_ring_vec(&slots[p.slot()], shares.len(), p, self.round - 1))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(shares.len());
        for (i, share) in shares.iter().enumerate() {
            let provenance: Vec<RingElement> = announced.iter().map(|a| a[i]).collect();
            let value: RingElement = provenance.iter().copied().sum();
            self.pending.push((value, share.mac));
            out.push(OpenedValue {
                value,
                provenance,
                checked: false,
            });
        }
        Ok(out)
    }

    /// Open a single shared value (unchecked).
    pub fn partial_open(&mut self, share: AuthShare) -> Result<OpenedValue> {
        Ok(self.open_batch(std::slice::from_ref(&share))?.pop().unwrap())
    }

    /// Tensor-scale opening: like [`Self::open_batch`] but returns bare
    /// values without per-element provenance. The openings still join the
    /// pending MAC-check batch; callers must run [`Self::mac_check`] before
    /// releasing anything derived from them.
    pub fn open_batch_values(&mut self, shares: &[AuthShare]) -> Result<Vec<RingElement>> {
        let mine: Vec<RingElement> = shares.iter().map(|s| s.value).collect();
        let slots = self.exchange(MessageKind::ShareAnnounce, ring_vec_to_bytes(&mine))?;
        let mut values = vec![RingElement::ZERO; shares.len()];
        for p in PartyId::all(self.n) {
            let announced = bytes_to_ring_vec(&slots[p.slot()], shares.len(), p, self.round - 1)?;
            for (v, a) in values.iter_mut().zip(&announced) {
                *v += *a;
            }
        }
        for (v, s) in values.iter().zip(shares) {
            self.pending.push((*v, s.mac));
        }
        Ok(values)
    }

    /// Exchange a small metadata blob (shape agreement and the like) without
    /// touching the share stream. Returns payloads indexed by slot.
    pub fn exchange_meta(&mut self, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        self.exchange(MessageKind::Barrier, payload)
    }

    /// Batched MAC check over every opening since the last check.
    ///
    /// All parties draw the same random vector r from the shared tape,
    /// combine openings as c = Σ r_j·m_j and their retained MAC shares as
    /// γ(c)^(i) = Σ r_j·γ_j^(i), then broadcast σ^(i) = γ(c)^(i) − α^(i)·c.
    /// Success iff Σ σ^(i) = 0; on success every `OpenedValue` in `release`
    /// is marked checked. Failure returns ⊥ and signals abort.
    pub fn mac_check(&mut self, release: &mut [&mut OpenedValue]) -> Result<()> {
        if !self.pending.is_empty() {
            let batch = std::mem::take(&mut self.pending);
            let r = self.tape.next_vec(batch.len());
            let mut c = RingElement::ZERO;
            let mut gamma_c = RingElement::ZERO;
            for ((value, mac), rj) in batch.iter().zip(&r) {
                c += *rj * *value;
                gamma_c += *rj * *mac;
            }
            let sigma = gamma_c - self.alpha.value() * c;
            let check_round = self.round;
            let slots = self.exchange(MessageKind::SigmaAnnounce, ring_vec_to_bytes(&[sigma]))?;
            let mut total = RingElement::ZERO;
            for p in PartyId::all(self.n) {
                let v = bytes_to_ring_vec(&slots[p.slot()], 1, p, check_round)?;
                total += v[0];
            }
            if !total.is_zero() {
                self.signal_abort();
                return Err(Error::MacCheckFailed { round: check_round });
            }
        }
        for v in release {
            v.checked = true;
        }
        Ok(())
    }

    /// Beaver multiplication of one pair; see [`Self::beaver_mul_batch`].
    pub fn beaver_mul(&mut self, x: AuthShare, y: AuthShare) -> Result<AuthShare> {
        Ok(self.beaver_mul_batch(&[(x, y)])?.pop().unwrap())
    }

    /// Multiply share pairs using one triple each, opening all masked
    /// differences in a single round.
    ///
    /// For each pair, parties open μ = x − a and ν = y − b, then compute
    /// z^(i) = c^(i) + μ·b^(i) + ν·a^(i) with the public μν folded in. The
    /// openings of μ and ν join the pending MAC-check batch.
    pub fn beaver_mul_batch(&mut self, pairs: &[(AuthShare, AuthShare)]) -> Result<Vec<AuthShare>> {
        let triples = self.preproc.take_triples(pairs.len())?;
        let mut masked = Vec::with_capacity(pairs.len() * 2);
        for ((x, y), t) in pairs.iter().zip(&triples) {
            masked.push(x.sub(&t.a));
            masked.push(y.sub(&t.b));
        }
        let opened = self.open_batch(&masked)?;
        let mut out = Vec::with_capacity(pairs.len());
        for (i, t) in triples.iter().enumerate() {
            let mu = opened[2 * i].value;
            let nu = opened[2 * i + 1].value;
            let z = t
                .c
                .add(&t.b.mul_public(mu))
                .add(&t.a.mul_public(nu))
                .add_public(mu * nu, self.me, self.alpha);
            out.push(z);
        }
        Ok(out)
    }

    /// Authenticated dot product of two share vectors, opened, MAC-checked
    /// and truncated back to scale 2^p.
    ///
    /// Both inputs must be fixed-point encodings at scale 2^p. The μ/ν
    /// openings, together with the opening of the result, are covered by one
    /// MAC check before anything is released. The returned value carries the
    /// truncated result; `provenance` holds the raw pre-truncation
    /// announcements.
    pub fn vector_mul(&mut self, theta: &[AuthShare], v: &[AuthShare]) -> Result<OpenedValue> {
        if theta.len() != v.len() {
            return Err(Error::Protocol(format!(
                "vector_mul length mismatch: {} vs {}",
                theta.len(),
                v.len()
            )));
        }
        let pairs: Vec<(AuthShare, AuthShare)> = v.iter().copied().zip(theta.iter().copied()).collect();
        let products = self.beaver_mul_batch(&pairs)?;
        let sum = products
            .iter()
            .fold(AuthShare::ZERO, |acc, p| acc.add(p));
        let mut opened = self.open_batch(&[sum])?.pop().unwrap();
        self.mac_check(&mut [&mut opened])?;
        opened.value = self.codec.truncate(opened.value);
        Ok(opened)
    }
}
