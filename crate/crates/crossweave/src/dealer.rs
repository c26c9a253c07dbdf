//! Trusted-dealer realization of the offline phase.
//!
//! The dealer samples the global MAC key α (always odd, so additive tampering
//! by an odd Δ is caught with certainty), splits it into per-party shares,
//! and produces two kinds of preprocessed material:
//!
//! * Beaver triples `([a], [b], [c])` with `c = a·b`, consumed one per
//!   secret-by-secret multiplication;
//! * input masks: authenticated random values `[r]` whose plaintext is known
//!   only to a designated owner, letting that owner inject a fresh input by
//!   announcing the public correction `x - r`.
//!
//! Material is either written to per-party preprocessing files or streamed
//! from an in-memory dealer when all parties live in one process.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ring::{RingElement, KAPPA};
use crate::sharing::{share, share_mac_key, AuthShare, MacKeyShare, PartyId, AUTH_SHARE_BYTES};
use crate::{Error, Result};

/// One party's slice of an authenticated multiplication triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub a: AuthShare,
    pub b: AuthShare,
    pub c: AuthShare,
}

/// One party's slice of an input mask `[r]`; `plain` is populated only at
/// the owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputMask {
    pub share: AuthShare,
    pub plain: Option<RingElement>,
}

/// Single-use triple ledger: every slice is handed out exactly once, in
/// index order, and never reused.
#[derive(Debug, Default)]
pub struct TriplePool {
    slices: Vec<BeaverTriple>,
    next: usize,
}

impl TriplePool {
    pub fn new(slices: Vec<BeaverTriple>) -> Self {
        TriplePool { slices, next: 0 }
    }

    /// Index the next `take` will consume; identical across parties in a
    /// lockstep run.
    pub fn next_index(&self) -> usize {
        self.next
    }

    pub fn remaining(&self) -> usize {
        self.slices.len() - self.next
    }

    pub fn take(&mut self) -> Result<BeaverTriple> {
        let t = self
            .slices
            .get(self.next)
            .copied()
            .ok_or(Error::TriplesExhausted)?;
        self.next += 1;
        Ok(t)
    }

    pub fn take_many(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        (0..count).map(|_| self.take()).collect()
    }
}

/// Single-use ledger of input masks for one owner.
#[derive(Debug, Default)]
pub struct MaskPool {
    owner: u16,
    masks: Vec<InputMask>,
    next: usize,
}

impl MaskPool {
    pub fn new(owner: PartyId, masks: Vec<InputMask>) -> Self {
        MaskPool {
            owner: owner.index(),
            masks,
            next: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.masks.len() - self.next
    }

    pub fn take_many(&mut self, count: usize) -> Result<Vec<InputMask>> {
        if self.next + count > self.masks.len() {
            return Err(Error::MasksExhausted { owner: self.owner });
        }
        let out = self.masks[self.next..self.next + count].to_vec();
        self.next += count;
        Ok(out)
    }
}

/// Everything one party carries out of the offline phase.
#[derive(Debug)]
pub struct PartyPreprocessing {
    pub party: PartyId,
    pub n: u16,
    pub alpha_share: MacKeyShare,
    pub shared_randomness_seed: [u8; 32],
    pub triples: TriplePool,
    /// Mask pools indexed by owner slot.
    pub masks: Vec<MaskPool>,
}

/// The dealer's full output: per-party bundles plus the dealer-side view of
/// α, exposed only so tests and oracles can recompute MACs.
#[derive(Debug)]
pub struct PreprocessingBundle {
    pub parties: Vec<PartyPreprocessing>,
    alpha: RingElement,
}

impl PreprocessingBundle {
    /// Dealer-side MAC key; verification oracle only, never shipped to a party.
    pub fn mac_key(&self) -> RingElement {
        self.alpha
    }
}

/// MAC-key and material generator. One instance per run.
pub struct Dealer {
    n: usize,
    alpha: RingElement,
    alpha_shares: Vec<MacKeyShare>,
    shared_seed: [u8; 32],
    rng: ChaCha20Rng,
}

impl Dealer {
    pub fn new(n: usize, seed: u64) -> Self {
        assert!(n >= 2, "need at least two parties");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // α odd: an announced share tampered by odd Δ then shifts the sigma
        // sum by α·r·Δ, which vanishes only when the random coefficient r
        // does.
        let alpha = RingElement::new(rng.random::<crate::ring::RingInt>() | 1);
        let alpha_shares = share_mac_key(alpha, n, &mut rng);
        let mut shared_seed = [0u8; 32];
        rng.fill(&mut shared_seed);
        Dealer {
            n,
            alpha,
            alpha_shares,
            shared_seed,
            rng,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> RingElement {
        self.alpha
    }

    /// Per-party slices of one fresh triple.
    fn gen_triple(&mut self) -> Vec<BeaverTriple> {
        let a = RingElement::new(self.rng.random());
        let b = RingElement::new(self.rng.random());
        let c = a * b;
        let sa = share(a, self.n, self.alpha, &mut self.rng);
        let sb = share(b, self.n, self.alpha, &mut self.rng);
        let sc = share(c, self.n, self.alpha, &mut self.rng);
        sa.into_iter()
            .zip(sb)
            .zip(sc)
            .map(|((a, b), c)| BeaverTriple { a, b, c })
            .collect()
    }

    /// Per-party slices of one fresh input mask owned by `owner`.
    fn gen_mask(&mut self, owner: PartyId) -> Vec<InputMask> {
        let r = RingElement::new(self.rng.random());
        let shares = share(r, self.n, self.alpha, &mut self.rng);
        shares
            .into_iter()
            .enumerate()
            .map(|(slot, share)| InputMask {
                share,
                plain: (slot == owner.slot()).then_some(r),
            })
            .collect()
    }

    fn gen_triples(&mut self, count: usize) -> Vec<Vec<BeaverTriple>> {
        let mut per_party = vec![Vec::with_capacity(count); self.n];
        for _ in 0..count {
            for (slot, slice) in self.gen_triple().into_iter().enumerate() {
                per_party[slot].push(slice);
            }
        }
        per_party
    }

    fn gen_masks(&mut self, owner: PartyId, count: usize) -> Vec<Vec<InputMask>> {
        let mut per_party = vec![Vec::with_capacity(count); self.n];
        for _ in 0..count {
            for (slot, slice) in self.gen_mask(owner).into_iter().enumerate() {
                per_party[slot].push(slice);
            }
        }
        per_party
    }
}

/// One-shot offline phase: α, `num_triples` triples and `num_masks_per_owner`
/// input masks for every owner.
pub fn deal(n: usize, num_triples: usize, num_masks_per_owner: usize, seed: u64) -> PreprocessingBundle {
    let mut dealer = Dealer::new(n, seed);
    let triples = dealer.gen_triples(num_triples);
    let mut masks: Vec<Vec<Vec<InputMask>>> = Vec::with_capacity(n); // [owner][party][mask]
    for owner in PartyId::all(n) {
        masks.push(dealer.gen_masks(owner, num_masks_per_owner));
    }
    let parties = PartyId::all(n)
        .zip(triples)
        .map(|(party, triples)| PartyPreprocessing {
            party,
            n: n as u16,
            alpha_share: dealer.alpha_shares[party.slot()],
            shared_randomness_seed: dealer.shared_seed,
            triples: TriplePool::new(triples),
            masks: PartyId::all(n)
                .map(|owner| MaskPool::new(owner, masks[owner.slot()][party.slot()].clone()))
                .collect(),
        })
        .collect();
    PreprocessingBundle {
        parties,
        alpha: dealer.alpha,
    }
}

/// Source of offline material as seen by one party's protocol engine.
pub trait PreprocSource: Send {
    fn alpha_share(&self) -> MacKeyShare;
    fn shared_seed(&self) -> [u8; 32];
    fn take_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>>;
    fn take_masks(&mut self, owner: PartyId, count: usize) -> Result<Vec<InputMask>>;
}

impl PreprocSource for Box<dyn PreprocSource> {
    fn alpha_share(&self) -> MacKeyShare {
        (**self).alpha_share()
    }

    fn shared_seed(&self) -> [u8; 32] {
        (**self).shared_seed()
    }

    fn take_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        (**self).take_triples(count)
    }

    fn take_masks(&mut self, owner: PartyId, count: usize) -> Result<Vec<InputMask>> {
        (**self).take_masks(owner, count)
    }
}

impl PreprocSource for PartyPreprocessing {
    fn alpha_share(&self) -> MacKeyShare {
        self.alpha_share
    }

    fn shared_seed(&self) -> [u8; 32] {
        self.shared_randomness_seed
    }

    fn take_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        self.triples.take_many(count)
    }

    fn take_masks(&mut self, owner: PartyId, count: usize) -> Result<Vec<InputMask>> {
        self.masks[owner.slot()].take_many(count)
    }
}

// ---------------------------------------------------------------------------
// Streaming dealer
// ---------------------------------------------------------------------------

/// What one lockstep preprocessing request asks for.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChunkSpec {
    Triples { count: usize },
    Masks { owner: u16, count: usize },
}

enum ChunkData {
    Triples(Vec<Vec<BeaverTriple>>),
    Masks(Vec<Vec<InputMask>>),
}

struct Chunk {
    spec: ChunkSpec,
    data: ChunkData,
    fetched: Vec<bool>,
}

struct StreamState {
    dealer: Dealer,
    chunks: HashMap<u64, Chunk>,
    next_id: u64,
}

/// In-memory dealer servicing lockstep parties inside one process.
///
/// Parties issue preprocessing requests in identical program order between
/// transport rounds, so request ids arrive densely; each chunk is generated
/// once, handed to all `n` parties, then dropped. Peak memory is therefore a
/// couple of hook invocations, not the whole run.
pub struct StreamingDealer {
    state: Mutex<StreamState>,
    n: usize,
    alpha_shares: Vec<MacKeyShare>,
    shared_seed: [u8; 32],
    alpha: RingElement,
}

impl StreamingDealer {
    pub fn new(n: usize, seed: u64) -> Arc<Self> {
        let dealer = Dealer::new(n, seed);
        let alpha_shares = dealer.alpha_shares.clone();
        let shared_seed = dealer.shared_seed;
        let alpha = dealer.alpha;
        Arc::new(StreamingDealer {
            state: Mutex::new(StreamState {
                dealer,
                chunks: HashMap::new(),
                next_id: 0,
            }),
            n,
            alpha_shares,
            shared_seed,
            alpha,
        })
    }

    /// Dealer-side MAC key; verification oracle only.
    pub fn mac_key(&self) -> RingElement {
        self.alpha
    }

    pub fn handle(self: &Arc<Self>, party: PartyId) -> StreamingPreproc {
        StreamingPreproc {
            dealer: Arc::clone(self),
            party,
            next_request: 0,
        }
    }

    fn fetch(&self, id: u64, spec: ChunkSpec, party: PartyId) -> Result<ChunkData> {
        let mut state = self.state.lock().unwrap();
        // Generate every chunk up to and including `id`, in order, so the
        // dealer RNG is consumed identically regardless of thread schedule.
        while state.next_id <= id {
            let gen_id = state.next_id;
            // Only the requested id's spec is known here; lockstep order
            // guarantees gen_id == id by the argument above.
            if gen_id != id {
                return Err(Error::Protocol(format!(
                    "preprocessing requests out of order: generating {gen_id}, asked for {id}"
                )));
            }
            let data = match spec {
                ChunkSpec::Triples { count } => ChunkData::Triples(state.dealer.gen_triples(count)),
                ChunkSpec::Masks { owner, count } => {
                    ChunkData::Masks(state.dealer.gen_masks(PartyId::new(owner), count))
                }
            };
            state.chunks.insert(
                gen_id,
                Chunk {
                    spec,
                    data,
                    fetched: vec![false; self.n],
                },
            );
            state.next_id = gen_id + 1;
        }
        let chunk = state
            .chunks
            .get_mut(&id)
            .ok_or_else(|| Error::Protocol(format!("preprocessing chunk {id} already consumed")))?;
        if chunk.spec != spec {
            return Err(Error::Protocol(format!(
                "parties disagree on preprocessing request {id}: {:?} vs {:?}",
                chunk.spec, spec
            )));
        }
        if std::mem::replace(&mut chunk.fetched[party.slot()], true) {
            return Err(Error::Protocol(format!(
                "party {party} fetched preprocessing chunk {id} twice"
            )));
        }
        let slot = party.slot();
        let out = match &mut chunk.data {
            ChunkData::Triples(per_party) => ChunkData::Triples(vec![std::mem::take(&mut per_party[slot])]),
            ChunkData::Masks(per_party) => ChunkData::Masks(vec![std::mem::take(&mut per_party[slot])]),
        };
        if chunk.fetched.iter().all(|f| *f) {
            state.chunks.remove(&id);
        }
        Ok(out)
    }
}

/// One party's handle onto the streaming dealer.
pub struct StreamingPreproc {
    dealer: Arc<StreamingDealer>,
    party: PartyId,
    next_request: u64,
}

impl PreprocSource for StreamingPreproc {
    fn alpha_share(&self) -> MacKeyShare {
        self.dealer.alpha_shares[self.party.slot()]
    }

    fn shared_seed(&self) -> [u8; 32] {
        self.dealer.shared_seed
    }

    fn take_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        let id = self.next_request;
        self.next_request += 1;
        match self.dealer.fetch(id, ChunkSpec::Triples { count }, self.party)? {
            ChunkData::Triples(mut v) => Ok(v.pop().unwrap()),
            ChunkData::Masks(_) => unreachable!(),
        }
    }

    fn take_masks(&mut self, owner: PartyId, count: usize) -> Result<Vec<InputMask>> {
        let id = self.next_request;
        self.next_request += 1;
        let spec = ChunkSpec::Masks {
            owner: owner.index(),
            count,
        };
        match self.dealer.fetch(id, spec, self.party)? {
            ChunkData::Masks(mut v) => Ok(v.pop().unwrap()),
            ChunkData::Triples(_) => unreachable!(),
        }
    }
}

// ---------------------------------------------------------------------------
// Preprocessing files
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"VTLP";
const VERSION: u8 = 1;

/// Serialize one party's preprocessing to its file format: magic "VTLP",
/// version byte, κ, n, party index, the party's α share and the shared
/// randomness seed, the triple records, then per-owner mask sections.
pub fn write_party_file(path: &Path, pp: &PartyPreprocessing) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(KAPPA as u8); // 64 or 128; 128 encodes as 0x80
    out.extend_from_slice(&pp.n.to_le_bytes());
    out.extend_from_slice(&pp.party.index().to_le_bytes());
    out.extend_from_slice(&pp.alpha_share.value().to_le_bytes());
    out.extend_from_slice(&pp.shared_randomness_seed);
    let triples = &pp.triples.slices[pp.triples.next..];
    out.extend_from_slice(&(triples.len() as u64).to_le_bytes());
    for t in triples {
        t.a.write_bytes(&mut out);
        t.b.write_bytes(&mut out);
        t.c.write_bytes(&mut out);
    }
    for pool in &pp.masks {
        let masks = &pool.masks[pool.next..];
        out.extend_from_slice(&pool.owner.to_le_bytes());
        out.extend_from_slice(&(masks.len() as u64).to_le_bytes());
        let has_plain = masks.first().map(|m| m.plain.is_some()).unwrap_or(false);
        out.push(has_plain as u8);
        for m in masks {
            m.share.write_bytes(&mut out);
            if let Some(p) = m.plain {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::BadPreprocessingFile(format!(
                "truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ring(&mut self) -> Result<RingElement> {
        Ok(RingElement::from_le_bytes(
            self.take(crate::ring::RING_BYTES)?.try_into().unwrap(),
        ))
    }

    fn auth_share(&mut self) -> Result<AuthShare> {
        AuthShare::read_bytes(self.take(AUTH_SHARE_BYTES)?)
    }
}

pub fn read_party_file(path: &Path) -> Result<PartyPreprocessing> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadPreprocessingFile("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::BadPreprocessingFile(format!(
            "unsupported version {version}"
        )));
    }
    let kappa = r.u8()? as u32;
    if kappa != KAPPA % 256 {
        return Err(Error::BadPreprocessingFile(format!(
            "ring width mismatch: file κ={kappa}, built for κ={KAPPA}"
        )));
    }
    let n = r.u16()?;
    let party = r.u16()?;
    if n < 2 || party < 1 || party > n {
        return Err(Error::BadPreprocessingFile(format!(
            "bad party index {party} of {n}"
        )));
    }
    let alpha_share = MacKeyShare(r.ring()?);
    let shared_randomness_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let triple_count = r.u64()? as usize;
    let mut triples = Vec::with_capacity(triple_count);
    for _ in 0..triple_count {
        triples.push(BeaverTriple {
            a: r.auth_share()?,
            b: r.auth_share()?,
            c: r.auth_share()?,
        });
    }
    let mut masks = Vec::with_capacity(n as usize);
    for expect_owner in 1..=n {
        let owner = r.u16()?;
        if owner != expect_owner {
            return Err(Error::BadPreprocessingFile(format!(
                "mask sections out of order: got owner {owner}, expected {expect_owner}"
            )));
        }
        let count = r.u64()? as usize;
        let has_plain = r.u8()? != 0;
        let mut pool = Vec::with_capacity(count);
        for _ in 0..count {
            let share = r.auth_share()?;
            let plain = if has_plain { Some(r.ring()?) } else { None };
            pool.push(InputMask { share, plain });
        }
        masks.push(MaskPool::new(PartyId::new(owner), pool));
    }
    Ok(PartyPreprocessing {
        party: PartyId::new(party),
        n,
        alpha_share,
        shared_randomness_seed,
        triples: TriplePool::new(triples),
        masks,
    })
}
