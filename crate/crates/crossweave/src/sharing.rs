//! MAC-authenticated additive secret sharing.
//!
//! A value `x` is `[·]`-shared when party `i` holds `(x^(i), γ(x)^(i))` with
//! `Σ x^(i) ≡ x` and `Σ γ(x)^(i) ≡ α·x (mod 2^κ)`, where `α` is the global
//! MAC key of which each party owns only an additive share. All linear
//! operations on shares are local; multiplications go through the protocol
//! engine.

use rand::Rng;

use crate::ring::{RingElement, RING_BYTES};
use crate::{Error, Result};

/// Identifies a data domain. Indices are 1-based, unique and dense.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PartyId(u16);

impl PartyId {
    pub fn new(index: u16) -> Self {
        assert!(index >= 1, "party indices are 1-based");
        PartyId(index)
    }

    /// 1-based index as it appears on the wire and in logs.
    pub fn index(self) -> u16 {
        self.0
    }

    /// 0-based slot for vector addressing.
    pub fn slot(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_slot(slot: usize) -> Self {
        PartyId(slot as u16 + 1)
    }

    /// All ids `1..=n`.
    pub fn all(n: usize) -> impl Iterator<Item = PartyId> {
        (1..=n as u16).map(PartyId)
    }
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// One party's additive share of the global MAC key α.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacKeyShare(pub RingElement);

impl MacKeyShare {
    pub fn value(self) -> RingElement {
        self.0
    }
}

/// One party's slice of a `[·]`-shared value: the value share and MAC share.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct AuthShare {
    pub value: RingElement,
    pub mac: RingElement,
}

/// Wire size of one serialized share: value then MAC, little-endian.
pub const AUTH_SHARE_BYTES: usize = 2 * RING_BYTES;

impl AuthShare {
    pub const ZERO: AuthShare = AuthShare {
        value: RingElement::ZERO,
        mac: RingElement::ZERO,
    };

    pub fn new(value: RingElement, mac: RingElement) -> Self {
        AuthShare { value, mac }
    }

    /// Componentwise sum; reconstructs to `x + y` with MAC `α(x + y)`.
    pub fn add(&self, other: &AuthShare) -> AuthShare {
        AuthShare {
            value: self.value + other.value,
            mac: self.mac + other.mac,
        }
    }

    pub fn sub(&self, other: &AuthShare) -> AuthShare {
        AuthShare {
            value: self.value - other.value,
            mac: self.mac - other.mac,
        }
    }

    /// Scale by a public constant; reconstructs to `c·x` with MAC `α·c·x`.
    pub fn mul_public(&self, c: RingElement) -> AuthShare {
        AuthShare {
            value: self.value * c,
            mac: self.mac * c,
        }
    }

    /// Add a public constant: party 1 absorbs it into the value share, every
    /// party charges `α^(i)·c` to its MAC share.
    pub fn add_public(&self, c: RingElement, me: PartyId, alpha: MacKeyShare) -> AuthShare {
        let value = if me.index() == 1 {
            self.value + c
        } else {
            self.value
        };
        AuthShare {
            value,
            mac: self.mac + alpha.value() * c,
        }
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.value.to_le_bytes());
        out.extend_from_slice(&self.mac.to_le_bytes());
    }

    pub fn read_bytes(bytes: &[u8]) -> Result<AuthShare> {
        if bytes.len() < AUTH_SHARE_BYTES {
            return Err(Error::BadPreprocessingFile(format!(
                "truncated share record: {} bytes, need {AUTH_SHARE_BYTES}",
                bytes.len()
            )));
        }
        let value = RingElement::from_le_bytes(bytes[..RING_BYTES].try_into().unwrap());
        let mac = RingElement::from_le_bytes(bytes[RING_BYTES..AUTH_SHARE_BYTES].try_into().unwrap());
        Ok(AuthShare { value, mac })
    }
}

/// Split `x` into `n` authenticated shares under MAC key `alpha`.
///
/// Parties `1..n-1` receive pure randomness, the last party the residual
/// `x - Σ r_j`; MAC shares are an additive sharing of `α·x` built the same
/// way. Callable only where `α` is known: the dealer and test oracles.
pub fn share<R: Rng>(x: RingElement, n: usize, alpha: RingElement, rng: &mut R) -> Vec<AuthShare> {
    assert!(n >= 2, "need at least two parties");
    let mac_total = alpha * x;
    let mut shares = Vec::with_capacity(n);
    let mut value_rest = x;
    let mut mac_rest = mac_total;
    for _ in 0..n - 1 {
        let rv = RingElement::new(rng.random());
        let rm = RingElement::new(rng.random());
        value_rest -= rv;
        mac_rest -= rm;
        shares.push(AuthShare::new(rv, rm));
    }
    shares.push(AuthShare::new(value_rest, mac_rest));
    shares
}

/// Sum the value shares. MAC validity is checked separately by the batch
/// MAC check, never here.
pub fn reconstruct(shares: &[AuthShare]) -> RingElement {
    shares.iter().map(|s| s.value).sum()
}

/// Sum the MAC shares (dealer/test oracle for `Σ γ(x)^(i) = α·x`).
pub fn reconstruct_mac(shares: &[AuthShare]) -> RingElement {
    shares.iter().map(|s| s.mac).sum()
}

/// Split the MAC key itself into per-party shares.
pub fn share_mac_key<R: Rng>(alpha: RingElement, n: usize, rng: &mut R) -> Vec<MacKeyShare> {
    let mut shares = Vec::with_capacity(n);
    let mut rest = alpha;
    for _ in 0..n - 1 {
        let r = RingElement::new(rng.random());
        rest -= r;
        shares.push(MacKeyShare(r));
    }
    shares.push(MacKeyShare(rest));
    shares
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::RingInt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn share_reconstruct_identity() {
        let mut r = rng(1);
        let alpha = RingElement::new(r.random());
        let shares = share(RingElement::new(42), 3, alpha, &mut r);
        assert_eq!(shares.len(), 3);
        assert_eq!(reconstruct(&shares), RingElement::new(42));
    }

    #[test]
    fn zero_splits_into_opposites() {
        let mut r = rng(2);
        let alpha = RingElement::new(r.random());
        let shares = share(RingElement::ZERO, 2, alpha, &mut r);
        assert_eq!(shares[1].value, -shares[0].value);
    }

    #[test]
    fn mac_shares_sum_to_alpha_x() {
        // Oracle: direct ring product α·x.
        let mut r = rng(3);
        for _ in 0..1000 {
            let alpha = RingElement::new(r.random());
            let x = RingElement::new(r.random());
            let shares = share(x, 4, alpha, &mut r);
            assert_eq!(reconstruct_mac(&shares), alpha * x);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let mut r = rng(4);
        let alpha = RingElement::new(r.random());
        assert_eq!(
            reconstruct(&share(RingElement::ZERO, 5, alpha, &mut r)),
            RingElement::ZERO
        );
        for _ in 0..1000 {
            let x = RingElement::new(r.random());
            assert_eq!(reconstruct(&share(x, 3, alpha, &mut r)), x);
        }
    }

    #[test]
    fn add_shares_is_linear() {
        let mut r = rng(5);
        let alpha = RingElement::new(r.random());
        let a = share(RingElement::new(3), 3, alpha, &mut r);
        let b = share(RingElement::new(4), 3, alpha, &mut r);
        let sum: Vec<AuthShare> = a.iter().zip(&b).map(|(x, y)| x.add(y)).collect();
        assert_eq!(reconstruct(&sum), RingElement::new(7));

        let zero = share(RingElement::ZERO, 3, alpha, &mut r);
        let same: Vec<AuthShare> = a.iter().zip(&zero).map(|(x, y)| x.add(y)).collect();
        assert_eq!(reconstruct(&same), RingElement::new(3));
    }

    #[test]
    fn add_shares_mac_stays_valid() {
        // Oracle: dealer-side recomputation of α(x + y).
        let mut r = rng(6);
        for _ in 0..1000 {
            let alpha = RingElement::new(r.random());
            let x = RingElement::new(r.random());
            let y = RingElement::new(r.random());
            let a = share(x, 2, alpha, &mut r);
            let b = share(y, 2, alpha, &mut r);
            let sum: Vec<AuthShare> = a.iter().zip(&b).map(|(s, t)| s.add(t)).collect();
            assert_eq!(reconstruct_mac(&sum), alpha * (x + y));
        }
    }

    #[test]
    fn mul_public_examples() {
        let mut r = rng(7);
        let alpha = RingElement::new(r.random());
        let a = share(RingElement::new(5), 3, alpha, &mut r);
        let scaled: Vec<AuthShare> = a.iter().map(|s| s.mul_public(RingElement::new(3))).collect();
        assert_eq!(reconstruct(&scaled), RingElement::new(15));
        assert_eq!(reconstruct_mac(&scaled), alpha * RingElement::new(15));

        let zeroed: Vec<AuthShare> = a.iter().map(|s| s.mul_public(RingElement::ZERO)).collect();
        assert_eq!(reconstruct(&zeroed), RingElement::ZERO);

        let same: Vec<AuthShare> = a.iter().map(|s| s.mul_public(RingElement::ONE)).collect();
        assert_eq!(same, a);
    }

    #[test]
    fn add_public_examples() {
        let mut r = rng(8);
        let alpha = RingElement::new(r.random());
        let alpha_shares = share_mac_key(alpha, 3, &mut r);
        let a = share(RingElement::new(5), 3, alpha, &mut r);

        let bumped: Vec<AuthShare> = a
            .iter()
            .enumerate()
            .map(|(i, s)| s.add_public(RingElement::new(2), PartyId::from_slot(i), alpha_shares[i]))
            .collect();
        assert_eq!(reconstruct(&bumped), RingElement::new(7));
        assert_eq!(reconstruct_mac(&bumped), alpha * RingElement::new(7));

        let unchanged: Vec<AuthShare> = a
            .iter()
            .enumerate()
            .map(|(i, s)| s.add_public(RingElement::ZERO, PartyId::from_slot(i), alpha_shares[i]))
            .collect();
        assert_eq!(unchanged, a);
    }

    #[test]
    fn add_public_mac_valid_over_random_trials() {
        // Oracle: dealer-side recomputation of α(x + c).
        let mut r = rng(9);
        for _ in 0..1000 {
            let alpha = RingElement::new(r.random());
            let alpha_shares = share_mac_key(alpha, 4, &mut r);
            let x = RingElement::new(r.random());
            let c = RingElement::new(r.random());
            let shares = share(x, 4, alpha, &mut r);
            let bumped: Vec<AuthShare> = shares
                .iter()
                .enumerate()
                .map(|(i, s)| s.add_public(c, PartyId::from_slot(i), alpha_shares[i]))
                .collect();
            assert_eq!(reconstruct(&bumped), x + c);
            assert_eq!(reconstruct_mac(&bumped), alpha * (x + c));
        }
    }

    #[test]
    fn share_wire_round_trip() {
        let mut r = rng(10);
        let s = AuthShare::new(RingElement::new(r.random()), RingElement::new(r.random()));
        let mut buf = Vec::new();
        s.write_bytes(&mut buf);
        assert_eq!(buf.len(), AUTH_SHARE_BYTES);
        assert_eq!(AuthShare::read_bytes(&buf).unwrap(), s);
        assert!(AuthShare::read_bytes(&buf[..3]).is_err());
    }

    /// Any n-1 value shares of a fixed secret should look uniform: compare
    /// the first share's top-byte histogram for a fixed x against shares of
    /// fresh random x via a two-sample chi-square at significance 0.01.
    #[test]
    fn marginal_shares_independent_of_secret() {
        let mut r = rng(11);
        let alpha = RingElement::new(r.random());
        const TRIALS: usize = 10_000;
        let mut fixed_hist = [0u64; 256];
        let mut random_hist = [0u64; 256];
        for _ in 0..TRIALS {
            let s = share(RingElement::new(42), 2, alpha, &mut r);
            fixed_hist[(s[0].value.raw() >> (crate::ring::KAPPA - 8)) as usize] += 1;
            let x = RingElement::new(r.random());
            let s = share(x, 2, alpha, &mut r);
            random_hist[(s[0].value.raw() >> (crate::ring::KAPPA - 8)) as usize] += 1;
        }
        let chi2 = crate::adversary::two_sample_chi_square(&fixed_hist, &random_hist);
        // 0.01 upper quantile of chi-square with 255 degrees of freedom.
        assert!(chi2 < 310.46, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn linear_composition_reconstructs(x: u64, y: u64, c: u64, k: u64) {
            let mut r = rng(12);
            let alpha = RingElement::new(r.random());
            let alpha_shares = share_mac_key(alpha, 3, &mut r);
            let (x, y) = (RingElement::new(x as RingInt), RingElement::new(y as RingInt));
            let (c, k) = (RingElement::new(c as RingInt), RingElement::new(k as RingInt));
            let xs = share(x, 3, alpha, &mut r);
            let ys = share(y, 3, alpha, &mut r);
            // (x + y)·c + k
            let combo: Vec<AuthShare> = xs
                .iter()
                .zip(&ys)
                .enumerate()
                .map(|(i, (a, b))| {
                    a.add(b)
                        .mul_public(c)
                        .add_public(k, PartyId::from_slot(i), alpha_shares[i])
                })
                .collect();
            let want = (x + y) * c + k;
            prop_assert_eq!(reconstruct(&combo), want);
            prop_assert_eq!(reconstruct_mac(&combo), alpha * want);
        }
    }
}
