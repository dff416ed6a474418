//! Shared primitives: vocabularies, token sequences, next-token
//! distributions, and the information measures computed on them.
//!
//! Everything is in nats; the natural logarithm is used throughout. A
//! [`TokenDistribution`] is validated once at construction (finite,
//! non-negative, total mass within [`MASS_TOLERANCE`] of one) so the
//! measures below can assume well-formed input.

use std::collections::HashMap;

use crate::{Error, Result};

/// Dense token identifier. Ids index distributions directly.
pub type TokenId = u32;

/// Default floor applied to reference probabilities inside log ratios.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Largest admissible probability floor.
pub const MAX_FLOOR: f64 = 1e-3;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// An ordered set of distinct token strings. The position of a token is its
/// [`TokenId`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from distinct, non-empty token strings. At least
    /// two tokens are required.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidArgument(format!("empty token at id {i}")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Reserved id used to left-pad contexts at the start of a sequence.
    /// It lies just outside the generative range and is never emitted.
    pub fn padding_id(&self) -> TokenId {
        self.tokens.len() as TokenId
    }

    /// Stable content fingerprint (FNV-1a over the token list), echoed into
    /// file headers so artifacts can be matched to the vocabulary that
    /// produced them.
    pub fn fingerprint(&self) -> String {
        let mut h = Fnv1a::new();
        for tok in &self.tokens {
            h.update(tok.as_bytes());
            h.update(&[0]);
        }
        format!("{:016x}", h.finish())
    }
}

/// FNV-1a, 64-bit. Used for file fingerprints and seed derivation where a
/// hash that is stable across builds and platforms is required.
#[derive(Debug, Clone)]
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

/// A token id sequence split into a prompt part and a generated part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > ids.len() {
            return Err(Error::InvalidArgument(format!(
                "prompt length {} exceeds sequence length {}",
                prompt_len,
                ids.len()
            )));
        }
        Ok(TokenSequence { ids, prompt_len })
    }

    /// A sequence that is all prompt (nothing generated yet).
    pub fn from_prompt(ids: Vec<TokenId>) -> Self {
        let prompt_len = ids.len();
        TokenSequence { ids, prompt_len }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.ids[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }

    pub fn push(&mut self, id: TokenId) {
        self.ids.push(id);
    }

    /// Checks that every id is addressable in `vocab`.
    pub fn validate_against(&self, vocab: &Vocabulary) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab.len(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

/// A dense probability distribution over token ids `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates and wraps a probability vector: entries must be finite and
    /// non-negative, and the total mass must be within [`MASS_TOLERANCE`]
    /// of one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "non-finite entry {p} at id {i}"
                )));
            }
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative entry {p} at id {i}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "total mass {sum} not within {MASS_TOLERANCE} of 1"
            )));
        }
        Ok(TokenDistribution { probs })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        TokenDistribution::new(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability of one token id. Panics on out-of-range ids; callers
    /// validate ids against the vocabulary first.
    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    /// Shannon entropy in nats, with the `0 ln 0 = 0` convention.
    /// Always in `[0, ln len]` for a valid distribution.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for &p in &self.probs {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }

    /// Id of the most probable token; ties resolve to the lowest id.
    pub fn top1(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Forward KL divergence `sum_a p(a) ln(p(a) / max(q(a), floor))` in nats.
///
/// Terms with `p(a) = 0` contribute nothing. The floor keeps the reference
/// side away from zero and must lie in `(0, MAX_FLOOR]`.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution, floor: f64) -> Result<f64> {
    if !(floor > 0.0 && floor <= MAX_FLOOR) {
        return Err(Error::InvalidArgument(format!(
            "floor {floor} outside (0, {MAX_FLOOR}]"
        )));
    }
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "kl_divergence",
            left: p.len(),
            right: q.len(),
        });
    }
    let mut kl = 0.0;
    for (pa, qa) in p.probs().iter().zip(q.probs()) {
        if *pa > 0.0 {
            kl += pa * (pa / qa.max(floor)).ln();
        }
    }
    Ok(kl)
}

/// Numerically stable softmax. Input scores must be finite.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite score {s} at index {i}"
            )));
        }
        max = max.max(s);
    }
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(probs: &[f64]) -> TokenDistribution {
        TokenDistribution::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn vocabulary_round_trips_ids_and_tokens() {
        let v = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.token(2), Some("c"));
        assert_eq!(v.id("z"), None);
        assert_eq!(v.token(3), None);
        assert_eq!(v.padding_id(), 3);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_tiny_sets() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), String::new()]).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_order_sensitive() {
        let v1 = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let v2 = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let v3 = Vocabulary::new(vec!["b".into(), "a".into()]).unwrap();
        assert_eq!(v1.fingerprint(), v2.fingerprint());
        assert_ne!(v1.fingerprint(), v3.fingerprint());
    }

    #[test]
    fn sequence_split_respects_prompt_length() {
        let s = TokenSequence::new(vec![1, 2, 3, 4], 2).unwrap();
        assert_eq!(s.prompt(), &[1, 2]);
        assert_eq!(s.generated(), &[3, 4]);
        assert!(TokenSequence::new(vec![1], 2).is_err());
    }

    #[test]
    fn distribution_rejects_bad_mass_and_entries() {
        assert!(TokenDistribution::new(vec![]).is_err());
        assert!(TokenDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(TokenDistribution::new(vec![f64::NAN, 1.0]).is_err());
        // Within tolerance passes.
        assert!(TokenDistribution::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn kl_matches_hand_computed_two_term_value() {
        // sum_a p ln(p/q) with p=(1/2,1/2), q=(1/4,3/4), worked by hand:
        // 0.5 ln 2 + 0.5 ln(2/3).
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75]), 1e-12).unwrap();
        assert!((kl - expected).abs() < 1e-15, "kl={kl} expected={expected}");
        assert!((kl - 0.14384103622589045).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_distributions_is_exactly_zero() {
        let p = dist(&[0.3, 0.2, 0.5]);
        assert_eq!(kl_divergence(&p, &p, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn kl_floor_clamps_zero_reference_mass() {
        // p concentrated where q is zero: the clamped term is ln(1/floor).
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        for floor in [1e-12, 1e-6, 1e-3] {
            let kl = kl_divergence(&p, &q, floor).unwrap();
            assert!((kl - (1.0 / floor).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_rejects_bad_floor_and_mismatched_lengths() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.25, 0.5]);
        assert!(kl_divergence(&p, &p, 0.0).is_err());
        assert!(kl_divergence(&p, &p, 2e-3).is_err());
        assert!(kl_divergence(&p, &q, 1e-12).is_err());
    }

    #[test]
    fn kl_is_not_symmetric() {
        let p = dist(&[0.9, 0.1]);
        let q = dist(&[0.5, 0.5]);
        let fwd = kl_divergence(&p, &q, 1e-12).unwrap();
        let rev = kl_divergence(&q, &p, 1e-12).unwrap();
        assert!((fwd - rev).abs() > 0.01);
    }

    #[test]
    fn entropy_matches_hand_computed_values() {
        // -(0.9 ln 0.9 + 0.1 ln 0.1), worked by hand.
        let expected = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((dist(&[0.9, 0.1]).entropy() - expected).abs() < 1e-15);
        // Uniform over 4 ids.
        assert!((dist(&[0.25; 4]).entropy() - 4.0f64.ln()).abs() < 1e-12);
        // Point mass: exactly zero.
        assert_eq!(dist(&[1.0, 0.0, 0.0]).entropy(), 0.0);
    }

    #[test]
    fn top1_breaks_ties_toward_lowest_id() {
        assert_eq!(dist(&[0.25, 0.25, 0.25, 0.25]).top1(), 0);
        assert_eq!(dist(&[0.1, 0.45, 0.45]).top1(), 1);
        assert_eq!(dist(&[0.1, 0.2, 0.7]).top1(), 2);
    }

    #[test]
    fn softmax_matches_closed_form_pair() {
        // (ln 2, 0) -> (2/3, 1/3).
        let got = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    // -- properties ---------------------------------------------------------

    fn arb_probs_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, len).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
    }

    fn arb_probs(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        (2..max_len).prop_flat_map(arb_probs_of)
    }

    fn arb_prob_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2..max_len).prop_flat_map(|n| (arb_probs_of(n), arb_probs_of(n)))
    }

    proptest! {
        #[test]
        fn prop_kl_is_nonnegative((p, q) in arb_prob_pair(12)) {
            // No component reaches the floor, so clipping never bites and
            // the divergence obeys the usual lower bound.
            let kl = kl_divergence(&dist(&p), &dist(&q), 1e-12).unwrap();
            prop_assert!(kl >= -1e-12, "kl={kl}");
        }

        #[test]
        fn prop_entropy_is_bounded(p in arb_probs(12)) {
            let h = dist(&p).entropy();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn prop_softmax_is_shift_invariant(
            scores in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let a = softmax(&scores).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_softmax_normalizes(scores in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let p = softmax(&scores).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x > 0.0));
        }
    }
}
