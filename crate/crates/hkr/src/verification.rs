//! Ownership verification protocols and signature extraction.
//!
//! Three schemes: key-based (public variant compares caption quality with
//! the claimed key against a fully-forged key; private variant matches a
//! key fingerprint stored in the checkpoint), sign-based (majority-vote
//! extraction of the hidden-state signs), and trigger-based (beam-decode
//! the trigger set and check for the planted caption).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::capmetrics::{cider_d, Tokens};
use crate::datagen::{ToySample, T_MAX};
use crate::error::{HkrError, Result};
use crate::keying::{forge_key, SecretKey};
use crate::seqmodel::{
    beam_decode, forward_teacher_forced, Checkpoint, DecoderModel, ForwardOpts,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    V1Public,
    V1Private,
    V2,
    V3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scheme: Scheme,
    pub passed: bool,
    pub probe_seed: u64,
    /// Scheme-specific scalars (scores, rates); all in their natural units.
    pub evidence: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Functionality floor for the public key check: the claimed-key score
/// must stay within `tolerance` (relative) of the recorded clean baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FunctionalityFloor {
    pub baseline_score: f64,
    pub tolerance: f64,
}

/// Greedy-decode CIDEr-D of a model over a probe corpus, each sample
/// scored against its own caption.
pub fn probe_score(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    probe: &[ToySample],
) -> Result<f64> {
    if probe.is_empty() {
        return Err(HkrError::InvalidArgument("empty probe corpus".into()));
    }
    let mut candidates: Vec<Tokens> = Vec::with_capacity(probe.len());
    let mut references: Vec<Vec<Tokens>> = Vec::with_capacity(probe.len());
    for sample in probe {
        let hyps = beam_decode(model, key, &sample.features, 1, T_MAX, None)?;
        candidates.push(hyps[0].tokens.clone());
        references.push(vec![sample.caption.clone()]);
    }
    cider_d(&candidates, &references, &references)
}

/// Public key verification: caption quality with the claimed key must
/// beat a fully-forged key by `margin` (relative) and clear the
/// functionality floor.
pub fn verify_key_public(
    model: &DecoderModel,
    claimed_key: &SecretKey,
    probe: &[ToySample],
    margin: f64,
    floor: FunctionalityFloor,
    probe_seed: u64,
) -> Result<VerificationReport> {
    if claimed_key.len() != model.dims.n {
        return Err(HkrError::Key(format!(
            "claimed key length {} does not match hidden size {}",
            claimed_key.len(),
            model.dims.n
        )));
    }
    let forged = forge_key(claimed_key, 1.0, probe_seed)?;
    let score_claimed = probe_score(model, Some(claimed_key), probe)?;
    let score_forged = probe_score(model, Some(&forged), probe)?;
    let floor_value = floor.baseline_score * (1.0 - floor.tolerance);
    let passed = score_claimed >= score_forged * (1.0 + margin) && score_claimed >= floor_value;
    let mut evidence = BTreeMap::new();
    evidence.insert("score_claimed".into(), score_claimed);
    evidence.insert("score_forged".into(), score_forged);
    evidence.insert("floor".into(), floor_value);
    evidence.insert("margin".into(), margin);
    Ok(VerificationReport { scheme: Scheme::V1Public, passed, probe_seed, evidence })
}

/// Private key verification: fingerprint match against the checkpoint.
/// A checkpoint without a fingerprint is a public-key deployment — that
/// is an error, not a failed verification.
pub fn verify_key_private(ckpt: &Checkpoint, owner_key: &SecretKey) -> Result<VerificationReport> {
    let stored = ckpt.key_fingerprint.as_ref().ok_or_else(|| {
        HkrError::Verification("checkpoint carries no key fingerprint".into())
    })?;
    let passed = *stored == owner_key.fingerprint();
    let mut evidence = BTreeMap::new();
    evidence.insert("fingerprint_match".into(), if passed { 1.0 } else { 0.0 });
    Ok(VerificationReport { scheme: Scheme::V1Private, passed, probe_seed: 0, evidence })
}

/// Majority-vote signature extraction: run teacher-forced passes over the
/// probe corpus and vote per dimension on sign(h_{t,i}) across all steps
/// and samples. Exact zero votes +1; a tied vote resolves to +1.
pub fn extract_signature(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    probe: &[ToySample],
) -> Result<Vec<f64>> {
    extract_signature_with(model, key, probe, None)
}

/// Extraction variant that honors an inference-time sign clamp, used by
/// the signature-toggle attack to measure post-attack detection.
pub fn extract_signature_with(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    probe: &[ToySample],
    clamp: Option<&crate::seqmodel::SignClamp>,
) -> Result<Vec<f64>> {
    if probe.is_empty() {
        return Err(HkrError::InvalidArgument("empty probe corpus".into()));
    }
    let n = model.dims.n;
    let mut votes = vec![0i64; n];
    for sample in probe {
        let mut opts = ForwardOpts { dropout: 0.0, rng: None, sign_clamp: clamp };
        let fwd = forward_teacher_forced(model, key, sample, &mut opts)?;
        for step in &fwd.steps {
            for (vote, &h) in votes.iter_mut().zip(&step.h) {
                *vote += if h < 0.0 { -1 } else { 1 };
            }
        }
    }
    Ok(votes.iter().map(|&v| if v < 0 { -1.0 } else { 1.0 }).collect())
}

/// Fraction of dimensions where the extracted signs match the target.
pub fn detection_rate(extracted: &[f64], g: &[f64]) -> Result<f64> {
    if extracted.len() != g.len() {
        return Err(HkrError::ShapeMismatch(format!(
            "extracted length {} vs target length {}",
            extracted.len(),
            g.len()
        )));
    }
    if extracted.is_empty() {
        return Err(HkrError::InvalidArgument("empty signature".into()));
    }
    let matches = extracted
        .iter()
        .zip(g)
        .filter(|(e, t)| e.signum() == t.signum())
        .count();
    Ok(matches as f64 / extracted.len() as f64)
}

/// Sign-based verification against a claimed signature.
pub fn verify_signature(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    probe: &[ToySample],
    g: &[f64],
    threshold: f64,
) -> Result<VerificationReport> {
    let extracted = extract_signature(model, key, probe)?;
    let rate = detection_rate(&extracted, g)?;
    let mut evidence = BTreeMap::new();
    evidence.insert("detection_rate".into(), rate);
    evidence.insert("threshold".into(), threshold);
    Ok(VerificationReport {
        scheme: Scheme::V2,
        passed: rate >= threshold,
        probe_seed: 0,
        evidence,
    })
}

pub const TRIGGER_PASS_THRESHOLD: f64 = 0.9;

/// Trigger-set verification: beam-decode every trigger sample and count
/// exact matches of the planted caption; also measure the false-trigger
/// rate on clean probes (empty `clean` skips that part).
pub fn verify_trigger(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    trigger_set: &[ToySample],
    clean: &[ToySample],
    beam: usize,
) -> Result<VerificationReport> {
    if trigger_set.is_empty() {
        return Err(HkrError::InvalidArgument("empty trigger set".into()));
    }
    let trigger_caption = &trigger_set[0].caption;
    let decode_matches = |sample: &ToySample| -> Result<bool> {
        let hyps = beam_decode(model, key, &sample.features, beam, T_MAX, None)?;
        Ok(&hyps[0].tokens == trigger_caption)
    };
    let mut hits = 0usize;
    for sample in trigger_set {
        if decode_matches(sample)? {
            hits += 1;
        }
    }
    let hit_rate = hits as f64 / trigger_set.len() as f64;
    let mut false_hits = 0usize;
    for sample in clean {
        if decode_matches(sample)? {
            false_hits += 1;
        }
    }
    let false_rate = if clean.is_empty() {
        0.0
    } else {
        false_hits as f64 / clean.len() as f64
    };
    let mut evidence = BTreeMap::new();
    evidence.insert("hit_rate".into(), hit_rate);
    evidence.insert("false_trigger_rate".into(), false_rate);
    Ok(VerificationReport {
        scheme: Scheme::V3,
        passed: hit_rate >= TRIGGER_PASS_THRESHOLD,
        probe_seed: 0,
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_corpus, GrammarConfig};
    use crate::keying::{generate_key, KeyVariant};
    use crate::numcore::SeededRng;
    use crate::seqmodel::{Dims, EmbedOp};
    use proptest::prelude::*;

    #[test]
    fn detection_rate_hand_cases() {
        let g = vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        assert_eq!(detection_rate(&g, &g).unwrap(), 1.0);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(detection_rate(&neg, &g).unwrap(), 0.0);
        let mut six = g.clone();
        six[0] = -six[0];
        six[3] = -six[3];
        assert_eq!(detection_rate(&six, &g).unwrap(), 0.75);
        assert!(detection_rate(&g[..4], &g).is_err());
    }

    proptest! {
        #[test]
        fn detection_rate_self_and_complement(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let g: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            prop_assert_eq!(detection_rate(&g, &g).unwrap(), 1.0);
            prop_assert_eq!(detection_rate(&neg, &g).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_probe_single_step_extraction_is_sign_of_h() {
        let dims = Dims { v: 6, e: 3, n: 4, d: 5, a: 3, r: 2 };
        let model = DecoderModel::init(dims, EmbedOp::None, 3);
        let mut rng = SeededRng::new(4);
        let sample = ToySample {
            features: crate::numcore::Tensor::from_vec(
                &[2, 5],
                (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap(),
            caption: vec![crate::datagen::EOS],
            scene: [0; 4],
            trigger: false,
        };
        let fwd =
            forward_teacher_forced(&model, None, &sample, &mut ForwardOpts::default()).unwrap();
        let expect: Vec<f64> = fwd.steps[0]
            .h
            .iter()
            .map(|&h| if h < 0.0 { -1.0 } else { 1.0 })
            .collect();
        let got = extract_signature(&model, None, std::slice::from_ref(&sample)).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn extraction_is_deterministic() {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(5, 12, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::None, 6);
        let a = extract_signature(&model, None, &corpus.samples).unwrap();
        let b = extract_signature(&model, None, &corpus.samples).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| *x == 1.0 || *x == -1.0));
    }

    #[test]
    fn untrained_model_agrees_with_random_g_about_half() {
        // Monte-Carlo: agreement between a random model's extraction and a
        // random target hovers near 0.5 in expectation.
        let g = GrammarConfig::default();
        let corpus = synth_corpus(9, 16, &g).unwrap();
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let dims =
                Dims { v: corpus.vocab.len(), e: 4, n: 32, d: corpus.d, a: 4, r: corpus.r };
            let model = DecoderModel::init(dims, EmbedOp::None, 100 + seed);
            let extracted = extract_signature(&model, None, &corpus.samples).unwrap();
            let mut rng = SeededRng::new(200 + seed);
            let target: Vec<f64> = (0..32).map(|_| rng.sign()).collect();
            total += detection_rate(&extracted, &target).unwrap();
        }
        let mean = total / seeds as f64;
        assert!((0.35..=0.65).contains(&mean), "mean agreement {mean}");
    }

    #[test]
    fn private_verification_fingerprint_match() {
        let dims = Dims { v: 6, e: 3, n: 8, d: 5, a: 3, r: 2 };
        let model = DecoderModel::init(dims, EmbedOp::Add, 1);
        let key = generate_key("Alice", 42, 8, KeyVariant::Binary).unwrap();
        let ckpt = Checkpoint::from_model(&model, Some(&key), None);
        assert!(verify_key_private(&ckpt, &key).unwrap().passed);
        // One flipped bit fails.
        let mut other = key.clone();
        other.values[0] = -other.values[0];
        assert!(!verify_key_private(&ckpt, &other).unwrap().passed);
        // No fingerprint stored: error, not fail.
        let public = Checkpoint::from_model(&model, None, None);
        assert!(verify_key_private(&public, &key).is_err());
    }

    #[test]
    fn public_verification_probe_order_invariant() {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(7, 10, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::Add, 8);
        let key = generate_key("Alice", 42, 8, KeyVariant::Binary).unwrap();
        let floor = FunctionalityFloor { baseline_score: 0.0, tolerance: 0.1 };
        let a = verify_key_public(&model, &key, &corpus.samples, 0.05, floor, 1).unwrap();
        let mut reversed = corpus.samples.clone();
        reversed.reverse();
        let b = verify_key_public(&model, &key, &reversed, 0.05, floor, 1).unwrap();
        assert_eq!(a.passed, b.passed);
        assert!(
            (a.evidence["score_claimed"] - b.evidence["score_claimed"]).abs() < 1e-9
        );
    }

    #[test]
    fn public_verification_forged_key_fails_against_itself() {
        // The claimed key IS the fully-forged key: the ratio check cannot
        // clear a positive margin, and an unreachable floor seals it.
        let g = GrammarConfig::default();
        let corpus = synth_corpus(7, 10, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::Add, 8);
        let key = generate_key("Alice", 42, 8, KeyVariant::Binary).unwrap();
        let forged = forge_key(&key, 1.0, 1).unwrap();
        let floor = FunctionalityFloor { baseline_score: 10.0, tolerance: 0.0 };
        let report = verify_key_public(&model, &forged, &corpus.samples, 0.0, floor, 1).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn report_json_round_trip() {
        let mut evidence = BTreeMap::new();
        evidence.insert("detection_rate".to_string(), 0.875);
        let report = VerificationReport {
            scheme: Scheme::V2,
            passed: true,
            probe_seed: 42,
            evidence,
        };
        let back: VerificationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn trigger_verification_on_untrained_model_misses() {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(3, 10, &g).unwrap();
        let triggers = crate::datagen::make_trigger_set(&corpus, 5, 1.0, 11, &g).unwrap();
        let trigger_samples: Vec<ToySample> =
            triggers.iter().map(|t| t.to_sample()).collect();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::None, 13);
        let report =
            verify_trigger(&model, None, &trigger_samples, &corpus.samples, 1).unwrap();
        assert!(!report.passed);
        assert!(report.evidence["hit_rate"] <= 0.1);
    }
}
