//! Ambiguity and removal attack sweeps: forged keys, forced signature
//! signs, class-blind weight pruning, key pruning, and the two
//! fine-tuning attacks. Every sweep produces an AttackReport that
//! serializes to one CSV with fixed columns.

use serde::{Deserialize, Serialize};

use crate::capmetrics::Tokens;
use crate::datagen::ToySample;
use crate::error::{HkrError, Result};
use crate::evalrun::evaluate_model;
use crate::keying::{forge_key, prune_key, SecretKey};
use crate::seqmodel::{is_bias, DecoderModel, SignClamp};
use crate::training::{SignatureSpec, TrainingConfig};
use crate::verification::{detection_rate, extract_signature_with};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Attack strength in percent: dissimilarity, prune rate, or toggle
    /// fraction, depending on the sweep kind.
    pub x: f64,
    /// CIDEr-D on the evaluation split.
    pub score: f64,
    pub detection: f64,
    pub token_acc: f64,
    pub avg_len: f64,
    pub uniqueness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: String,
    pub seed: u64,
    pub trials: usize,
    pub points: Vec<SweepPoint>,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,x,score,detection,token_acc,avg_len,uniqueness,trials,seed\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.kind,
                p.x,
                p.score,
                p.detection,
                p.token_acc,
                p.avg_len,
                p.uniqueness,
                self.trials,
                self.seed
            ));
        }
        out
    }

    fn check_xs(xs: &[f64]) -> Result<()> {
        if xs.is_empty() {
            return Err(HkrError::InvalidArgument("empty sweep grid".into()));
        }
        for w in xs.windows(2) {
            if w[1] <= w[0] {
                return Err(HkrError::InvalidArgument(
                    "sweep grid must be strictly increasing".into(),
                ));
            }
        }
        if xs.iter().any(|&x| !(0.0..=100.0).contains(&x)) {
            return Err(HkrError::InvalidArgument("sweep x out of [0,100]".into()));
        }
        Ok(())
    }
}

/// Evaluation context shared by all sweeps: the split to score, the
/// training captions for uniqueness, and the beam width (sweeps default
/// to 1 = greedy).
pub struct EvalContext<'a> {
    pub eval_samples: &'a [ToySample],
    pub train_captions: &'a [Tokens],
    pub beam: usize,
}

fn measure(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sig: Option<&SignatureSpec>,
    ctx: &EvalContext,
    clamp: Option<&SignClamp>,
) -> Result<SweepPoint> {
    let summary = evaluate_model(
        model,
        key,
        ctx.eval_samples,
        ctx.train_captions,
        ctx.beam,
        clamp,
    )?;
    let detection = match sig {
        Some(sig) => {
            let extracted = extract_signature_with(model, key, ctx.eval_samples, clamp)?;
            detection_rate(&extracted, &sig.g)?
        }
        None => 0.0,
    };
    Ok(SweepPoint {
        x: 0.0,
        score: summary.metrics.cider_d,
        detection,
        token_acc: summary.token_acc,
        avg_len: summary.avg_len,
        uniqueness: summary.uniqueness,
    })
}

/// Deterministic per-point, per-trial seed derivation.
fn trial_seed(base: u64, point: usize, trial: usize) -> u64 {
    base ^ ((point as u64 + 1) << 32) ^ (trial as u64 + 1)
}

/// Ambiguity attack: deploy forged keys of increasing dissimilarity.
/// x = 0 deploys the true key exactly once; every other point averages
/// `trials` independent forgeries.
pub fn forged_key_sweep(
    model: &DecoderModel,
    true_key: &SecretKey,
    sig: Option<&SignatureSpec>,
    ctx: &EvalContext,
    xs: &[f64],
    trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    AttackReport::check_xs(xs)?;
    if trials == 0 {
        return Err(HkrError::InvalidArgument("trials must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(xs.len());
    for (pi, &x) in xs.iter().enumerate() {
        let point = if x == 0.0 {
            let mut p = measure(model, Some(true_key), sig, ctx, None)?;
            p.x = 0.0;
            p
        } else {
            let mut acc = SweepPoint {
                x,
                score: 0.0,
                detection: 0.0,
                token_acc: 0.0,
                avg_len: 0.0,
                uniqueness: 0.0,
            };
            for trial in 0..trials {
                let forged = forge_key(true_key, x / 100.0, trial_seed(seed, pi, trial))?;
                let p = measure(model, Some(&forged), sig, ctx, None)?;
                acc.score += p.score;
                acc.detection += p.detection;
                acc.token_acc += p.token_acc;
                acc.avg_len += p.avg_len;
                acc.uniqueness += p.uniqueness;
            }
            let k = trials as f64;
            acc.score /= k;
            acc.detection /= k;
            acc.token_acc /= k;
            acc.avg_len /= k;
            acc.uniqueness /= k;
            acc
        };
        points.push(point);
    }
    Ok(AttackReport { kind: "forged_key".into(), seed, trials, points })
}

/// Ambiguity attack on the signature: per point, toggle ⌊xN/100⌋
/// seeded-random dimensions of G and force h_i = −g_i·γ on them at
/// inference (a projection — no retraining), then re-measure score and
/// detection against the original G.
pub fn signature_toggle_sweep(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sig: &SignatureSpec,
    ctx: &EvalContext,
    xs: &[f64],
    trials: usize,
    seed: u64,
) -> Result<AttackReport> {
    AttackReport::check_xs(xs)?;
    if trials == 0 {
        return Err(HkrError::InvalidArgument("trials must be >= 1".into()));
    }
    let n = sig.g.len();
    let mut points = Vec::with_capacity(xs.len());
    for (pi, &x) in xs.iter().enumerate() {
        let k = ((x / 100.0) * n as f64).floor() as usize;
        let mut acc = SweepPoint {
            x,
            score: 0.0,
            detection: 0.0,
            token_acc: 0.0,
            avg_len: 0.0,
            uniqueness: 0.0,
        };
        let effective_trials = if k == 0 { 1 } else { trials };
        for trial in 0..effective_trials {
            let mut rng = crate::numcore::SeededRng::new(trial_seed(seed, pi, trial));
            let dims = rng.sample_indices(n, k);
            let clamp = SignClamp {
                entries: dims.iter().map(|&i| (i, -sig.g[i] * sig.gamma)).collect(),
            };
            let p = measure(model, key, Some(sig), ctx, Some(&clamp))?;
            acc.score += p.score;
            acc.detection += p.detection;
            acc.token_acc += p.token_acc;
            acc.avg_len += p.avg_len;
            acc.uniqueness += p.uniqueness;
        }
        let t = effective_trials as f64;
        acc.score /= t;
        acc.detection /= t;
        acc.token_acc /= t;
        acc.avg_len /= t;
        acc.uniqueness /= t;
        points.push(acc);
    }
    Ok(AttackReport { kind: "sig_toggle".into(), seed, trials, points })
}

/// Class-blind magnitude pruning: zero the ⌊rate·total⌋ globally
/// smallest-|w| entries pooled across all non-bias tensors, ties broken
/// by (tensor name, flat index).
pub fn class_blind_prune(model: &DecoderModel, rate: f64) -> Result<DecoderModel> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(HkrError::InvalidArgument(format!("prune rate {rate} out of [0,1]")));
    }
    let mut pruned = model.clone();
    let mut entries: Vec<(f64, &'static str, usize)> = Vec::new();
    for (name, tensor) in model.params() {
        if is_bias(name) {
            continue;
        }
        for (i, &w) in tensor.data.iter().enumerate() {
            entries.push((w.abs(), name, i));
        }
    }
    let total = entries.len();
    let k = (rate * total as f64).floor() as usize;
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut zero_by_name: std::collections::BTreeMap<&'static str, Vec<usize>> =
        std::collections::BTreeMap::new();
    for &(_, name, i) in entries.iter().take(k) {
        zero_by_name.entry(name).or_default().push(i);
    }
    for (name, tensor) in pruned.params_mut() {
        if let Some(indices) = zero_by_name.get(name) {
            for &i in indices {
                tensor.data[i] = 0.0;
            }
        }
    }
    Ok(pruned)
}

/// Removal attack: prune the model weights at each rate and re-measure.
/// `xs` are percentages.
pub fn prune_sweep(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sig: Option<&SignatureSpec>,
    ctx: &EvalContext,
    xs: &[f64],
    seed: u64,
) -> Result<AttackReport> {
    AttackReport::check_xs(xs)?;
    let mut points = Vec::with_capacity(xs.len());
    for &x in xs {
        let pruned = class_blind_prune(model, x / 100.0)?;
        let mut p = measure(&pruned, key, sig, ctx, None)?;
        p.x = x;
        points.push(p);
    }
    Ok(AttackReport { kind: "prune".into(), seed, trials: 1, points })
}

/// Removal attack on the key: zero a growing fraction of key positions
/// (model untouched) and re-measure.
pub fn key_prune_sweep(
    model: &DecoderModel,
    key: &SecretKey,
    sig: Option<&SignatureSpec>,
    ctx: &EvalContext,
    xs: &[f64],
    seed: u64,
) -> Result<AttackReport> {
    AttackReport::check_xs(xs)?;
    let mut points = Vec::with_capacity(xs.len());
    for (pi, &x) in xs.iter().enumerate() {
        let attacked = prune_key(key, x / 100.0, trial_seed(seed, pi, 0))?;
        let mut p = measure(model, Some(&attacked), sig, ctx, None)?;
        p.x = x;
        points.push(p);
    }
    Ok(AttackReport { kind: "key_prune".into(), seed, trials: 1, points })
}

/// Removal attack: fine-tune on a (possibly disjoint) corpus without the
/// sign loss, then compare before/after rows (x = 0 before, 100 after).
pub fn finetune_attack(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sig: Option<&SignatureSpec>,
    ctx: &EvalContext,
    finetune_samples: &[ToySample],
    config: &TrainingConfig,
) -> Result<(AttackReport, DecoderModel)> {
    let before = measure(model, key, sig, ctx, None)?;
    let (tuned, _) = crate::training::finetune(model, finetune_samples, config, key)?;
    let mut after = measure(&tuned, key, sig, ctx, None)?;
    after.x = 100.0;
    Ok((
        AttackReport {
            kind: "finetune".into(),
            seed: config.seed,
            trials: 1,
            points: vec![before, after],
        },
        tuned,
    ))
}

/// Ambiguity/removal hybrid: fine-tune with the attacker's key and
/// signature, then report detection of the ORIGINAL signature before and
/// after (x = 0 before, 100 after).
pub fn finetune_key_sig_attack(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sig: &SignatureSpec,
    ctx: &EvalContext,
    finetune_samples: &[ToySample],
    config: &TrainingConfig,
    attacker_key: Option<&SecretKey>,
    attacker_sig: &SignatureSpec,
) -> Result<(AttackReport, DecoderModel)> {
    let before = measure(model, key, Some(sig), ctx, None)?;
    let (tuned, _) = crate::training::finetune_key_signature(
        model,
        finetune_samples,
        config,
        attacker_key,
        attacker_sig,
    )?;
    // After the attack the model runs under the attacker's key; the
    // original owner's signature is what we try to detect.
    let mut after = measure(&tuned, attacker_key, Some(sig), ctx, None)?;
    after.x = 100.0;
    Ok((
        AttackReport {
            kind: "finetune_keysig".into(),
            seed: config.seed,
            trials: 1,
            points: vec![before, after],
        },
        tuned,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_corpus, GrammarConfig};
    use crate::keying::{generate_key, KeyVariant};
    use crate::seqmodel::{Dims, EmbedOp};

    fn setup(seed: u64) -> (DecoderModel, SecretKey, crate::datagen::Corpus) {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(seed, 12, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::Add, seed);
        let key = generate_key("Alice", seed, 8, KeyVariant::Binary).unwrap();
        (model, key, corpus)
    }

    #[test]
    fn prune_rate_zero_is_identity_and_one_zeroes_weights() {
        let (model, _, _) = setup(1);
        assert_eq!(class_blind_prune(&model, 0.0).unwrap(), model);
        let dead = class_blind_prune(&model, 1.0).unwrap();
        for (name, t) in dead.params() {
            if is_bias(name) {
                assert_eq!(t.data, model.params().iter().find(|(n, _)| *n == name).unwrap().1.data);
            } else {
                assert!(t.data.iter().all(|x| *x == 0.0), "{name}");
            }
        }
        assert!(class_blind_prune(&model, 1.5).is_err());
    }

    #[test]
    fn prune_matches_sort_oracle_on_ten_weight_fixture() {
        // Plant 10 weights with known magnitudes into the first non-bias
        // slots; all remaining weights are large fillers. Pruning exactly
        // 5 entries must zero precisely the 5 smallest planted values.
        let dims = Dims { v: 2, e: 1, n: 1, d: 1, a: 1, r: 1 };
        let mut model = DecoderModel::init(dims, EmbedOp::None, 0);
        let magnitudes = [0.9, -0.1, 0.5, 0.05, -0.7, 0.2, -0.3, 0.6, 0.02, -0.4];
        let mut slot = 0usize;
        let mut placed: Vec<(&'static str, usize, f64)> = Vec::new();
        for (name, t) in model.params_mut() {
            if is_bias(name) {
                for x in t.data.iter_mut() {
                    *x = 0.0;
                }
                continue;
            }
            for (i, x) in t.data.iter_mut().enumerate() {
                if slot < magnitudes.len() {
                    *x = magnitudes[slot];
                    placed.push((name, i, magnitudes[slot]));
                } else {
                    *x = 2.0 + 0.01 * slot as f64; // filler, never among the smallest
                }
                slot += 1;
            }
        }
        let total: usize = model
            .params()
            .iter()
            .filter(|(n, _)| !is_bias(n))
            .map(|(_, t)| t.data.len())
            .sum();
        // Rate chosen so ⌊rate·total⌋ = 5 exactly.
        let pruned = class_blind_prune(&model, 5.5 / total as f64).unwrap();
        let mut sorted = placed.clone();
        sorted.sort_by(|a, b| a.2.abs().partial_cmp(&b.2.abs()).unwrap());
        let should_zero: std::collections::HashSet<(&str, usize)> =
            sorted.iter().take(5).map(|&(n, i, _)| (n, i)).collect();
        for (name, t) in pruned.params() {
            if is_bias(name) {
                continue;
            }
            for (i, &w) in t.data.iter().enumerate() {
                if should_zero.contains(&(name, i)) {
                    assert_eq!(w, 0.0, "{name}[{i}] should be pruned");
                } else {
                    assert_ne!(w, 0.0, "{name}[{i}] should survive");
                }
            }
        }
    }

    #[test]
    fn prune_is_idempotent_and_monotone() {
        let (model, _, _) = setup(2);
        let p40 = class_blind_prune(&model, 0.4).unwrap();
        assert_eq!(class_blind_prune(&p40, 0.4).unwrap(), p40);
        let p70 = class_blind_prune(&model, 0.7).unwrap();
        for ((name, a), (_, b)) in p40.params().iter().zip(p70.params().iter()) {
            if is_bias(name) {
                continue;
            }
            // zeros(0.4) ⊆ zeros(0.7): whatever 0.4 killed, 0.7 kills.
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                if *x == 0.0 {
                    assert_eq!(*y, 0.0);
                }
            }
        }
    }

    #[test]
    fn forged_sweep_x0_matches_clean_eval() {
        let (model, key, corpus) = setup(3);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        let report =
            forged_key_sweep(&model, &key, None, &ctx, &[0.0, 50.0, 100.0], 2, 7).unwrap();
        let clean = measure(&model, Some(&key), None, &ctx, None).unwrap();
        assert_eq!(report.points[0].score.to_bits(), clean.score.to_bits());
        assert_eq!(report.points[0].token_acc.to_bits(), clean.token_acc.to_bits());
        assert_eq!(report.points.len(), 3);
    }

    #[test]
    fn sweep_csv_is_reproducible() {
        let (model, key, corpus) = setup(4);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        let a = forged_key_sweep(&model, &key, None, &ctx, &[0.0, 100.0], 3, 9)
            .unwrap()
            .to_csv();
        let b = forged_key_sweep(&model, &key, None, &ctx, &[0.0, 100.0], 3, 9)
            .unwrap()
            .to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("kind,x,score,detection,token_acc,avg_len,uniqueness,trials,seed\n"));
        assert_eq!(a.lines().count(), 3);
    }

    #[test]
    fn toggle_sweep_full_complement_zeroes_detection() {
        let (model, key, corpus) = setup(5);
        let sig = SignatureSpec::random(6, 8, 0.1);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        let report =
            signature_toggle_sweep(&model, Some(&key), &sig, &ctx, &[0.0, 100.0], 1, 11).unwrap();
        // x = 100 clamps every dimension to −g·γ: extraction reads the
        // exact complement of G.
        assert_eq!(report.points[1].detection, 0.0);
    }

    #[test]
    fn key_prune_rate_zero_is_clean() {
        let (model, key, corpus) = setup(6);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        let report = key_prune_sweep(&model, &key, None, &ctx, &[0.0, 100.0], 13).unwrap();
        let clean = measure(&model, Some(&key), None, &ctx, None).unwrap();
        assert_eq!(report.points[0].score.to_bits(), clean.score.to_bits());
    }

    #[test]
    fn zero_epoch_finetune_attack_is_identity() {
        let (model, key, corpus) = setup(7);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        let config = TrainingConfig {
            epochs: 0,
            hidden_n: 8,
            embed_e: 4,
            att_a: 4,
            ..TrainingConfig::desk(7)
        };
        let (report, tuned) =
            finetune_attack(&model, Some(&key), None, &ctx, &corpus.samples, &config).unwrap();
        assert_eq!(tuned, model);
        assert_eq!(report.points[0].score.to_bits(), report.points[1].score.to_bits());
    }

    #[test]
    fn invalid_grids_rejected() {
        let (model, key, corpus) = setup(8);
        let ctx = EvalContext { eval_samples: &corpus.samples, train_captions: &[], beam: 1 };
        assert!(forged_key_sweep(&model, &key, None, &ctx, &[], 1, 0).is_err());
        assert!(forged_key_sweep(&model, &key, None, &ctx, &[10.0, 10.0], 1, 0).is_err());
        assert!(forged_key_sweep(&model, &key, None, &ctx, &[0.0, 120.0], 1, 0).is_err());
        assert!(forged_key_sweep(&model, &key, None, &ctx, &[0.0, 50.0], 0, 0).is_err());
    }
}
