//! Glue between decoding and the caption metrics: evaluate a model over a
//! corpus split and produce the summary row the sweeps and the `eval`
//! subcommand both consume.

use serde::{Deserialize, Serialize};

use crate::capmetrics::{evaluate_captions, uniqueness_stats, EvalResult, Tokens};
use crate::datagen::{ToySample, T_MAX};
use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::seqmodel::{beam_decode, DecoderModel, SignClamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: EvalResult,
    pub token_acc: f64,
    pub avg_len: f64,
    /// Fraction of decoded captions not present verbatim in the training
    /// captions (Table-4-style uniqueness); 0 when no training captions
    /// are supplied.
    pub uniqueness: f64,
}

/// Beam-decode every sample; returns the top hypothesis per sample.
pub fn decode_corpus(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    samples: &[ToySample],
    beam: usize,
    clamp: Option<&SignClamp>,
) -> Result<Vec<Tokens>> {
    samples
        .iter()
        .map(|s| Ok(beam_decode(model, key, &s.features, beam, T_MAX, clamp)?[0].tokens.clone()))
        .collect()
}

/// Decode `eval_samples` and score against their captions. Uniqueness is
/// measured against `train_captions` when non-empty.
pub fn evaluate_model(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    eval_samples: &[ToySample],
    train_captions: &[Tokens],
    beam: usize,
    clamp: Option<&SignClamp>,
) -> Result<EvalSummary> {
    if eval_samples.is_empty() {
        return Err(HkrError::InvalidArgument("empty evaluation split".into()));
    }
    let candidates = decode_corpus(model, key, eval_samples, beam, clamp)?;
    let references: Vec<Vec<Tokens>> =
        eval_samples.iter().map(|s| vec![s.caption.clone()]).collect();
    let metrics = evaluate_captions(&candidates, &references, &references)?;
    let token_acc = crate::training::token_accuracy_with(model, key, eval_samples, clamp)?;
    let stats = uniqueness_stats(&candidates, train_captions)?;
    Ok(EvalSummary {
        metrics,
        token_acc,
        avg_len: stats.avg_length,
        uniqueness: if train_captions.is_empty() { 0.0 } else { stats.unique_fraction },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_corpus, GrammarConfig};
    use crate::seqmodel::{Dims, EmbedOp};

    #[test]
    fn evaluation_is_deterministic() {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(3, 12, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::None, 4);
        let a = evaluate_model(&model, None, &corpus.samples, &[], 3, None).unwrap();
        let b = evaluate_model(&model, None, &corpus.samples, &[], 3, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        // Feed the reference captions back as "decodes" through the metric
        // path: a candidate set equal to the references maxes CIDEr-D.
        let g = GrammarConfig::default();
        let corpus = synth_corpus(5, 8, &g).unwrap();
        let candidates: Vec<Tokens> = corpus.samples.iter().map(|s| s.caption.clone()).collect();
        let references: Vec<Vec<Tokens>> =
            corpus.samples.iter().map(|s| vec![s.caption.clone()]).collect();
        let res = evaluate_captions(&candidates, &references, &references).unwrap();
        assert!(res.cider_d > 9.0, "cider = {}", res.cider_d);
        assert!((res.bleu[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniqueness_against_training_captions() {
        let g = GrammarConfig::default();
        let corpus = synth_corpus(6, 10, &g).unwrap();
        let dims = Dims { v: corpus.vocab.len(), e: 4, n: 8, d: corpus.d, a: 4, r: corpus.r };
        let model = DecoderModel::init(dims, EmbedOp::None, 7);
        let train_captions: Vec<Tokens> =
            corpus.samples.iter().map(|s| s.caption.clone()).collect();
        let summary =
            evaluate_model(&model, None, &corpus.samples, &train_captions, 1, None).unwrap();
        assert!((0.0..=1.0).contains(&summary.uniqueness));
    }
}
