//! Greedy and beam-search decoding with deterministic tie-breaking.

use crate::datagen::{BOS, EOS};
use crate::error::Result;
use crate::keying::SecretKey;
use crate::numcore::{log_softmax, Tensor};
use crate::seqmodel::forward::{attention_step, initial_state, lstm_gates, SignClamp};
use crate::seqmodel::{embed_key_into_hidden, DecoderModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated token ids, ending in EOS when the beam terminated.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    h: Vec<f64>,
    m: Vec<f64>,
    done: bool,
}

fn decode_step(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    features: &Tensor,
    input_token: usize,
    h_prev: &[f64],
    m_prev: &[f64],
    clamp: Option<&SignClamp>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let h_tilde = embed_key_into_hidden(key, h_prev, model.embed_op)?;
    let (context, _alpha, _) = attention_step(model, features, &h_tilde);
    let mut x = Vec::with_capacity(model.dims.e + model.dims.d);
    x.extend_from_slice(model.token_embedding.row(input_token));
    x.extend_from_slice(&context);
    let (_, _, _, _, m, _, mut h) = lstm_gates(model, &x, &h_tilde, m_prev);
    if let Some(clamp) = clamp {
        for &(dim, value) in &clamp.entries {
            h[dim] = value;
        }
    }
    let mut logits = model.out_w.matvec(&h);
    for (l, b) in logits.iter_mut().zip(&model.out_b.data) {
        *l += b;
    }
    Ok((log_softmax(&logits), h, m))
}

/// Beam search. Hypotheses are ordered by log-probability (descending),
/// ties broken by shorter length then ascending token ids. `beam = 1`
/// reproduces the greedy argmax chain exactly.
pub fn beam_decode(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    features: &Tensor,
    beam: usize,
    max_len: usize,
    clamp: Option<&SignClamp>,
) -> Result<Vec<Hypothesis>> {
    assert!(beam >= 1, "beam must be >= 1");
    let (h0, m0, _) = initial_state(model, features);
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        h: h0,
        m: m0,
        done: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::new();
        for b in &beams {
            if b.done {
                candidates.push(b.clone());
                continue;
            }
            let input = *b.tokens.last().unwrap_or(&BOS);
            let (logp, h, m) =
                decode_step(model, key, features, input, &b.h, &b.m, clamp)?;
            for (token, lp) in logp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(token);
                candidates.push(Beam {
                    tokens,
                    log_prob: b.log_prob + lp,
                    h: h.clone(),
                    m: m.clone(),
                    done: token == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then(a.tokens.len().cmp(&b.tokens.len()))
                .then(a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam);
        beams = candidates;
    }
    Ok(beams
        .into_iter()
        .map(|b| Hypothesis { tokens: b.tokens, log_prob: b.log_prob })
        .collect())
}

/// Greedy decoding: the argmax chain, identical to beam = 1.
pub fn greedy_decode(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    features: &Tensor,
    max_len: usize,
    clamp: Option<&SignClamp>,
) -> Result<Hypothesis> {
    let (h0, m0, _) = initial_state(model, features);
    let mut h = h0;
    let mut m = m0;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let input = *tokens.last().unwrap_or(&BOS);
        let (logp, nh, nm) = decode_step(model, key, features, input, &h, &m, clamp)?;
        // Argmax with ties going to the lowest token id.
        let mut best = 0;
        for (i, lp) in logp.iter().enumerate() {
            if *lp > logp[best] {
                best = i;
            }
        }
        tokens.push(best);
        log_prob += logp[best];
        h = nh;
        m = nm;
        if best == EOS {
            break;
        }
    }
    Ok(Hypothesis { tokens, log_prob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use crate::seqmodel::{Dims, EmbedOp};

    fn tiny(seed: u64, v: usize) -> (DecoderModel, Tensor) {
        let dims = Dims { v, e: 3, n: 4, d: 5, a: 3, r: 2 };
        let model = DecoderModel::init(dims, EmbedOp::None, seed);
        let mut rng = SeededRng::new(seed + 1);
        let features = Tensor::from_vec(
            &[2, 5],
            (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        (model, features)
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..10 {
            let (model, features) = tiny(seed, 8);
            let greedy = greedy_decode(&model, None, &features, 20, None).unwrap();
            let beam = beam_decode(&model, None, &features, 1, 20, None).unwrap();
            assert_eq!(beam[0].tokens, greedy.tokens);
            assert!((beam[0].log_prob - greedy.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        // V=3 (pad, bos, eos), max_len=3: enumerate every sequence over
        // the full vocabulary and compare against beam=3's best.
        let (model, features) = tiny(5, 3);
        let max_len = 3;

        fn enumerate(
            model: &DecoderModel,
            features: &Tensor,
            prefix: &mut Vec<usize>,
            h: Vec<f64>,
            m: Vec<f64>,
            logp: f64,
            max_len: usize,
            best: &mut (f64, Vec<usize>),
        ) {
            if prefix.last() == Some(&EOS) || prefix.len() == max_len {
                if logp > best.0 {
                    *best = (logp, prefix.clone());
                }
                return;
            }
            let input = *prefix.last().unwrap_or(&BOS);
            let (lp, nh, nm) =
                decode_step(model, None, features, input, &h, &m, None).unwrap();
            for token in 0..model.dims.v {
                prefix.push(token);
                enumerate(
                    model,
                    features,
                    prefix,
                    nh.clone(),
                    nm.clone(),
                    logp + lp[token],
                    max_len,
                    best,
                );
                prefix.pop();
            }
        }

        let (h0, m0, _) = initial_state(&model, &features);
        let mut best = (f64::NEG_INFINITY, Vec::new());
        enumerate(&model, &features, &mut Vec::new(), h0, m0, 0.0, max_len, &mut best);
        // A beam as wide as the whole space is exhaustive.
        let hyps = beam_decode(&model, None, &features, 27, max_len, None).unwrap();
        assert_eq!(hyps[0].tokens, best.1);
        assert!((hyps[0].log_prob - best.0).abs() < 1e-12);
    }

    #[test]
    fn decode_is_deterministic() {
        let (model, features) = tiny(9, 8);
        let a = beam_decode(&model, None, &features, 3, 20, None).unwrap();
        let b = beam_decode(&model, None, &features, 3, 20, None).unwrap();
        assert_eq!(a, b);
    }
}
