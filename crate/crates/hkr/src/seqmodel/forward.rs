//! Teacher-forced forward pass with full per-step caching.

use crate::datagen::{ToySample, BOS};
use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::numcore::{sigmoid, softmax, SeededRng, Tensor};
use crate::seqmodel::{embed_key_into_hidden, DecoderModel, EmbedOp};

/// Inference-time sign forcing: entries (dimension, forced value) applied
/// to the cell output `h_t` at every step.
#[derive(Debug, Clone, Default)]
pub struct SignClamp {
    pub entries: Vec<(usize, f64)>,
}

pub struct ForwardOpts<'a> {
    /// Inverted-dropout rate on `h_t` before the output projection only.
    pub dropout: f64,
    pub rng: Option<&'a mut SeededRng>,
    pub sign_clamp: Option<&'a SignClamp>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts { dropout: 0.0, rng: None, sign_clamp: None }
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    pub input_token: usize,
    /// Concatenated [token embedding; context], length E+D.
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// Post-injection state feeding the gates and the attention query.
    pub h_tilde: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub m: Vec<f64>,
    pub tanh_m: Vec<f64>,
    /// Cell output: propagated to the next step and read by the sign loss.
    pub h: Vec<f64>,
    /// Inverted-dropout mask (entries 0 or 1/(1−p)); all ones in eval.
    pub drop_mask: Vec<f64>,
    pub h_dropped: Vec<f64>,
    /// Per-region tanh attention activations, [R][A].
    pub att_u: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub context: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub steps: Vec<StepCache>,
    pub h0: Vec<f64>,
    pub m0: Vec<f64>,
    pub mean_feat: Vec<f64>,
    pub targets: Vec<usize>,
    /// The region features the pass ran on; the backward pass needs them.
    pub features: Tensor,
}

/// Soft attention: e_r = v·tanh(W_f·f_r + W_h·h); α = softmax(e);
/// c = Σ α_r f_r. Returns (context, alpha, per-region tanh activations).
pub fn attention_step(
    model: &DecoderModel,
    features: &Tensor,
    h: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let r = features.rows();
    let d = features.cols();
    let query = model.attention.w_h.matvec(h);
    let mut scores = Vec::with_capacity(r);
    let mut activations = Vec::with_capacity(r);
    for region in 0..r {
        let f_r = features.row(region);
        let mut z = model.attention.w_f.matvec(f_r);
        for (zi, qi) in z.iter_mut().zip(&query) {
            *zi = (*zi + qi).tanh();
        }
        let mut e = 0.0;
        for (u, v) in z.iter().zip(&model.attention.v.data) {
            e += u * v;
        }
        scores.push(e);
        activations.push(z);
    }
    let alpha = softmax(&scores);
    let mut context = vec![0.0; d];
    for region in 0..r {
        let f_r = features.row(region);
        let a = alpha[region];
        for j in 0..d {
            context[j] += a * f_r[j];
        }
    }
    (context, alpha, activations)
}

/// One key-gated LSTM step given a precomputed input vector `x`.
/// Returns (h, m) plus the gate activations for the cache.
#[allow(clippy::type_complexity)]
pub fn lstm_gates(
    model: &DecoderModel,
    x: &[f64],
    h_tilde: &[f64],
    m_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = &model.lstm;
    let pre = |w: &Tensor, u: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut a = w.matvec(x);
        let rec = u.matvec(h_tilde);
        for ((ai, ri), bi) in a.iter_mut().zip(&rec).zip(&b.data) {
            *ai += ri + bi;
        }
        a
    };
    let gate_i: Vec<f64> = pre(&p.w_i, &p.u_i, &p.b_i).iter().map(|&z| sigmoid(z)).collect();
    let gate_f: Vec<f64> = pre(&p.w_f, &p.u_f, &p.b_f).iter().map(|&z| sigmoid(z)).collect();
    let gate_o: Vec<f64> = pre(&p.w_o, &p.u_o, &p.b_o).iter().map(|&z| sigmoid(z)).collect();
    let gate_g: Vec<f64> = pre(&p.w_g, &p.u_g, &p.b_g).iter().map(|&z| z.tanh()).collect();
    let m: Vec<f64> = gate_f
        .iter()
        .zip(m_prev)
        .zip(gate_i.iter().zip(&gate_g))
        .map(|((f, mp), (i, g))| f * mp + i * g)
        .collect();
    let tanh_m: Vec<f64> = m.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = gate_o.iter().zip(&tanh_m).map(|(o, t)| o * t).collect();
    (gate_i, gate_f, gate_o, gate_g, m, tanh_m, h)
}

/// One full LSTM step: key injection, then the standard cell.
/// `x` is [token embedding; context].
pub fn lstm_step(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    x: &[f64],
    h_prev: &[f64],
    m_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h_tilde = embed_key_into_hidden(key, h_prev, model.embed_op)?;
    let (_, _, _, _, m, _, h) = lstm_gates(model, x, &h_tilde, m_prev);
    Ok((h, m))
}

pub fn initial_state(model: &DecoderModel, features: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = features.rows();
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for region in 0..r {
        for (m, f) in mean.iter_mut().zip(features.row(region)) {
            *m += f;
        }
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    let mut h0 = model.h0_w.matvec(&mean);
    for (h, b) in h0.iter_mut().zip(&model.h0_b.data) {
        *h = (*h + b).tanh();
    }
    let mut m0 = model.m0_w.matvec(&mean);
    for (m, b) in m0.iter_mut().zip(&model.m0_b.data) {
        *m = (*m + b).tanh();
    }
    (h0, m0, mean)
}

/// Teacher-forced forward pass over a sample's caption. Step `t` consumes
/// token `t−1` (BOS at `t = 0`) and is scored against token `t`.
pub fn forward_teacher_forced(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sample: &ToySample,
    opts: &mut ForwardOpts,
) -> Result<Forward> {
    if sample.caption.is_empty() {
        return Err(HkrError::InvalidArgument("caption must be non-empty".into()));
    }
    if model.embed_op != EmbedOp::None && key.is_none() {
        return Err(HkrError::Key("protected model requires a key".into()));
    }
    let dims = model.dims;
    for &id in &sample.caption {
        if id >= dims.v {
            return Err(HkrError::InvalidArgument(format!(
                "token id {id} out of vocabulary ({})",
                dims.v
            )));
        }
    }
    let (h0, m0, mean_feat) = initial_state(model, &sample.features);
    let mut h_prev = h0.clone();
    let mut m_prev = m0.clone();
    let mut steps = Vec::with_capacity(sample.caption.len());
    for (t, &target) in sample.caption.iter().enumerate() {
        let input_token = if t == 0 { BOS } else { sample.caption[t - 1] };
        let h_tilde = embed_key_into_hidden(key, &h_prev, model.embed_op)?;
        let (context, alpha, att_u) = attention_step(model, &sample.features, &h_tilde);
        let mut x = Vec::with_capacity(dims.e + dims.d);
        x.extend_from_slice(model.token_embedding.row(input_token));
        x.extend_from_slice(&context);
        let (gate_i, gate_f, gate_o, gate_g, m, tanh_m, mut h) =
            lstm_gates(model, &x, &h_tilde, &m_prev);
        if let Some(clamp) = opts.sign_clamp {
            for &(dim, value) in &clamp.entries {
                h[dim] = value;
            }
        }
        let drop_mask: Vec<f64> = if opts.dropout > 0.0 {
            let rng = opts.rng.as_mut().ok_or_else(|| {
                HkrError::InvalidArgument("dropout > 0 requires an RNG".into())
            })?;
            let keep = 1.0 - opts.dropout;
            (0..dims.n)
                .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        } else {
            vec![1.0; dims.n]
        };
        let h_dropped: Vec<f64> = h.iter().zip(&drop_mask).map(|(x, m)| x * m).collect();
        let mut logits = model.out_w.matvec(&h_dropped);
        for (l, b) in logits.iter_mut().zip(&model.out_b.data) {
            *l += b;
        }
        steps.push(StepCache {
            input_token,
            x,
            h_prev: h_prev.clone(),
            h_tilde,
            m_prev: m_prev.clone(),
            gate_i,
            gate_f,
            gate_o,
            gate_g,
            m: m.clone(),
            tanh_m,
            h: h.clone(),
            drop_mask,
            h_dropped,
            att_u,
            alpha,
            context,
            logits,
        });
        h_prev = h;
        m_prev = m;
        let _ = target;
    }
    Ok(Forward {
        steps,
        h0,
        m0,
        mean_feat,
        targets: sample.caption.clone(),
        features: sample.features.clone(),
    })
}
