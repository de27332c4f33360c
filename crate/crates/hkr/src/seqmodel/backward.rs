//! Hand-derived backpropagation through time for the key-gated cell,
//! the soft attention, and the initial-state projections.

use std::collections::BTreeMap;

use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::numcore::Tensor;
use crate::seqmodel::{DecoderModel, EmbedOp, Forward, PARAM_NAMES};

/// Per-parameter gradients keyed by canonical parameter name.
#[derive(Debug, Clone)]
pub struct Grads {
    pub map: BTreeMap<&'static str, Tensor>,
}

impl Grads {
    pub fn zeros_like(model: &DecoderModel) -> Grads {
        let map = model
            .params()
            .into_iter()
            .map(|(name, t)| (name, Tensor::zeros(&t.shape)))
            .collect();
        Grads { map }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.map[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map.get_mut(name).expect("known parameter name")
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (name, t) in self.map.iter_mut() {
            t.add_assign(&other.map[name]);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        // Fixed order over PARAM_NAMES keeps the reduction reproducible.
        let mut acc = 0.0;
        for name in PARAM_NAMES {
            for &x in &self.map[name].data {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Flatten in canonical parameter order (for the gradient checker).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for name in PARAM_NAMES {
            out.extend_from_slice(&self.map[name].data);
        }
        out
    }
}

/// BPTT over a cached forward pass.
///
/// `dlogits` is the upstream gradient per step; `dh_extra` injects
/// per-step gradients at the cell output `h_t` (the sign-loss hook);
/// `dalpha_extra` injects per-step gradients at the attention weights
/// (the attention regularizer).
pub fn backward(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    fwd: &Forward,
    dlogits: &[Vec<f64>],
    dh_extra: Option<&[Vec<f64>]>,
    dalpha_extra: Option<&[Vec<f64>]>,
) -> Result<Grads> {
    let t_steps = fwd.steps.len();
    if dlogits.len() != t_steps {
        return Err(HkrError::ShapeMismatch(format!(
            "{} upstream gradients for {} steps",
            dlogits.len(),
            t_steps
        )));
    }
    if model.embed_op != EmbedOp::None && key.is_none() {
        return Err(HkrError::Key("protected model requires a key".into()));
    }
    let n = model.dims.n;
    let e = model.dims.e;
    let mut grads = Grads::zeros_like(model);
    let mut dh_carry = vec![0.0; n];
    let mut dm_carry = vec![0.0; n];

    for t in (0..t_steps).rev() {
        let step = &fwd.steps[t];
        let dl = &dlogits[t];

        // Output projection.
        grads.get_mut("out_w").add_outer(dl, &step.h_dropped);
        for (g, d) in grads.get_mut("out_b").data.iter_mut().zip(dl) {
            *g += d;
        }
        let mut dh: Vec<f64> = model
            .out_w
            .matvec_t(dl)
            .iter()
            .zip(&step.drop_mask)
            .map(|(d, m)| d * m)
            .collect();
        if let Some(extra) = dh_extra {
            for (a, b) in dh.iter_mut().zip(&extra[t]) {
                *a += b;
            }
        }
        for (a, b) in dh.iter_mut().zip(&dh_carry) {
            *a += b;
        }

        // Cell: h = o ⊙ tanh(m), m = f ⊙ m_prev + i ⊙ g.
        let mut dm = dm_carry.clone();
        let mut d_o = vec![0.0; n];
        for j in 0..n {
            d_o[j] = dh[j] * step.tanh_m[j];
            dm[j] += dh[j] * step.gate_o[j] * (1.0 - step.tanh_m[j] * step.tanh_m[j]);
        }
        let mut da_i = vec![0.0; n];
        let mut da_f = vec![0.0; n];
        let mut da_o = vec![0.0; n];
        let mut da_g = vec![0.0; n];
        let mut dm_next = vec![0.0; n];
        for j in 0..n {
            let (i, f, o, g) = (step.gate_i[j], step.gate_f[j], step.gate_o[j], step.gate_g[j]);
            da_i[j] = dm[j] * g * i * (1.0 - i);
            da_f[j] = dm[j] * step.m_prev[j] * f * (1.0 - f);
            da_o[j] = d_o[j] * o * (1.0 - o);
            da_g[j] = dm[j] * i * (1.0 - g * g);
            dm_next[j] = dm[j] * f;
        }

        let mut dx = vec![0.0; step.x.len()];
        let mut dh_tilde = vec![0.0; n];
        let gate_params = [
            ("w_i", "u_i", "b_i", &da_i),
            ("w_f", "u_f", "b_f", &da_f),
            ("w_o", "u_o", "b_o", &da_o),
            ("w_g", "u_g", "b_g", &da_g),
        ];
        for (w_name, u_name, b_name, da) in gate_params {
            grads.get_mut(w_name).add_outer(da, &step.x);
            grads.get_mut(u_name).add_outer(da, &step.h_tilde);
            for (g, d) in grads.get_mut(b_name).data.iter_mut().zip(da.iter()) {
                *g += d;
            }
            let w = match w_name {
                "w_i" => &model.lstm.w_i,
                "w_f" => &model.lstm.w_f,
                "w_o" => &model.lstm.w_o,
                _ => &model.lstm.w_g,
            };
            let u = match u_name {
                "u_i" => &model.lstm.u_i,
                "u_f" => &model.lstm.u_f,
                "u_o" => &model.lstm.u_o,
                _ => &model.lstm.u_g,
            };
            for (a, b) in dx.iter_mut().zip(w.matvec_t(da)) {
                *a += b;
            }
            for (a, b) in dh_tilde.iter_mut().zip(u.matvec_t(da)) {
                *a += b;
            }
        }

        // Token embedding row for this step's input.
        {
            let row = grads.get_mut("token_embedding").row_mut(step.input_token);
            for (g, d) in row.iter_mut().zip(&dx[..e]) {
                *g += d;
            }
        }

        // Attention: context = Σ α_r f_r; e_r = v · tanh(W_f f_r + W_h h̃).
        let dcontext = &dx[e..];
        let r_count = step.alpha.len();
        let mut dalpha = vec![0.0; r_count];
        for r in 0..r_count {
            let f_r = fwd.features.row(r);
            let mut acc = 0.0;
            for (dc, f) in dcontext.iter().zip(f_r) {
                acc += dc * f;
            }
            dalpha[r] = acc;
        }
        if let Some(extra) = dalpha_extra {
            for (a, b) in dalpha.iter_mut().zip(&extra[t]) {
                *a += b;
            }
        }
        // Softmax backward.
        let dot: f64 = step.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let de: Vec<f64> = step
            .alpha
            .iter()
            .zip(&dalpha)
            .map(|(a, d)| a * (d - dot))
            .collect();
        for r in 0..r_count {
            let u_r = &step.att_u[r];
            let f_r = fwd.features.row(r);
            for (g, u) in grads.get_mut("att_v").data.iter_mut().zip(u_r) {
                *g += de[r] * u;
            }
            let dz: Vec<f64> = u_r
                .iter()
                .zip(&model.attention.v.data)
                .map(|(u, v)| de[r] * v * (1.0 - u * u))
                .collect();
            grads.get_mut("att_wf").add_outer(&dz, f_r);
            grads.get_mut("att_wh").add_outer(&dz, &step.h_tilde);
            for (a, b) in dh_tilde.iter_mut().zip(model.attention.w_h.matvec_t(&dz)) {
                *a += b;
            }
        }

        // Key-injection Jacobian into the previous hidden state.
        dh_carry = match model.embed_op {
            EmbedOp::Add | EmbedOp::None => dh_tilde,
            EmbedOp::Mul => {
                let k = &key.expect("checked above").values;
                dh_tilde.iter().zip(k).map(|(d, k)| d * k).collect()
            }
        };
        dm_carry = dm_next;
    }

    // Initial-state projections h0 = tanh(W μ + b), m0 likewise.
    let da_h0: Vec<f64> = dh_carry
        .iter()
        .zip(&fwd.h0)
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    grads.get_mut("h0_w").add_outer(&da_h0, &fwd.mean_feat);
    for (g, d) in grads.get_mut("h0_b").data.iter_mut().zip(&da_h0) {
        *g += d;
    }
    let da_m0: Vec<f64> = dm_carry
        .iter()
        .zip(&fwd.m0)
        .map(|(d, m)| d * (1.0 - m * m))
        .collect();
    grads.get_mut("m0_w").add_outer(&da_m0, &fwd.mean_feat);
    for (g, d) in grads.get_mut("m0_b").data.iter_mut().zip(&da_m0) {
        *g += d;
    }
    Ok(grads)
}
