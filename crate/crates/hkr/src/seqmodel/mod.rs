//! The protected decoder: a key-gated LSTM cell with soft attention over
//! region features, output projection, decoding, and a hand-derived
//! backward pass.
//!
//! The key is applied to the previous hidden state once per step, and the
//! injected state feeds every recurrent use inside the cell (the gates
//! and the attention query). The sign loss reads the cell output `h_t` of
//! every step, which is also the value propagated to the next step.

mod backward;
mod checkpoint;
mod decode;
mod forward;

pub use backward::{backward, Grads};
pub use checkpoint::Checkpoint;
pub use decode::{beam_decode, greedy_decode, Hypothesis};
pub use forward::{
    attention_step, forward_teacher_forced, initial_state, lstm_step, Forward, ForwardOpts,
    SignClamp, StepCache,
};

use serde::{Deserialize, Serialize};

use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::numcore::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Vocabulary size.
    pub v: usize,
    /// Token embedding width.
    pub e: usize,
    /// Hidden size (= key and signature length).
    pub n: usize,
    /// Region feature dimension.
    pub d: usize,
    /// Attention width.
    pub a: usize,
    /// Region count.
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedOp {
    Add,
    Mul,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_g: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_g: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// [A×N] hidden-side projection.
    pub w_h: Tensor,
    /// [A×D] feature-side projection.
    pub w_f: Tensor,
    /// [A] scoring vector.
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub dims: Dims,
    pub embed_op: EmbedOp,
    /// [V×E]
    pub token_embedding: Tensor,
    pub lstm: LstmParams,
    pub attention: AttentionParams,
    /// [V×N] output projection and [V] bias.
    pub out_w: Tensor,
    pub out_b: Tensor,
    /// Initial-state projections from the mean region feature.
    pub h0_w: Tensor,
    pub h0_b: Tensor,
    pub m0_w: Tensor,
    pub m0_b: Tensor,
}

/// Canonical parameter order used by init, Adam, checkpoints, and the
/// gradient checker.
pub const PARAM_NAMES: [&str; 22] = [
    "token_embedding",
    "w_i",
    "w_f",
    "w_o",
    "w_g",
    "u_i",
    "u_f",
    "u_o",
    "u_g",
    "b_i",
    "b_f",
    "b_o",
    "b_g",
    "att_wh",
    "att_wf",
    "att_v",
    "out_w",
    "out_b",
    "h0_w",
    "h0_b",
    "m0_w",
    "m0_b",
];

pub fn is_bias(name: &str) -> bool {
    matches!(name, "b_i" | "b_f" | "b_o" | "b_g" | "out_b" | "h0_b" | "m0_b")
}

impl DecoderModel {
    /// Seeded initialization: uniform(−1/√fan_in, +1/√fan_in) per weight
    /// tensor, zero biases except the forget-gate bias at +1.0.
    pub fn init(dims: Dims, embed_op: EmbedOp, seed: u64) -> DecoderModel {
        let mut rng = SeededRng::new(seed);
        let mut uniform_tensor = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_vec(shape, data).expect("consistent init shape")
        };
        let (v, e, n, d, a) = (dims.v, dims.e, dims.n, dims.d, dims.a);
        let x_dim = e + d;
        let token_embedding = uniform_tensor(&[v, e], e);
        let w_i = uniform_tensor(&[n, x_dim], x_dim);
        let w_f = uniform_tensor(&[n, x_dim], x_dim);
        let w_o = uniform_tensor(&[n, x_dim], x_dim);
        let w_g = uniform_tensor(&[n, x_dim], x_dim);
        let u_i = uniform_tensor(&[n, n], n);
        let u_f = uniform_tensor(&[n, n], n);
        let u_o = uniform_tensor(&[n, n], n);
        let u_g = uniform_tensor(&[n, n], n);
        let mut b_f = Tensor::zeros(&[n]);
        for x in b_f.data.iter_mut() {
            *x = 1.0;
        }
        let att_wh = uniform_tensor(&[a, n], n);
        let att_wf = uniform_tensor(&[a, d], d);
        let att_v = uniform_tensor(&[a], a);
        let out_w = uniform_tensor(&[v, n], n);
        let h0_w = uniform_tensor(&[n, d], d);
        let m0_w = uniform_tensor(&[n, d], d);
        DecoderModel {
            dims,
            embed_op,
            token_embedding,
            lstm: LstmParams {
                w_i,
                w_f,
                w_o,
                w_g,
                u_i,
                u_f,
                u_o,
                u_g,
                b_i: Tensor::zeros(&[n]),
                b_f,
                b_o: Tensor::zeros(&[n]),
                b_g: Tensor::zeros(&[n]),
            },
            attention: AttentionParams { w_h: att_wh, w_f: att_wf, v: att_v },
            out_w,
            out_b: Tensor::zeros(&[v]),
            h0_w,
            h0_b: Tensor::zeros(&[n]),
            m0_w,
            m0_b: Tensor::zeros(&[n]),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("token_embedding", &self.token_embedding),
            ("w_i", &self.lstm.w_i),
            ("w_f", &self.lstm.w_f),
            ("w_o", &self.lstm.w_o),
            ("w_g", &self.lstm.w_g),
            ("u_i", &self.lstm.u_i),
            ("u_f", &self.lstm.u_f),
            ("u_o", &self.lstm.u_o),
            ("u_g", &self.lstm.u_g),
            ("b_i", &self.lstm.b_i),
            ("b_f", &self.lstm.b_f),
            ("b_o", &self.lstm.b_o),
            ("b_g", &self.lstm.b_g),
            ("att_wh", &self.attention.w_h),
            ("att_wf", &self.attention.w_f),
            ("att_v", &self.attention.v),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
            ("h0_w", &self.h0_w),
            ("h0_b", &self.h0_b),
            ("m0_w", &self.m0_w),
            ("m0_b", &self.m0_b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("token_embedding", &mut self.token_embedding),
            ("w_i", &mut self.lstm.w_i),
            ("w_f", &mut self.lstm.w_f),
            ("w_o", &mut self.lstm.w_o),
            ("w_g", &mut self.lstm.w_g),
            ("u_i", &mut self.lstm.u_i),
            ("u_f", &mut self.lstm.u_f),
            ("u_o", &mut self.lstm.u_o),
            ("u_g", &mut self.lstm.u_g),
            ("b_i", &mut self.lstm.b_i),
            ("b_f", &mut self.lstm.b_f),
            ("b_o", &mut self.lstm.b_o),
            ("b_g", &mut self.lstm.b_g),
            ("att_wh", &mut self.attention.w_h),
            ("att_wf", &mut self.attention.w_f),
            ("att_v", &mut self.attention.v),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
            ("h0_w", &mut self.h0_w),
            ("h0_b", &mut self.h0_b),
            ("m0_w", &mut self.m0_w),
            ("m0_b", &mut self.m0_b),
        ]
    }

    /// Flatten all parameters in canonical order (for gradient checking).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.params() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.params_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        debug_assert_eq!(offset, flat.len());
    }
}

/// Apply the key embedding operation to a hidden state.
pub fn embed_key_into_hidden(
    key: Option<&SecretKey>,
    h_prev: &[f64],
    op: EmbedOp,
) -> Result<Vec<f64>> {
    match op {
        EmbedOp::None => Ok(h_prev.to_vec()),
        EmbedOp::Add | EmbedOp::Mul => {
            let key = key.ok_or_else(|| {
                HkrError::Key("embed op requires a key".into())
            })?;
            if key.len() != h_prev.len() {
                return Err(HkrError::ShapeMismatch(format!(
                    "key length {} vs hidden size {}",
                    key.len(),
                    h_prev.len()
                )));
            }
            Ok(key
                .values
                .iter()
                .zip(h_prev)
                .map(|(k, h)| if op == EmbedOp::Add { k + h } else { k * h })
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectSite {
    Hidden,
    Context,
}

/// Complementary gated injection used by the two-layer and cell-node
/// architectures: with gate `c = 1` the key is added at the hidden site,
/// with `c = 0` it is added at the context site.
pub fn gated_inject(h: &[f64], key: &SecretKey, c: u8, site: InjectSite) -> Result<Vec<f64>> {
    if key.len() != h.len() {
        return Err(HkrError::ShapeMismatch(format!(
            "key length {} vs input length {}",
            key.len(),
            h.len()
        )));
    }
    let add = matches!(
        (c, site),
        (1, InjectSite::Hidden) | (0, InjectSite::Context)
    );
    if add {
        Ok(h.iter().zip(&key.values).map(|(x, k)| x + k).collect())
    } else {
        Ok(h.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::KeyVariant;

    fn key(values: Vec<f64>) -> SecretKey {
        SecretKey { variant: KeyVariant::Float, values, owner: None, bc_seed: None }
    }

    #[test]
    fn embed_identities() {
        let h = vec![2.0, 2.0];
        let zero = key(vec![0.0, 0.0]);
        assert_eq!(
            embed_key_into_hidden(Some(&zero), &h, EmbedOp::Add).unwrap(),
            h
        );
        let one = key(vec![1.0, 1.0]);
        assert_eq!(
            embed_key_into_hidden(Some(&one), &h, EmbedOp::Mul).unwrap(),
            h
        );
        assert_eq!(embed_key_into_hidden(None, &h, EmbedOp::None).unwrap(), h);
    }

    #[test]
    fn embed_mul_hand() {
        let k = key(vec![-1.0, 0.5]);
        assert_eq!(
            embed_key_into_hidden(Some(&k), &[2.0, 2.0], EmbedOp::Mul).unwrap(),
            vec![-2.0, 1.0]
        );
    }

    #[test]
    fn embed_length_mismatch() {
        let k = key(vec![1.0]);
        assert!(embed_key_into_hidden(Some(&k), &[1.0, 2.0], EmbedOp::Add).is_err());
        assert!(embed_key_into_hidden(None, &[1.0], EmbedOp::Add).is_err());
    }

    #[test]
    fn gated_inject_cases() {
        let zero = key(vec![0.0, 0.0]);
        let h = vec![3.0, -1.0];
        assert_eq!(gated_inject(&h, &zero, 1, InjectSite::Hidden).unwrap(), h);
        let ones = key(vec![1.0, 1.0]);
        assert_eq!(
            gated_inject(&[0.0, 0.0], &ones, 0, InjectSite::Context).unwrap(),
            vec![1.0, 1.0]
        );
        // Outputs differ between c=0 and c=1 iff the key is nonzero.
        for site in [InjectSite::Hidden, InjectSite::Context] {
            let c0 = gated_inject(&h, &ones, 0, site).unwrap();
            let c1 = gated_inject(&h, &ones, 1, site).unwrap();
            assert_ne!(c0, c1);
            let z0 = gated_inject(&h, &zero, 0, site).unwrap();
            let z1 = gated_inject(&h, &zero, 1, site).unwrap();
            assert_eq!(z0, z1);
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let dims = Dims { v: 10, e: 4, n: 8, d: 6, a: 5, r: 3 };
        let a = DecoderModel::init(dims, EmbedOp::Add, 42);
        let b = DecoderModel::init(dims, EmbedOp::Add, 42);
        assert_eq!(a, b);
        for (_, t) in a.params() {
            assert!(t.is_finite());
        }
        assert!(a.lstm.b_f.data.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn flatten_round_trip() {
        let dims = Dims { v: 6, e: 3, n: 4, d: 5, a: 3, r: 2 };
        let m = DecoderModel::init(dims, EmbedOp::None, 7);
        let flat = m.flatten_params();
        let mut m2 = DecoderModel::init(dims, EmbedOp::None, 8);
        m2.set_from_flat(&flat);
        assert_eq!(m, m2);
    }
}
