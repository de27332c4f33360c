//! Loss assembly (MLE + sign loss + attention regularizer), Adam with
//! global-norm gradient clipping, the training loop, and the fine-tuning
//! routines the removal attacks delegate to.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::datagen::ToySample;
use crate::error::{HkrError, Result};
use crate::keying::SecretKey;
use crate::numcore::{log_softmax, softmax, SeededRng, Tensor};
use crate::seqmodel::{
    backward, forward_teacher_forced, DecoderModel, Dims, EmbedOp, Forward, ForwardOpts, Grads,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub lambda_sign: f64,
    pub gamma: f64,
    pub lambda_att: f64,
    pub seed: u64,
    pub profile: Profile,
    /// Hidden size N (= key/signature length).
    pub hidden_n: usize,
    /// Token embedding width E.
    pub embed_e: usize,
    /// Attention width A.
    pub att_a: usize,
    /// One trigger sample is interleaved per this many clean samples.
    pub trigger_interval: usize,
}

impl TrainingConfig {
    /// Laptop-scale profile: small model, higher learning rate so ~500
    /// Adam steps converge on the synthetic grammar.
    pub fn desk(seed: u64) -> TrainingConfig {
        TrainingConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-6,
            clip_norm: 5.0,
            batch: 32,
            epochs: 30,
            dropout: 0.3,
            lambda_sign: 1.0,
            gamma: 0.1,
            lambda_att: 0.01,
            seed,
            profile: Profile::Desk,
            hidden_n: 64,
            embed_e: 32,
            att_a: 32,
            trigger_interval: 50,
        }
    }

    /// Full-scale hyperparameters (N = 512, lr 1e−4); retained for anyone
    /// with the compute, not exercised by the test suite.
    pub fn paper(seed: u64) -> TrainingConfig {
        TrainingConfig {
            lr: 1e-4,
            epochs: 20,
            profile: Profile::Paper,
            hidden_n: 512,
            embed_e: 512,
            att_a: 512,
            ..TrainingConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.clip_norm <= 0.0 || self.batch == 0 {
            return Err(HkrError::InvalidArgument(
                "learning rate, clip norm, and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HkrError::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        if self.gamma <= 0.0 {
            return Err(HkrError::InvalidArgument("gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Target sign vector and hinge margin for the sign loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureSpec {
    pub g: Vec<f64>,
    pub gamma: f64,
}

impl SignatureSpec {
    pub fn random(seed: u64, n: usize, gamma: f64) -> SignatureSpec {
        let mut rng = SeededRng::new(seed);
        SignatureSpec { g: (0..n).map(|_| rng.sign()).collect(), gamma }
    }
}

/// Negative log-likelihood summed over steps; gradient is
/// softmax − one-hot per step.
pub fn mle_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != targets.len() {
        return Err(HkrError::ShapeMismatch(format!(
            "{} logit steps for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (step_logits, &target) in logits.iter().zip(targets) {
        if target >= step_logits.len() {
            return Err(HkrError::InvalidArgument(format!(
                "target {target} out of range {}",
                step_logits.len()
            )));
        }
        loss -= log_softmax(step_logits)[target];
        let mut g = softmax(step_logits);
        g[target] -= 1.0;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Hinge sign loss Σᵢ max(γ − hᵢgᵢ, 0), summed over dimensions and
/// averaged over steps. Subgradient at an exact tie is zero.
pub fn sign_loss(h_steps: &[Vec<f64>], sig: &SignatureSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    let t = h_steps.len();
    if t == 0 {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / t as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(t);
    for h in h_steps {
        if h.len() != sig.g.len() {
            return Err(HkrError::ShapeMismatch(format!(
                "hidden size {} vs signature length {}",
                h.len(),
                sig.g.len()
            )));
        }
        let mut g = vec![0.0; h.len()];
        for i in 0..h.len() {
            let margin = sig.gamma - h[i] * sig.g[i];
            if margin > 0.0 {
                loss += scale * margin;
                g[i] = -scale * sig.g[i];
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Doubly-stochastic attention regularizer λ Σ_r (1 − Σ_t α_{t,r})².
pub fn attention_reg(alphas: &[Vec<f64>], lambda: f64) -> (f64, Vec<Vec<f64>>) {
    if alphas.is_empty() {
        return (0.0, Vec::new());
    }
    let r = alphas[0].len();
    let mut col_sums = vec![0.0; r];
    for row in alphas {
        for (s, a) in col_sums.iter_mut().zip(row) {
            *s += a;
        }
    }
    let mut loss = 0.0;
    for &s in &col_sums {
        loss += lambda * (1.0 - s) * (1.0 - s);
    }
    let grads = alphas
        .iter()
        .map(|row| {
            (0..row.len())
                .map(|j| -2.0 * lambda * (1.0 - col_sums[j]))
                .collect()
        })
        .collect();
    (loss, grads)
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<&'static str, Tensor>,
    pub v: BTreeMap<&'static str, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &DecoderModel) -> AdamState {
        let zeros: BTreeMap<&'static str, Tensor> = model
            .params()
            .into_iter()
            .map(|(name, t)| (name, Tensor::zeros(&t.shape)))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, model: &mut DecoderModel, grads: &Grads, config: &TrainingConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for (name, param) in model.params_mut() {
            let g = &grads.map[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for i in 0..param.data.len() {
                let gi = g.data[i];
                m.data[i] = config.beta1 * m.data[i] + (1.0 - config.beta1) * gi;
                v.data[i] = config.beta2 * v.data[i] + (1.0 - config.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                param.data[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps_adam);
            }
        }
    }
}

/// Scale gradients so the global norm is at most `clip`.
pub fn clip_global_norm(grads: &mut Grads, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip {
        grads.scale(clip / norm);
    }
    norm
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub sign_detect: f64,
    pub elapsed_ms: u128,
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,token_acc,sign_detect,elapsed_ms\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch, l.loss, l.token_acc, l.sign_detect, l.elapsed_ms
        ));
    }
    out
}

/// Full per-sample loss and gradients: MLE + λ_sign · sign loss +
/// attention regularizer, with the sign-loss gradient hooked into every
/// post-injection cell output.
pub fn sample_loss_and_grads(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    sample: &ToySample,
    sig: Option<&SignatureSpec>,
    lambda_sign: f64,
    lambda_att: f64,
    opts: &mut ForwardOpts,
) -> Result<(f64, Grads, Forward)> {
    let fwd = forward_teacher_forced(model, key, sample, opts)?;
    let logits: Vec<Vec<f64>> = fwd.steps.iter().map(|s| s.logits.clone()).collect();
    let (mle, dlogits) = mle_loss(&logits, &fwd.targets)?;
    let mut total = mle;
    let dh = match sig {
        Some(sig) if lambda_sign > 0.0 => {
            let h_steps: Vec<Vec<f64>> = fwd.steps.iter().map(|s| s.h.clone()).collect();
            let (sl, mut dh) = sign_loss(&h_steps, sig)?;
            total += lambda_sign * sl;
            for step in dh.iter_mut() {
                for g in step.iter_mut() {
                    *g *= lambda_sign;
                }
            }
            Some(dh)
        }
        _ => None,
    };
    let alphas: Vec<Vec<f64>> = fwd.steps.iter().map(|s| s.alpha.clone()).collect();
    let (ar, dalpha) = attention_reg(&alphas, lambda_att);
    total += ar;
    let grads = backward(
        model,
        key,
        &fwd,
        &dlogits,
        dh.as_deref(),
        Some(&dalpha),
    )?;
    Ok((total, grads, fwd))
}

/// Teacher-forced argmax accuracy over a sample set (no dropout).
pub fn token_accuracy(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    samples: &[ToySample],
) -> Result<f64> {
    token_accuracy_with(model, key, samples, None)
}

/// Accuracy variant honoring an inference-time sign clamp.
pub fn token_accuracy_with(
    model: &DecoderModel,
    key: Option<&SecretKey>,
    samples: &[ToySample],
    clamp: Option<&crate::seqmodel::SignClamp>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let mut opts = ForwardOpts { dropout: 0.0, rng: None, sign_clamp: clamp };
        let fwd = forward_teacher_forced(model, key, sample, &mut opts)?;
        for (step, &target) in fwd.steps.iter().zip(&fwd.targets) {
            let mut best = 0;
            for (i, l) in step.logits.iter().enumerate() {
                if *l > step.logits[best] {
                    best = i;
                }
            }
            if best == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn epoch_order(
    n_clean: usize,
    trigger_count: usize,
    interval: usize,
    rng: &mut SeededRng,
) -> Vec<(bool, usize)> {
    let mut clean: Vec<usize> = (0..n_clean).collect();
    rng.shuffle(&mut clean);
    let mut order = Vec::with_capacity(n_clean + n_clean / interval.max(1) + 1);
    let mut trig_idx = 0usize;
    for (i, idx) in clean.into_iter().enumerate() {
        order.push((false, idx));
        if trigger_count > 0 && (i + 1) % interval == 0 {
            order.push((true, trig_idx % trigger_count));
            trig_idx += 1;
        }
    }
    order
}

fn run_epochs(
    model: &mut DecoderModel,
    samples: &[ToySample],
    trigger: &[ToySample],
    config: &TrainingConfig,
    key: Option<&SecretKey>,
    sig: Option<&SignatureSpec>,
    lambda_sign: f64,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if model.embed_op != EmbedOp::None && key.is_none() {
        return Err(HkrError::Key("protected model requires a key for training".into()));
    }
    let mut adam = AdamState::new(model);
    let mut shuffle_rng = SeededRng::new(config.seed ^ 0x5_17FF);
    let mut dropout_rng = SeededRng::new(config.seed ^ 0xD20);
    let mut logs = Vec::with_capacity(config.epochs);
    let probe_len = samples.len().min(32);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = epoch_order(
            samples.len(),
            trigger.len(),
            config.trigger_interval,
            &mut shuffle_rng,
        );
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch) {
            let mut grads: Option<Grads> = None;
            for &(is_trigger, idx) in batch {
                let sample = if is_trigger { &trigger[idx] } else { &samples[idx] };
                let mut opts = ForwardOpts {
                    dropout: config.dropout,
                    rng: Some(&mut dropout_rng),
                    sign_clamp: None,
                };
                let (loss, g, _) = sample_loss_and_grads(
                    model,
                    key,
                    sample,
                    sig,
                    lambda_sign,
                    config.lambda_att,
                    &mut opts,
                )?;
                loss_sum += loss;
                seen += 1;
                match grads.as_mut() {
                    Some(total) => total.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            if let Some(mut grads) = grads {
                grads.scale(1.0 / batch.len() as f64);
                clip_global_norm(&mut grads, config.clip_norm);
                adam.update(model, &grads, config);
            }
        }
        let token_acc = token_accuracy(model, key, &samples[..probe_len])?;
        let sign_detect = match sig {
            Some(sig) => {
                let extracted = crate::verification::extract_signature(
                    model,
                    key,
                    &samples[..probe_len],
                )?;
                crate::verification::detection_rate(&extracted, &sig.g)?
            }
            None => 0.0,
        };
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            token_acc,
            sign_detect,
            elapsed_ms: start.elapsed().as_millis(),
        });
    }
    Ok(logs)
}

/// Train a fresh model. The trigger set, when given, is interleaved into
/// every epoch at the configured ratio.
pub fn train(
    samples: &[ToySample],
    vocab_size: usize,
    feat_dims: (usize, usize),
    embed_op: EmbedOp,
    config: &TrainingConfig,
    key: Option<&SecretKey>,
    sig: Option<&SignatureSpec>,
    trigger: Option<&[ToySample]>,
) -> Result<(DecoderModel, Vec<EpochLog>)> {
    let (r, d) = feat_dims;
    let dims = Dims {
        v: vocab_size,
        e: config.embed_e,
        n: config.hidden_n,
        d,
        a: config.att_a,
        r,
    };
    if let Some(key) = key {
        if key.len() != dims.n {
            return Err(HkrError::Key(format!(
                "key length {} does not match hidden size {}",
                key.len(),
                dims.n
            )));
        }
    }
    let mut model = DecoderModel::init(dims, embed_op, config.seed);
    let trigger_samples: Vec<ToySample> = trigger.map(|t| t.to_vec()).unwrap_or_default();
    let logs = run_epochs(
        &mut model,
        samples,
        &trigger_samples,
        config,
        key,
        sig,
        if sig.is_some() { config.lambda_sign } else { 0.0 },
    )?;
    Ok((model, logs))
}

/// Attacker fine-tuning: continues training WITHOUT sign loss, with the
/// (correct) key still plugged in — the attacker has runtime access but
/// no signature knowledge.
pub fn finetune(
    model: &DecoderModel,
    samples: &[ToySample],
    config: &TrainingConfig,
    key: Option<&SecretKey>,
) -> Result<(DecoderModel, Vec<EpochLog>)> {
    let mut model = model.clone();
    let logs = run_epochs(&mut model, samples, &[], config, key, None, 0.0)?;
    Ok((model, logs))
}

/// Key/signature overwrite attack: continues training with the attacker's
/// key and sign loss toward the attacker's signature.
pub fn finetune_key_signature(
    model: &DecoderModel,
    samples: &[ToySample],
    config: &TrainingConfig,
    new_key: Option<&SecretKey>,
    new_sig: &SignatureSpec,
) -> Result<(DecoderModel, Vec<EpochLog>)> {
    let mut model = model.clone();
    let logs = run_epochs(
        &mut model,
        samples,
        &[],
        config,
        new_key,
        Some(new_sig),
        config.lambda_sign,
    )?;
    Ok((model, logs))
}
