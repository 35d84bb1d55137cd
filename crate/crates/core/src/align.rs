//! Supervised fine-tuning and random-rejection DPO.
//!
//! RDPO builds preference pairs while collating a batch: every example keeps
//! its own report as the chosen response, and the report of another example
//! of the same batch, drawn uniformly, becomes the rejected response. The
//! per-pair loss is
//!
//! ```text
//! m_i    = β·(log π_θ(y_w|x) − log π_ref(y_w|x)) − β·(log π_θ(y_l|x) − log π_ref(y_l|x))
//! loss_i = −log σ(m_i)
//! ```
//!
//! and the batch loss is the mean over pairs.
//!
//! # Optimizer
//!
//! Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`. For step `t` (starting at 1)
//! and gradient `g` of the loss:
//!
//! ```text
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//! ```
//!
//! A zero update leaves the parameter bits untouched.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::model::{AdapterSet, Checkpoint, CheckpointMeta, Dims, Gradient, ModelParams, Policy, Stage, TensorSet};
use crate::synthcxr::{Example, ImageSample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lora_alpha: f64,
    pub lora_rank: usize,
    /// Hidden width `d` of a freshly initialized model (SFT only).
    pub hidden: usize,
    /// Init scale of a freshly initialized model (SFT only).
    pub init_scale: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Alignment defaults: LoRA `alpha = 16`, `r = 8`, cosine schedule from
    /// `1e-6`, batch 64, 3 epochs, `beta = 0.1`.
    pub fn rdpo() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-6,
            batch_size: 64,
            epochs: 3,
            lora_alpha: 16.0,
            lora_rank: 8,
            hidden: 32,
            init_scale: 0.5,
            seed: 0,
        }
    }

    /// Supervised defaults for training the small model from scratch.
    pub fn sft() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 32,
            epochs: 200,
            ..Self::rdpo()
        }
    }

    /// RDPO defaults with a step size large enough to move the small model
    /// within three epochs.
    pub fn rdpo_desk() -> Self {
        Self {
            lr: 3.5e-3,
            ..Self::rdpo()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if !self.lora_alpha.is_finite() {
            return bad(format!("lora_alpha must be finite, got {}", self.lora_alpha));
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        Ok(())
    }

    /// Overlays the keys of a JSON object onto `self`. Unknown keys are
    /// rejected.
    pub fn merged_with_json(&self, json: &str) -> Result<Self> {
        let overrides: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("train config: {e}")))?;
        let serde_json::Value::Object(overrides) = overrides else {
            return Err(Error::Config("train config must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct PreferenceTriple<'a> {
    pub image: &'a ImageSample,
    pub chosen: &'a [usize],
    pub rejected: &'a [usize],
    pub chosen_index: usize,
    pub rejected_index: usize,
}

/// Pairs every example with the report of another, uniformly drawn member of
/// the same batch (rejection sampling on `rng`).
pub fn collate_preference_batch<'a>(batch: &[&'a Example], rng: &mut impl Rng) -> Result<Vec<PreferenceTriple<'a>>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Config(format!("preference collation needs at least 2 examples, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for (i, ex) in batch.iter().enumerate() {
        let j = loop {
            let j = rng.random_range(0..n);
            if j != i {
                break j;
            }
        };
        out.push(PreferenceTriple {
            image: &ex.image,
            chosen: &ex.report.tokens,
            rejected: &batch[j].report.tokens,
            chosen_index: i,
            rejected_index: j,
        });
    }
    Ok(out)
}

/// Frozen copy of the starting checkpoint.
#[derive(Debug)]
pub struct ReferenceSnapshot {
    params: ModelParams,
    digest: String,
}

impl ReferenceSnapshot {
    pub fn freeze(params: &ModelParams) -> Self {
        Self {
            params: params.clone(),
            digest: tensor_digest(params),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn policy(&self) -> Result<Policy<'_>> {
        Policy::new(&self.params, None)
    }

    /// Digest taken at freeze time.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn is_intact(&self) -> bool {
        tensor_digest(&self.params) == self.digest
    }
}

/// SHA-256 over the little-endian bytes of every tensor, hex encoded.
pub fn tensor_digest(set: &impl TensorSet) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in set.tensors() {
        h.update(name.as_bytes());
        for v in t {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// `−log σ(m) = log(1 + e^{−m})`, split so neither branch overflows.
pub fn neg_log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct DpoOutput {
    pub loss: f64,
    pub margins: Vec<f64>,
    pub losses: Vec<f64>,
    pub gradient: Option<Gradient>,
}

impl DpoOutput {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }

    /// Fraction of pairs with a strictly positive margin.
    pub fn reward_accuracy(&self) -> f64 {
        self.margins.iter().filter(|&&m| m > 0.0).count() as f64 / self.margins.len() as f64
    }
}

struct PairTerms {
    margin: f64,
    loss: f64,
    grad: Option<Gradient>,
}

fn pair_terms(
    policy: &Policy<'_>,
    reference: &Policy<'_>,
    pair: usize,
    t: &PreferenceTriple<'_>,
    beta: f64,
    want_grad: bool,
) -> Result<PairTerms> {
    let (lw, ll, grads) = if want_grad {
        let (lw, gw) = policy.grad_sequence_log_prob(t.image, t.chosen)?;
        let (ll, gl) = policy.grad_sequence_log_prob(t.image, t.rejected)?;
        (lw, ll, Some((gw, gl)))
    } else {
        (
            policy.sequence_log_prob(t.image, t.chosen)?,
            policy.sequence_log_prob(t.image, t.rejected)?,
            None,
        )
    };
    let rw = reference.sequence_log_prob(t.image, t.chosen)?;
    let rl = reference.sequence_log_prob(t.image, t.rejected)?;
    if ![lw, ll, rw, rl].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { pair });
    }
    let margin = beta * (lw - rw) - beta * (ll - rl);
    let loss = neg_log_sigmoid(margin);
    let grad = grads
        .map(|(mut gw, gl)| -> Result<Gradient> {
            gw.add_scaled(&gl, -1.0)?;
            gw.scale(-sigmoid(-margin) * beta);
            Ok(gw)
        })
        .transpose()?;
    Ok(PairTerms { margin, loss, grad })
}

/// Mean DPO loss over `triples`, the per-pair margins, and optionally the
/// gradient with respect to the policy's trainable set. Pairs are evaluated
/// with `exec`; the reduction runs in pair order.
pub fn dpo_loss_and_gradient(
    policy: &Policy<'_>,
    reference: &ReferenceSnapshot,
    triples: &[PreferenceTriple<'_>],
    beta: f64,
    want_grad: bool,
    exec: Exec,
) -> Result<DpoOutput> {
    if triples.is_empty() {
        return Err(Error::Data("no preference pairs".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let ref_policy = reference.policy()?;
    let indexed: Vec<(usize, &PreferenceTriple<'_>)> = triples.iter().enumerate().collect();
    let terms = exec.map(&indexed, |&(i, t)| pair_terms(policy, &ref_policy, i, t, beta, want_grad));

    let n = triples.len() as f64;
    let mut margins = Vec::with_capacity(triples.len());
    let mut losses = Vec::with_capacity(triples.len());
    let mut gradient: Option<Gradient> = None;
    for term in terms {
        let term = term?;
        margins.push(term.margin);
        losses.push(term.loss);
        if let Some(g) = term.grad {
            match gradient.as_mut() {
                None => gradient = Some(g),
                Some(acc) => acc.add_scaled(&g, 1.0)?,
            }
        }
    }
    if let Some(g) = gradient.as_mut() {
        g.scale(1.0 / n);
    }
    let loss = losses.iter().sum::<f64>() / n;
    Ok(DpoOutput {
        loss,
        margins,
        losses,
        gradient,
    })
}

/// `(mean loss, per-pair margins)`.
pub fn dpo_loss(
    policy: &Policy<'_>,
    reference: &ReferenceSnapshot,
    triples: &[PreferenceTriple<'_>],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let out = dpo_loss_and_gradient(policy, reference, triples, beta, false, Exec::default())?;
    Ok((out.loss, out.margins))
}

pub fn dpo_gradient(
    policy: &Policy<'_>,
    reference: &ReferenceSnapshot,
    triples: &[PreferenceTriple<'_>],
    beta: f64,
) -> Result<Gradient> {
    let out = dpo_loss_and_gradient(policy, reference, triples, beta, true, Exec::default())?;
    Ok(out.gradient.expect("gradient requested"))
}

/// `β · (log π_θ(y|x) − log π_ref(y|x))`.
pub fn implicit_reward(
    policy: &Policy<'_>,
    reference: &ReferenceSnapshot,
    image: &ImageSample,
    tokens: &[usize],
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let lp = policy.sequence_log_prob(image, tokens)?;
    let lr = reference.policy()?.sequence_log_prob(image, tokens)?;
    Ok(beta * (lp - lr))
}

/// Token-level mean cross-entropy over `batch`, with its gradient when asked.
pub fn sft_loss_and_gradient(
    policy: &Policy<'_>,
    batch: &[&Example],
    want_grad: bool,
    exec: Exec,
) -> Result<(f64, Option<Gradient>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty SFT batch".into()));
    }
    if let Some(ex) = batch.iter().find(|ex| ex.report.tokens.is_empty()) {
        return Err(Error::Data(format!("example {} has an empty report", ex.id)));
    }
    let per_example = exec.map(batch, |ex| -> Result<(f64, Option<Gradient>)> {
        if want_grad {
            policy
                .grad_sequence_log_prob(&ex.image, &ex.report.tokens)
                .map(|(lp, g)| (lp, Some(g)))
        } else {
            policy.sequence_log_prob(&ex.image, &ex.report.tokens).map(|lp| (lp, None))
        }
    });
    let positions: usize = batch.iter().map(|ex| ex.report.tokens.len()).sum();
    let mut total = 0.0;
    let mut gradient: Option<Gradient> = None;
    for r in per_example {
        let (lp, g) = r?;
        total += lp;
        if let Some(g) = g {
            match gradient.as_mut() {
                None => gradient = Some(g),
                Some(acc) => acc.add_scaled(&g, 1.0)?,
            }
        }
    }
    let inv = 1.0 / positions as f64;
    if let Some(g) = gradient.as_mut() {
        g.scale(-inv);
    }
    Ok((-total * inv, gradient))
}

pub fn sft_loss(policy: &Policy<'_>, batch: &[&Example]) -> Result<f64> {
    sft_loss_and_gradient(policy, batch, false, Exec::default()).map(|(l, _)| l)
}

pub fn sft_gradient(policy: &Policy<'_>, batch: &[&Example]) -> Result<Gradient> {
    sft_loss_and_gradient(policy, batch, true, Exec::default()).map(|(_, g)| g.expect("gradient requested"))
}

/// `lr_base · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be at least 1".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total_steps {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &impl TensorSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn optimizer_step(
    state: &mut AdamState,
    params: &mut impl TensorSet,
    grad: &impl TensorSet,
    lr: f64,
) -> Result<()> {
    let g = grad.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len() || state.m.len() != p.len() {
        return Err(Error::Shape(format!(
            "optimizer over {} tensors got {} parameters and {} gradients",
            state.m.len(),
            p.len(),
            g.len()
        )));
    }
    for (i, ((name, pt), (_, gt))) in p.iter().zip(&g).enumerate() {
        if pt.len() != gt.len() || state.m[i].len() != pt.len() {
            return Err(Error::Shape(format!("tensor {name}: parameter/gradient/moment length mismatch")));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, ((_, pt), (_, gt))) in p.iter_mut().zip(&g).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..pt.len() {
            let gk = gt[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            if update != 0.0 {
                pt[k] -= update;
            }
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mean_margin: Option<f64>,
    pub reward_acc: Option<f64>,
}

/// Batch layout of a run over `n` examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub n: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
}

impl Schedule {
    /// A trailing partial batch is kept when it holds at least 2 examples.
    pub fn new(n: usize, cfg: &TrainConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("empty training corpus".into()));
        }
        if cfg.batch_size > n {
            return Err(Error::Config(format!("batch_size {} exceeds corpus size {n}", cfg.batch_size)));
        }
        let steps_per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size >= 2);
        Ok(Self {
            n,
            batch_size: cfg.batch_size,
            steps_per_epoch,
            total_steps: (steps_per_epoch * cfg.epochs) as u64,
        })
    }

    fn batch_bounds(&self, k: usize) -> (usize, usize) {
        let start = k * self.batch_size;
        (start, (start + self.batch_size).min(self.n))
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    /// Example order of the current epoch.
    pub order: Vec<usize>,
    pub rng: ChaCha8Rng,
    pub optimizer: AdamState,
    pub lr: f64,
    pub history: Vec<LogRecord>,
}

impl TrainState {
    fn new(seed: u64, trainable: &impl TensorSet) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer: AdamState::new(trainable),
            lr: 0.0,
            history: Vec::new(),
        }
    }

    /// Indices of the next batch; reshuffles at the start of every epoch.
    fn next_batch(&mut self, schedule: &Schedule) -> Vec<usize> {
        if self.batch_in_epoch == 0 {
            self.order = (0..schedule.n).collect();
            self.order.shuffle(&mut self.rng);
        }
        let (a, b) = schedule.batch_bounds(self.batch_in_epoch);
        self.order[a..b].to_vec()
    }

    fn advance(&mut self, schedule: &Schedule) {
        self.step += 1;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch == schedule.steps_per_epoch {
            self.batch_in_epoch = 0;
            self.epoch += 1;
        }
    }
}

/// Stream used for parameter initialization; stream 0 drives batching.
fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

enum Mode {
    Sft {
        params: ModelParams,
    },
    Rdpo {
        reference: ReferenceSnapshot,
        base: ModelParams,
        adapters: AdapterSet,
    },
}

/// Training loop shared by both stages.
pub struct Trainer {
    cfg: TrainConfig,
    schedule: Schedule,
    mode: Mode,
    state: TrainState,
    vocab_hash: String,
    dataset: String,
    exec: Exec,
}

impl Trainer {
    /// Supervised training of a freshly initialized model.
    pub fn sft(dims: Dims, vocab_hash: &str, dataset: &str, n_train: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = Dims { hidden: cfg.hidden, ..dims };
        let params = ModelParams::random(dims, cfg.init_scale, &mut init_rng(cfg.seed));
        let state = TrainState::new(cfg.seed, &params);
        Ok(Self {
            cfg: cfg.clone(),
            schedule: Schedule::new(n_train, cfg)?,
            mode: Mode::Sft { params },
            state,
            vocab_hash: vocab_hash.to_string(),
            dataset: dataset.to_string(),
            exec: Exec::default(),
        })
    }

    /// Alignment of an SFT checkpoint with freshly initialized adapters; the
    /// checkpoint is frozen as the reference.
    pub fn rdpo(sft: &Checkpoint, n_train: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if sft.adapters.is_some() {
            return Err(Error::Data("starting checkpoint already carries adapters".into()));
        }
        let adapters = AdapterSet::new(sft.params.dims, cfg.lora_alpha, cfg.lora_rank, &mut init_rng(cfg.seed))?;
        let state = TrainState::new(cfg.seed, &adapters);
        Ok(Self {
            cfg: cfg.clone(),
            schedule: Schedule::new(n_train, cfg)?,
            mode: Mode::Rdpo {
                reference: ReferenceSnapshot::freeze(&sft.params),
                base: sft.params.clone(),
                adapters,
            },
            state,
            vocab_hash: sft.meta.vocab_hash.clone(),
            dataset: sft.meta.dataset.clone(),
            exec: Exec::default(),
        })
    }

    /// Continues a run from a saved state and the trainable weights held in
    /// `partial` (the checkpoint written when the run stopped).
    pub fn resume(start: Option<&Checkpoint>, partial: &Checkpoint, n_train: usize, cfg: &TrainConfig, state: TrainState) -> Result<Self> {
        let mut t = match (start, partial.meta.stage) {
            (None, Stage::Sft) => Self::sft(partial.params.dims, &partial.meta.vocab_hash, &partial.meta.dataset, n_train, cfg)?,
            (Some(sft), Stage::Rdpo) => Self::rdpo(sft, n_train, cfg)?,
            _ => return Err(Error::Data("resume checkpoint stage does not match the run".into())),
        };
        if state.order.len() != n_train && !(state.order.is_empty() && state.step == 0) {
            return Err(Error::Data("saved training state belongs to a corpus of a different size".into()));
        }
        match &mut t.mode {
            Mode::Sft { params } => *params = partial.params.clone(),
            Mode::Rdpo { base, adapters, .. } => {
                if tensor_digest(base) != tensor_digest(&partial.params) {
                    return Err(Error::Data("resume checkpoint base weights differ from the starting checkpoint".into()));
                }
                *adapters = partial
                    .adapters
                    .clone()
                    .ok_or_else(|| Error::Data("resume checkpoint has no adapters".into()))?;
            }
        }
        if state.optimizer.m.len() != t.trainable_tensor_count() {
            return Err(Error::Data("saved optimizer state does not match the trainable parameters".into()));
        }
        t.state = state;
        Ok(t)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.schedule.total_steps
    }

    pub fn reference(&self) -> Option<&ReferenceSnapshot> {
        match &self.mode {
            Mode::Rdpo { reference, .. } => Some(reference),
            Mode::Sft { .. } => None,
        }
    }

    fn trainable_tensor_count(&self) -> usize {
        match &self.mode {
            Mode::Sft { params } => params.tensors().len(),
            Mode::Rdpo { adapters, .. } => adapters.tensors().len(),
        }
    }

    pub fn policy(&self) -> Result<Policy<'_>> {
        match &self.mode {
            Mode::Sft { params } => Policy::new(params, None),
            Mode::Rdpo { base, adapters, .. } => Policy::new(base, Some(adapters)),
        }
    }

    /// One optimizer step on the next batch; returns its log record.
    pub fn step(&mut self, train: &[Example]) -> Result<LogRecord> {
        if train.len() != self.schedule.n {
            return Err(Error::Data(format!(
                "trainer was set up for {} examples, got {}",
                self.schedule.n,
                train.len()
            )));
        }
        if self.is_finished() {
            return Err(Error::Data("training already finished".into()));
        }
        let idx = self.state.next_batch(&self.schedule);
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let lr = cosine_lr(self.state.step, self.schedule.total_steps, self.cfg.lr)?;
        let record = match &mut self.mode {
            Mode::Sft { params } => {
                let (loss, grad) = {
                    let policy = Policy::new(params, None)?;
                    sft_loss_and_gradient(&policy, &batch, true, self.exec)?
                };
                let grad = grad.expect("gradient requested");
                let Gradient::Full(g) = &grad else {
                    unreachable!("full-model policy yields full gradients")
                };
                optimizer_step(&mut self.state.optimizer, params, g, lr)?;
                LogRecord {
                    step: self.state.step,
                    lr,
                    loss,
                    mean_margin: None,
                    reward_acc: None,
                }
            }
            Mode::Rdpo {
                reference,
                base,
                adapters,
            } => {
                let triples = collate_preference_batch(&batch, &mut self.state.rng)?;
                let out = {
                    let policy = Policy::new(base, Some(adapters))?;
                    dpo_loss_and_gradient(&policy, reference, &triples, self.cfg.beta, true, self.exec)?
                };
                let Some(Gradient::Adapters(g)) = &out.gradient else {
                    unreachable!("adapter policy yields adapter gradients")
                };
                optimizer_step(&mut self.state.optimizer, adapters, g, lr)?;
                LogRecord {
                    step: self.state.step,
                    lr,
                    loss: out.loss,
                    mean_margin: Some(out.mean_margin()),
                    reward_acc: Some(out.reward_accuracy()),
                }
            }
        };
        self.state.lr = lr;
        self.state.history.push(record.clone());
        self.state.advance(&self.schedule);
        Ok(record)
    }

    /// Steps until finished, or until `max_steps` more steps have run.
    pub fn run(&mut self, train: &[Example], max_steps: Option<u64>) -> Result<()> {
        let mut done = 0u64;
        while !self.is_finished() && max_steps.is_none_or(|m| done < m) {
            self.step(train)?;
            done += 1;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (stage, params, adapters) = match &self.mode {
            Mode::Sft { params } => (Stage::Sft, params.clone(), None),
            Mode::Rdpo { base, adapters, .. } => (Stage::Rdpo, base.clone(), Some(adapters.clone())),
        };
        Checkpoint {
            meta: CheckpointMeta {
                stage,
                vocab_hash: self.vocab_hash.clone(),
                method: METHOD_LABEL.to_string(),
                dataset: self.dataset.clone(),
            },
            params,
            adapters,
        }
    }
}

/// Row label written into checkpoints produced here.
pub const METHOD_LABEL: &str = "synthcxr-lm";

/// Runs supervised training to completion.
pub fn train_sft(train: &[Example], dims: Dims, vocab_hash: &str, dataset: &str, cfg: &TrainConfig) -> Result<(Checkpoint, TrainState)> {
    let mut t = Trainer::sft(dims, vocab_hash, dataset, train.len(), cfg)?;
    t.run(train, None)?;
    Ok((t.checkpoint(), t.state().clone()))
}

/// Runs RDPO alignment of `sft` to completion.
pub fn train_rdpo(train: &[Example], sft: &Checkpoint, cfg: &TrainConfig) -> Result<(Checkpoint, TrainState)> {
    let mut t = Trainer::rdpo(sft, train.len(), cfg)?;
    t.run(train, None)?;
    Ok((t.checkpoint(), t.state().clone()))
}
