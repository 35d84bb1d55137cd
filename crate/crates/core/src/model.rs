//! Image-conditioned next-token model with exact gradients.
//!
//! For position `t` of a report with tokens `y`, the model computes
//!
//! ```text
//! h_t      = tanh(W1 · E[y_{t-1}] + W2 · E[y_{t-2}] + P · vec(x) + b_h)
//! logits_t = W_out · h_t + b_out
//! ```
//!
//! with `y_{-1} = y_{-2} = BOS`. Low-rank adapters, when attached, replace
//! `W1` and `W_out` by `W + (alpha / r) · B · A`; the base matrices are then
//! frozen and gradients are reported for `A` and `B` only.

use std::borrow::Cow;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::synthcxr::{ImageSample, BOS, EOS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub hidden: usize,
    pub grid: usize,
}

impl Dims {
    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }
}

/// Read-only and mutable access to a fixed list of flat `f64` tensors.
pub trait TensorSet {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn flat1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    /// `V x d`
    pub embed: Array2<f64>,
    /// `d x G²`
    pub img_proj: Array2<f64>,
    /// `d x d`, applied to the previous token
    pub ctx1: Array2<f64>,
    /// `d x d`, applied to the token before that
    pub ctx2: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    /// `V x d`
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

pub(crate) const PARAM_NAMES: [&str; 7] = ["embed", "img_proj", "ctx1", "ctx2", "hidden_bias", "out_w", "out_b"];

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let (v, d, p) = (dims.vocab, dims.hidden, dims.pixels());
        Self {
            dims,
            embed: Array2::zeros((v, d)),
            img_proj: Array2::zeros((d, p)),
            ctx1: Array2::zeros((d, d)),
            ctx2: Array2::zeros((d, d)),
            hidden_bias: Array1::zeros(d),
            out_w: Array2::zeros((v, d)),
            out_b: Array1::zeros(v),
        }
    }

    /// Gaussian init: embeddings with std `scale`, matrices with std
    /// `scale / sqrt(fan_in)`, biases zero.
    pub fn random(dims: Dims, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        let mut fill = |a: &mut Array2<f64>, std: f64| {
            let n = Normal::new(0.0, std).expect("finite std");
            a.mapv_inplace(|_| n.sample(rng));
        };
        let (d, px) = (dims.hidden as f64, dims.pixels() as f64);
        fill(&mut p.embed, scale);
        fill(&mut p.img_proj, scale / px.sqrt());
        fill(&mut p.ctx1, scale / d.sqrt());
        fill(&mut p.ctx2, scale / d.sqrt());
        fill(&mut p.out_w, scale / d.sqrt());
        p
    }

    pub fn shape_of(dims: Dims, name: &str) -> Option<Vec<usize>> {
        let (v, d, p) = (dims.vocab, dims.hidden, dims.pixels());
        Some(match name {
            "embed" | "out_w" => vec![v, d],
            "img_proj" => vec![d, p],
            "ctx1" | "ctx2" => vec![d, d],
            "hidden_bias" => vec![d],
            "out_b" => vec![v],
            _ => return None,
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let shapes: [(&str, &[usize]); 7] = [
            ("embed", self.embed.shape()),
            ("img_proj", self.img_proj.shape()),
            ("ctx1", self.ctx1.shape()),
            ("ctx2", self.ctx2.shape()),
            ("hidden_bias", self.hidden_bias.shape()),
            ("out_w", self.out_w.shape()),
            ("out_b", self.out_b.shape()),
        ];
        for (name, shape) in shapes {
            let want = Self::shape_of(self.dims, name).expect("known tensor");
            if shape != want.as_slice() {
                return Err(Error::Shape(format!("{name} has shape {shape:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl TensorSet for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embed", flat(&self.embed)),
            ("img_proj", flat(&self.img_proj)),
            ("ctx1", flat(&self.ctx1)),
            ("ctx2", flat(&self.ctx2)),
            ("hidden_bias", flat1(&self.hidden_bias)),
            ("out_w", flat(&self.out_w)),
            ("out_b", flat1(&self.out_b)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embed", flat_mut(&mut self.embed)),
            ("img_proj", flat_mut(&mut self.img_proj)),
            ("ctx1", flat_mut(&mut self.ctx1)),
            ("ctx2", flat_mut(&mut self.ctx2)),
            ("hidden_bias", flat1_mut(&mut self.hidden_bias)),
            ("out_w", flat_mut(&mut self.out_w)),
            ("out_b", flat1_mut(&mut self.out_b)),
        ]
    }
}

/// Rank-`r` update `B · A` for a `d_out x d_in` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Array2<f64>,
    /// `d_out x r`
    pub b: Array2<f64>,
}

impl LoraAdapter {
    fn new(d_out: usize, d_in: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("finite std");
        Self {
            a: Array2::from_shape_simple_fn((rank, d_in), || n.sample(rng)),
            b: Array2::zeros((d_out, rank)),
        }
    }
}

/// Adapters on `ctx1` (the previous-token context matrix) and `out_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub alpha: f64,
    pub rank: usize,
    pub ctx1: LoraAdapter,
    pub out_w: LoraAdapter,
}

pub(crate) const ADAPTER_TARGETS: [&str; 2] = ["ctx1", "out_w"];
pub(crate) const ADAPTER_NAMES: [&str; 4] = ["ctx1.lora_a", "ctx1.lora_b", "out_w.lora_a", "out_w.lora_b"];

impl AdapterSet {
    /// Fresh adapters: `B = 0`, `A ~ N(0, 1/d_in)`.
    pub fn new(dims: Dims, alpha: f64, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::Config(format!("adapter alpha must be finite, got {alpha}")));
        }
        let d = dims.hidden;
        Ok(Self {
            alpha,
            rank,
            ctx1: LoraAdapter::new(d, d, rank, rng),
            out_w: LoraAdapter::new(dims.vocab, d, rank, rng),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &LoraAdapter| LoraAdapter {
            a: Array2::zeros(l.a.raw_dim()),
            b: Array2::zeros(l.b.raw_dim()),
        };
        Self {
            alpha: self.alpha,
            rank: self.rank,
            ctx1: z(&self.ctx1),
            out_w: z(&self.out_w),
        }
    }

    fn check_shapes(&self, dims: Dims) -> Result<()> {
        let (r, d, v) = (self.rank, dims.hidden, dims.vocab);
        let checks: [(&str, &[usize], [usize; 2]); 4] = [
            ("ctx1.lora_a", self.ctx1.a.shape(), [r, d]),
            ("ctx1.lora_b", self.ctx1.b.shape(), [d, r]),
            ("out_w.lora_a", self.out_w.a.shape(), [r, d]),
            ("out_w.lora_b", self.out_w.b.shape(), [v, r]),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("adapter {name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    fn merged(&self, base: &Array2<f64>, adapter: &LoraAdapter) -> Array2<f64> {
        let delta = adapter.b.dot(&adapter.a) * self.scale();
        base + &delta
    }
}

impl TensorSet for AdapterSet {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            (ADAPTER_NAMES[0], flat(&self.ctx1.a)),
            (ADAPTER_NAMES[1], flat(&self.ctx1.b)),
            (ADAPTER_NAMES[2], flat(&self.out_w.a)),
            (ADAPTER_NAMES[3], flat(&self.out_w.b)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            (ADAPTER_NAMES[0], flat_mut(&mut self.ctx1.a)),
            (ADAPTER_NAMES[1], flat_mut(&mut self.ctx1.b)),
            (ADAPTER_NAMES[2], flat_mut(&mut self.out_w.a)),
            (ADAPTER_NAMES[3], flat_mut(&mut self.out_w.b)),
        ]
    }
}

/// Gradient over whichever parameter set is being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Gradient {
    Full(ModelParams),
    Adapters(AdapterSet),
}

impl Gradient {
    pub fn zeros_like(&self) -> Self {
        match self {
            Gradient::Full(p) => Gradient::Full(ModelParams::zeros(p.dims)),
            Gradient::Adapters(a) => Gradient::Adapters(a.zeros_like()),
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Gradient, k: f64) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("gradients over different parameter sets".into()));
        }
        for ((name, d), (_, s)) in dst.iter_mut().zip(&src) {
            if d.len() != s.len() {
                return Err(Error::Shape(format!("gradient tensor {name} length mismatch")));
            }
            for (x, y) in d.iter_mut().zip(s.iter()) {
                *x += k * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_adapters(&self) -> bool {
        matches!(self, Gradient::Adapters(_))
    }
}

impl TensorSet for Gradient {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Gradient::Full(p) => p.tensors(),
            Gradient::Adapters(a) => a.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Gradient::Full(p) => p.tensors_mut(),
            Gradient::Adapters(a) => a.tensors_mut(),
        }
    }
}

/// A model ready for evaluation: base weights plus optional adapters merged
/// into effective matrices once.
pub struct Policy<'a> {
    base: &'a ModelParams,
    adapters: Option<&'a AdapterSet>,
    ctx1: Cow<'a, Array2<f64>>,
    out_w: Cow<'a, Array2<f64>>,
}

impl<'a> Policy<'a> {
    pub fn new(base: &'a ModelParams, adapters: Option<&'a AdapterSet>) -> Result<Self> {
        base.check_shapes()?;
        let (ctx1, out_w) = match adapters {
            Some(ad) => {
                ad.check_shapes(base.dims)?;
                (
                    Cow::Owned(ad.merged(&base.ctx1, &ad.ctx1)),
                    Cow::Owned(ad.merged(&base.out_w, &ad.out_w)),
                )
            }
            None => (Cow::Borrowed(&base.ctx1), Cow::Borrowed(&base.out_w)),
        };
        Ok(Self {
            base,
            adapters,
            ctx1,
            out_w,
        })
    }

    pub fn dims(&self) -> Dims {
        self.base.dims
    }

    fn check_image(&self, image: &ImageSample) -> Result<()> {
        if image.pixels.len() != self.base.dims.pixels() {
            return Err(Error::Shape(format!(
                "image has {} pixels, model expects {}",
                image.pixels.len(),
                self.base.dims.pixels()
            )));
        }
        Ok(())
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.base.dims.vocab {
            return Err(Error::Shape(format!("token {t} outside vocabulary of {}", self.base.dims.vocab)));
        }
        Ok(())
    }

    /// `P · vec(x) + b_h`, shared by every position of a sequence.
    fn image_term(&self, image: &ImageSample) -> Array1<f64> {
        let x = ArrayView1::from(image.flat());
        self.base.img_proj.dot(&x) + &self.base.hidden_bias
    }

    fn hidden(&self, img: &Array1<f64>, prev1: usize, prev2: usize) -> Array1<f64> {
        let e = &self.base.embed;
        let mut pre = self.ctx1.dot(&e.row(prev1));
        pre += &self.base.ctx2.dot(&e.row(prev2));
        pre += img;
        pre.mapv_inplace(f64::tanh);
        pre
    }

    fn output(&self, h: &Array1<f64>) -> Array1<f64> {
        self.out_w.dot(h) + &self.base.out_b
    }

    /// Next-token logits given `(previous token, token before that)`.
    pub fn logits(&self, image: &ImageSample, prev: (usize, usize)) -> Result<Array1<f64>> {
        self.check_image(image)?;
        self.check_token(prev.0)?;
        self.check_token(prev.1)?;
        let img = self.image_term(image);
        Ok(self.output(&self.hidden(&img, prev.0, prev.1)))
    }

    /// Natural-log probability of `tokens` given `image`.
    pub fn sequence_log_prob(&self, image: &ImageSample, tokens: &[usize]) -> Result<f64> {
        self.run(image, tokens, false).map(|(lp, _)| lp)
    }

    /// `(log π(tokens | image), ∇ log π)`; the gradient covers the adapters
    /// only when adapters are attached.
    pub fn grad_sequence_log_prob(&self, image: &ImageSample, tokens: &[usize]) -> Result<(f64, Gradient)> {
        self.run(image, tokens, true)
            .map(|(lp, g)| (lp, g.expect("gradient requested")))
    }

    /// Per-step log-probabilities (one entry per token).
    pub fn step_log_probs(&self, image: &ImageSample, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let img = self.image_term(image);
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            self.check_token(tok)?;
            let (p1, p2) = context(tokens, t);
            let logits = self.output(&self.hidden(&img, p1, p2));
            out.push(logits[tok] - log_sum_exp(&logits));
        }
        Ok(out)
    }

    fn run(&self, image: &ImageSample, tokens: &[usize], want_grad: bool) -> Result<(f64, Option<Gradient>)> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        self.check_image(image)?;
        for &t in tokens {
            self.check_token(t)?;
        }
        let dims = self.base.dims;
        let img = self.image_term(image);
        let mut g = want_grad.then(|| ModelParams::zeros(dims));
        let mut dpre_sum = Array1::<f64>::zeros(dims.hidden);
        let mut log_prob = 0.0;

        for (t, &tok) in tokens.iter().enumerate() {
            let (p1, p2) = context(tokens, t);
            let h = self.hidden(&img, p1, p2);
            let logits = self.output(&h);
            let lse = log_sum_exp(&logits);
            log_prob += logits[tok] - lse;

            let Some(g) = g.as_mut() else { continue };
            // d log p / d logits = onehot(tok) - softmax
            let mut dlogits = logits.mapv(|z| -(z - lse).exp());
            dlogits[tok] += 1.0;
            g.out_b += &dlogits;
            add_outer(&mut g.out_w, dlogits.view(), h.view());
            let dh = self.out_w.t().dot(&dlogits);
            let dpre = &dh * &h.mapv(|v| 1.0 - v * v);
            add_outer(&mut g.ctx1, dpre.view(), self.base.embed.row(p1));
            add_outer(&mut g.ctx2, dpre.view(), self.base.embed.row(p2));
            let de1 = self.ctx1.t().dot(&dpre);
            let de2 = self.base.ctx2.t().dot(&dpre);
            g.embed.row_mut(p1).scaled_add(1.0, &de1);
            g.embed.row_mut(p2).scaled_add(1.0, &de2);
            dpre_sum += &dpre;
        }

        let grad = g.map(|mut g| {
            g.hidden_bias += &dpre_sum;
            add_outer(&mut g.img_proj, dpre_sum.view(), ArrayView1::from(image.flat()));
            match self.adapters {
                None => Gradient::Full(g),
                Some(ad) => Gradient::Adapters(adapter_gradient(ad, &g)),
            }
        });
        Ok((log_prob, grad))
    }

    /// Argmax decoding, lowest id on ties; stops after EOS or `max_len` tokens.
    pub fn greedy_decode(&self, image: &ImageSample, max_len: usize) -> Result<Vec<usize>> {
        self.check_image(image)?;
        let img = self.image_term(image);
        let mut out: Vec<usize> = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let (p1, p2) = context(&out, out.len());
            let logits = self.output(&self.hidden(&img, p1, p2));
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate().skip(1) {
                if z > logits[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// Chain rule through `W_eff = W + s·B·A`: `dA = s·Bᵀ·G`, `dB = s·G·Aᵀ`.
fn adapter_gradient(ad: &AdapterSet, g: &ModelParams) -> AdapterSet {
    let s = ad.scale();
    let lora = |l: &LoraAdapter, gw: &Array2<f64>| LoraAdapter {
        a: (l.b.t().dot(gw) * s).as_standard_layout().into_owned(),
        b: (gw.dot(&l.a.t()) * s).as_standard_layout().into_owned(),
    };
    AdapterSet {
        alpha: ad.alpha,
        rank: ad.rank,
        ctx1: lora(&ad.ctx1, &g.ctx1),
        out_w: lora(&ad.out_w, &g.out_w),
    }
}

/// `(y_{t-1}, y_{t-2})` with BOS padding.
fn context(tokens: &[usize], t: usize) -> (usize, usize) {
    let p1 = if t >= 1 { tokens[t - 1] } else { BOS };
    let p2 = if t >= 2 { tokens[t - 2] } else { BOS };
    (p1, p2)
}

fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.axis_iter_mut(Axis(0)).zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

pub fn log_sum_exp(z: &Array1<f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn forward_logits(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    image: &ImageSample,
    prev: (usize, usize),
) -> Result<Array1<f64>> {
    Policy::new(params, adapters)?.logits(image, prev)
}

pub fn sequence_log_prob(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    image: &ImageSample,
    tokens: &[usize],
) -> Result<f64> {
    Policy::new(params, adapters)?.sequence_log_prob(image, tokens)
}

pub fn grad_sequence_log_prob(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    image: &ImageSample,
    tokens: &[usize],
) -> Result<Gradient> {
    Policy::new(params, adapters)?
        .grad_sequence_log_prob(image, tokens)
        .map(|(_, g)| g)
}

pub fn greedy_decode(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    image: &ImageSample,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Policy::new(params, adapters)?.greedy_decode(image, max_len)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8] = b"RDPO1\n";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Sft,
    Rdpo,
}

/// Provenance carried in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub vocab_hash: String,
    /// Row label for comparison tables.
    pub method: String,
    /// Training corpus label (its hash prefix).
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub adapters: Option<AdapterSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    alpha: f64,
    rank: usize,
    targets: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    dims: Dims,
    meta: CheckpointMeta,
    adapter: Option<AdapterHeader>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

impl Checkpoint {
    pub fn is_rdpo(&self) -> bool {
        self.meta.stage == Stage::Rdpo
    }

    pub fn policy(&self) -> Result<Policy<'_>> {
        Policy::new(&self.params, self.adapters.as_ref())
    }

    /// `RDPO1\n`, one line of JSON header, then little-endian `f64`
    /// payloads in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes()?;
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, data: &[f64]| {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset,
                bytes: payload.len() as u64 - offset,
            });
        };
        for (name, data) in self.params.tensors() {
            push(name, ModelParams::shape_of(self.params.dims, name).expect("known tensor"), data);
        }
        let adapter = match &self.adapters {
            None => None,
            Some(ad) => {
                ad.check_shapes(self.params.dims)?;
                let shapes = [ad.ctx1.a.shape(), ad.ctx1.b.shape(), ad.out_w.a.shape(), ad.out_w.b.shape()]
                    .map(|s| s.to_vec());
                for ((name, data), shape) in ad.tensors().into_iter().zip(shapes) {
                    push(name, shape, data);
                }
                Some(AdapterHeader {
                    alpha: ad.alpha,
                    rank: ad.rank,
                    targets: ADAPTER_TARGETS.iter().map(|s| s.to_string()).collect(),
                })
            }
        };
        let header = Header {
            format: CHECKPOINT_FORMAT,
            dims: self.params.dims,
            meta: self.meta.clone(),
            adapter,
            tensors: entries,
            payload_bytes: payload.len() as u64,
        };
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::checkpoint("magic", "expected \"RDPO1\\n\""))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::checkpoint("header", "missing header terminator"))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::checkpoint("header", e.to_string()))?;
        let payload = &rest[nl + 1..];
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::checkpoint("format", format!("unsupported version {}", header.format)));
        }
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::checkpoint(
                "payload_bytes",
                format!("header says {}, file has {}", header.payload_bytes, payload.len()),
            ));
        }
        let dims = header.dims;
        if dims.vocab == 0 || dims.hidden == 0 || dims.grid == 0 {
            return Err(Error::checkpoint("dims", "all dimensions must be positive"));
        }

        let mut expected: Vec<(String, Vec<usize>)> = PARAM_NAMES
            .iter()
            .map(|n| (n.to_string(), ModelParams::shape_of(dims, n).expect("known tensor")))
            .collect();
        if let Some(ad) = &header.adapter {
            if ad.rank == 0 {
                return Err(Error::checkpoint("adapter.rank", "must be at least 1"));
            }
            if ad.targets != ADAPTER_TARGETS {
                return Err(Error::checkpoint("adapter.targets", format!("expected {ADAPTER_TARGETS:?}")));
            }
            let (r, d, v) = (ad.rank, dims.hidden, dims.vocab);
            let shapes = [vec![r, d], vec![d, r], vec![r, d], vec![v, r]];
            expected.extend(ADAPTER_NAMES.iter().map(|n| n.to_string()).zip(shapes));
        }
        if header.tensors.len() != expected.len() {
            return Err(Error::checkpoint(
                "tensors",
                format!("expected {} entries, found {}", expected.len(), header.tensors.len()),
            ));
        }

        let mut cursor = 0u64;
        let mut arrays = Vec::with_capacity(expected.len());
        for (i, (entry, (name, shape))) in header.tensors.iter().zip(&expected).enumerate() {
            let field = |f: &str| format!("tensors[{i}].{f}");
            if &entry.name != name {
                return Err(Error::checkpoint(field("name"), format!("expected {name}, found {}", entry.name)));
            }
            if &entry.shape != shape {
                return Err(Error::checkpoint(field("shape"), format!("expected {shape:?}, found {:?}", entry.shape)));
            }
            let n: usize = shape.iter().product();
            if entry.bytes != 8 * n as u64 {
                return Err(Error::checkpoint(field("bytes"), format!("expected {}", 8 * n)));
            }
            if entry.offset != cursor {
                return Err(Error::checkpoint(field("offset"), format!("expected {cursor}, found {}", entry.offset)));
            }
            if cursor + entry.bytes > payload.len() as u64 {
                return Err(Error::checkpoint(field("bytes"), "tensor extends past the end of the payload"));
            }
            let start = cursor as usize;
            let data: Vec<f64> = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cursor += entry.bytes;
            arrays.push((shape.clone(), data));
        }
        if cursor != header.payload_bytes {
            return Err(Error::checkpoint("payload_bytes", "trailing bytes after last tensor"));
        }

        let mut it = arrays.into_iter();
        let mut mat = || {
            let (s, d) = it.next().expect("validated count");
            if s.len() == 2 {
                Array2::from_shape_vec((s[0], s[1]), d).expect("validated shape")
            } else {
                Array2::from_shape_vec((1, s[0]), d).expect("validated shape")
            }
        };
        let embed = mat();
        let img_proj = mat();
        let ctx1 = mat();
        let ctx2 = mat();
        let hidden_bias = mat().remove_axis(Axis(0));
        let out_w = mat();
        let out_b = mat().remove_axis(Axis(0));
        let params = ModelParams {
            dims,
            embed,
            img_proj,
            ctx1,
            ctx2,
            hidden_bias,
            out_w,
            out_b,
        };
        let adapters = header.adapter.map(|ad| AdapterSet {
            alpha: ad.alpha,
            rank: ad.rank,
            ctx1: LoraAdapter { a: mat(), b: mat() },
            out_w: LoraAdapter { a: mat(), b: mat() },
        });
        Ok(Self {
            meta: header.meta,
            params,
            adapters,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
