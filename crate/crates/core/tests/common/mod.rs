#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rdpo_core::model::{AdapterSet, Dims, ModelParams, TensorSet};
use rdpo_core::align::{dpo_gradient, dpo_loss, sft_gradient, sft_loss, PreferenceTriple, ReferenceSnapshot};
use rdpo_core::model::{Gradient, Policy};
use rdpo_core::synthcxr::{Example, FindingSet, Grammar, ImageSample, Report};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small dimensions within the gradient-suite bounds.
pub fn small_dims(rng: &mut impl Rng) -> Dims {
    Dims {
        vocab: rng.random_range(3..=10),
        hidden: rng.random_range(1..=4),
        grid: rng.random_range(1..=3),
    }
}

pub fn random_image(dims: Dims, rng: &mut impl Rng) -> ImageSample {
    let g = dims.grid;
    ImageSample {
        pixels: Array2::from_shape_simple_fn((g, g), || rng.random::<f64>()),
        findings: FindingSet::empty(1),
    }
}

pub fn random_tokens(dims: Dims, max_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..dims.vocab)).collect()
}

pub fn random_example(dims: Dims, id: usize, rng: &mut impl Rng) -> Example {
    Example {
        id: format!("ex-{id}"),
        image: random_image(dims, rng),
        report: Report {
            text: String::new(),
            tokens: random_tokens(dims, 5, rng),
        },
    }
}

/// Adapters with non-zero `B` so every adapter gradient is exercised.
pub fn random_adapters(dims: Dims, rank: usize, rng: &mut impl Rng) -> AdapterSet {
    let mut a = AdapterSet::new(dims, 2.0 * rank as f64, rank, rng).unwrap();
    for (_, t) in a.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    a
}

pub fn random_params(dims: Dims, rng: &mut impl Rng) -> ModelParams {
    let mut p = ModelParams::random(dims, 0.8, rng);
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    p
}

pub fn flatten(set: &impl TensorSet) -> Vec<f64> {
    set.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
}

/// Writes `values` back into the tensors of `set`, in tensor order.
pub fn unflatten(set: &mut impl TensorSet, values: &[f64]) {
    let mut k = 0;
    for (_, t) in set.tensors_mut() {
        for v in t.iter_mut() {
            *v = values[k];
            k += 1;
        }
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let up = f(&x);
        x[i] = x0 - h;
        let down = f(&x);
        x[i] = x0;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Clipped n-gram matches by explicit window comparison.
pub fn oracle_bleu(c: &[usize], r: &[usize]) -> f64 {
    let max_n = c.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand: Vec<&[usize]> = c.windows(n).collect();
        let refs: Vec<&[usize]> = r.windows(n).collect();
        let mut seen: Vec<&[usize]> = Vec::new();
        let mut matched = 0usize;
        for g in &cand {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_c = cand.iter().filter(|x| *x == g).count();
            let in_r = refs.iter().filter(|x| *x == g).count();
            matched += in_c.min(in_r);
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / cand.len() as f64).ln();
    }
    let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}

/// `P(W ≥ w)` by listing all `2^n` sign patterns of ranks `1..=n`.
pub fn enumerate_p(n: usize, w: f64) -> f64 {
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let s: usize = (0..n).filter(|k| mask & (1 << k) != 0).map(|k| k + 1).sum();
        if s as f64 >= w {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Every report of a grammar with 3 findings and 2 phrasings.
pub fn all_reports(g: &Grammar) -> Vec<Vec<usize>> {
    let f = g.config().num_findings;
    let s = g.config().style_variants;
    let mut out = Vec::new();
    for mask in 0..(1usize << f) {
        let idx: Vec<usize> = (0..f).filter(|k| mask & (1 << k) != 0).collect();
        let set = FindingSet::from_indices(f, &idx).unwrap();
        let k = idx.len().max(1);
        for code in 0..s.pow(k as u32) {
            let styles: Vec<usize> = (0..k).map(|i| (code / s.pow(i as u32)) % s).collect();
            out.push(g.render(&set, &styles).tokens);
        }
    }
    out
}


/// Finite-difference step and tolerance of the gradient checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

pub struct DpoCase {
    pub dims: Dims,
    pub reference: ModelParams,
    pub images: Vec<ImageSample>,
    pub seqs: Vec<(Vec<usize>, Vec<usize>)>,
    pub beta: f64,
}

/// A random DPO instance and a random policy for it.
pub fn dpo_case(seed: u64) -> (DpoCase, ModelParams) {
    let mut r = rng(seed);
    let dims = small_dims(&mut r);
    let policy = random_params(dims, &mut r);
    let reference = random_params(dims, &mut r);
    let n = r.random_range(1..=4);
    let images = (0..n).map(|_| random_image(dims, &mut r)).collect();
    let seqs = (0..n).map(|_| (random_tokens(dims, 5, &mut r), random_tokens(dims, 5, &mut r))).collect();
    let beta = r.random_range(0.05..2.0);
    (DpoCase { dims, reference, images, seqs, beta }, policy)
}

impl DpoCase {
    pub fn triples(&self) -> Vec<PreferenceTriple<'_>> {
        self.images
            .iter()
            .zip(&self.seqs)
            .enumerate()
            .map(|(i, (img, (w, l)))| PreferenceTriple {
                image: img,
                chosen: w,
                rejected: l,
                chosen_index: i,
                rejected_index: (i + 1) % self.images.len().max(2),
            })
            .collect()
    }

    pub fn loss(&self, params: &ModelParams, adapters: Option<&AdapterSet>) -> f64 {
        let reference = ReferenceSnapshot::freeze(&self.reference);
        let policy = Policy::new(params, adapters).unwrap();
        dpo_loss(&policy, &reference, &self.triples(), self.beta).unwrap().0
    }

    pub fn grad(&self, params: &ModelParams, adapters: Option<&AdapterSet>) -> Gradient {
        let reference = ReferenceSnapshot::freeze(&self.reference);
        let policy = Policy::new(params, adapters).unwrap();
        dpo_gradient(&policy, &reference, &self.triples(), self.beta).unwrap()
    }
}

/// Relative error of the DPO gradient on instance `seed`, with respect to the
/// base parameters or to random rank-1..=3 adapters.
pub fn dpo_gradient_error(seed: u64, adapters: bool) -> f64 {
    let (case, params) = dpo_case(seed);
    if adapters {
        let mut r = rng(seed ^ 0xada);
        let ad = random_adapters(case.dims, r.random_range(1..=3), &mut r);
        let Gradient::Adapters(g) = case.grad(&params, Some(&ad)) else { panic!("expected adapter gradient") };
        let fd = central_diff(&flatten(&ad), FD_STEP, |x| {
            let mut a = ad.clone();
            unflatten(&mut a, x);
            case.loss(&params, Some(&a))
        });
        rel_err(&flatten(&g), &fd)
    } else {
        let Gradient::Full(g) = case.grad(&params, None) else { panic!("expected full gradient") };
        let fd = central_diff(&flatten(&params), FD_STEP, |x| {
            let mut p = params.clone();
            unflatten(&mut p, x);
            case.loss(&p, None)
        });
        rel_err(&flatten(&g), &fd)
    }
}

pub fn sft_case(seed: u64) -> (Dims, ModelParams, Vec<Example>) {
    let mut r = rng(seed);
    let dims = small_dims(&mut r);
    let params = random_params(dims, &mut r);
    let n = r.random_range(1..=4);
    let batch = (0..n).map(|i| random_example(dims, i, &mut r)).collect();
    (dims, params, batch)
}

/// Same as [`dpo_gradient_error`] for the SFT objective.
pub fn sft_gradient_error(seed: u64, adapters: bool) -> f64 {
    let (dims, params, batch) = sft_case(seed);
    let refs: Vec<&Example> = batch.iter().collect();
    if adapters {
        let mut r = rng(seed ^ 0xada);
        let ad = random_adapters(dims, r.random_range(1..=3), &mut r);
        let policy = Policy::new(&params, Some(&ad)).unwrap();
        let Gradient::Adapters(g) = sft_gradient(&policy, &refs).unwrap() else { panic!("expected adapter gradient") };
        let fd = central_diff(&flatten(&ad), FD_STEP, |x| {
            let mut a = ad.clone();
            unflatten(&mut a, x);
            sft_loss(&Policy::new(&params, Some(&a)).unwrap(), &refs).unwrap()
        });
        rel_err(&flatten(&g), &fd)
    } else {
        let Gradient::Full(g) = sft_gradient(&Policy::new(&params, None).unwrap(), &refs).unwrap() else {
            panic!("expected full gradient")
        };
        let fd = central_diff(&flatten(&params), FD_STEP, |x| {
            let mut p = params.clone();
            unflatten(&mut p, x);
            sft_loss(&Policy::new(&p, None).unwrap(), &refs).unwrap()
        });
        rel_err(&flatten(&g), &fd)
    }
}
