//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use rand::Rng;
use rdpo_core::align::{collate_preference_batch, tensor_digest, train_rdpo, train_sft, TrainConfig, Trainer};
use rdpo_core::exec::Exec;
use rdpo_core::harness::{Comparison, EvalSummary, RunManifest, TrainSummary, COMPARISON_CSV, COMPARISON_JSON, COMPARISON_MD, SUMMARY_FILE};
use rdpo_core::metrics::{bleu, embed_f1, graph_combined, semb_score, wilcoxon_one_sided, PValueMethod, StaticEmbeddings};
use rdpo_core::model::{forward_logits, greedy_decode, sequence_log_prob, AdapterSet, Dims};
use rdpo_core::synthcxr::{Corpus, CorpusConfig, Example, Grammar, BOS};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn small_corpus(seed: u64, num_findings: usize) -> Corpus {
    let cfg = CorpusConfig { num_findings, n_train: 40, n_val: 2, n_test: 4, seed, ..CorpusConfig::default() };
    Corpus::generate(&cfg, Exec::Sequential).unwrap()
}

fn quick_sft(c: &Corpus) -> rdpo_core::model::Checkpoint {
    let dims = Dims { vocab: c.vocab().len(), hidden: 8, grid: c.config().grid };
    let cfg = TrainConfig { lr: 1e-2, batch_size: 8, epochs: 2, hidden: 8, ..TrainConfig::sft() };
    train_sft(&c.train, dims, &c.vocab().hash(), "acceptance", &cfg).unwrap().0
}

fn loss_anchor() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (seed, findings, beta, batch) in [(1, 8, 0.1, 8), (2, 3, 0.5, 5), (3, 6, 2.0, 16), (4, 8, 0.0, 40), (5, 5, 10.0, 2)] {
        let c = small_corpus(seed, findings);
        let sft = quick_sft(&c);
        let cfg = TrainConfig { beta, batch_size: batch, ..TrainConfig::rdpo() };
        let rec = Trainer::rdpo(&sft, c.train.len(), &cfg).unwrap().step(&c.train).unwrap();
        worst = worst.max((rec.loss - LN_2).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-9, "first-step loss off ln 2 by {worst:e}");
    ensure!(secs < 1.0, "took {secs:.2} s");
    Ok(format!("max |loss − ln 2| = {worst:.1e} over 5 corpora/betas, {secs:.2} s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut errors = Vec::new();
    for s in 0..30 {
        errors.push(dpo_gradient_error(10_000 + s, false));
        errors.push(dpo_gradient_error(11_000 + s, true));
        errors.push(sft_gradient_error(12_000 + s, false));
        errors.push(sft_gradient_error(13_000 + s, true));
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < FD_TOL, "max relative error {worst:e}");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("{} instances, max relative error {worst:.1e}, {secs:.1} s", errors.len()))
}

fn sampler() -> Outcome {
    const N: usize = 8;
    const ROUNDS: usize = 100_000;
    let dims = Dims { vocab: 10, hidden: 2, grid: 2 };
    let mut r = rng(77);
    let batch: Vec<Example> = (0..N).map(|i| random_example(dims, i, &mut r)).collect();
    let refs: Vec<&Example> = batch.iter().collect();
    let mut counts = [[0u64; N]; N];
    for _ in 0..ROUNDS {
        for t in collate_preference_batch(&refs, &mut r).unwrap() {
            ensure!(t.rejected_index != t.chosen_index, "self pair at {}", t.chosen_index);
            counts[t.chosen_index][t.rejected_index] += 1;
        }
    }
    let expected = ROUNDS as f64 / (N - 1) as f64;
    let stat: f64 = (0..N)
        .flat_map(|i| (0..N).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (counts[i][j] as f64 - expected).powi(2) / expected)
        .sum();
    let df = (N * (N - 2)) as f64;
    let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.999);
    ensure!(stat < critical, "chi-square {stat:.1} ≥ {critical:.1}");
    Ok(format!("no self pairs in {ROUNDS} collations, chi-square {stat:.1} < {critical:.1} (df {df})"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(88);
    for _ in 0..100 {
        let alphabet = r.random_range(3..8);
        let c: Vec<usize> = (0..r.random_range(4..=20)).map(|_| 10 + r.random_range(0..alphabet)).collect();
        let rf: Vec<usize> = (0..r.random_range(4..=20)).map(|_| 10 + r.random_range(0..alphabet)).collect();
        let (got, want) = (bleu(&c, &rf, 4).score, oracle_bleu(&c, &rf));
        ensure!((got - want).abs() < 1e-9, "bleu {got} vs oracle {want}");
    }
    let mut patterns = 0;
    for n in 1..=10usize {
        let mags: Vec<f64> = (1..=n).map(|k| k as f64 + r.random_range(0.0..0.5)).collect();
        for mask in 0u32..(1 << n) {
            let d: Vec<f64> = mags.iter().enumerate().map(|(k, &m)| if mask >> k & 1 == 1 { m } else { -m }).collect();
            let res = wilcoxon_one_sided(&d).unwrap();
            ensure!(res.method == PValueMethod::Exact, "n {n}: not exact");
            ensure!(res.p_value == enumerate_p(n, res.w_plus), "n {n} mask {mask:b}");
            patterns += 1;
        }
    }
    let g = Grammar::new(&CorpusConfig { num_findings: 3, style_variants: 2, ..CorpusConfig::default() }).unwrap();
    let reports = all_reports(&g);
    let emb = StaticEmbeddings::from_reports(reports.iter().map(Vec::as_slice), g.vocab().len(), 8);
    for a in &reports {
        ensure!(semb_score(a, a, &g) == 1.0 && graph_combined(a, a, &g) == 1.0, "identity fails for {a:?}");
        for b in &reports {
            for (ab, ba) in [
                (semb_score(a, b, &g), semb_score(b, a, &g)),
                (graph_combined(a, b, &g), graph_combined(b, a, &g)),
                (embed_f1(a, b, &emb), embed_f1(b, a, &emb)),
            ] {
                ensure!((0.0..=1.0).contains(&ab) && (ab - ba).abs() < 1e-12, "{a:?} / {b:?}: {ab} vs {ba}");
            }
        }
    }
    Ok(format!("100 BLEU pairs, {patterns} sign patterns, {} reports pairwise", reports.len()))
}

fn adapters_neutral_and_base_frozen() -> Outcome {
    for seed in 0..50 {
        let mut r = rng(500 + seed);
        let dims = small_dims(&mut r);
        let p = random_params(dims, &mut r);
        let ad = AdapterSet::new(dims, 16.0, 8, &mut r).unwrap();
        let img = random_image(dims, &mut r);
        let toks = random_tokens(dims, 5, &mut r);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let a = forward_logits(&p, None, &img, (BOS, BOS)).unwrap();
        let b = forward_logits(&p, Some(&ad), &img, (BOS, BOS)).unwrap();
        ensure!(bits(a.as_slice().unwrap()) == bits(b.as_slice().unwrap()), "logits differ (seed {seed})");
        let (la, lb) = (sequence_log_prob(&p, None, &img, &toks).unwrap(), sequence_log_prob(&p, Some(&ad), &img, &toks).unwrap());
        ensure!(la.to_bits() == lb.to_bits(), "log-prob differs (seed {seed})");
        ensure!(greedy_decode(&p, None, &img, 10).unwrap() == greedy_decode(&p, Some(&ad), &img, 10).unwrap(), "decode differs");
    }
    let c = small_corpus(9, 8);
    let sft = quick_sft(&c);
    let before = tensor_digest(&sft.params);
    let cfg = TrainConfig { lr: 1e-2, batch_size: 8, epochs: 2, ..TrainConfig::rdpo() };
    let (out, _) = train_rdpo(&c.train, &sft, &cfg).unwrap();
    ensure!(tensor_digest(&out.params) == before, "base weights changed");
    let moved: f64 = flatten(out.adapters.as_ref().unwrap()).iter().map(|v| v.abs()).sum();
    ensure!(moved > 0.0, "adapters never moved");
    Ok("50 random models bit-identical; base digest unchanged after train_rdpo".into())
}

struct PipelineRun {
    dir: std::path::PathBuf,
    secs: f64,
}

fn run_pipeline(root: &Path, name: &str, threads: usize) -> PipelineRun {
    let dir = root.join(name);
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rdpo-lab"))
        .env("RDPO_LAB_THREADS", threads.to_string())
        .args(["pipeline", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "pipeline failed: {}", String::from_utf8_lossy(&out.stderr));
    PipelineRun { dir, secs: start.elapsed().as_secs_f64() }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn end_to_end(run: &PipelineRun, single_thread: &PipelineRun) -> Outcome {
    let sft: EvalSummary = read_json(&run.dir.join("eval-sft").join(SUMMARY_FILE));
    let rdpo: EvalSummary = read_json(&run.dir.join("eval-rdpo").join(SUMMARY_FILE));
    let manifest = RunManifest::read(&run.dir.join("rdpo")).unwrap();
    let train: TrainSummary = serde_json::from_value(manifest.metric_summary.unwrap()).unwrap();
    let (loss, acc) = (train.final_epoch_loss.unwrap(), train.final_epoch_reward_acc.unwrap());
    let delta = rdpo.means.composite - sft.means.composite;
    let cmp: Comparison = read_json(&run.dir.join("compare").join(COMPARISON_JSON));
    let md = std::fs::read_to_string(run.dir.join("compare").join(COMPARISON_MD)).unwrap();
    let detail = format!(
        "SFT semb {:.3}, reward acc {acc:.3}, final loss {loss:.3}, Δcomposite {delta:+.4}, {:.0} s on one thread",
        sft.means.semb, single_thread.secs
    );
    ensure!(sft.means.semb >= 0.80, "(a) SFT semb {:.3} < 0.80; {detail}", sft.means.semb);
    ensure!(acc >= 0.90, "(b) reward accuracy {acc:.3} < 0.90; {detail}");
    ensure!(loss < 0.5, "(b) final training loss {loss:.3} ≥ 0.5; {detail}");
    ensure!(delta >= -0.02, "(c) composite dropped by {:.4}; {detail}", -delta);
    let p = cmp.composite_test().map(|t| t.p_value);
    ensure!(matches!(p, Some(p) if p > 0.0 && p <= 1.0), "(d) no valid p-value: {p:?}");
    ensure!(
        md.starts_with("| Method | Dataset | RDPO | BLEU | Embed-F1 | Semb | Graph-comb | Composite |") && md.contains("p = "),
        "(d) table malformed"
    );
    ensure!(single_thread.secs <= 600.0, "single-thread pipeline took {:.0} s", single_thread.secs);
    Ok(format!("{detail}, composite p = {:.3e}", p.unwrap()))
}

fn reproducible(runs: &[&PipelineRun]) -> Outcome {
    for name in [COMPARISON_MD, COMPARISON_CSV, COMPARISON_JSON] {
        let first = std::fs::read(runs[0].dir.join("compare").join(name)).unwrap();
        for other in &runs[1..] {
            let bytes = std::fs::read(other.dir.join("compare").join(name)).unwrap();
            ensure!(bytes == first, "{name} differs between {} and {}", runs[0].dir.display(), other.dir.display());
        }
    }
    Ok("comparison tables byte-identical across two 4-thread runs and a 1-thread run".into())
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("loss anchor", guarded(loss_anchor)),
        ("gradient suite", guarded(gradient_suite)),
        ("sampler correctness", guarded(sampler)),
        ("metric oracles", guarded(metric_oracles)),
        ("adapter neutrality and freezing", guarded(adapters_neutral_and_base_frozen)),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let runs = guarded(|| {
        let a = run_pipeline(tmp.path(), "run-a", 4);
        let b = run_pipeline(tmp.path(), "run-b", 4);
        let c = run_pipeline(tmp.path(), "run-c", 1);
        Ok((a, b, c))
    });
    match runs {
        Ok((a, b, c)) => {
            results.push(("end-to-end desk experiment", guarded(|| end_to_end(&a, &c))));
            results.push(("reproducibility", guarded(|| reproducible(&[&a, &b, &c]))));
        }
        Err(e) => {
            results.push(("end-to-end desk experiment", Err(e.clone())));
            results.push(("reproducibility", Err(e)));
        }
    }
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
