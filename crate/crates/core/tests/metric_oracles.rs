//! Metrics against brute-force oracles and exhaustive small-grammar checks.

mod common;

use common::*;
use rand::Rng;
use rdpo_core::metrics::{
    bleu, composite_score, corpus_bleu, embed_f1, graph_combined, is_significant, semb_score, wilcoxon_one_sided,
    PValueMethod, StaticEmbeddings,
};
use rdpo_core::synthcxr::{CorpusConfig, FindingSet, Grammar, EOS};
use rdpo_core::Error;

#[test]
fn bleu_matches_brute_force_on_random_pairs() {
    let mut r = rng(1);
    let mut nonzero = 0;
    for _ in 0..100 {
        let alphabet = r.random_range(3..8);
        let gen = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            let n = r.random_range(4..=20);
            (0..n).map(|_| 10 + r.random_range(0..alphabet)).collect()
        };
        let c = gen(&mut r);
        let rf = gen(&mut r);
        let got = bleu(&c, &rf, 4).score;
        let want = oracle_bleu(&c, &rf);
        assert!((got - want).abs() < 1e-9, "{c:?} vs {rf:?}: {got} vs {want}");
        nonzero += (want > 0.0) as usize;
    }
    assert!(nonzero > 20, "too few non-zero cases ({nonzero}) to exercise the oracle");
}

#[test]
fn bleu_examples() {
    let abcd = [11, 12, 13, 14];
    let abcde = [11, 12, 13, 14, 15];
    let got = bleu(&abcd, &abcde, 4).score;
    assert!((got - (-0.25f64).exp()).abs() < 1e-12);
    assert!((got - 0.7788).abs() < 5e-5);
    assert_eq!(bleu(&abcd, &abcd, 4).score, 1.0);
    assert_eq!(bleu(&abcd, &[20, 21, 22, 23], 4).score, 0.0);
    let empty = bleu(&[EOS], &abcd, 4);
    assert!(empty.empty_candidate && empty.score == 0.0);
    // EOS is stripped before scoring.
    assert_eq!(bleu(&[11, 12, 13, 14, EOS], &[11, 12, 13, 14, EOS], 4).score, 1.0);
    let pairs: Vec<(&[usize], &[usize])> = vec![(&abcd, &abcd), (&abcd, &abcde)];
    let cb = corpus_bleu(&pairs, 4);
    assert!(cb > 0.0 && cb <= 1.0);
}

#[test]
fn wilcoxon_exact_matches_enumeration_for_every_sign_pattern() {
    let mut r = rng(2);
    for n in 1..=10usize {
        // Distinct magnitudes in shuffled order.
        let mut mags: Vec<f64> = (1..=n).map(|k| k as f64 * 0.37 + r.random_range(0.0..0.1)).collect();
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            mags.swap(i, j);
        }
        for mask in 0u32..(1 << n) {
            let deltas: Vec<f64> = mags
                .iter()
                .enumerate()
                .map(|(k, &m)| if mask & (1 << k) != 0 { m } else { -m })
                .collect();
            let res = wilcoxon_one_sided(&deltas).unwrap();
            assert_eq!(res.method, PValueMethod::Exact);
            assert_eq!(res.n_effective, n);
            assert_eq!(res.p_value, enumerate_p(n, res.w_plus), "n {n} mask {mask:b}");
            assert_eq!(res.significant, res.p_value < 0.05);
        }
    }
}

#[test]
fn wilcoxon_examples() {
    let up = wilcoxon_one_sided(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    assert_eq!((up.w_plus, up.p_value, up.significant), (15.0, 0.03125, true));
    let down = wilcoxon_one_sided(&[-0.1, -0.2, -0.3, -0.4, -0.5]).unwrap();
    assert_eq!((down.w_plus, down.p_value, down.significant), (0.0, 1.0, false));
    assert!(is_significant(0.049));
    assert!(!is_significant(0.05));
    assert!(matches!(wilcoxon_one_sided(&[0.0, 0.0]), Err(Error::DegenerateComparison)));
    // Zeros are dropped before ranking.
    let z = wilcoxon_one_sided(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    assert_eq!((z.n_effective, z.p_value), (5, 0.03125));
    // Ties force the normal approximation.
    let tied = wilcoxon_one_sided(&[0.1, 0.1, 0.2, 0.3]).unwrap();
    assert_eq!(tied.method, PValueMethod::Normal);
    assert!(tied.p_value > 0.0 && tied.p_value <= 1.0);
    let big: Vec<f64> = (1..=40).map(|k| k as f64).collect();
    let b = wilcoxon_one_sided(&big).unwrap();
    assert_eq!(b.method, PValueMethod::Normal);
    assert!(b.significant);
}

#[test]
fn label_and_graph_metrics_exhaustive_invariants() {
    let g = Grammar::new(&CorpusConfig { num_findings: 3, style_variants: 2, ..CorpusConfig::default() }).unwrap();
    let reports = all_reports(&g);
    assert_eq!(reports.len(), 2 + 3 * 2 + 3 * 4 + 8);
    let emb = StaticEmbeddings::from_reports(reports.iter().map(Vec::as_slice), g.vocab().len(), 8);
    for a in &reports {
        assert_eq!(semb_score(a, a, &g), 1.0);
        assert_eq!(graph_combined(a, a, &g), 1.0);
        assert_eq!(embed_f1(a, a, &emb), 1.0);
        for b in &reports {
            for (name, ab, ba) in [
                ("semb", semb_score(a, b, &g), semb_score(b, a, &g)),
                ("graph", graph_combined(a, b, &g), graph_combined(b, a, &g)),
                ("embed_f1", embed_f1(a, b, &emb), embed_f1(b, a, &emb)),
            ] {
                assert!((0.0..=1.0).contains(&ab), "{name} out of range: {ab}");
                assert!((ab - ba).abs() < 1e-12, "{name} not symmetric: {ab} vs {ba}");
            }
        }
    }
}

#[test]
fn semb_and_graph_examples() {
    let g = Grammar::new(&CorpusConfig::default()).unwrap();
    let render = |idx: &[usize]| {
        let set = FindingSet::from_indices(8, idx).unwrap();
        g.render(&set, &vec![0; idx.len().max(1)]).tokens
    };
    let r12 = render(&[1, 2]);
    let r13 = render(&[1, 3]);
    assert!((semb_score(&r12, &r13, &g) - 0.5).abs() < 1e-15);
    assert_eq!(semb_score(&render(&[0]), &render(&[4]), &g), 0.0);
    assert_eq!(semb_score(&render(&[]), &render(&[]), &g), 1.0);
    // Empty candidate against a non-empty reference graph.
    assert_eq!(graph_combined(&[EOS], &render(&[0]), &g), 0.0);
    assert_eq!(graph_combined(&[EOS], &[EOS], &g), 1.0);
}

#[test]
fn embed_f1_matches_exhaustive_max_cosine() {
    // Tokens 0..4 with hand-set vectors; 3-token candidate, 2-token reference.
    let v = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.6, 0.8, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.6, 0.8],
        vec![-1.0, 0.0, 0.0],
    ];
    // Ids below 10 include the special tokens, so the table starts at 10.
    let mut table = vec![vec![0.0; 3]; 10];
    table.extend(v.iter().cloned());
    let emb = StaticEmbeddings::from_vectors(table).unwrap();
    let cand = [10usize, 12, 14];
    let refr = [11usize, 13];
    let cos = |a: usize, b: usize| -> f64 {
        if a == b {
            return 1.0;
        }
        let d: f64 = v[a - 10].iter().zip(&v[b - 10]).map(|(x, y)| x * y).sum();
        d.clamp(0.0, 1.0)
    };
    let p = cand.iter().map(|&c| refr.iter().map(|&r| cos(c, r)).fold(0.0, f64::max)).sum::<f64>() / 3.0;
    let r = refr.iter().map(|&r| cand.iter().map(|&c| cos(c, r)).fold(0.0, f64::max)).sum::<f64>() / 2.0;
    let want = 2.0 * p * r / (p + r);
    assert!((embed_f1(&cand, &refr, &emb) - want).abs() < 1e-12);
    // Orthogonal embeddings share nothing.
    assert_eq!(embed_f1(&[10], &[12], &emb), 0.0);
    assert_eq!(embed_f1(&[], &[12], &emb), 0.0);
}

#[test]
fn composite_examples_and_monotonicity() {
    assert_eq!(composite_score([1.0; 4]).unwrap(), 1.0);
    assert_eq!(composite_score([0.0; 4]).unwrap(), 0.0);
    assert!((composite_score([0.2, 0.4, 0.6, 0.8]).unwrap() - 0.5).abs() < 1e-15);
    assert!(composite_score([1.1, 0.0, 0.0, 0.0]).is_err());
    assert!(composite_score([f64::NAN, 0.0, 0.0, 0.0]).is_err());
    let base = [0.3, 0.4, 0.5, 0.6];
    for k in 0..4 {
        let mut up = base;
        up[k] += 0.01;
        assert!(composite_score(up).unwrap() > composite_score(base).unwrap());
    }
}
