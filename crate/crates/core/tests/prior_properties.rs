//! Monte Carlo and invariance checks on the causal prior.

use forge_core::rng::log_uniform_int;
use forge_core::scm_prior::{generate_pair, sample_one, sample_scm, PriorConfig, PriorRanges, ScmSpec};
use forge_core::stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn protected_row_is_live(scm: &ScmSpec) -> bool {
    let k = scm.protected_row;
    (0..scm.num_exogenous).any(|j| scm.masks[[k, j, 0]] == 1 && scm.weights[[k, j, 0]] != 0.0)
}

#[test]
fn mask_density_matches_log_uniform_mean() {
    let cfg = PriorConfig { sparsity_log_range: (0.1, 0.9), ..PriorConfig::default() };
    let draws: Vec<f64> = (0..1000)
        .map(|s| {
            let scm = sample_scm(&cfg, s).unwrap();
            scm.masks.iter().map(|&v| f64::from(v)).sum::<f64>() / scm.masks.len() as f64
        })
        .collect();
    let analytic = (0.9 - 0.1) / (0.9f64 / 0.1).ln();
    let got = stats::mean(&draws);
    assert!((got - analytic).abs() <= 0.03, "mean density {got} vs {analytic}");
}

#[test]
fn fair_targets_ignore_a_flip() {
    let cfg = PriorConfig::training();
    for seed in 0..100 {
        let s = sample_one(&cfg, seed).unwrap();
        let flipped: Vec<u8> = s.dataset.a.iter().map(|v| 1 - v).collect();
        let (_, y_fair_cf) = s.intervene(&flipped, true).unwrap();
        assert_eq!(y_fair_cf, s.y_fair, "seed {seed}");
        let (_, y_fair_same) = s.intervene(&s.dataset.a, true).unwrap();
        assert_eq!(y_fair_same, s.y_fair, "seed {seed}");
        let (_, y_obs) = s.intervene(&s.dataset.a, false).unwrap();
        assert_eq!(y_obs, s.dataset.y, "seed {seed}");
    }
}

#[test]
fn live_protected_row_yields_base_effect() {
    let cfg = PriorConfig { num_exogenous: 5, depth: 3, num_features: 4, ..PriorConfig::default() };
    let mut seeds = 0..;
    let mut hits = 0;
    let mut used = 0;
    while used < 50 {
        let seed = seeds.next().unwrap();
        let scm = sample_scm(&cfg, seed).unwrap();
        if !protected_row_is_live(&scm) {
            continue;
        }
        let Ok(s) = generate_pair(&scm, 1000, seed) else { continue };
        used += 1;
        if s.base_ate().unwrap().abs() > 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 40, "{hits}/50 seeds with |base ATE| > 0.05");
}

#[test]
fn sample_size_median_is_geometric_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ns: Vec<f64> = (0..1000).map(|_| log_uniform_int(&mut rng, 100, 10_000) as f64).collect();
    let med = stats::median(&ns);
    assert!((med - 1000.0).abs() <= 100.0, "median n {med}");
}

#[test]
fn varied_prior_respects_ranges() {
    let cfg = PriorConfig {
        vary: Some(PriorRanges { exogenous: (3, 4), depth: (2, 3), features: (1, 3), samples: (100, 10_000) }),
        ..PriorConfig::default()
    };
    let mut ns = Vec::new();
    for seed in 0..200 {
        let s = sample_one(&cfg, seed).unwrap();
        let (u, h) = (s.scm.num_exogenous, s.scm.depth);
        assert!((3..=4).contains(&u) && (2..=3).contains(&h));
        assert!((1..=3).contains(&s.dataset.n_features()));
        ns.push(s.dataset.n_rows() as f64);
    }
    assert!(ns.iter().all(|&n| (100.0..=10_000.0).contains(&n)));
    let med = stats::median(&ns);
    assert!((500.0..=2000.0).contains(&med), "median n {med}");
}

