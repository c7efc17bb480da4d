//! End-to-end acceptance run against the shipped desk-scale checkpoint.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits nonzero if any
//! fail. `FORGE_CHECKPOINT` overrides the checkpoint path;
//! `FORGE_LAW_SCHOOL_MANIFEST` adds a run on a user-supplied manifest.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use forge_core::baselines::{run_method, CfpLevel, InContextPredictor, Method};
use forge_core::case_studies::{
    flipped_fair_labels, generate_case, generate_suite_with, CaseBundle, CaseGroup, CaseStudyConfig, QuintileKey,
    SuiteConfig,
};
use forge_core::harness::{evaluate_suite, run_ablation, run_tradeoff, split_bundle, BundleEvaluation};
use forge_core::io::load_manifest;
use forge_core::metrics::{self, DspMode};
use forge_core::model::{heldout_loss, ContextBatch, FairPfn, ModelCheckpoint};
use forge_core::rng::{derive_seed, stream};
use forge_core::scm_prior::{sample_one, PriorConfig};
use forge_core::{harness, stats};
use ndarray::s;
use rand::Rng;
use rand_distr::StandardNormal;

const SUITE_SEED: u64 = 0xACCE_0001;
const EVAL_SEED: u64 = 0xACCE_0002;

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn check(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), pass));
    }
}

fn checkpoint_path() -> PathBuf {
    std::env::var_os("FORGE_CHECKPOINT").map(PathBuf::from).unwrap_or_else(|| {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../artifacts/fairpfn-desk/checkpoint.bin")
    })
}

fn abs_ate(e: &BundleEvaluation, m: Method) -> f64 {
    e.report(m).and_then(|r| r.ate).expect("ate").abs()
}

/// Feeds the model an Unfair-mode batch with the appended protected
/// feature removed: features `X` only, a coin flip in the protected slot.
struct DropLastFeature<'a>(&'a FairPfn);

impl InContextPredictor for DropLastFeature<'_> {
    fn max_context(&self) -> usize {
        self.0.max_context()
    }

    fn predict(&self, batch: &ContextBatch) -> forge_core::Result<Vec<f64>> {
        let m = batch.context_features.ncols() - 1;
        let trimmed = ContextBatch {
            context_features: batch.context_features.slice(s![.., ..m]).to_owned(),
            query_features: batch.query_features.slice(s![.., ..m]).to_owned(),
            ..batch.clone()
        };
        self.0.predict_batch(&trimmed)
    }
}

fn exact_oracles(r: &mut Report, suite: &[CaseBundle], evals: &[BundleEvaluation]) {
    let t = Instant::now();
    let prior = PriorConfig::training();
    let prior_ok = (0..100u64).all(|seed| {
        let s = sample_one(&prior, derive_seed(SUITE_SEED, seed)).unwrap();
        let flipped: Vec<u8> = s.dataset.a.iter().map(|v| 1 - v).collect();
        s.intervene(&flipped, true).unwrap().1 == s.y_fair
    });
    let bundles_ok = suite.iter().all(|b| flipped_fair_labels(b).unwrap() == b.y_fair);
    r.check(
        "1a fair-label invariance",
        prior_ok && bundles_ok,
        format!("100 prior samples {prior_ok}, {} case bundles {bundles_ok}", suite.len()),
    );

    let avg_ok = evals.iter().all(|e| {
        let rep = e.report(Method::AvgCntf).unwrap();
        let ae = rep.ae_summary.as_ref().unwrap();
        rep.ate == Some(0.0) && ae.max == 0.0
    });
    let const_ok = evals.iter().all(|e| {
        let rep = e.report(Method::Constant).unwrap();
        rep.ate == Some(0.0) && rep.dsp == 0.0
    });
    r.check("1b avgcntf ATE=0 AE=0", avg_ok, format!("exact on {} bundles", evals.len()));
    r.check("1c constant DSP=ATE=0", const_ok, format!("exact on {} bundles", evals.len()));

    let mut rng = stream(SUITE_SEED, 0xB0);
    let mut worst: f64 = 0.0;
    let mut pareto_ok = true;
    for trial in 0..100 {
        let n = rng.gen_range(3..80);
        let levels = if trial % 2 == 0 { 4 } else { 500 };
        let x: Vec<f64> = (0..n).map(|_| common::coarse(&mut rng, levels)).collect();
        let y: Vec<f64> = (0..n).map(|_| common::coarse(&mut rng, levels)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        worst = worst.max((metrics::auc(&x, &labels).unwrap() - common::auc_pairs(&x, &labels)).abs());
        if let Ok(tau) = metrics::kendall_tau(&x, &y) {
            worst = worst.max((tau - common::tau_b_pairs(&x, &y)).abs());
        }
        let mut ate_loop = 0.0;
        for i in 0..n {
            ate_loop += if labels[i] == 1 { x[i] - y[i] } else { y[i] - x[i] };
        }
        worst = worst.max((metrics::ate(&x, &y, &labels).unwrap() - ate_loop / n as f64).abs());
        let rate = |g: u8| {
            let v: Vec<f64> = (0..n).filter(|&i| labels[i] == g).map(|i| f64::from(u8::from(x[i] >= 0.5))).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        worst = worst.max((metrics::dsp(&x, &labels, DspMode::Hard).unwrap() - (rate(1) - rate(0)).abs()).abs());
        let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        pareto_ok &= metrics::pareto_front(&pts).unwrap() == common::pareto_pairs(&pts);
        let table: Vec<Vec<f64>> = (0..4).map(|k| x.iter().map(|v| (v * (k + 1) as f64 * 3.0).floor()).collect()).collect();
        for (a, b) in metrics::average_rank(&table).unwrap().iter().zip(common::ranks_pairs(&table)) {
            worst = worst.max((a - b).abs());
        }
    }
    r.check(
        "1d metrics vs brute force",
        worst <= 1e-12 && pareto_ok,
        format!("max deviation {worst:.1e} (≤ 1e-12), pareto identical {pareto_ok}"),
    );
    let secs = t.elapsed().as_secs_f64();
    r.check("1e oracle runtime", secs < 60.0, format!("{secs:.1}s (< 60s)"));
}

fn gradient_suite(r: &mut Report) {
    let t = Instant::now();
    let errors = common::finite_difference_errors();
    let (name, worst) = errors.iter().fold((String::new(), 0.0f64), |acc, (n, e)| {
        if *e > acc.1 {
            (n.clone(), *e)
        } else {
            acc
        }
    });
    r.check(
        "2a finite differences",
        worst <= 1e-3,
        format!("{} tensors, worst relative error {worst:.2e} at {name} (≤ 1e-3)", errors.len()),
    );
    let seeds = common::overfit_seeds_decreasing();
    r.check("2b overfit one batch", seeds >= 19, format!("{seeds}/20 seeds decrease (≥ 19)"));
    let secs = t.elapsed().as_secs_f64();
    r.check("2c gradient runtime", secs < 300.0, format!("{secs:.1}s (< 300s)"));
}

fn desk_run(r: &mut Report, ckpt: &ModelCheckpoint, model: &FairPfn, evals: &[BundleEvaluation]) {
    let p = &ckpt.provenance;
    r.check(
        "3  checkpoint provenance",
        ckpt.config.embed_dim == 64 && p.datasets_seen >= 45_000,
        format!(
            "embed_dim {}, {} steps, {} datasets, {} skipped",
            ckpt.config.embed_dim, p.steps_completed, p.datasets_seen, p.skipped_steps
        ),
    );
    let fair: Vec<f64> = evals.iter().map(|e| abs_ate(e, Method::FairPfn)).collect();
    let unfair: Vec<f64> = evals.iter().map(|e| abs_ate(e, Method::Unfair)).collect();
    let (mf, mu) = (stats::median(&fair), stats::median(&unfair));
    r.check("3a ATE vs unfair", mf < 0.5 * mu, format!("median |ATE| {mf:.4} < 0.5 × {mu:.4}"));
    r.check("3b ATE level", mf <= 0.15, format!("median |ATE| {mf:.4} (≤ 0.15)"));
    let mean_auc = |m: Method| stats::mean(&evals.iter().map(|e| e.report(m).unwrap().auc.unwrap()).collect::<Vec<_>>());
    let (af, ar) = (mean_auc(Method::FairPfn), mean_auc(Method::Random));
    r.check("3c AUC vs random", af >= ar + 0.1, format!("mean AUC {af:.4} ≥ {ar:.4} + 0.1"));
    let table = run_tradeoff(evals, &ALL_METHODS).unwrap();
    let diff = table
        .diff_to_avgcntf
        .iter()
        .find(|d| d.group.is_none() && d.method == "fairpfn")
        .unwrap();
    r.check(
        "3d diff to avgcntf",
        diff.mean.abs() <= 0.05,
        format!("mean {:.4} ± {:.4} ({:.2}% outliers), |mean| ≤ 0.05", diff.mean, diff.std, diff.outlier_pct),
    );
    let share = table.summary.iter().find(|s| s.method == "fairpfn").unwrap().pareto_share;
    let summary: Vec<String> = table.summary.iter().map(|s| format!("{} {:.2}", s.method, s.pareto_share)).collect();
    r.check(
        "3e pareto share",
        share >= 0.2,
        format!("fairpfn {share:.2} (≥ 0.20); all: {}", summary.join(", ")),
    );

    let init = FairPfn::new(ckpt.config.clone()).unwrap();
    let before = heldout_loss(&init, &ckpt.prior_config, 200, EVAL_SEED).unwrap();
    let after = heldout_loss(model, &ckpt.prior_config, 200, EVAL_SEED).unwrap();
    let gain = 1.0 - after / before;
    r.check("3f held-out BCE", gain >= 0.2, format!("{before:.4} → {after:.4}, {:.1}% lower (≥ 20%)", 100.0 * gain));
}

fn ablations(r: &mut Report, suite: &[CaseBundle], evals: &[BundleEvaluation]) {
    let methods = [Method::FairPfn, Method::Unfair];
    let base = run_ablation(suite, evals, QuintileKey::BaseAte, &methods).unwrap();
    let unfair = base.series(Method::Unfair, |q| q.median_abs_ate);
    let rho = stats::spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &unfair);
    r.check("4a unfair rises with base ATE", rho > 0.0, format!("Spearman {rho:.2} over {unfair:.3?}"));
    let fair = base.series(Method::FairPfn, |q| q.median_abs_ate);
    let ratio = fair[4] / fair[0];
    r.check("4b fairpfn flat in base ATE", ratio <= 1.5, format!("Q5/Q1 {ratio:.2} (≤ 1.5) over {fair:.3?}"));
    let size = run_ablation(suite, evals, QuintileKey::N, &methods).unwrap();
    let iqr = size.series(Method::FairPfn, |q| q.ate_iqr);
    r.check("4c size narrows ATE spread", iqr[4] <= iqr[0], format!("IQR Q5 {:.4} ≤ Q1 {:.4}", iqr[4], iqr[0]));
}

/// Law School shaped data from a known model: knowledge K drives UGPA,
/// LSAT and first-year average, each also shifted by race and sex.
fn write_law_school(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = stream(seed, 0x1A5);
    let mut obs = csv::Writer::from_path(dir.join("law.csv")).unwrap();
    let mut cf = csv::Writer::from_path(dir.join("law_cf.csv")).unwrap();
    let mut eps = csv::Writer::from_path(dir.join("law_eps.csv")).unwrap();
    let header = ["UGPA", "LSAT", "Race", "Sex", "FYA"];
    obs.write_record(header).unwrap();
    cf.write_record(header).unwrap();
    eps.write_record(["eps_UGPA", "eps_LSAT"]).unwrap();
    for _ in 0..n {
        let k: f64 = rng.sample(StandardNormal);
        let race = u8::from(rng.gen::<f64>() < 0.25);
        let sex = 1 + u8::from(rng.gen::<bool>());
        let eg = 0.3 * rng.sample::<f64, _>(StandardNormal);
        let el = 3.0 * rng.sample::<f64, _>(StandardNormal);
        let ef = 0.5 * rng.sample::<f64, _>(StandardNormal);
        let row = |r: u8| {
            let (r, s) = (f64::from(r), f64::from(sex));
            let ugpa = 3.0 + 0.4 * k - 0.35 * r + 0.05 * s + eg;
            let lsat = 35.0 + 5.0 * k - 5.0 * r + 0.5 * s + el;
            let fya = 0.8 * k - 0.6 * r + 0.1 * s + ef;
            let race = if r == 1.0 { "Black" } else { "White" };
            [format!("{ugpa:.4}"), format!("{lsat:.3}"), race.to_string(), sex.to_string(), format!("{fya:.4}")]
        };
        obs.write_record(row(race)).unwrap();
        cf.write_record(row(1 - race)).unwrap();
        eps.write_record([format!("{eg:.5}"), format!("{el:.5}")]).unwrap();
    }
    for w in [&mut obs, &mut cf, &mut eps] {
        w.flush().unwrap();
    }
    let manifest = serde_json::json!({
        "path": "law.csv",
        "columns": [
            {"name": "UGPA", "kind": "numeric"},
            {"name": "LSAT", "kind": "numeric"},
            {"name": "Race", "kind": "binary"},
            {"name": "Sex", "kind": "numeric"},
            {"name": "FYA", "kind": "numeric"}
        ],
        "protected": "Race",
        "protected_positive": "Black",
        "target": "FYA",
        "target_threshold": "mean",
        "counterfactual": "law_cf.csv",
        "fair_noise": "law_eps.csv",
        "folds": 5
    });
    let path = dir.join("law.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
    path
}

fn real_world(r: &mut Report, model: &FairPfn, label: &str, manifest: &Path) {
    let data = match load_manifest(manifest) {
        Ok(d) => d,
        Err(e) => {
            r.check(&format!("5  {label}"), false, format!("manifest failed to load: {e}"));
            return;
        }
    };
    let report = match harness::run_realworld(&data, &ALL_METHODS, Some(model), EVAL_SEED) {
        Ok(rep) => rep,
        Err(e) => {
            r.check(&format!("5  {label}"), false, format!("evaluation failed: {e}"));
            return;
        }
    };
    let fold_rows = report.folds.iter().filter(|f| f.method == "fairpfn").count();
    let noise_cols: Vec<&str> = data.fair_noise.as_ref().map(|(n, _)| n.iter().map(String::as_str).collect()).unwrap_or_default();
    let tau_has_eps = noise_cols
        .iter()
        .all(|c| report.correlations.iter().any(|row| row.method == "fairpfn" && row.variable == *c));
    let structural = fold_rows == data.folds && report.pooled(Method::FairPfn).is_some() && tau_has_eps;
    if report.counterfactual_available {
        let f = report.pooled(Method::FairPfn).unwrap().ate.unwrap().abs();
        let u = report.pooled(Method::Unfair).unwrap().ate.unwrap().abs();
        r.check(
            &format!("5  {label}"),
            structural && f < u,
            format!(
                "{fold_rows} folds, pooled |ATE| fairpfn {f:.4} < unfair {u:.4}, Kendall table with {noise_cols:?}"
            ),
        );
    } else {
        r.check(
            &format!("5  {label}"),
            structural,
            format!("{fold_rows} folds, no counterfactual file: DSP/AUC only, Kendall columns {noise_cols:?}"),
        );
    }
}

fn noise_reversion(r: &mut Report, model: &FairPfn, suite: &[CaseBundle]) {
    let picks: Vec<&CaseBundle> = suite.iter().step_by(3).take(20).collect();
    let gaps: Vec<(f64, f64)> = picks
        .iter()
        .map(|b| {
            let mut task = split_bundle(b, derive_seed(EVAL_SEED, b.config.seed)).unwrap();
            task.auc_labels = task.query.y.clone();
            let unfair = run_method(Method::Unfair, &task, Some(model)).unwrap();
            let noise = run_method(Method::Unfair, &task, Some(&DropLastFeature(model))).unwrap();
            (
                metrics::auc(&unfair.obs.probs, &task.auc_labels).unwrap(),
                metrics::auc(&noise.obs.probs, &task.auc_labels).unwrap(),
            )
        })
        .collect();
    let diffs: Vec<f64> = gaps.iter().map(|(u, n)| (u - n).abs()).collect();
    let within = diffs.iter().filter(|&&d| d <= 0.05).count();
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    let mean_gap = stats::mean(&gaps.iter().map(|(u, n)| u - n).collect::<Vec<_>>());
    let outside: Vec<String> = picks
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.05)
        .map(|(b, d)| format!("{} w={:.2} {d:.3}", b.id, b.config.w_a))
        .collect();
    r.check(
        "6  noise-protected reversion",
        within == picks.len(),
        format!(
            "{within}/{} bundles within 0.05 of unfair-mode AUC, worst {worst:.3}, mean gap {mean_gap:.3}, outside {outside:?}",
            picks.len()
        ),
    );
}

fn baseline_probes(r: &mut Report, model: &FairPfn) {
    let mut cfg = SuiteConfig::new(60, SUITE_SEED ^ 0xB1A5);
    cfg.groups = vec![CaseGroup::Biased];
    cfg.n_range = (1000, 10_000);
    let strong: Vec<CaseBundle> = generate_suite_with(&cfg)
        .unwrap()
        .into_iter()
        .filter(|b| b.config.w_a.abs() >= 1.0)
        .take(20)
        .collect();
    let ev = evaluate_suite(&strong, &[Method::FairPfn, Method::Unfair], Some(model), EVAL_SEED).unwrap();
    let wins = ev.iter().filter(|e| abs_ate(e, Method::Unfair) > abs_ate(e, Method::FairPfn)).count();
    r.check("d1 unfair vs fairpfn on biased |w|≥1", wins >= 16, format!("{wins}/{} (≥ 16/20)", ev.len()));

    let mut cfg = SuiteConfig::new(20, SUITE_SEED ^ 0xD1EC);
    cfg.groups = vec![CaseGroup::DirectEffect];
    cfg.n_range = (1000, 10_000);
    let direct = generate_suite_with(&cfg).unwrap();
    let ev = evaluate_suite(&direct, &[Method::Unfair, Method::Unaware], Some(model), EVAL_SEED).unwrap();
    let wins = ev.iter().filter(|e| abs_ate(e, Method::Unaware) <= abs_ate(e, Method::Unfair)).count();
    r.check("d2 unaware vs unfair on direct effect", wins >= 18, format!("{wins}/20 (≥ 18/20)"));

    let mut cfg = SuiteConfig::new(5, SUITE_SEED ^ 0xC0F0);
    cfg.groups = vec![CaseGroup::FairUnobservable];
    cfg.n_range = (10_000, 10_000);
    let unobs = generate_suite_with(&cfg).unwrap();
    let ev = evaluate_suite(&unobs, &[Method::Cfp(CfpLevel::Auto)], Some(model), EVAL_SEED).unwrap();
    let cfp = Method::Cfp(CfpLevel::Auto);
    let worst_ate = ev.iter().map(|e| abs_ate(e, cfp)).fold(0.0, f64::max);
    let worst_tau = ev
        .iter()
        .map(|e| {
            let out = e.output(cfp).unwrap();
            let a: Vec<f64> = out.obs.a.iter().map(|&v| f64::from(v)).collect();
            metrics::kendall_tau(&out.obs.probs, &a).unwrap().abs()
        })
        .fold(0.0, f64::max);
    r.check(
        "d3 cfp on fair-unobservable n=10000",
        worst_ate < 0.05 && worst_tau < 0.05,
        format!("worst |ATE| {worst_ate:.4}, worst |τ(pred, A)| {worst_tau:.4} (both < 0.05)"),
    );

    let zero = generate_case(&CaseStudyConfig {
        group: CaseGroup::Biased,
        w_a: 0.0,
        sigma: 0.5,
        n: 10_000,
        seed: SUITE_SEED,
    })
    .unwrap();
    let ev = evaluate_suite(&[zero], &[Method::Unfair], Some(model), EVAL_SEED).unwrap();
    let a = abs_ate(&ev[0], Method::Unfair);
    r.check("d4 unfair on zero-effect bundle", a < 0.05, format!("|ATE| {a:.4} (< 0.05) at n=10000"));

    let mut consistent = 0;
    for i in 0..20u64 {
        let mut batch = common::random_batch(derive_seed(EVAL_SEED, i), 200, 50, 4);
        let label = (i % 2) as u8;
        batch.context_labels = vec![label; 200];
        let p = model.predict_batch(&batch).unwrap();
        if p.iter().all(|&v| if label == 1 { v > 0.5 } else { v < 0.5 }) {
            consistent += 1;
        }
    }
    r.check("d5 constant context labels", consistent == 20, format!("{consistent}/20 contexts on the constant side"));
}

const ALL_METHODS: [Method; 7] = [
    Method::FairPfn,
    Method::Unfair,
    Method::Unaware,
    Method::AvgCntf,
    Method::Constant,
    Method::Random,
    Method::Cfp(CfpLevel::Auto),
];

fn main() {
    let start = Instant::now();
    let mut r = Report { lines: Vec::new() };
    let path = checkpoint_path();
    let ckpt = match ModelCheckpoint::load(&path) {
        Ok(c) => c,
        Err(e) => {
            println!("FAIL checkpoint: cannot load {}: {e}", path.display());
            std::process::exit(1);
        }
    };
    let model = ckpt.model();

    let mut suite_cfg = SuiteConfig::new(10, SUITE_SEED);
    suite_cfg.n_range = (1000, 10_000);
    let suite = generate_suite_with(&suite_cfg).unwrap();
    let evals = evaluate_suite(&suite, &ALL_METHODS, Some(&model), EVAL_SEED).unwrap();
    println!("evaluated {} bundles in {:.0}s", suite.len(), start.elapsed().as_secs_f64());

    exact_oracles(&mut r, &suite, &evals);
    gradient_suite(&mut r);
    desk_run(&mut r, &ckpt, &model, &evals);
    ablations(&mut r, &suite, &evals);

    let dir = tempfile::tempdir().unwrap();
    let law = write_law_school(dir.path(), 2000, SUITE_SEED);
    real_world(&mut r, &model, "law-school-shaped fixture", &law);
    if let Some(user) = std::env::var_os("FORGE_LAW_SCHOOL_MANIFEST") {
        real_world(&mut r, &model, "user manifest", Path::new(&user));
    }

    noise_reversion(&mut r, &model, &suite);
    baseline_probes(&mut r, &model);

    let failed: Vec<&str> = r.lines.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        r.lines.len() - failed.len(),
        r.lines.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join("; "));
        std::process::exit(1);
    }
}
