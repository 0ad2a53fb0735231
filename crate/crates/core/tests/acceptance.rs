//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, nonzero exit
//! if any criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use uncproxy_core::calibration::{ace, ece, mce, reliability_diagram, sce, tace};
use uncproxy_core::evaluation::{jsd, paired_ttest, pearson};
use uncproxy_core::pipeline::{self, AnalysisReport, RunConfig};
use uncproxy_core::uncertainty::{decompose, McPrediction};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    let detail = format!(
        "{detail}; {:.2}s (limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    check(elapsed < limit, detail)
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(1);
    let mut worst_ue = f64::INFINITY;
    let mut worst_bound = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let t = rng.random_range(1..=20);
        let c = rng.random_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| common::random_simplex(&mut rng, c))
            .collect();
        let u = decompose(&McPrediction::from_rows("x", &rows).map_err(|e| e.to_string())?);
        if u.u_total != u.u_aleatoric + u.u_epistemic {
            return Err(format!("identity broken: {u:?}"));
        }
        worst_ue = worst_ue.min(u.u_epistemic);
        worst_bound = worst_bound.max(u.u_total - (c as f64).ln());
    }
    let detail = format!("min u_e {worst_ue:.3e}, max u_t - ln C {worst_bound:.3e}");
    if worst_ue < -1e-10 || worst_bound > 1e-10 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(1), detail)
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let err = common::gradient_check(1, 1e-5);
    let detail = format!("max relative error {err:.2e}");
    if err >= 1e-4 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(5), detail)
}

fn calibration_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let pairs = common::random_pairs(&mut rng, 200, 4);
        let diffs = [
            ece(&pairs, 10).unwrap() - common::ece_oracle(&pairs, 10),
            mce(&pairs, 10).unwrap() - common::mce_oracle(&pairs, 10),
            sce(&pairs, 10).unwrap() - common::sce_oracle(&pairs, 10),
            ace(&pairs, 10).unwrap() - common::adaptive_oracle(&pairs, 10, None),
            tace(&pairs, 10, 0.01).unwrap().value - common::adaptive_oracle(&pairs, 10, Some(0.01)),
        ];
        worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
    }
    let detail = format!("max |library - oracle| {worst:.1e}");
    if worst > 1e-12 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(5), detail)
}

fn calibrated_generator() -> Outcome {
    let mut rng = common::rng(3);
    let pairs = common::calibrated_pairs(&mut rng, 100_000, 4);
    let e = ece(&pairs, 10).unwrap();
    let worst_gap = reliability_diagram(&pairs, 10)
        .unwrap()
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.gap())
        .fold(0.0, f64::max);
    check(
        e <= 0.02 && worst_gap <= 0.03,
        format!("ECE {e:.4} (<= 0.02), worst bin gap {worst_gap:.4} (<= 0.03)"),
    )
}

fn jsd_and_statistics() -> Outcome {
    let mut rng = common::rng(4);
    let mut asym: f64 = 0.0;
    let mut max = 0.0f64;
    for i in 0..10_000 {
        let c = 2 + i % 9;
        let p = common::random_simplex(&mut rng, c);
        let q = common::random_simplex(&mut rng, c);
        let a = jsd(&p, &q).unwrap();
        asym = asym.max((a - jsd(&q, &p).unwrap()).abs());
        max = max.max(a);
    }
    let x = [2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 6.1, 2.8, 4.9, 3.7];
    let y = [1.2, 2.9, 1.1, 4.8, 3.1, 3.6, 5.0, 2.2, 3.3, 2.4];
    let a = [
        0.62, 0.55, 0.71, 0.48, 0.66, 0.59, 0.73, 0.51, 0.64, 0.58, 0.69, 0.60,
    ];
    let b = [
        0.58, 0.56, 0.65, 0.45, 0.61, 0.60, 0.66, 0.47, 0.62, 0.52, 0.64, 0.59,
    ];
    let r = pearson(&x, &y).unwrap();
    let t = paired_ttest(&a, &b).unwrap();
    let stat_err = [
        r.r - 0.9267129073361142,
        r.p_value - 0.0001154443867917015,
        t.t_statistic - 4.418808795605722,
        t.p_value - 0.0010305467839630007,
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()));
    check(
        asym <= 1e-15 && max <= std::f64::consts::LN_2 + 1e-12 && stat_err <= 1e-9,
        format!("JSD asymmetry {asym:.1e}, max JSD {max:.6}, statistics error {stat_err:.1e}"),
    )
}

/// `synth -> train -> predict -> analyze` on the fixture into `out`.
fn run_pipeline(out: &Path) -> Result<(AnalysisReport, Duration), String> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/acceptance.toml");
    let mut config = RunConfig::load(&fixture).map_err(|e| e.to_string())?;
    config.paths.out_dir = out.to_path_buf();
    let start = Instant::now();
    let run = || -> uncproxy_core::Result<AnalysisReport> {
        pipeline::cmd_synth(&config)?;
        pipeline::cmd_train(&config)?;
        pipeline::cmd_predict(&config)?;
        pipeline::cmd_analyze(&config)
    };
    let report = run().map_err(|e| e.to_string())?;
    Ok((report, start.elapsed()))
}

fn disagreement_correlation(report: &AnalysisReport, elapsed: Duration) -> Outcome {
    let u = report
        .uncertainty
        .as_ref()
        .ok_or("no uncertainty section")?;
    let ua = u.correlations["Ua-d"].as_ref().ok_or("Ua-d missing")?;
    let ue = u.correlations["Ue-d"].as_ref().ok_or("Ue-d missing")?;
    let detail = format!(
        "r(U_a, d) = {:.3} (p = {:.1e}), r(U_e, d) = {:.3}, n = {}",
        ua.r, ua.p_value, ue.r, ua.n
    );
    if !(ua.r >= 0.2 && ua.p_value < 0.001 && ue.r.abs() < ua.r) {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(120), detail)
}

fn distribution_shift(report: &AnalysisReport) -> Outcome {
    let s = report
        .distribution_shift
        .as_ref()
        .ok_or("no shift section")?;
    let dd = s.mean_disagreement_shifted - s.mean_disagreement_in_distribution;
    check(
        s.mean_ue_shifted > s.mean_ue_in_distribution && s.ue_p_greater < 0.01 && dd.abs() < 0.05,
        format!(
            "mean U_e {:.4} shifted vs {:.4} ({} vs {} samples), one-sided p = {:.1e}, |delta d| = {:.4}",
            s.mean_ue_shifted,
            s.mean_ue_in_distribution,
            s.n_shifted,
            s.n_in_distribution,
            s.ue_p_greater,
            dd.abs()
        ),
    )
}

fn rejection(report: &AnalysisReport) -> Outcome {
    let u = report
        .uncertainty
        .as_ref()
        .ok_or("no uncertainty section")?;
    let ua = &u.rejection["Ua"].points;
    let ut = &u.rejection["Ut"].points;
    let at = |q: f64| ua.iter().find(|p| p.coverage == q).map(|p| p.accuracy);
    let (Some(a75), Some(a100)) = (at(0.75), at(1.0)) else {
        return Err("coverages 0.75 and 1.0 must be configured".into());
    };
    let gap = ua
        .iter()
        .zip(ut)
        .map(|(a, t)| (a.accuracy - t.accuracy).abs())
        .fold(0.0, f64::max);
    check(
        a75 - a100 >= 2.0 && gap <= 1.0,
        format!(
            "U_a accuracy {a100:.2}% -> {a75:.2}% at 0.75 (+{:.2} points), max |U_t - U_a| {gap:.2} points",
            a75 - a100
        ),
    )
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let mut compared = 0;
    for entry in std::fs::read_dir(first).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = std::fs::read(first.join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join(&name)).map_err(|e| format!("{name:?}: {e}"))?;
        if a != b {
            return Err(format!("{name:?} differs between runs"));
        }
        compared += 1;
    }
    Ok(format!(
        "{compared} output files byte-identical, report.json included"
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("decomposition identity and bounds", decomposition()),
        ("gradient check", gradient()),
        ("calibration oracle equivalence", calibration_oracle()),
        ("calibrated generator", calibrated_generator()),
    ];

    let dirs = (tempfile::tempdir(), tempfile::tempdir());
    let (Ok(d1), Ok(d2)) = dirs else {
        eprintln!("cannot create temp dirs");
        return ExitCode::FAILURE;
    };
    match run_pipeline(d1.path()) {
        Ok((report, elapsed)) => {
            results.push((
                "aleatoric uncertainty tracks disagreement",
                disagreement_correlation(&report, elapsed),
            ));
            results.push((
                "epistemic uncertainty flags shifted inputs",
                distribution_shift(&report),
            ));
            results.push(("rejection by uncertainty", rejection(&report)));
        }
        Err(e) => {
            for name in [
                "aleatoric uncertainty tracks disagreement",
                "epistemic uncertainty flags shifted inputs",
                "rejection by uncertainty",
            ] {
                results.push((name, Err(format!("pipeline failed: {e}"))));
            }
        }
    }
    results.push(("JSD and statistics", jsd_and_statistics()));
    results.push((
        "pipeline determinism",
        run_pipeline(d2.path()).and_then(|_| determinism(d1.path(), d2.path())),
    ));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
