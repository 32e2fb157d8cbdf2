//! Acceptance criteria 1 to 10. Each test prints one PASS/FAIL line with the
//! measured values and the pinned tolerance, then asserts the verdict.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use middev_core::estimate::{full_estimate, rel_diff, sign_flip};
use middev_core::harness::{run, ExperimentConfig, ExperimentKind, ExperimentResult, TruncationSettings};
use middev_core::ledger::{build_exact_ledger, build_ledger, identity_report, path_sums, IDENTITY_NAMES};
use middev_core::noise::{NoiseConfig, NoiseFamily};
use middev_core::params::{Case, DeviationScale, ModelConfig, ScheduleSample};
use middev_core::rates::{matmul, transpose, RateModel, RateName, Statistic};
use middev_core::simulate::{generate_stream, Trajectory};

const IDENTITY_TOL: f64 = 1e-9;
const HAND_ABS_TOL: f64 = 1e-15;
const MATRIX_TOL: f64 = 1e-10;
const RATE_TOL: f64 = 1e-12;
const CONCENTRATION_REL_TOL: f64 = 0.05;
const CONCENTRATION_P_ABS_TOL: f64 = 0.02;
const COVARIANCE_REL_TOL: f64 = 0.15;
const OFF_DIAGONAL_ABS_TOL: f64 = 0.15 * 2.0;
const CORRELATION_MAX: f64 = -0.9;
const SLOPE_REL_TOL: f64 = 0.40;
const BINOMIAL_SE_MULTIPLE: f64 = 3.0;
const THETA_ENTRY_REL_TOL: f64 = 0.10;
const SIGN_FLIP_REL_TOL: f64 = 1e-12;

fn verdict(id: u32, label: &str, pass: bool, detail: &str, started: Instant) {
    println!(
        "criterion {id:>2} ({label}): {} | {detail} | {:.1}s",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn model(case: Case, family: NoiseFamily, gamma: (f64, f64), delta: f64, n: usize) -> ModelConfig {
    ModelConfig {
        case,
        gamma1: gamma.0,
        gamma2: gamma.1,
        delta,
        scale: DeviationScale::SqrtLog,
        sigma: 1.0,
        n,
        noise: NoiseConfig { family, sigma: 1.0 },
    }
}

fn within(est: f64, target: f64, tol: f64) -> bool {
    (est / target - 1.0).abs() <= tol
}

fn stat(res: &ExperimentResult, name: &str) -> f64 {
    res.stat(name).unwrap_or_else(|| panic!("missing stat {name}")).estimate
}

#[test]
fn criterion_01_exact_identities() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut failures = 0usize;
    let mut checked = 0usize;
    for case in [Case::CaseI, Case::CaseII] {
        for family in [NoiseFamily::Gaussian, NoiseFamily::Uniform] {
            for n in [10, 100, 1_000, 10_000] {
                for rep in 0..1000u64 {
                    let g = (rng.random_range(-2.0..=-0.25), rng.random_range(-2.0..=-0.25));
                    let cfg = model(case, family, g, 0.5, n);
                    let traj = generate_stream(&cfg, 11, rep).unwrap();
                    let report = identity_report(&build_exact_ledger(&traj, cfg.sigma).unwrap(), IDENTITY_TOL);
                    assert_eq!(report.records.len(), IDENTITY_NAMES.len());
                    checked += 1;
                    let r = report.max_rel_residual();
                    if !report.all_pass() {
                        failures += 1;
                    }
                    if r > worst {
                        worst = r;
                        worst_at = format!("{case:?}/{family:?}/n={n}/rep={rep}");
                    }
                }
            }
        }
    }
    let pass = failures == 0;
    verdict(
        1,
        "exact identities",
        pass,
        &format!(
            "{checked} paths, {failures} failing, max rel residual {worst:.2e} at {worst_at} (tol {IDENTITY_TOL:.0e})"
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_02_hand_path() {
    let started = Instant::now();
    let sched = ScheduleSample::from_kappa(Case::CaseI, -1.0, -1.0, 2, 10.0, 1.0).unwrap();
    let traj = Trajectory::from_schedule(sched, vec![1.0, -1.0]);
    let est = full_estimate(&traj).unwrap();
    let sums = path_sums(&traj);
    let lg = build_ledger(&traj, &est, 1.0);
    let report = identity_report(&lg, IDENTITY_TOL);
    let id_theta = report.get("ID-THETA").unwrap().abs_residual;
    let checks = [
        ("theta_hat", est.theta_hat, 0.8),
        ("rho_hat", est.rho_hat, 0.0),
        ("d_hat", est.d_hat, 2.0),
        ("M", sums.m, -1.0),
        ("Q", sums.q(), 0.92),
    ];
    let worst = checks.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = worst <= 1e-12 && id_theta <= HAND_ABS_TOL;
    let listed: Vec<String> = checks.iter().map(|(n, a, _)| format!("{n}={a}")).collect();
    verdict(
        2,
        "hand path",
        pass,
        &format!(
            "{}, ID-THETA abs residual {id_theta:.1e} (tol {HAND_ABS_TOL:.0e})",
            listed.join(" ")
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_03_algebraic_consistency() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_matrix, mut worst_j, mut worst_d) = (0.0f64, 0.0f64, 0.0f64);
    let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.25).collect();
    for _ in 0..100 {
        let g1 = rng.random_range(-3.0..-0.05);
        let g2 = rng.random_range(-3.0..-0.05);
        let sigma = rng.random_range(0.1..3.0);
        let m = RateModel::build(g1, g2, sigma).unwrap();
        let sandwich = matmul(&matmul(&m.upsilon, &m.theta), &transpose(&m.upsilon));
        for i in 0..2 {
            for j in 0..2 {
                let scale = m.gamma[i][i].abs().max(m.gamma[j][j].abs());
                worst_matrix = worst_matrix.max((sandwich[i][j] - m.gamma[i][j]).abs() / scale);
            }
        }
        let factor = 2.0 * m.upsilon_tilde[0].powi(2) * m.theta_tilde[0][0];
        for &x in &grid {
            let j = m.eval_rate(RateName::J, x).unwrap();
            worst_j = worst_j.max(rel_diff(j * factor, x * x));
            let id = m.eval_rate(RateName::ID, x).unwrap();
            let irho_half = m.eval_rate(RateName::IRho, x / 2.0).unwrap();
            let jd = m.eval_rate(RateName::JD, x).unwrap();
            let j_half = m.eval_rate(RateName::J, x / 2.0).unwrap();
            worst_d = worst_d.max(rel_diff(id, irho_half)).max(rel_diff(jd, j_half));
        }
    }
    let pass = worst_matrix <= MATRIX_TOL && worst_j <= RATE_TOL && worst_d <= RATE_TOL;
    verdict(
        3,
        "algebraic consistency",
        pass,
        &format!(
            "sandwich {worst_matrix:.1e} (tol {MATRIX_TOL:.0e}), J relation {worst_j:.1e}, DW rates {worst_d:.1e} (tol {RATE_TOL:.0e})"
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_04_concentration() {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for case in [Case::CaseI, Case::CaseII] {
        let cfg = ExperimentConfig::new(
            model(case, NoiseFamily::Gaussian, (-1.0, -1.0), 0.3, 1_000_000),
            ExperimentKind::Concentration,
            50,
            4,
        );
        let res = run(&cfg, 0).unwrap();
        let names: &[&str] = match case {
            Case::CaseI => &["S", "T", "Q", "J_prev", "H"],
            Case::CaseII => &["S", "P", "T", "Q", "J_prev", "H"],
        };
        for &name in names {
            let s = res.stat(name).unwrap();
            let ok = if s.target == 0.0 {
                s.estimate.abs() <= CONCENTRATION_P_ABS_TOL
            } else {
                within(s.estimate, s.target, CONCENTRATION_REL_TOL)
            };
            pass &= ok;
            lines.push(format!(
                "{}:{name} {:.4}/{:.4}{}",
                case.label(),
                s.estimate,
                s.target,
                if ok { "" } else { " (out)" }
            ));
        }
    }
    verdict(
        4,
        "concentration",
        pass,
        &format!(
            "{} (rel tol {CONCENTRATION_REL_TOL}, zero-target abs tol {CONCENTRATION_P_ABS_TOL})",
            lines.join(", ")
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_05_clt_covariance() {
    let started = Instant::now();
    let variance = |case| {
        let cfg = ExperimentConfig::new(
            model(case, NoiseFamily::Gaussian, (-1.0, -1.0), 0.15, 200_000),
            ExperimentKind::VarianceMatch,
            4000,
            5,
        );
        run(&cfg, 0).unwrap()
    };
    let one = variance(Case::CaseI);
    let two = variance(Case::CaseII);
    let checks = [
        ("I var_theta", within(stat(&one, "var_theta"), 1.0, COVARIANCE_REL_TOL), stat(&one, "var_theta"), 1.0),
        ("I var_rho", within(stat(&one, "var_rho"), 4.0, COVARIANCE_REL_TOL), stat(&one, "var_rho"), 4.0),
        (
            "I cov",
            stat(&one, "cov_theta_rho").abs() <= OFF_DIAGONAL_ABS_TOL,
            stat(&one, "cov_theta_rho"),
            0.0,
        ),
        ("I var_d", within(stat(&one, "var_d"), 16.0, COVARIANCE_REL_TOL), stat(&one, "var_d"), 16.0),
        ("II var_theta", within(stat(&two, "var_theta"), 1.0, COVARIANCE_REL_TOL), stat(&two, "var_theta"), 1.0),
        ("II var_rho", within(stat(&two, "var_rho"), 1.0, COVARIANCE_REL_TOL), stat(&two, "var_rho"), 1.0),
        (
            "II corr",
            stat(&two, "corr_theta_rho") <= CORRELATION_MAX,
            stat(&two, "corr_theta_rho"),
            -1.0,
        ),
    ];
    let pass = checks.iter().all(|c| c.1);
    let finite: Vec<String> = [&one, &two]
        .iter()
        .flat_map(|r| {
            r.stats
                .iter()
                .filter_map(|s| s.finite_reference.map(|f| format!("{}:{} {:.3}", r.schedule.case.label(), s.name, f)))
        })
        .collect();
    let listed: Vec<String> = checks
        .iter()
        .map(|(n, ok, v, t)| format!("{n} {v:.3}/{t}{}", if *ok { "" } else { " (out)" }))
        .collect();
    verdict(
        5,
        "clt covariance",
        pass,
        &format!(
            "{} (rel tol {COVARIANCE_REL_TOL}, off-diagonal {OFF_DIAGONAL_ABS_TOL}, corr <= {CORRELATION_MAX}); finite-kappa references {}",
            listed.join(", "),
            finite.join(", ")
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_06_tail_slope() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::new(
        model(Case::CaseI, NoiseFamily::Gaussian, (-1.0, -1.0), 0.1, 50_000),
        ExperimentKind::TailSlope,
        100_000,
        6,
    );
    cfg.thresholds = vec![0.5, 1.0];
    cfg.statistic = Statistic::Theta;
    let res = run(&cfg, 0).unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for t in &res.thresholds {
        let ok = t.slope.is_some_and(|s| within(s, t.rate_prediction, SLOPE_REL_TOL));
        pass &= ok;
        lines.push(format!(
            "x={} slope {} vs I={:.4} (count {}){}",
            t.x,
            t.slope.map_or("censored".to_string(), |s| format!("{s:.4}")),
            t.rate_prediction,
            t.count,
            if ok { "" } else { " (out)" }
        ));
    }
    let monotone = res
        .thresholds
        .windows(2)
        .all(|w| matches!((w[0].slope, w[1].slope), (Some(a), Some(b)) if b > a));
    pass &= monotone;
    verdict(
        6,
        "tail slope",
        pass,
        &format!("{}, monotone {monotone} (rel tol {SLOPE_REL_TOL})", lines.join(", ")),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_07_bercu_touati() {
    let started = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for case in [Case::CaseI, Case::CaseII] {
        let cfg = ExperimentConfig::new(
            model(case, NoiseFamily::Gaussian, (-1.0, -1.0), 0.3, 1_000),
            ExperimentKind::BercuTouati,
            100_000,
            7,
        );
        let res = run(&cfg, 0).unwrap();
        assert_eq!(res.bercu_touati.len(), 9);
        let mut worst = f64::NEG_INFINITY;
        for b in &res.bercu_touati {
            let ok = b.frequency <= b.bound + BINOMIAL_SE_MULTIPLE * b.binomial_se;
            pass &= ok;
            worst = worst.max(b.frequency - b.bound);
        }
        lines.push(format!(
            "case {}: 9 cells, max(frequency - bound) {worst:.4}",
            case.label()
        ));
    }
    verdict(
        7,
        "Bercu-Touati",
        pass,
        &format!("{} (slack {BINOMIAL_SE_MULTIPLE} binomial se)", lines.join(", ")),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_08_truncation() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::new(
        model(Case::CaseI, NoiseFamily::Gaussian, (-1.0, -1.0), 0.3, 100_000),
        ExperimentKind::Truncation,
        1000,
        8,
    );
    cfg.truncation = Some(TruncationSettings {
        r: 1.0,
        n_grid: vec![1_000, 10_000, 100_000],
    });
    let res = run(&cfg, 0).unwrap();
    let p99: Vec<f64> = res.truncation.iter().map(|t| t.gap_p99).collect();
    let decreasing = p99.windows(2).all(|w| w[1] < w[0]);
    let last = res.truncation.last().unwrap();
    let target = [[0.25, 0.25], [0.25, 0.5]];
    let mut entries_ok = true;
    for i in 0..2 {
        for j in 0..2 {
            entries_ok &= within(last.cov_mean[i][j], target[i][j], THETA_ENTRY_REL_TOL);
        }
    }
    let pass = decreasing && entries_ok;
    let p99_text: Vec<String> = p99.iter().map(|v| format!("{v:.3e}")).collect();
    verdict(
        8,
        "truncation",
        pass,
        &format!(
            "gap p99 [{}] strictly decreasing {decreasing}; mean <Z>/(n kappa) at n=1e5 {:.4?} vs {target:?} (rel tol {THETA_ENTRY_REL_TOL})",
            p99_text.join(", "),
            last.cov_mean
        ),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_09_sign_flip() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut alpha, mut beta, mut e_naive, mut e_exact) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let families = [NoiseFamily::Gaussian, NoiseFamily::Uniform, NoiseFamily::TwoPoint];
    for i in 0..100u64 {
        let case = if i % 2 == 0 { Case::CaseI } else { Case::CaseII };
        let g = (rng.random_range(-2.0..=-0.25), rng.random_range(-2.0..=-0.25));
        let n = rng.random_range(50..=2_000);
        let cfg = model(case, families[(i % 3) as usize], g, 0.5, n);
        let traj = generate_stream(&cfg, 99, i).unwrap();
        let (_, rep) = sign_flip(&traj).unwrap();
        alpha = alpha.max(rep.err_alpha);
        beta = beta.max(rep.err_beta);
        e_naive = e_naive.max(rep.err_e_naive);
        e_exact = e_exact.max(rep.err_e_reflected);
    }
    let pass = alpha <= SIGN_FLIP_REL_TOL && beta <= SIGN_FLIP_REL_TOL && e_naive <= SIGN_FLIP_REL_TOL;
    verdict(
        9,
        "sign flip",
        pass,
        &format!(
            "alpha=-theta {alpha:.1e}, beta=-rho {beta:.1e}, e=d {e_naive:.1e} (tol {SIGN_FLIP_REL_TOL:.0e}); e=4-d-2f_n holds to {e_exact:.1e}"
        ),
        started,
    );
    assert!(pass);
}

/// Small configs of every experiment kind for the byte-identity check.
fn determinism_configs(dir: &Path) -> Vec<(&'static str, std::path::PathBuf)> {
    let base = model(Case::CaseI, NoiseFamily::Gaussian, (-1.0, -1.0), 0.3, 2_000);
    let mut out = Vec::new();
    for (cmd, kind) in [
        ("concentration", ExperimentKind::Concentration),
        ("variance", ExperimentKind::VarianceMatch),
        ("tailslope", ExperimentKind::TailSlope),
        ("bercu-touati", ExperimentKind::BercuTouati),
        ("truncation", ExperimentKind::Truncation),
    ] {
        let mut cfg = ExperimentConfig::new(base.clone(), kind, 400, 10);
        cfg.thresholds = vec![0.25, 0.5, 1.0];
        if kind == ExperimentKind::Truncation {
            cfg.truncation = Some(TruncationSettings {
                r: 1.0,
                n_grid: vec![500, 2_000],
            });
        }
        let path = dir.join(format!("{cmd}.config.json"));
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        out.push((cmd, path));
    }
    out
}

#[test]
fn criterion_10_determinism() {
    let started = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let mut compared = 0usize;
    let mut mismatches = Vec::new();
    for (cmd, cfg) in determinism_configs(work.path()) {
        let mut outputs = Vec::new();
        for threads in ["1", "8"] {
            let out = work.path().join(format!("{cmd}-t{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_middev"))
                .args([cmd, "--config"])
                .arg(&cfg)
                .args(["--threads", threads, "--out"])
                .arg(&out)
                .env_remove("MIDDEV_OUT")
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} --threads {threads}");
            outputs.push(out);
        }
        let mut files: Vec<_> = fs::read_dir(&outputs[0])
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| !n.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        files.sort();
        for f in files {
            compared += 1;
            if fs::read(outputs[0].join(&f)).unwrap() != fs::read(outputs[1].join(&f)).unwrap() {
                mismatches.push(format!("{cmd}/{}", f.to_string_lossy()));
            }
        }
    }
    let pass = mismatches.is_empty() && compared == 15;
    verdict(
        10,
        "determinism",
        pass,
        &format!(
            "{compared} result files compared at 1 and 8 threads, mismatches {:?}",
            mismatches
        ),
        started,
    );
    assert!(pass);
}
