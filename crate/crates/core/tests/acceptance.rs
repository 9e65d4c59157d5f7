//! Acceptance suite. Each test prints one PASS or FAIL line to the real
//! standard output, bypassing the harness capture, and fails when its
//! criterion does.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use mepstab::counterexamples::{degenerate_witness, swapped_witness};
use mepstab::diagnostics::check_assumptions;
use mepstab::geometry::{random_field, uniform_alphas, x_norm, y_norm, DiscretePath, FieldRole, NodeField};
use mepstab::landscape::{make_builtin, SharedModel};
use mepstab::mep::{find_minimizer, residual_f, solve_string, solve_string_with, MepSolution, StringOptions};
use mepstab::perturbation::{run_study_with, StudyOptions};
use mepstab::stability::{
    apply_df, assemble_perp_system, estimate_gamma, lambda_bar, solve_perp, transport_frames, Linearization,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn report(name: &str, outcome: Outcome) {
    let line = match &outcome {
        Ok(detail) => format!("PASS  {name}: {detail}\n"),
        Err(detail) => format!("FAIL  {name}: {detail}\n"),
    };
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    if let Err(detail) = outcome {
        panic!("{name}: {detail}");
    }
}

/// Collects failed checks of one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    facts: Vec<String>,
}

impl Checks {
    fn expect(&mut self, ok: bool, what: String) {
        if ok {
            self.facts.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn outcome(self) -> Outcome {
        if self.failures.is_empty() {
            Ok(self.facts.join("; "))
        } else {
            Err(self.failures.join("; "))
        }
    }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn model(name: &str, params: &[(&str, f64)]) -> SharedModel {
    let p: BTreeMap<String, f64> = params.iter().map(|(k, x)| (k.to_string(), *x)).collect();
    make_builtin(name, &p).unwrap()
}

fn dw(kappa: f64) -> SharedModel {
    model("dw", &[("kappa", kappa)])
}

fn solved(m: &SharedModel, n: usize, tol: f64) -> MepSolution {
    let (sa, sb) = m.minimizer_seeds().unwrap();
    let ya = find_minimizer(m.as_ref(), &sa, tol).unwrap();
    let yb = find_minimizer(m.as_ref(), &sb, tol).unwrap();
    solve_string(m.as_ref(), &ya, &yb, n, tol).unwrap()
}

/// The exact double-well path on `n` cells.
fn dw_exact(kappa: f64, n: usize) -> (SharedModel, MepSolution) {
    let m = dw(kappa);
    let path = DiscretePath::from_fn(uniform_alphas(n), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
    let sol = MepSolution::from_path(m.as_ref(), path, 1e-10).unwrap();
    (m, sol)
}

fn lam(a: f64) -> f64 {
    let x = 2.0 * a - 1.0;
    2.0 * x * (x * x - 1.0)
}

#[test]
fn double_well_golden_oracle() {
    let m = dw(10.0);
    let sol = solved(&m, 200, 1e-10);
    let mut c = Checks::default();
    let err = sol
        .path
        .alphas()
        .iter()
        .zip(sol.path.nodes())
        .map(|(a, y)| (y - v(&[2.0 * a - 1.0, 0.0])).amax())
        .fold(0.0, f64::max);
    c.expect(err <= 1e-6, format!("node error {err:.2e} ≤ 1e-6"));
    c.expect((sol.sbar - 0.5).abs() <= 1e-6, format!("sbar {:.10}", sol.sbar));
    c.expect(
        sol.saddle.amax() <= 1e-8,
        format!("saddle offset {:.2e} ≤ 1e-8", sol.saddle.amax()),
    );
    let p = lambda_bar(m.as_ref(), &sol).unwrap();
    for (label, got, want) in [
        ("lambda'(0)", p.dprime0, 8.0),
        ("lambda'(sbar)", p.dprime_sbar, -4.0),
        ("lambda'(1)", p.dprime1, 8.0),
    ] {
        c.expect((got - want).abs() <= 1e-5, format!("{label} = {got:.8}"));
    }
    report("double-well golden oracle", c.outcome());
}

#[test]
fn weighted_norm_is_bounded_by_three_times_the_path_norm() {
    let alphas = uniform_alphas(200);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let controls = rng.gen_range(3..12);
        let dim = rng.gen_range(1..4);
        let sbar = rng.gen_range(0.2..0.8);
        let f = random_field(&alphas, dim, controls, &mut rng);
        let (y, x) = (y_norm(&f, sbar).unwrap(), x_norm(&f));
        worst = worst.max(y / x);
        if y > 3.0 * x + 1e-6 {
            violations += 1;
        }
    }
    let outcome = if violations == 0 {
        Ok(format!("0 violations in 200 fields, largest ratio {worst:.4}"))
    } else {
        Err(format!("{violations} violations, largest ratio {worst:.4}"))
    };
    report("weighted norm bound", outcome);
}

/// Residual norms below this are rounding noise and need not shrink further.
const ROUNDING_FLOOR: f64 = 1e-10;

#[test]
fn residual_vanishes_at_converged_paths() {
    let mut c = Checks::default();
    for (label, m) in [
        ("double well", dw(10.0)),
        ("Mueller-Brown", model("mueller_brown", &[])),
    ] {
        let norms: Vec<f64> = [200, 400]
            .iter()
            .map(|&n| {
                let sol = solved(&m, n, 1e-11);
                y_norm(&residual_f(m.as_ref(), &sol, &sol.path).unwrap(), sol.sbar).unwrap()
            })
            .collect();
        c.expect(
            norms[0] <= 1e-5,
            format!("{label}: y_norm {:.2e} ≤ 1e-5 on 201 nodes", norms[0]),
        );
        let shrinks = norms[0] >= 3.0 * norms[1] || norms[0].max(norms[1]) <= ROUNDING_FLOOR;
        c.expect(
            shrinks,
            format!(
                "{label}: {:.2e} on 401 nodes, factor {:.2}",
                norms[1],
                norms[0] / norms[1]
            ),
        );
    }
    report("root of the residual", c.outcome());
}

#[test]
fn linearization_matches_central_differences() {
    let (m, sol) = dw_exact(10.0, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let psi = random_field(sol.path.alphas(), 2, rng.gen_range(3..9), &mut rng);
        let fp = residual_f(m.as_ref(), &sol, &sol.path.displaced(&psi, eps).unwrap()).unwrap();
        let fm = residual_f(m.as_ref(), &sol, &sol.path.displaced(&psi, -eps).unwrap()).unwrap();
        let fd = fp.combine(0.5 / eps, &fm, -0.5 / eps).unwrap();
        let lin = apply_df(m.as_ref(), &sol, &psi, true).unwrap();
        let rel = y_norm(&fd.combine(1.0, &lin, -1.0).unwrap(), sol.sbar).unwrap() / y_norm(&lin, sol.sbar).unwrap();
        worst = worst.max(rel);
    }
    let detail = format!("largest relative error {worst:.2e} over 20 variations");
    report(
        "linearization consistency",
        if worst <= 1e-3 { Ok(detail) } else { Err(detail) },
    );
}

#[test]
fn inverse_round_trip_and_stable_constant() {
    let mut c = Checks::default();
    let (m, sol) = dw_exact(10.0, 200);
    let op = Linearization::new(m.as_ref(), &sol).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let psi = random_field(sol.path.alphas(), 2, rng.gen_range(3..9), &mut rng);
        let back = op.solve(&op.apply_at_mep(&psi).unwrap()).unwrap().psi;
        worst = worst.max(x_norm(&back.combine(1.0, &psi, -1.0).unwrap()) / x_norm(&psi));
    }
    c.expect(worst <= 1e-3, format!("round trip defect {worst:.2e} ≤ 1e-3"));
    let g1 = estimate_gamma(m.as_ref(), &sol, 20, 1).unwrap().gamma_hat;
    let (m2, sol2) = dw_exact(10.0, 400);
    let g2 = estimate_gamma(m2.as_ref(), &sol2, 20, 1).unwrap().gamma_hat;
    let change = (g2 - g1).abs() / g1;
    c.expect(change <= 0.2, format!("gamma {g1:.4} -> {g2:.4}, change {change:.3}"));
    report("isomorphism round trip", c.outcome());
}

/// RK4 from just off the saddle outward to every node.
fn shoot(alphas: &[f64], sbar: f64, pin: f64, rhs: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let step = |a: f64, b: f64, y: f64| {
        let h = b - a;
        let k1 = rhs(a, y);
        let k2 = rhs(a + 0.5 * h, y + 0.5 * h * k1);
        let k3 = rhs(a + 0.5 * h, y + 0.5 * h * k2);
        let k4 = rhs(b, y + h * k3);
        y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    };
    let march = |from: f64, to: f64, mut y: f64| {
        let mut a = from;
        while (to - a).abs() > 1e-15 {
            let near = a.abs().min((1.0 - a).abs()).min((a - sbar).abs().max(1e-7));
            let h = (0.02 * near).clamp(1e-9, 2e-4);
            let b = if to > a { (a + h).min(to) } else { (a - h).max(to) };
            y = step(a, b, y);
            a = b;
        }
        y
    };
    let off = 1e-7;
    let mut out = vec![0.0; alphas.len()];
    let last = alphas.len() - 1;
    for i in (1..last).filter(|&i| alphas[i] == sbar) {
        out[i] = pin;
    }
    let (mut y, mut a) = (pin, sbar + off);
    for i in (1..last).filter(|&i| alphas[i] > sbar) {
        y = march(a, alphas[i], y);
        a = alphas[i];
        out[i] = y;
    }
    let (mut y, mut a) = (pin, sbar - off);
    for i in (1..last).rev().filter(|&i| alphas[i] < sbar) {
        y = march(a, alphas[i], y);
        a = alphas[i];
        out[i] = y;
    }
    out
}

#[test]
fn singular_solve_matches_shooting() {
    let mut c = Checks::default();
    let (m, sol) = dw_exact(10.0, 200);
    let frames = transport_frames(&sol).unwrap();
    // Source whose projected right-hand side is g(α) = −α(α − 1).
    let f = NodeField::from_fn(sol.path.alphas(), FieldRole::Source, |a| v(&[0.0, a * (a - 1.0)]));
    let sys = assemble_perp_system(m.as_ref(), &sol, &frames, &f).unwrap();
    let perp = solve_perp(&sys, &frames).unwrap();
    let beta = perp.beta.spline();
    let pin = -sys.g_sbar[0] / sys.a_sbar[(0, 0)];
    let at_pin = (beta.eval(sol.sbar)[0] - pin).abs();
    c.expect(at_pin <= 1e-8, format!("pin defect {at_pin:.2e} ≤ 1e-8"));
    let half = beta.eval(0.5)[0];
    c.expect((half + 1.0 / 40.0).abs() <= 1e-8, format!("beta(1/2) = {half:.10}"));
    let oracle = shoot(sol.path.alphas(), 0.5, -1.0 / 40.0, |a, b| {
        (10.0 * b - a * (a - 1.0)) / lam(a)
    });
    let err = perp
        .beta
        .values
        .iter()
        .zip(&oracle)
        .map(|(b, o)| (b[0] - o).abs())
        .fold(0.0, f64::max);
    c.expect(err <= 1e-4, format!("sup distance to shooting {err:.2e} ≤ 1e-4"));
    report("singular solve cross-validation", c.outcome());
}

#[test]
fn perturbation_error_is_linear_in_the_model_error() {
    let mut opts = StudyOptions::new(200);
    opts.tol = 1e-10;
    let deltas = [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];
    let study = run_study_with(dw(10.0), model("sinusoid", &[("kx", 3.0), ("ky", 2.0)]), &deltas, &opts).unwrap();
    let mut c = Checks::default();
    match &study.slope {
        Some(fit) => c.expect(
            (fit.slope - 1.0).abs() <= 0.2,
            format!("slope {:.4} (95% CI {:.4}..{:.4})", fit.slope, fit.ci_low, fit.ci_high),
        ),
        None => c.expect(false, "no slope could be fitted".into()),
    }
    let zero = study.rows.iter().find(|r| r.delta == 0.0).unwrap();
    match zero.mep_error_c1 {
        Some(e) => c.expect(
            e <= 2.0 * opts.tol,
            format!("unperturbed error {e:.2e} ≤ {:.0e}", 2.0 * opts.tol),
        ),
        None => c.expect(false, "unperturbed row failed".into()),
    }
    report("perturbation study", c.outcome());
}

#[test]
fn degenerate_witness_sequence() {
    let w = degenerate_witness(dw(8.0).as_ref(), &[2, 4, 8, 16, 32], 40).unwrap();
    let mut c = Checks::default();
    let smallest = w.table.iter().map(|r| r.x_norm_psin).fold(f64::INFINITY, f64::min);
    c.expect(smallest >= 8.0, format!("smallest |psi_n|_X {smallest:.4} ≥ 8"));
    let ys: Vec<f64> = w.table.iter().map(|r| r.y_norm_fn).collect();
    c.expect(
        ys.windows(2).all(|p| p[1] < p[0]),
        format!("|f_n|_Y decreasing: {ys:.4?}"),
    );
    c.expect(w.decay() <= 1e-2, format!("final/initial {:.4} ≤ 1e-2", w.decay()));
    report("degenerate witness", c.outcome());
}

#[test]
fn swapped_witness_singularity() {
    let w = swapped_witness(dw(4.0).as_ref(), 40).unwrap();
    let mut c = Checks::default();
    c.expect(w.sigma_j == 0.5, format!("sigma_j = {}", w.sigma_j));
    c.expect(
        (w.blowup_fit.slope + 0.5).abs() <= 0.05,
        format!("blow-up exponent {:.4}", w.blowup_fit.slope),
    );
    c.expect(
        w.refinement_change <= 0.1,
        format!("|f|_Y {:.4} -> {:.4} under refinement", w.y_norm_f, w.y_norm_refined),
    );
    report("swapped witness", c.outcome());
}

#[test]
fn assumption_reports() {
    let mut c = Checks::default();
    let (m, sol) = dw_exact(10.0, 200);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    c.expect(
        r.a_holds && r.b_holds,
        format!("DW(10) a_holds {} b_holds {}", r.a_holds, r.b_holds),
    );
    c.expect(
        (r.omega_s - 10.0).abs() <= 1e-8 && (r.omega_b - 10.0).abs() <= 1e-8,
        format!("omega_S {} omega_B {}", r.omega_s, r.omega_b),
    );
    c.expect(
        (r.sigma_ratio - 1.25).abs() <= 1e-8,
        format!("DW(10) sigma_ratio {}", r.sigma_ratio),
    );
    let (m, sol) = dw_exact(8.0, 200);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    c.expect(
        !r.simple_a && !r.simple_b,
        format!("DW(8) simple {} {}", r.simple_a, r.simple_b),
    );
    let (m, sol) = dw_exact(4.0, 200);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    c.expect(
        !r.lowest_a && !r.lowest_b,
        format!("DW(4) lowest {} {}", r.lowest_a, r.lowest_b),
    );
    c.expect(
        r.sigma_ratio < 1.0 && (r.sigma_ratio - 0.5).abs() <= 1e-8,
        format!("DW(4) sigma_ratio {}", r.sigma_ratio),
    );
    report("assumption reports", c.outcome());
}

fn run_cli(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mepcert"))
        .current_dir(dir)
        .args(args)
        .status()
        .unwrap()
        .code()
        .unwrap_or(-1)
}

/// Relative path to contents.
type Files = BTreeMap<String, Vec<u8>>;

fn tree(dir: &Path) -> Files {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn command_line_runs_are_byte_identical() {
    let config = r#"{
        "model": {"name": "dw", "params": {"kappa": 10}},
        "solver": {"n": 100, "tol": 1e-9},
        "stability": {"trials": 10, "seed": 3},
        "perturbation": {"deltas": [0, 1e-4, 1e-3, 1e-2]},
        "counterexample": {"grid": 20}
    }"#;
    let runs: Vec<(Vec<i32>, Files)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            std::fs::write(dir.path().join("exp.json"), config).unwrap();
            let codes = vec![
                run_cli(dir.path(), &["mep", "exp.json", "--output.directory=out"]),
                run_cli(
                    dir.path(),
                    &["certify", "exp.json", "out/path.csv", "--output.directory=cert"],
                ),
                run_cli(dir.path(), &["perturb", "exp.json", "--output.directory=study"]),
                run_cli(
                    dir.path(),
                    &["counterexample", "degenerate", "exp.json", "--output.directory=cx"],
                ),
                run_cli(
                    dir.path(),
                    &["counterexample", "swapped", "exp.json", "--output.directory=cx"],
                ),
            ];
            (codes, tree(dir.path()))
        })
        .collect();
    let mut c = Checks::default();
    c.expect(runs[0].0.iter().all(|&s| s == 0), format!("exit codes {:?}", runs[0].0));
    c.expect(runs[0].1.len() >= 15, format!("{} files written", runs[0].1.len()));
    let differing: Vec<&String> = runs[0]
        .1
        .iter()
        .filter(|(k, bytes)| runs[1].1.get(*k) != Some(*bytes))
        .map(|(k, _)| k)
        .collect();
    c.expect(
        differing.is_empty() && runs[0].1.len() == runs[1].1.len(),
        format!("differing files {differing:?}"),
    );
    report("determinism", c.outcome());
}

#[test]
fn relaxation_reaches_the_same_path_from_a_bent_start() {
    // Not a criterion of its own: guards the oracle test above against the
    // straight start being exact already.
    let m = dw(10.0);
    let alphas = uniform_alphas(100);
    let bent = DiscretePath::from_fn(alphas, |a| v(&[2.0 * a - 1.0, 0.3 * (std::f64::consts::PI * a).sin()])).unwrap();
    let ya = bent.start().clone();
    let yb = bent.end().clone();
    let mut opts = StringOptions::new(100, 1e-10);
    opts.initial = Some(bent);
    let sol = solve_string_with(m.as_ref(), &ya, &yb, &opts).unwrap();
    let err = sol
        .path
        .alphas()
        .iter()
        .zip(sol.path.nodes())
        .map(|(a, y)| (y - v(&[2.0 * a - 1.0, 0.0])).amax())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6 && (sol.sbar - 0.5).abs() <= 1e-6, "{err} {}", sol.sbar);
}
