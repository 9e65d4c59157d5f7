//! The `mepcert` command line: every experiment runs from one JSON config and
//! writes its tables, reports and plots into the configured directory.
//!
//! Exit status is 0 on success, 1 when the computation fails or its result is
//! unusable, and 2 when the configuration or the command line is invalid.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::counterexamples::{degenerate_witness_with, swapped_witness};
use crate::diagnostics::{check_assumptions_with, AssumptionReport};
use crate::error::{MepError, Result};
use crate::geometry::{y_norm, DiscretePath};
use crate::io::{csv_table, num, path_csv, read_path_csv, versioned_json, write_atomic};
use crate::landscape::{fd_consistency, make_builtin, EnergyModel, ModelSpec, SharedModel};
use crate::mep::{
    find_minimizer, mep_system_residual, residual_f, solve_string_with, MepSolution, MepSummary, StringOptions,
};
use crate::perturbation::{run_study_with, StudyOptions};
use crate::plot::{chart, Axis, Series};
use crate::stability::{estimate_gamma, lambda_bar, GammaTrial, LambdaProfile};

#[derive(Debug, Parser)]
#[command(
    name = "mepcert",
    version,
    about = "Minimum energy paths and their stability certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the minimum energy path of the configured model.
    Mep {
        config: PathBuf,
        /// Leaf overrides such as `--solver.tol=1e-9`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Certify a path read from a CSV file.
    Certify {
        config: PathBuf,
        path: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the perturbation study.
    Perturb {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Tabulate one of the two instability witnesses on its double well.
    Counterexample {
        kind: Kind,
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Quick consistency checks of the built-in models and the solver.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Degenerate,
    Swapped,
}

/// Parses the arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Mep { config, overrides } => load(&config, &overrides).and_then(|c| cmd_mep(&c)),
        Command::Certify {
            config,
            path,
            overrides,
        } => load(&config, &overrides).and_then(|c| cmd_certify(&c, &path)),
        Command::Perturb { config, overrides } => load(&config, &overrides).and_then(|c| cmd_perturb(&c)),
        Command::Counterexample {
            kind,
            config,
            overrides,
        } => load(&config, &overrides).and_then(|c| cmd_counterexample(kind, &c)),
        Command::Selftest => cmd_selftest(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mepcert: {e}");
            match e {
                MepError::Configuration(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load(file: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| MepError::Configuration(format!("cannot read {}: {e}", file.display())))?;
    ExperimentConfig::from_json(&text, overrides)
}

/// Collects the outputs of a command and writes them only once everything
/// has been computed.
struct Outputs<'a> {
    cfg: &'a ExperimentConfig,
    files: Vec<(String, String)>,
}

impl<'a> Outputs<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg, files: vec![] }
    }

    fn add(&mut self, format: Format, name: &str, contents: impl FnOnce() -> Result<String>) -> Result<()> {
        if self.cfg.output.wants(format) {
            self.files.push((name.to_string(), contents()?));
        }
        Ok(())
    }

    fn write(self) -> Result<()> {
        let dir = Path::new(&self.cfg.output.directory);
        for (name, text) in &self.files {
            write_atomic(&dir.join(name), text)?;
        }
        Ok(())
    }
}

fn endpoint_seeds(model: &dyn EnergyModel, cfg: &ExperimentConfig) -> Result<(DVector<f64>, DVector<f64>)> {
    let (a, b) = match (&cfg.solver.start, &cfg.solver.end) {
        (Some(a), Some(b)) => (DVector::from_column_slice(a), DVector::from_column_slice(b)),
        _ => model.minimizer_seeds().ok_or_else(|| {
            MepError::Configuration(format!(
                "model '{}' has no canonical minimizers; set solver.start and solver.end",
                model.label()
            ))
        })?,
    };
    if a.len() != model.dim() || b.len() != model.dim() {
        return Err(MepError::Configuration(format!(
            "endpoint seeds must have length {}",
            model.dim()
        )));
    }
    Ok((a, b))
}

fn solve(model: &dyn EnergyModel, cfg: &ExperimentConfig) -> Result<MepSolution> {
    let (sa, sb) = endpoint_seeds(model, cfg)?;
    let ya = find_minimizer(model, &sa, cfg.solver.tol)?;
    let yb = find_minimizer(model, &sb, cfg.solver.tol)?;
    let mut opts = StringOptions::new(cfg.solver.n, cfg.solver.tol);
    opts.max_iters = cfg.solver.max_iters;
    opts.dt = cfg.solver.dt;
    solve_string_with(model, &ya, &yb, &opts)
}

fn path_plot(path: &DiscretePath, saddle: &DVector<f64>) -> String {
    let pts = path.nodes().iter().map(|y| (y[0], y[1])).collect();
    chart(
        "Minimum energy path",
        "y0",
        "y1",
        Axis::Linear,
        Axis::Linear,
        &[
            Series::line("path", pts),
            Series::dots("saddle", vec![(saddle[0], saddle[1])]),
        ],
    )
}

#[derive(Serialize)]
struct MepReport<'a> {
    model: &'a ModelSpec,
    nodes: usize,
    tol: f64,
    #[serde(flatten)]
    solution: MepSummary,
}

fn cmd_mep(cfg: &ExperimentConfig) -> Result<i32> {
    let model = cfg.model.build()?;
    let sol = solve(model.as_ref(), cfg)?;
    let mut out = Outputs::new(cfg);
    out.add(Format::Csv, "path.csv", || path_csv(&sol.path))?;
    out.add(Format::Json, "solution.json", || {
        versioned_json(&MepReport {
            model: &cfg.model,
            nodes: sol.path.len(),
            tol: cfg.solver.tol,
            solution: sol.summary(),
        })
    })?;
    if sol.path.dim() == 2 {
        out.add(Format::Svg, "path.svg", || Ok(path_plot(&sol.path, &sol.saddle)))?;
    }
    out.write()?;
    if sol.converged {
        Ok(0)
    } else {
        eprintln!(
            "mepcert: string method stopped at residual {:.3e} above tolerance {:.3e}",
            sol.residual_history.last().copied().unwrap_or(f64::NAN),
            cfg.solver.tol
        );
        Ok(1)
    }
}

#[derive(Serialize)]
struct LambdaSummary {
    dprime0: f64,
    dprime_sbar: f64,
    dprime1: f64,
    cbar: f64,
    cunderbar: f64,
    sign_violations: usize,
}

#[derive(Serialize)]
struct ResidualSummary {
    y_norm: Option<f64>,
    sup: Option<f64>,
    perp_gradient: f64,
    arc_defect: f64,
}

#[derive(Serialize)]
struct CertifyReport<'a> {
    model: &'a ModelSpec,
    nodes: usize,
    sbar: f64,
    saddle: Vec<f64>,
    sigma_a: f64,
    sigma_b: f64,
    residual: ResidualSummary,
    lambda: Option<LambdaSummary>,
    assumptions: Option<AssumptionReport>,
    gamma_hat: Option<f64>,
    roundtrip_defect: Option<f64>,
    trials: Vec<GammaTrial>,
    /// Both structure checks hold and the inverse bound was estimated.
    certified: bool,
    /// Parts of the report that could not be computed.
    errors: BTreeMap<String, String>,
}

fn cmd_certify(cfg: &ExperimentConfig, path_file: &Path) -> Result<i32> {
    let model = cfg.model.build()?;
    let text = std::fs::read_to_string(path_file)?;
    let path = read_path_csv(&text)?;
    if path.dim() != model.dim() {
        return Err(MepError::Input(format!(
            "path has dimension {} but the model has {}",
            path.dim(),
            model.dim()
        )));
    }
    let sol = MepSolution::from_path(model.as_ref(), path, cfg.solver.tol)?;
    let (perp, arc) = mep_system_residual(model.as_ref(), &sol.path)?;
    let mut errors = BTreeMap::new();
    fn keep<T>(errors: &mut BTreeMap<String, String>, key: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| errors.insert(key.to_string(), e.to_string())).ok()
    }

    let residual = keep(&mut errors, "residual", residual_f(model.as_ref(), &sol, &sol.path));
    let ynorm = residual
        .as_ref()
        .and_then(|f| keep(&mut errors, "residual", y_norm(f, sol.sbar)));
    let profile: Option<LambdaProfile> = keep(&mut errors, "lambda", lambda_bar(model.as_ref(), &sol));
    let assumptions = keep(
        &mut errors,
        "assumptions",
        check_assumptions_with(model.as_ref(), &sol, cfg.stability.gap_tol),
    );
    let gamma = keep(
        &mut errors,
        "gamma",
        estimate_gamma(model.as_ref(), &sol, cfg.stability.trials, cfg.stability.seed),
    );
    let certified = assumptions.as_ref().is_some_and(|a| a.a_holds && a.b_holds)
        && gamma.as_ref().is_some_and(|g| g.gamma_hat.is_finite());

    let report = CertifyReport {
        model: &cfg.model,
        nodes: sol.path.len(),
        sbar: sol.sbar,
        saddle: sol.saddle.iter().copied().collect(),
        sigma_a: sol.sigma_a,
        sigma_b: sol.sigma_b,
        residual: ResidualSummary {
            y_norm: ynorm,
            sup: residual.as_ref().map(|f| f.sup_norm()),
            perp_gradient: perp,
            arc_defect: arc,
        },
        lambda: profile.as_ref().map(|p| LambdaSummary {
            dprime0: p.dprime0,
            dprime_sbar: p.dprime_sbar,
            dprime1: p.dprime1,
            cbar: p.c_upper,
            cunderbar: p.c_lower,
            sign_violations: p.sign_violations.len(),
        }),
        assumptions,
        gamma_hat: gamma.as_ref().map(|g| g.gamma_hat),
        roundtrip_defect: gamma.as_ref().map(|g| g.roundtrip_defect),
        trials: gamma.map(|g| g.trials).unwrap_or_default(),
        certified,
        errors,
    };

    let mut out = Outputs::new(cfg);
    out.add(Format::Json, "certificate.json", || versioned_json(&report))?;
    if let Some(p) = &profile {
        out.add(Format::Csv, "lambda.csv", || {
            csv_table(
                &["alpha", "lambda", "dlambda"],
                p.alphas
                    .iter()
                    .zip(&p.values)
                    .zip(&p.derivative)
                    .map(|((a, l), d)| vec![num(*a), num(*l), num(*d)]),
            )
        })?;
        out.add(Format::Svg, "lambda.svg", || {
            let pts = p.alphas.iter().copied().zip(p.values.iter().copied()).collect();
            Ok(chart(
                "Path gradient profile",
                "alpha",
                "lambda",
                Axis::Linear,
                Axis::Linear,
                &[Series::line("lambda", pts)],
            ))
        })?;
    }
    if let Some(f) = &residual {
        out.add(Format::Svg, "residual.svg", || {
            let pts = f
                .alphas
                .iter()
                .copied()
                .zip(f.values.iter().map(|v| v.norm()))
                .collect();
            Ok(chart(
                "Residual magnitude",
                "alpha",
                "|F|",
                Axis::Linear,
                Axis::Linear,
                &[Series::line("|F|", pts)],
            ))
        })?;
    }
    if sol.path.dim() == 2 {
        out.add(Format::Svg, "path.svg", || Ok(path_plot(&sol.path, &sol.saddle)))?;
    }
    out.write()?;
    Ok(0)
}

#[derive(Serialize)]
struct StudyReport<'a> {
    model: &'a ModelSpec,
    bump: &'a ModelSpec,
    #[serde(flatten)]
    study: &'a crate::perturbation::PerturbationStudy,
}

fn cmd_perturb(cfg: &ExperimentConfig) -> Result<i32> {
    let model = cfg.model.build()?;
    let bump = cfg.perturbation.bump.build()?;
    let p = &cfg.perturbation;
    let mut opts = StudyOptions::new(cfg.solver.n);
    opts.tol = cfg.solver.tol;
    opts.max_iters = cfg.solver.max_iters;
    opts.epsilon = p.epsilon;
    opts.probes_per_node = p.probes;
    opts.seed = p.seed;
    opts.mask = p.mask.clone();
    if cfg.solver.start.is_some() {
        opts.seeds = Some(endpoint_seeds(model.as_ref(), cfg)?);
    }
    let study = run_study_with(model, bump, &p.deltas, &opts)?;
    let mut out = Outputs::new(cfg);
    out.add(Format::Csv, "study.csv", || study.to_csv())?;
    out.add(Format::Json, "study.json", || {
        versioned_json(&StudyReport {
            model: &cfg.model,
            bump: &p.bump,
            study: &study,
        })
    })?;
    out.add(Format::Svg, "study.svg", || {
        let pts: Vec<(f64, f64)> = study
            .rows
            .iter()
            .filter_map(|r| Some((r.model_error_c1, r.mep_error_c1?)))
            .collect();
        let mut series = vec![Series::dots("measured", pts.clone())];
        if let Some(fit) = &study.slope {
            let line = pts
                .iter()
                .filter(|(x, _)| *x > 0.0)
                .map(|&(x, _)| (x, 10f64.powf(fit.intercept) * x.powf(fit.slope)))
                .collect();
            series.push(Series::line(&format!("slope {:.3}", fit.slope), line));
        }
        Ok(chart(
            "Path error against model error",
            "model error",
            "path error",
            Axis::Log,
            Axis::Log,
            &series,
        ))
    })?;
    out.write()?;
    Ok(0)
}

fn dw(kappa: f64) -> Result<SharedModel> {
    make_builtin("dw", &BTreeMap::from([("kappa".to_string(), kappa)]))
}

fn cmd_counterexample(kind: Kind, cfg: &ExperimentConfig) -> Result<i32> {
    let c = &cfg.counterexample;
    let mut out = Outputs::new(cfg);
    match kind {
        Kind::Degenerate => {
            let w = degenerate_witness_with(dw(8.0)?.as_ref(), &c.ns, c.grid, c.eta0)?;
            out.add(Format::Csv, "degenerate.csv", || {
                csv_table(
                    &["n", "ynorm_f", "xnorm_psi", "ratio"],
                    w.table
                        .iter()
                        .map(|r| vec![r.n.to_string(), num(r.y_norm_fn), num(r.x_norm_psin), num(r.ratio)]),
                )
            })?;
            out.add(Format::Json, "degenerate.json", || versioned_json(&w))?;
            out.add(Format::Svg, "degenerate.svg", || {
                let pts = w.table.iter().map(|r| (r.n as f64, r.y_norm_fn)).collect();
                Ok(chart(
                    "Image norms of the witness sequence",
                    "n",
                    "|f_n|_Y",
                    Axis::Log,
                    Axis::Linear,
                    &[Series::dots("f_n", pts)],
                ))
            })?;
        }
        Kind::Swapped => {
            let w = swapped_witness(dw(4.0)?.as_ref(), c.grid)?;
            out.add(Format::Csv, "swapped.csv", || {
                csv_table(
                    &["refinement", "ynorm_f"],
                    [
                        vec!["1".to_string(), num(w.y_norm_f)],
                        vec!["4".to_string(), num(w.y_norm_refined)],
                    ],
                )
            })?;
            out.add(Format::Json, "swapped.json", || versioned_json(&w))?;
        }
    }
    out.write()?;
    Ok(0)
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_selftest() -> Result<i32> {
    let mut all = true;
    for (name, at) in [
        ("dw", vec![0.3, -0.2]),
        ("mueller_brown", vec![-0.5, 1.0]),
        ("quadratic", vec![0.4, 0.1]),
        ("gaussian_mixture", vec![0.2, -0.3]),
        ("sinusoid", vec![0.1, 0.7]),
    ] {
        let m = make_builtin(name, &BTreeMap::new())?;
        let r = fd_consistency(m.as_ref(), &DVector::from_vec(at), 1e-5)?;
        let worst = r.gradient_error.max(r.hessian_error);
        all &= check(&format!("derivatives of {name}"), worst < 1e-6, format!("{worst:.2e}"));
    }
    let cfg = ExperimentConfig::default();
    let model = cfg.model.build()?;
    let mut small = cfg.clone();
    small.solver.n = 51;
    let sol = solve(model.as_ref(), &small)?;
    let err = sol
        .path
        .alphas()
        .iter()
        .zip(sol.path.nodes())
        .map(|(a, y)| (y[0] - (2.0 * a - 1.0)).abs().max(y[1].abs()))
        .fold(0.0, f64::max);
    all &= check("double well path", err < 1e-6, format!("{err:.2e}"));
    all &= check(
        "double well saddle",
        (sol.sbar - 0.5).abs() < 1e-6,
        format!("{:.8}", sol.sbar),
    );
    let p = lambda_bar(model.as_ref(), &sol)?;
    let dev = (p.dprime0 - 8.0)
        .abs()
        .max((p.dprime1 - 8.0).abs())
        .max((p.dprime_sbar + 4.0).abs());
    all &= check("double well slopes", dev < 1e-4, format!("{dev:.2e}"));
    let y = y_norm(&residual_f(model.as_ref(), &sol, &sol.path)?, sol.sbar)?;
    all &= check("double well residual", y < 1e-5, format!("{y:.2e}"));
    Ok(if all { 0 } else { 1 })
}
