//! Perturbed landscapes: how far the path moves when the energy changes by a
//! small amount, measured against the size of the change.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diagnostics::check_assumptions;
use crate::error::{MepError, Result};
use crate::geometry::{x_norm, Curve, DiscretePath, NodeField};
use crate::landscape::{self, EnergyModel, PerturbedModel, SharedModel};
use crate::mep::{find_minimizer, solve_string_with, MepSolution, StringOptions};

/// Affine-corrected projection of a base path onto a perturbed problem.
///
/// Every node is projected onto the kept coordinates, then shifted by the
/// linear blend of the endpoint corrections `y_d − I y`, so that the result
/// starts at `ya_d` and ends at `yb_d` exactly.
pub fn interpolate_path(
    base: &MepSolution,
    ya_d: &DVector<f64>,
    yb_d: &DVector<f64>,
    mask: Option<&[bool]>,
) -> Result<DiscretePath> {
    let path = &base.path;
    if ya_d.len() != path.dim() || yb_d.len() != path.dim() {
        return Err(MepError::Input("perturbed endpoints have the wrong dimension".into()));
    }
    if mask.is_some_and(|m| m.len() != path.dim()) {
        return Err(MepError::Input("mask length must equal the model dimension".into()));
    }
    let project = |y: &DVector<f64>| match mask {
        None => y.clone(),
        Some(m) => DVector::from_fn(y.len(), |i, _| if m[i] { y[i] } else { 0.0 }),
    };
    let shift_a = ya_d - project(path.start());
    let shift_b = yb_d - project(path.end());
    let mut nodes: Vec<DVector<f64>> = path
        .alphas()
        .iter()
        .zip(path.nodes())
        .map(|(&a, y)| project(y) + &shift_b * a + &shift_a * (1.0 - a))
        .collect();
    // The formula reproduces the endpoints up to rounding; pin them exactly.
    let last = nodes.len() - 1;
    nodes[0] = ya_d.clone();
    nodes[last] = yb_d.clone();
    path.with_nodes(nodes)
}

/// Settings of a perturbation study beyond the model pair and amplitudes.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub n: usize,
    pub tol: f64,
    /// Tube radius; `0.1·L` of the base path when absent.
    pub epsilon: Option<f64>,
    pub probes_per_node: usize,
    pub seed: u64,
    pub mask: Option<Vec<bool>>,
    /// Endpoint seeds; the model's canonical pair when absent.
    pub seeds: Option<(DVector<f64>, DVector<f64>)>,
    pub max_iters: usize,
}

impl StudyOptions {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            tol: 1e-8,
            epsilon: None,
            probes_per_node: 20,
            seed: 0,
            mask: None,
            seeds: None,
            max_iters: 200_000,
        }
    }
}

/// One amplitude of the study. Quantities that could not be computed are
/// absent, and `converged` is false.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub delta: f64,
    pub model_error_c1: f64,
    pub model_error_c2: f64,
    pub subspace_error: f64,
    pub mep_error_c1: Option<f64>,
    pub min_a_shift: Option<f64>,
    pub min_b_shift: Option<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

/// Least-squares line in log–log coordinates with a 95% interval on the slope.
#[derive(Debug, Clone, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationStudy {
    pub deltas: Vec<f64>,
    pub rows: Vec<StudyRow>,
    /// Path error against model error.
    pub slope: Option<LogLogFit>,
    /// Largest minimizer shift against the amplitude.
    pub shift_fit: Option<LogLogFit>,
    pub epsilon: f64,
    pub probes_per_node: usize,
    pub base_length: f64,
}

impl PerturbationStudy {
    /// CSV table, one row per amplitude; missing values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        let csv_err = |e: csv::Error| MepError::Io(std::io::Error::other(e));
        w.write_record([
            "delta",
            "model_error_c1",
            "subspace_error",
            "mep_error_c1",
            "minA_shift",
            "minB_shift",
            "converged",
        ])
        .map_err(csv_err)?;
        let num = |x: f64| format!("{x:.16e}");
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                num(r.delta),
                num(r.model_error_c1),
                num(r.subspace_error),
                opt(r.mep_error_c1),
                opt(r.min_a_shift),
                opt(r.min_b_shift),
                r.converged.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| MepError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| MepError::Parse(e.to_string()))
    }
}

/// Fits `log y = slope·log x + intercept` over the strictly positive pairs.
pub fn loglog_fit(pairs: &[(f64, f64)]) -> Option<LogLogFit> {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let half = if n > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let se = (rss / (nf - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?.inverse_cdf(0.975);
        t * se
    } else {
        f64::INFINITY
    };
    Some(LogLogFit {
        slope,
        intercept,
        ci_low: slope - half,
        ci_high: slope + half,
        points: n,
    })
}

/// Largest `|E_δ − E| + |∇E_δ − ∇E|` and `|∇²E_δ − ∇²E|` over the nodes and
/// random points of the ε-balls around them.
fn tube_errors(
    base: &dyn EnergyModel,
    perturbed: &dyn EnergyModel,
    path: &DiscretePath,
    epsilon: f64,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let dim = path.dim();
    let mut c1: f64 = 0.0;
    let mut c2: f64 = 0.0;
    for y in path.nodes() {
        for k in 0..=probes {
            let point = if k == 0 {
                y.clone()
            } else {
                let dir = DVector::<f64>::from_fn(dim, |_, _| rng.sample(StandardNormal)).normalize();
                let radius = epsilon * rng.gen::<f64>().powf(1.0 / dim as f64);
                y + dir * radius
            };
            let e = landscape::evaluate(base, &point)?;
            let p = landscape::evaluate(perturbed, &point)?;
            c1 = c1.max((p.energy - e.energy).abs() + (&p.gradient - &e.gradient).norm());
            c2 = c2.max((&p.hessian - &e.hessian).norm());
        }
    }
    Ok((c1, c2))
}

struct Base {
    model: SharedModel,
    sol: MepSolution,
    ya: DVector<f64>,
    yb: DVector<f64>,
}

fn study_row(base: &Base, bump: &SharedModel, delta: f64, opts: &StudyOptions, epsilon: f64) -> StudyRow {
    let mut row = StudyRow {
        delta,
        model_error_c1: f64::NAN,
        model_error_c2: f64::NAN,
        subspace_error: f64::NAN,
        mep_error_c1: None,
        min_a_shift: None,
        min_b_shift: None,
        converged: false,
        failure: None,
    };
    if let Err(e) = fill_row(&mut row, base, bump, opts, epsilon) {
        row.failure = Some(e.to_string());
    }
    row
}

fn fill_row(row: &mut StudyRow, base: &Base, bump: &SharedModel, opts: &StudyOptions, epsilon: f64) -> Result<()> {
    let perturbed = PerturbedModel::new(base.model.clone(), bump.clone(), row.delta, opts.mask.clone())?;
    let path = &base.sol.path;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Keyed by the amplitude, so the probes do not depend on row order.
    rng.set_stream(row.delta.to_bits());
    let (c1, c2) = tube_errors(
        base.model.as_ref(),
        &perturbed,
        path,
        epsilon,
        opts.probes_per_node,
        &mut rng,
    )?;
    row.model_error_c1 = c1;
    row.model_error_c2 = c2;
    let projected: Vec<DVector<f64>> = path.nodes().iter().map(|y| perturbed.project(y)).collect();
    row.subspace_error = x_norm(&NodeField::path_difference(path, &path.with_nodes(projected)?)?);

    let ya_d = find_minimizer(&perturbed, &perturbed.project(&base.ya), opts.tol)?;
    let yb_d = find_minimizer(&perturbed, &perturbed.project(&base.yb), opts.tol)?;
    row.min_a_shift = Some((&ya_d - &base.ya).norm());
    row.min_b_shift = Some((&yb_d - &base.yb).norm());

    let mask = opts.mask.as_deref();
    let mut sopts = StringOptions::new(opts.n, opts.tol);
    sopts.max_iters = opts.max_iters;
    sopts.initial = Some(interpolate_path(&base.sol, &ya_d, &yb_d, mask)?);
    let sol = solve_string_with(&perturbed, &ya_d, &yb_d, &sopts)?;
    if !sol.converged {
        return Err(MepError::Solver("perturbed string method did not converge".into()));
    }
    row.mep_error_c1 = Some(x_norm(&NodeField::path_difference(&sol.path, path)?));
    row.converged = true;
    Ok(())
}

/// Perturbation study with default options on `n` nodes.
pub fn run_study(
    model: SharedModel,
    bump: SharedModel,
    deltas: &[f64],
    epsilon: Option<f64>,
    n: usize,
) -> Result<PerturbationStudy> {
    let mut opts = StudyOptions::new(n);
    opts.epsilon = epsilon;
    run_study_with(model, bump, deltas, &opts)
}

/// Solves the base problem, then each perturbed problem warm-started from the
/// interpolated base path. Rows are independent and computed in parallel;
/// a failed perturbed solve is recorded in its row and the study continues.
pub fn run_study_with(
    model: SharedModel,
    bump: SharedModel,
    deltas: &[f64],
    opts: &StudyOptions,
) -> Result<PerturbationStudy> {
    if deltas.is_empty() {
        return Err(MepError::Input("no perturbation amplitudes given".into()));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
        return Err(MepError::Input(format!("perturbation amplitude must be ≥ 0, got {d}")));
    }
    if bump.dim() != model.dim() {
        return Err(MepError::Input("bump dimension differs from the model".into()));
    }
    let (sa, sb) = match &opts.seeds {
        Some(s) => s.clone(),
        None => model
            .minimizer_seeds()
            .ok_or_else(|| MepError::Input(format!("model '{}' has no canonical endpoints", model.label())))?,
    };
    let ya = find_minimizer(model.as_ref(), &sa, opts.tol)?;
    let yb = find_minimizer(model.as_ref(), &sb, opts.tol)?;
    let mut sopts = StringOptions::new(opts.n, opts.tol);
    sopts.max_iters = opts.max_iters;
    let sol = solve_string_with(model.as_ref(), &ya, &yb, &sopts)?;
    if !sol.converged {
        return Err(MepError::Solver("base string method did not converge".into()));
    }
    let report = check_assumptions(model.as_ref(), &sol)?;
    if !(report.a_holds && report.b_holds) {
        return Err(MepError::Precondition(format!(
            "base path fails the structure checks (single barrier: {}, endpoint spectra: {})",
            report.a_holds, report.b_holds
        )));
    }
    let length = Curve::new(&sol.path).arc_length_to(1.0);
    let epsilon = opts.epsilon.unwrap_or(0.1 * length);
    if !(epsilon > 0.0) {
        return Err(MepError::Input(format!("tube radius must be positive, got {epsilon}")));
    }

    let base = Base { model, sol, ya, yb };
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rows: Vec<StudyRow> = sorted
        .par_iter()
        .map(|&d| study_row(&base, &bump, d, opts, epsilon))
        .collect();

    let solved: Vec<&StudyRow> = rows.iter().filter(|r| r.converged && r.delta > 0.0).collect();
    let slope = loglog_fit(
        &solved
            .iter()
            .filter_map(|r| r.mep_error_c1.map(|m| (r.model_error_c1, m)))
            .collect::<Vec<_>>(),
    );
    let shift_fit = loglog_fit(
        &solved
            .iter()
            .filter_map(|r| Some((r.delta, r.min_a_shift?.max(r.min_b_shift?))))
            .collect::<Vec<_>>(),
    );
    Ok(PerturbationStudy {
        deltas: rows.iter().map(|r| r.delta).collect(),
        rows,
        slope,
        shift_fit,
        epsilon,
        probes_per_node: opts.probes_per_node,
        base_length: length,
    })
}

/// Convenience for the reversed-role check: the perturbed model as a shared
/// base.
pub fn perturbed_base(model: SharedModel, bump: SharedModel, delta: f64) -> Result<SharedModel> {
    Ok(Arc::new(PerturbedModel::new(model, bump, delta, None)?))
}
