//! Two witnesses that the linearization loses its bounded inverse when the
//! endpoint tangent eigenvalue is not the simple lowest one: a degenerate
//! endpoint spectrum and a transverse eigenvalue below the tangent one.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{MepError, Result};
use crate::geometry::{x_norm, y_norm, DiscretePath, FieldRole, NodeField};
use crate::landscape::{self, EnergyModel};
use crate::mep::{find_minimizer, solve_string, MepSolution};
use crate::perturbation::{loglog_fit, LogLogFit};
use crate::stability::{apply_df, lambda_bar, transport_frames, LambdaProfile};

pub const DEFAULT_ETA0: f64 = 0.02;
/// Smallest positive node of the graded grids.
pub const GRADED_MIN: f64 = 1e-6;
/// Nodes of the base string solve before resampling.
const BASE_NODES: usize = 101;
const SOLVE_TOL: f64 = 1e-10;

/// Geometric nodes from [`GRADED_MIN`] up to `support`, `per_decade` per
/// decade, merged with uniform cells of width `1/outer`.
pub fn witness_grid(support: f64, per_decade: usize, outer: usize) -> Vec<f64> {
    let count = ((support / GRADED_MIN).log10() * per_decade as f64).ceil() as usize;
    let ratio = (support / GRADED_MIN).powf(1.0 / count as f64);
    let mut out = vec![0.0, support, 1.0];
    out.extend((0..count).map(|k| GRADED_MIN * ratio.powi(k as i32)));
    out.extend((1..outer).map(|k| k as f64 / outer as f64));
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    out
}

/// The path between the model's canonical minimizers, resampled on `alphas`.
fn path_on_grid(model: &dyn EnergyModel, alphas: Vec<f64>) -> Result<MepSolution> {
    let (sa, sb) = model
        .minimizer_seeds()
        .ok_or_else(|| MepError::Precondition(format!("model '{}' has no canonical endpoints", model.label())))?;
    let ya = find_minimizer(model, &sa, SOLVE_TOL)?;
    let yb = find_minimizer(model, &sb, SOLVE_TOL)?;
    let base = solve_string(model, &ya, &yb, BASE_NODES, SOLVE_TOL)?;
    let spline = base.path.spline();
    let mut nodes: Vec<DVector<f64>> = alphas.iter().map(|&a| spline.eval(a)).collect();
    let last = nodes.len() - 1;
    nodes[0] = ya;
    nodes[last] = yb;
    MepSolution::from_path(model, DiscretePath::new(alphas, nodes)?, SOLVE_TOL)
}

/// A transverse eigenpair of the projected Hessian, followed along the path.
struct Mode {
    /// Eigenvalue at every node.
    values: Vec<f64>,
    /// Unit eigenvector in ℝ^N at every node.
    vectors: Vec<DVector<f64>>,
}

/// Follows the transverse eigenvector picked at α = 0 by `pick` (given the
/// sorted transverse spectrum), by largest overlap and with continuous sign.
fn follow_mode(model: &dyn EnergyModel, sol: &MepSolution, pick: impl Fn(&[f64]) -> Option<usize>) -> Result<Mode> {
    let frames = transport_frames(sol)?;
    let mut values = Vec::with_capacity(sol.path.len());
    let mut vectors: Vec<DVector<f64>> = Vec::with_capacity(sol.path.len());
    for (i, y) in sol.path.nodes().iter().enumerate() {
        let q = &frames.frames[i];
        let h = landscape::hessian(model, y)?;
        let eig = (q.transpose() * h * q).symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let k = match vectors.last() {
            None => {
                let sorted: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
                let pos = pick(&sorted)
                    .ok_or_else(|| MepError::Precondition("no transverse eigenvalue fits the witness".into()))?;
                order[pos]
            }
            Some(prev) => (0..eig.eigenvalues.len())
                .max_by(|&a, &b| {
                    let va = (q * eig.eigenvectors.column(a)).dot(prev).abs();
                    let vb = (q * eig.eigenvectors.column(b)).dot(prev).abs();
                    va.total_cmp(&vb)
                })
                .unwrap(),
        };
        let mut v: DVector<f64> = q * eig.eigenvectors.column(k);
        if vectors.last().is_some_and(|prev| v.dot(prev) < 0.0) {
            v = -v;
        }
        values.push(eig.eigenvalues[k]);
        vectors.push(v);
    }
    Ok(Mode { values, vectors })
}

/// Eigenvalues of the Hessian at the start, split into the one whose
/// eigenvector is closest to the path tangent and the transverse rest.
///
/// At a minimizer on the path the tangent is itself an eigenvector, so this
/// gives the endpoint spectra without the rounding of the discrete tangent.
fn start_spectrum(model: &dyn EnergyModel, sol: &MepSolution) -> Result<(f64, Vec<f64>)> {
    let eig = landscape::hessian(model, sol.path.start())?.symmetric_eigen();
    let t = (&sol.path.nodes()[1] - sol.path.start()).normalize();
    let along = (0..eig.eigenvalues.len())
        .max_by(|&a, &b| {
            let va = eig.eigenvectors.column(a).dot(&t).abs();
            let vb = eig.eigenvectors.column(b).dot(&t).abs();
            va.total_cmp(&vb)
        })
        .ok_or_else(|| MepError::Input("empty spectrum".into()))?;
    let mut rest: Vec<f64> = (0..eig.eigenvalues.len())
        .filter(|&k| k != along)
        .map(|k| eig.eigenvalues[k])
        .collect();
    rest.sort_by(f64::total_cmp);
    Ok((eig.eigenvalues[along], rest))
}

/// `β ζ` as a variation field.
fn along_mode(alphas: &[f64], beta: &[f64], mode: &Mode) -> Result<NodeField> {
    let values = beta.iter().zip(&mode.vectors).map(|(b, z)| z * *b).collect();
    NodeField::new(alphas.to_vec(), values, FieldRole::Variation)
}

/// Largest `|ζ·f − expected| / max|expected|` over the nodes.
fn component_defect(f: &NodeField, mode: &Mode, expected: &[f64]) -> f64 {
    let scale = expected
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()))
        .max(f64::MIN_POSITIVE);
    f.values
        .iter()
        .zip(&mode.vectors)
        .zip(expected)
        .map(|((v, z), e)| (z.dot(v) - e).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct DegenerateRow {
    pub n: u32,
    pub y_norm_fn: f64,
    pub x_norm_psin: f64,
    pub ratio: f64,
    /// Largest deviation of the mode component of `f_n` from its closed form,
    /// relative to the closed form's size.
    pub closed_form_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DegenerateWitness {
    pub eta0: f64,
    pub ns: Vec<u32>,
    /// Largest `|z_j − λ̄'|` on `[0, η₀]`.
    pub membership: f64,
    pub table: Vec<DegenerateRow>,
}

impl DegenerateWitness {
    /// Last over first `‖f_n‖_Y`.
    pub fn decay(&self) -> f64 {
        self.table.last().unwrap().y_norm_fn / self.table[0].y_norm_fn
    }
}

/// Builds `β_n = ((η₀ − α)/η₀)ⁿ λ̄` along the transverse eigenvector whose
/// eigenvalue equals the endpoint tangent curvature, and tabulates the norms
/// of `ψ_n = β_n ζ` and of its image under the linearization.
pub fn degenerate_witness(model: &dyn EnergyModel, n_list: &[u32], grid: usize) -> Result<DegenerateWitness> {
    degenerate_witness_with(model, n_list, grid, DEFAULT_ETA0)
}

pub fn degenerate_witness_with(
    model: &dyn EnergyModel,
    n_list: &[u32],
    grid: usize,
    eta0: f64,
) -> Result<DegenerateWitness> {
    if n_list.is_empty() || !n_list.windows(2).all(|w| w[1] > w[0]) || n_list[0] == 0 {
        return Err(MepError::Input(
            "exponents must be positive and strictly increasing".into(),
        ));
    }
    let sol = path_on_grid(model, witness_grid(eta0, grid, grid))?;
    if !(eta0 > 0.0 && eta0 < sol.sbar / 2.0) {
        return Err(MepError::Precondition(format!("η₀ = {eta0} must lie in (0, s̄/2)")));
    }
    let profile = lambda_bar(model, &sol)?;
    let (sigma, transverse) = start_spectrum(model, &sol)?;
    let tol = 1e-8 * sigma.abs().max(1.0);
    if !transverse.iter().any(|z| (z - sigma).abs() <= tol) {
        return Err(MepError::Precondition(format!(
            "no transverse eigenvalue at the start equals the tangent curvature {sigma}"
        )));
    }
    let mode = follow_mode(model, &sol, |z| z.iter().position(|v| (v - sigma).abs() <= tol))?;
    let alphas = sol.path.alphas().to_vec();
    let support: Vec<usize> = (0..alphas.len()).filter(|&i| alphas[i] <= eta0).collect();
    let membership = support
        .iter()
        .map(|&i| (mode.values[i] - profile.derivative[i]).abs())
        .fold(0.0, f64::max);
    if membership > 1.0 {
        return Err(MepError::Precondition(format!(
            "|z − λ̄'| reaches {membership:.3} on [0, η₀]; shrink η₀"
        )));
    }
    let table = n_list
        .iter()
        .map(|&n| degenerate_row(model, &sol, &profile, &mode, n, eta0))
        .collect::<Result<Vec<_>>>()?;
    Ok(DegenerateWitness {
        eta0,
        ns: n_list.to_vec(),
        membership,
        table,
    })
}

fn degenerate_row(
    model: &dyn EnergyModel,
    sol: &MepSolution,
    profile: &LambdaProfile,
    mode: &Mode,
    n: u32,
    eta0: f64,
) -> Result<DegenerateRow> {
    let alphas = sol.path.alphas();
    let nf = n as f64;
    let u = |a: f64| if a < eta0 { (eta0 - a) / eta0 } else { 0.0 };
    let beta: Vec<f64> = alphas
        .iter()
        .zip(&profile.values)
        .map(|(&a, l)| u(a).powf(nf) * l)
        .collect();
    let slope: Vec<f64> = (0..alphas.len())
        .map(|i| {
            let a = alphas[i];
            u(a).powf(nf) * profile.derivative[i] - nf / eta0 * u(a).powf(nf - 1.0) * profile.values[i]
        })
        .collect();
    let expected: Vec<f64> = (0..alphas.len())
        .map(|i| mode.values[i] * beta[i] - profile.values[i] * slope[i])
        .collect();
    let psi = along_mode(alphas, &beta, mode)?;
    // ζ' vanishes only for constant frames, so its contribution is kept.
    let zeta_slope = NodeField::new(alphas.to_vec(), mode.vectors.clone(), FieldRole::Variation)?
        .spline()
        .knot_derivs();
    let derivatives = (0..alphas.len())
        .map(|i| &mode.vectors[i] * slope[i] + &zeta_slope[i] * beta[i])
        .collect();
    let psi = psi.with_derivatives(derivatives)?;
    let f = apply_df(model, sol, &psi, true)?;
    let y = y_norm(&f, sol.sbar)?;
    let x = x_norm(&psi);
    Ok(DegenerateRow {
        n,
        y_norm_fn: y,
        x_norm_psin: x,
        ratio: y / x,
        closed_form_defect: component_defect(&f, mode, &expected),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SwappedWitness {
    pub sigma_j: f64,
    pub eta1: f64,
    pub y_norm_f: f64,
    /// `‖f‖_Y` on the grid refined four times toward 0.
    pub y_norm_refined: f64,
    /// Relative change of `‖f‖_Y` under the refinement.
    pub refinement_change: f64,
    /// Exponent of `|ψ'(α)|` against α near 0.
    pub blowup_fit: LogLogFit,
    /// Exponent of the C¹ norm of ψ restricted to `[a, 1]` against `a`.
    pub truncation_fit: LogLogFit,
    pub closed_form_defect: f64,
}

/// Fit window for the blow-up exponent.
const FIT_WINDOW: (f64, f64) = (1e-5, 1e-3);

/// Builds `β = α^{σ_j}(α − η₁)²` on `[0, η₁]`, `η₁ = s̄/2`, along the lowest
/// transverse eigenvector, whose endpoint eigenvalue lies below the tangent
/// curvature, and measures the image and the singularity of ψ at 0.
pub fn swapped_witness(model: &dyn EnergyModel, grid: usize) -> Result<SwappedWitness> {
    let coarse = swapped_on(model, grid)?;
    let fine = swapped_on(model, 4 * grid)?;
    let change = (fine.y_norm - coarse.y_norm).abs() / coarse.y_norm;
    Ok(SwappedWitness {
        sigma_j: coarse.sigma_j,
        eta1: coarse.eta1,
        y_norm_f: coarse.y_norm,
        y_norm_refined: fine.y_norm,
        refinement_change: change,
        blowup_fit: coarse.blowup,
        truncation_fit: coarse.truncation,
        closed_form_defect: coarse.defect,
    })
}

struct SwappedRun {
    sigma_j: f64,
    eta1: f64,
    y_norm: f64,
    blowup: LogLogFit,
    truncation: LogLogFit,
    defect: f64,
}

fn swapped_on(model: &dyn EnergyModel, per_decade: usize) -> Result<SwappedRun> {
    // η₁ is only known after the solve; s̄ = ½ is the first guess for the grid.
    let mut sol = path_on_grid(model, witness_grid(0.25, per_decade, per_decade))?;
    let eta1 = sol.sbar / 2.0;
    if (eta1 - 0.25).abs() > 1e-12 {
        sol = path_on_grid(model, witness_grid(eta1, per_decade, per_decade))?;
    }
    let (sigma, transverse) = start_spectrum(model, &sol)?;
    let lowest = transverse[0];
    if !(lowest < sigma - 1e-8 * sigma.abs().max(1.0)) {
        return Err(MepError::Precondition(format!(
            "the lowest transverse eigenvalue {lowest} at the start is not below the tangent curvature {sigma}"
        )));
    }
    let sigma_j = lowest / sigma;
    let mode = follow_mode(model, &sol, |_| Some(0))?;
    if !(sigma_j > 0.0) {
        return Err(MepError::Precondition(format!("exponent {sigma_j} is not positive")));
    }
    let profile = lambda_bar(model, &sol)?;
    let alphas = sol.path.alphas().to_vec();
    let beta: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            if a < eta1 {
                a.powf(sigma_j) * (a - eta1).powi(2)
            } else {
                0.0
            }
        })
        .collect();
    // Exact β' at the nodes; the sample at α = 0, where β' is unbounded, is
    // the spline's and is never used by the operator.
    let spline_slopes = along_mode(&alphas, &beta, &mode)?.node_derivatives();
    let exact: Vec<DVector<f64>> = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if a <= 0.0 {
                spline_slopes[0].clone()
            } else if a >= eta1 {
                DVector::zeros(spline_slopes[0].len())
            } else {
                &mode.vectors[i]
                    * (sigma_j * a.powf(sigma_j - 1.0) * (a - eta1).powi(2) + 2.0 * a.powf(sigma_j) * (a - eta1))
            }
        })
        .collect();
    let psi = along_mode(&alphas, &beta, &mode)?.with_derivatives(exact)?;
    let f = apply_df(model, &sol, &psi, true)?;
    let y = y_norm(&f, sol.sbar)?;

    let expected: Vec<f64> = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if a <= 0.0 || a >= eta1 {
                return 0.0;
            }
            let slope = sigma_j * a.powf(sigma_j - 1.0) * (a - eta1).powi(2) + 2.0 * a.powf(sigma_j) * (a - eta1);
            mode.values[i] * beta[i] - profile.values[i] * slope
        })
        .collect();
    let defect = component_defect(&f, &mode, &expected);

    let slopes = spline_slopes;
    let window: Vec<(f64, f64)> = alphas
        .iter()
        .zip(&slopes)
        .filter(|(a, _)| **a >= FIT_WINDOW.0 && **a <= FIT_WINDOW.1)
        .map(|(a, d)| (*a, d.norm()))
        .collect();
    let blowup = loglog_fit(&window).ok_or_else(|| MepError::Solver("too few nodes in the fit window".into()))?;
    let cuts: Vec<(f64, f64)> = (0..=4)
        .map(|k| FIT_WINDOW.0 * 10f64.powf(0.5 * k as f64))
        .map(|a| (a, truncated_x_norm(&alphas, &beta, &slopes, a)))
        .collect();
    let truncation = loglog_fit(&cuts).ok_or_else(|| MepError::Solver("truncation fit failed".into()))?;
    Ok(SwappedRun {
        sigma_j,
        eta1,
        y_norm: y,
        blowup,
        truncation,
        defect,
    })
}

/// C¹ norm of the field restricted to the nodes with `α ≥ cut`.
fn truncated_x_norm(alphas: &[f64], beta: &[f64], slopes: &[DVector<f64>], cut: f64) -> f64 {
    let keep = |i: &usize| alphas[*i] >= cut;
    let value = (0..alphas.len())
        .filter(keep)
        .map(|i| beta[i].abs())
        .fold(0.0, f64::max);
    let slope = (0..alphas.len())
        .filter(keep)
        .map(|i| slopes[i].norm())
        .fold(0.0, f64::max);
    value + slope
}
