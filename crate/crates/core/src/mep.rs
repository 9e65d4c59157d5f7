//! Minimizers, the string method with a climbing-image post-pass, and the
//! residuals of the path equations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MepError, Result};
use crate::geometry::{
    gamma_nodes, reparameterize, reparameterize_linear, tangent_data, Curve, DiscretePath, FieldRole, NodeField,
};
use crate::landscape::{self, EnergyModel};

/// A converged path with its saddle and endpoint tangent curvatures.
#[derive(Debug, Clone)]
pub struct MepSolution {
    pub path: DiscretePath,
    pub sbar: f64,
    pub saddle: DVector<f64>,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Serializable metadata of a solution.
#[derive(Debug, Clone, Serialize)]
pub struct MepSummary {
    pub sbar: f64,
    pub saddle: Vec<f64>,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl MepSolution {
    pub fn summary(&self) -> MepSummary {
        MepSummary {
            sbar: self.sbar,
            saddle: self.saddle.iter().copied().collect(),
            sigma_a: self.sigma_a,
            sigma_b: self.sigma_b,
            residual_history: self.residual_history.clone(),
            converged: self.converged,
        }
    }

    /// Completes a given path to a solution: locates the saddle from the
    /// highest node and evaluates the endpoint Rayleigh quotients.
    ///
    /// `converged` reports whether the perpendicular residual is within `tol`.
    pub fn from_path(model: &dyn EnergyModel, path: DiscretePath, tol: f64) -> Result<Self> {
        let (perp, _) = mep_system_residual(model, &path)?;
        let (sbar, saddle) = locate_saddle(model, &path, tol)?;
        let (sigma_a, sigma_b) = endpoint_rayleigh(model, &path)?;
        Ok(Self {
            path,
            sbar,
            saddle,
            sigma_a,
            sigma_b,
            residual_history: vec![perp],
            converged: perp <= tol,
        })
    }
}

/// Rayleigh quotients `(∇²E t, t)` at both ends of the path.
pub fn endpoint_rayleigh(model: &dyn EnergyModel, path: &DiscretePath) -> Result<(f64, f64)> {
    let tan = tangent_data(&Curve::new(path))?;
    let last = path.len() - 1;
    let ha = landscape::hessian(model, path.start())?;
    let hb = landscape::hessian(model, path.end())?;
    let (ta, tb) = (&tan.unit[0], &tan.unit[last]);
    Ok(((&ha * ta).dot(ta), (&hb * tb).dot(tb)))
}

fn is_positive_definite(h: &DMatrix<f64>) -> bool {
    h.clone().cholesky().is_some()
}

/// Damped Newton descent to a strong local minimizer.
///
/// Takes the Newton step while the Hessian is positive definite and the step
/// reduces the gradient, otherwise backtracks along the Newton or steepest
/// descent direction.
pub fn find_minimizer(model: &dyn EnergyModel, seed: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(MepError::Input(format!("tolerance must be positive, got {tol}")));
    }
    let mut y = seed.clone();
    for _ in 0..1000 {
        let ev = landscape::evaluate(model, &y)?;
        let gnorm = ev.gradient.norm();
        if gnorm <= tol {
            if !is_positive_definite(&ev.hessian) {
                return Err(MepError::WrongCriticalPoint(format!(
                    "critical point {:?} is not a strong minimizer",
                    y.as_slice()
                )));
            }
            return Ok(newton_polish(model, y));
        }
        if let Some(ch) = ev.hessian.clone().cholesky() {
            let step = -ch.solve(&ev.gradient);
            let trial = &y + &step;
            if landscape::gradient(model, &trial)
                .map(|g| g.norm() < gnorm)
                .unwrap_or(false)
            {
                y = trial;
                continue;
            }
            if let Some(next) = backtrack(model, &y, ev.energy, &ev.gradient, &step) {
                y = next;
                continue;
            }
        }
        let dir = -&ev.gradient;
        match backtrack(model, &y, ev.energy, &ev.gradient, &dir) {
            Some(next) => y = next,
            None => {
                return Err(MepError::Solver(format!(
                    "line search stalled at {:?} with |grad E| = {gnorm:.3e}",
                    y.as_slice()
                )))
            }
        }
    }
    Err(MepError::Solver(
        "minimizer search exceeded its iteration budget".into(),
    ))
}

/// A few plain Newton steps past the tolerance, kept while the gradient keeps
/// shrinking, so minimizers are accurate to rounding.
fn newton_polish(model: &dyn EnergyModel, mut y: DVector<f64>) -> DVector<f64> {
    let mut gnorm = model.gradient(&y).norm();
    for _ in 0..3 {
        if gnorm == 0.0 {
            break;
        }
        let Some(ch) = model.hessian(&y).cholesky() else { break };
        let trial = &y - ch.solve(&model.gradient(&y));
        let next = model.gradient(&trial).norm();
        if !(next < gnorm) {
            break;
        }
        y = trial;
        gnorm = next;
    }
    y
}

fn backtrack(
    model: &dyn EnergyModel,
    y: &DVector<f64>,
    energy: f64,
    grad: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<DVector<f64>> {
    let slope = grad.dot(dir);
    if slope >= 0.0 {
        return None;
    }
    let mut s = 1.0;
    for _ in 0..60 {
        let trial = y + dir * s;
        let e = model.energy(&trial);
        if e.is_finite() && e <= energy + 1e-4 * s * slope {
            return Some(trial);
        }
        s *= 0.5;
    }
    None
}

/// Options of the string method.
#[derive(Debug, Clone)]
pub struct StringOptions {
    pub n: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Initial time step; capped at `0.5 / λ_max` in any case.
    pub dt: Option<f64>,
    /// Starting path; the straight segment if absent.
    pub initial: Option<DiscretePath>,
    /// Iteration budget of the Gauss–Newton polish.
    pub polish_iters: usize,
    /// Fraction of node spacing over the largest gradient allowed per step.
    pub spacing_factor: f64,
}

impl StringOptions {
    pub fn new(n: usize, tol: f64) -> Self {
        Self {
            n,
            tol,
            max_iters: 200_000,
            dt: None,
            initial: None,
            spacing_factor: 0.5,
            polish_iters: 100,
        }
    }
}

/// Energy-upwinded unit tangent at interior node `i`: the difference toward
/// the higher neighbour, blended at local extrema.
fn upwind_tangent(nodes: &[DVector<f64>], energies: &[f64], i: usize) -> DVector<f64> {
    let fwd = &nodes[i + 1] - &nodes[i];
    let bwd = &nodes[i] - &nodes[i - 1];
    let (ep, e0, em) = (energies[i + 1], energies[i], energies[i - 1]);
    let t = if ep > e0 && e0 > em {
        fwd
    } else if ep < e0 && e0 < em {
        bwd
    } else {
        let big = (ep - e0).abs().max((em - e0).abs());
        let small = (ep - e0).abs().min((em - e0).abs());
        if ep > em {
            fwd * big + bwd * small
        } else {
            fwd * small + bwd * big
        }
    };
    let norm = t.norm();
    if norm > 0.0 {
        t / norm
    } else {
        (&nodes[i + 1] - &nodes[i - 1]).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TangentRule {
    Upwind,
    Spline,
}

/// Perpendicular gradients at the interior nodes and their largest norm.
fn perpendicular_forces(
    model: &dyn EnergyModel,
    path: &DiscretePath,
    rule: TangentRule,
) -> Result<(Vec<DVector<f64>>, f64)> {
    let last = path.len() - 1;
    let nodes = path.nodes();
    let grads: Vec<Result<DVector<f64>>> = nodes.par_iter().map(|y| landscape::gradient(model, y)).collect();
    let grads = grads.into_iter().collect::<Result<Vec<_>>>()?;
    let tangents = match rule {
        TangentRule::Spline => tangent_data(&Curve::new(path))?.unit,
        TangentRule::Upwind => {
            let energies: Vec<f64> = nodes.iter().map(|y| model.energy(y)).collect();
            (0..=last)
                .map(|i| {
                    if i == 0 || i == last {
                        DVector::zeros(path.dim())
                    } else {
                        upwind_tangent(nodes, &energies, i)
                    }
                })
                .collect()
        }
    };
    let forces: Vec<DVector<f64>> = (0..=last)
        .map(|i| {
            if i == 0 || i == last {
                DVector::zeros(path.dim())
            } else {
                let t = &tangents[i];
                &grads[i] - t * t.dot(&grads[i])
            }
        })
        .collect();
    let sup = forces.iter().map(|f| f.norm()).fold(0.0, f64::max);
    Ok((forces, sup))
}

/// Explicit step limit: half the inverse of the largest Hessian eigenvalue,
/// and a fraction of the node spacing over the largest gradient.
fn step_cap(model: &dyn EnergyModel, path: &DiscretePath, factor: f64) -> Result<f64> {
    let mut lam: f64 = 1e-12;
    let mut grad: f64 = 1e-12;
    for y in path.nodes() {
        let ev = landscape::evaluate(model, y)?;
        lam = lam.max(ev.hessian.symmetric_eigenvalues().amax());
        grad = grad.max(ev.gradient.norm());
    }
    let spacing = path
        .nodes()
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm())
        .fold(f64::INFINITY, f64::min);
    Ok((0.5 / lam).min(factor * spacing / grad))
}

pub fn solve_string(
    model: &dyn EnergyModel,
    ya: &DVector<f64>,
    yb: &DVector<f64>,
    n: usize,
    tol: f64,
) -> Result<MepSolution> {
    solve_string_with(model, ya, yb, &StringOptions::new(n, tol))
}

/// String method followed by saddle refinement.
///
/// The relaxation phase takes explicit projected steepest descent steps with
/// energy-upwinded tangents and equal-chord redistribution, for as long as the
/// root mean square of the spline-tangent perpendicular gradient keeps
/// decreasing appreciably. The polish phase then drives that gradient and the arc-length
/// defect to zero together by damped Gauss–Newton on the interior nodes.
///
/// `residual_history` holds the root mean square perpendicular gradient after
/// every accepted step of either phase.
pub fn solve_string_with(
    model: &dyn EnergyModel,
    ya: &DVector<f64>,
    yb: &DVector<f64>,
    opts: &StringOptions,
) -> Result<MepSolution> {
    if ya.len() != model.dim() || yb.len() != model.dim() {
        return Err(MepError::Input("endpoint dimension differs from the model".into()));
    }
    if (ya - yb).norm() == 0.0 {
        return Err(MepError::Input("endpoints coincide".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(MepError::Input(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let start = match &opts.initial {
        Some(p) => {
            if (p.start() - ya).norm() > 0.0 || (p.end() - yb).norm() > 0.0 {
                return Err(MepError::Input("initial path does not join the given endpoints".into()));
            }
            p.clone()
        }
        None => DiscretePath::straight(ya, yb, opts.n)?,
    };
    let mut path = reparameterize_linear(&start)?;
    let (spline_forces, mut sup) = perpendicular_forces(model, &path, TangentRule::Spline)?;
    let mut rms = root_mean_square(&spline_forces);
    let mut history = vec![rms];
    if sup > opts.tol {
        let mut cap = step_cap(model, &path, opts.spacing_factor)?;
        let mut dt = opts.dt.unwrap_or(cap).min(cap);
        let (mut forces, _) = perpendicular_forces(model, &path, TangentRule::Upwind)?;
        let mut iters = 0;
        while iters < opts.max_iters {
            iters += 1;
            let nodes: Vec<DVector<f64>> = path.nodes().iter().zip(&forces).map(|(y, f)| y - f * dt).collect();
            let next = match path.with_nodes(nodes).and_then(|p| reparameterize_linear(&p)) {
                Ok(p) => p,
                Err(MepError::DegeneratePath(_)) if dt > 1e-12 * cap => {
                    dt *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (next_spline, next_sup) = perpendicular_forces(model, &next, TangentRule::Spline)?;
            let next_rms = root_mean_square(&next_spline);
            if next_rms >= rms * (1.0 - RELAX_STALL) && iters > RELAX_WARMUP {
                break;
            }
            path = next;
            rms = next_rms;
            sup = next_sup;
            history.push(rms);
            if sup <= opts.tol {
                break;
            }
            forces = perpendicular_forces(model, &path, TangentRule::Upwind)?.0;
            cap = step_cap(model, &path, opts.spacing_factor)?;
            dt = (dt * 1.2).min(cap);
        }
        if sup > opts.tol {
            path = reparameterize(&path)?;
            path = polish(model, path, opts.tol, opts.polish_iters, &mut history)?;
        }
    }
    let (sbar, saddle) = locate_saddle(model, &path, opts.tol)?;
    let (sigma_a, sigma_b) = endpoint_rayleigh(model, &path)?;
    Ok(MepSolution {
        path,
        sbar,
        saddle,
        sigma_a,
        sigma_b,
        residual_history: history,
        converged: true,
    })
}

/// Relaxation steps taken regardless of the residual trend.
const RELAX_WARMUP: usize = 10;
/// Relative decrease per step below which relaxation hands over to the polish.
const RELAX_STALL: f64 = 1e-6;

fn root_mean_square(forces: &[DVector<f64>]) -> f64 {
    (forces.iter().map(|f| f.norm_squared()).sum::<f64>() / forces.len() as f64).sqrt()
}

/// Stacked residual of the discrete path equations: per interior node the
/// perpendicular gradient, then the weighted arc-length defects.
fn polish_residual(model: &dyn EnergyModel, path: &DiscretePath, weight: f64) -> Result<(DVector<f64>, f64)> {
    let curve = Curve::new(path);
    let (forces, sup) = perpendicular_forces(model, path, TangentRule::Spline)?;
    let gammas = gamma_nodes(&curve);
    let (n, dim) = (path.len() - 1, path.dim());
    let mut r = DVector::zeros((n - 1) * (dim + 1));
    for i in 1..n {
        r.rows_mut((i - 1) * dim, dim).copy_from(&forces[i]);
        r[(n - 1) * dim + i - 1] = weight * gammas.values[i][0];
    }
    Ok((r, sup))
}

/// Analytic Jacobian of `polish_residual` with respect to the interior nodes.
fn polish_jacobian(model: &dyn EnergyModel, path: &DiscretePath, weight: f64) -> Result<DMatrix<f64>> {
    let alphas = path.alphas();
    let (n, dim) = (path.len() - 1, path.dim());
    let curve = Curve::new(path);
    let tan = tangent_data(&curve)?;
    let basis = crate::spline::CubicSpline::new(alphas, DMatrix::identity(n + 1, n + 1));
    let diff = basis.knot_derivs();
    let cols = (n - 1) * dim;
    let mut jac = DMatrix::zeros((n - 1) * (dim + 1), cols);
    for i in 1..n {
        let y = &path.nodes()[i];
        let g = landscape::gradient(model, y)?;
        let h = landscape::hessian(model, y)?;
        let t = &tan.unit[i];
        let proj = DMatrix::identity(dim, dim) - t * t.transpose();
        let pg = &proj * &g;
        let direct = &proj * &h;
        let through_tangent = (&proj * t.dot(&g) + t * pg.transpose()) / tan.speed[i];
        for j in 1..n {
            let mut block = -&through_tangent * diff[i][j];
            if i == j {
                block += &direct;
            }
            jac.view_mut(((i - 1) * dim, (j - 1) * dim), (dim, dim))
                .copy_from(&block);
        }
    }
    // d(arc length over cell c)/d(node j) = Σ_gauss w · dw_j(s) · t(s)
    let mut cell_rows: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for c in 0..n {
        let mut m = DMatrix::zeros(n + 1, dim);
        for (x, w) in crate::spline::gauss_on(alphas[c], alphas[c + 1]) {
            let v = curve.spline.deriv(x);
            let t = &v / v.norm();
            let dw = basis.deriv(x);
            for j in 0..=n {
                for k in 0..dim {
                    m[(j, k)] += w * dw[j] * t[k];
                }
            }
        }
        cell_rows.push(m);
    }
    let total: DMatrix<f64> = cell_rows.iter().fold(DMatrix::zeros(n + 1, dim), |acc, m| acc + m);
    let mut running = DMatrix::zeros(n + 1, dim);
    for i in 1..n {
        running += &cell_rows[i - 1];
        let row = (&running - &total * alphas[i]) * weight;
        for j in 1..n {
            for k in 0..dim {
                jac[((n - 1) * dim + i - 1, (j - 1) * dim + k)] = row[(j, k)];
            }
        }
    }
    Ok(jac)
}

/// Root mean square perpendicular gradient of a stacked residual, counting
/// the two fixed ends as zeros.
fn rms_of_stack(r: &DVector<f64>, interior: usize, dim: usize) -> f64 {
    (r.rows(0, interior * dim).norm_squared() / (interior + 2) as f64).sqrt()
}

/// Levenberg–Marquardt on the discrete path equations.
fn polish(
    model: &dyn EnergyModel,
    mut path: DiscretePath,
    tol: f64,
    max_iters: usize,
    history: &mut Vec<f64>,
) -> Result<DiscretePath> {
    let (n, dim) = (path.len() - 1, path.dim());
    let gscale = path
        .nodes()
        .iter()
        .map(|y| landscape::gradient(model, y).map(|g| g.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(1e-12, f64::max);
    let weight = gscale / Curve::new(&path).length;
    let (mut r, mut sup) = polish_residual(model, &path, weight)?;
    let mut mu = 1e-6 * gscale * gscale;
    let mut iters = 0;
    let done = |r: &DVector<f64>, sup: f64| sup <= tol && r.rows((n - 1) * dim, n - 1).amax() <= tol;
    while !done(&r, sup) && iters < max_iters {
        iters += 1;
        let jac = polish_jacobian(model, &path, weight)?;
        let cols = jac.ncols();
        let mut improved = false;
        for _ in 0..30 {
            let mut aug = DMatrix::zeros(jac.nrows() + cols, cols);
            aug.rows_mut(0, jac.nrows()).copy_from(&jac);
            aug.rows_mut(jac.nrows(), cols).fill_diagonal(mu.sqrt());
            let mut rhs = DVector::zeros(jac.nrows() + cols);
            rhs.rows_mut(0, jac.nrows()).copy_from(&(-&r));
            let qr = aug.qr();
            let qtb = qr.q().transpose() * &rhs;
            let Some(step) = qr.r().solve_upper_triangular(&qtb) else {
                mu *= 4.0;
                continue;
            };
            let nodes: Vec<DVector<f64>> = path
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, y)| {
                    if i == 0 || i == n {
                        y.clone()
                    } else {
                        y + step.rows((i - 1) * dim, dim)
                    }
                })
                .collect();
            if let Ok(trial) = path.with_nodes(nodes) {
                if let Ok((rt, st)) = polish_residual(model, &trial, weight) {
                    if rt.norm() < r.norm() {
                        path = trial;
                        r = rt;
                        sup = st;
                        mu = (mu / 3.0).max(1e-30);
                        improved = true;
                        break;
                    }
                }
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
        history.push(rms_of_stack(&r, n - 1, dim));
    }
    if !done(&r, sup) {
        return Err(MepError::Solver(format!(
            "path polish stopped at perpendicular residual {sup:.3e} (tolerance {tol:.1e}) after {iters} iterations"
        )));
    }
    Ok(path)
}

/// Climbing-image refinement of the highest interior node followed by a
/// Newton polish; returns the arc-length parameter of the saddle on the path
/// spline and the saddle itself.
pub fn locate_saddle(model: &dyn EnergyModel, path: &DiscretePath, tol: f64) -> Result<(f64, DVector<f64>)> {
    let last = path.len() - 1;
    let k = (1..last)
        .max_by(|&i, &j| {
            model
                .energy(&path.nodes()[i])
                .total_cmp(&model.energy(&path.nodes()[j]))
        })
        .ok_or_else(|| MepError::Input("path has no interior node".into()))?;
    let tan = tangent_data(&Curve::new(path))?;
    let t = tan.unit[k].clone();
    let mut y = path.nodes()[k].clone();
    let h0 = landscape::hessian(model, &y)?;
    let dt = 0.5 / h0.symmetric_eigenvalues().amax().max(1e-12);
    let g0 = landscape::gradient(model, &y)?.norm();
    for _ in 0..2000 {
        let g = landscape::gradient(model, &y)?;
        if g.norm() <= tol.min(1e-3 * g0) {
            break;
        }
        let force = -&g + &t * (2.0 * t.dot(&g));
        y += force * dt;
    }
    for _ in 0..50 {
        let g = landscape::gradient(model, &y)?;
        if g.norm() <= 1e-3 * tol {
            break;
        }
        let h = landscape::hessian(model, &y)?;
        let Some(step) = h.lu().solve(&g) else { break };
        let next = &y - step;
        if landscape::gradient(model, &next)?.norm() >= g.norm() {
            break;
        }
        y = next;
    }
    let gnorm = landscape::gradient(model, &y)?.norm();
    if gnorm > tol {
        return Err(MepError::Solver(format!(
            "saddle refinement stopped at |grad E| = {gnorm:.3e}"
        )));
    }
    let h = landscape::hessian(model, &y)?;
    let negative = h.symmetric_eigenvalues().iter().filter(|&&l| l < 0.0).count();
    if negative != 1 {
        return Err(MepError::WrongCriticalPoint(format!(
            "refined critical point has {negative} negative Hessian eigenvalues"
        )));
    }
    let sbar = closest_parameter(path, &y, k);
    Ok((sbar, y))
}

/// Parameter of the point on the path spline nearest to `y`, searched in the
/// two cells around node `k`.
fn closest_parameter(path: &DiscretePath, y: &DVector<f64>, k: usize) -> f64 {
    let spline = path.spline();
    let a = path.alphas();
    let (lo, hi) = (a[k - 1], a[k + 1]);
    let dist = |x: f64| (spline.eval(x) - y).norm_squared();
    let samples = 400;
    let mut best = a[k];
    let mut best_d = dist(best);
    for j in 0..=samples {
        let x = lo + (hi - lo) * j as f64 / samples as f64;
        let d = dist(x);
        if d < best_d {
            best = x;
            best_d = d;
        }
    }
    let mut x = best;
    for _ in 0..20 {
        let r = spline.eval(x) - y;
        let d1 = spline.deriv(x);
        let d2 = spline.deriv2(x);
        let num = r.dot(&d1);
        let den = d1.dot(&d1) + r.dot(&d2);
        if den <= 0.0 {
            break;
        }
        let next = (x - num / den).clamp(lo, hi);
        if (next - x).abs() <= 1e-16 {
            x = next;
            break;
        }
        x = next;
    }
    if dist(x) <= best_d {
        x
    } else {
        best
    }
}

/// Largest perpendicular gradient and largest arc-length defect over the
/// nodes.
pub fn mep_system_residual(model: &dyn EnergyModel, path: &DiscretePath) -> Result<(f64, f64)> {
    let curve = Curve::new(path);
    let tan = tangent_data(&curve)?;
    let mut perp: f64 = 0.0;
    for (y, t) in path.nodes().iter().zip(&tan.unit) {
        let g = landscape::gradient(model, y)?;
        perp = perp.max((&g - t * t.dot(&g)).norm());
    }
    Ok((perp, gamma_nodes(&curve).sup_norm()))
}

/// `α(α − 1) / (s̄(s̄ − 1))`: one at the saddle, zero at both ends.
pub fn saddle_weight(alpha: f64, sbar: f64) -> f64 {
    alpha * (alpha - 1.0) / (sbar * (sbar - 1.0))
}

/// The weighted residual of a path, which vanishes exactly at equal-arclength
/// minimum energy paths and lies in the weighted space by construction.
///
/// The saddle parameter and the tangent curvatures come from `sol`.
pub fn residual_f(model: &dyn EnergyModel, sol: &MepSolution, path: &DiscretePath) -> Result<NodeField> {
    let scale = path.start().amax().max(path.end().amax()).max(1.0);
    if (path.start() - sol.path.start()).amax() > 1e-9 * scale || (path.end() - sol.path.end()).amax() > 1e-9 * scale {
        return Err(MepError::Input("path endpoints differ from the solution's".into()));
    }
    let curve = Curve::new(path);
    let tan = tangent_data(&curve)?;
    let sbar = sol.sbar;
    let grad_s = landscape::gradient(model, &curve.spline.eval(sbar))?;
    let gamma_s = curve.gamma_at(sbar);
    let gammas = gamma_nodes(&curve);
    let sigma = sol.sigma_a + sol.sigma_b;
    let last = path.len() - 1;
    let mut values = Vec::with_capacity(path.len());
    for (i, (&a, y)) in path.alphas().iter().zip(path.nodes()).enumerate() {
        if i == 0 || i == last {
            values.push(DVector::zeros(path.dim()));
            continue;
        }
        let g = landscape::gradient(model, y)?;
        let c = saddle_weight(a, sbar);
        let t = &tan.unit[i];
        let tau = &g - &grad_s * c;
        let rho = gammas.values[i][0] - c * gamma_s;
        let coef = -(tan.speed[i] / curve.length) * t.dot(&tau) + sigma * rho;
        values.push(g + t * coef);
    }
    NodeField::new(path.alphas().to_vec(), values, FieldRole::Residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{uniform_alphas, y_norm};
    use crate::landscape::make_builtin;
    use std::collections::BTreeMap;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn dw(kappa: f64) -> crate::landscape::SharedModel {
        make_builtin("dw", &BTreeMap::from([("kappa".to_string(), kappa)])).unwrap()
    }

    #[test]
    fn minimizers_of_the_double_well() {
        let m = dw(10.0);
        let y = find_minimizer(m.as_ref(), &v(&[0.7, 0.3]), 1e-12).unwrap();
        assert!((y - v(&[1.0, 0.0])).norm() < 1e-8);
        let y = find_minimizer(m.as_ref(), &v(&[-0.7, -0.1]), 1e-12).unwrap();
        assert!((y - v(&[-1.0, 0.0])).norm() < 1e-8);
        let q = make_builtin("quadratic", &BTreeMap::new()).unwrap();
        let y = find_minimizer(q.as_ref(), &v(&[3.0, -7.0]), 1e-12).unwrap();
        assert!(y.norm() < 1e-12);
    }

    #[test]
    fn saddle_seed_is_rejected() {
        let m = dw(10.0);
        assert!(matches!(
            find_minimizer(m.as_ref(), &v(&[0.0, 0.0]), 1e-8),
            Err(MepError::WrongCriticalPoint(_))
        ));
    }

    #[test]
    fn double_well_string() {
        let m = dw(10.0);
        let sol = solve_string(m.as_ref(), &v(&[-1.0, 0.0]), &v(&[1.0, 0.0]), 101, 1e-8).unwrap();
        for (a, y) in sol.path.alphas().iter().zip(sol.path.nodes()) {
            assert!((y - v(&[2.0 * a - 1.0, 0.0])).norm() < 1e-6);
        }
        assert!((sol.sbar - 0.5).abs() < 1e-6);
        assert!(sol.saddle.norm() < 1e-8);
        assert!((sol.sigma_a - 8.0).abs() < 1e-8 && (sol.sigma_b - 8.0).abs() < 1e-8);
        let (perp, gam) = mep_system_residual(m.as_ref(), &sol.path).unwrap();
        assert!(perp <= 1e-7 && gam <= 1e-7);
    }

    #[test]
    fn equal_endpoints_rejected() {
        let m = dw(10.0);
        let y = v(&[1.0, 0.0]);
        assert!(matches!(
            solve_string(m.as_ref(), &y, &y, 21, 1e-8),
            Err(MepError::Input(_))
        ));
    }

    #[test]
    fn residual_vanishes_on_the_exact_path() {
        let m = dw(10.0);
        let path = DiscretePath::from_fn(uniform_alphas(100), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
        let sol = MepSolution::from_path(m.as_ref(), path.clone(), 1e-8).unwrap();
        let f = residual_f(m.as_ref(), &sol, &path).unwrap();
        assert!(y_norm(&f, sol.sbar).unwrap() <= 1e-6);
        assert_eq!(f.values[0].norm(), 0.0);
        assert_eq!(f.values[100].norm(), 0.0);
    }

    #[test]
    fn residual_is_linear_in_a_small_bend() {
        let m = dw(10.0);
        let alphas = uniform_alphas(200);
        let exact = DiscretePath::from_fn(alphas.clone(), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
        let sol = MepSolution::from_path(m.as_ref(), exact, 1e-8).unwrap();
        let norm_at = |eps: f64| {
            let p = DiscretePath::from_fn(alphas.clone(), |a| {
                v(&[2.0 * a - 1.0, eps * (std::f64::consts::PI * a).sin()])
            })
            .unwrap();
            y_norm(&residual_f(m.as_ref(), &sol, &p).unwrap(), sol.sbar).unwrap()
        };
        let big = norm_at(0.01);
        let small = norm_at(0.005);
        // first-order prediction: 0.01·(κ sin πα − πλ̄ cos πα) e_y
        let lam = |a: f64| {
            let x = 2.0 * a - 1.0;
            2.0 * x * (x * x - 1.0)
        };
        let pi = std::f64::consts::PI;
        let lin = NodeField::from_fn(&alphas, FieldRole::Residual, |a| {
            v(&[0.0, 0.01 * (10.0 * (pi * a).sin() - pi * lam(a) * (pi * a).cos())])
        });
        let predicted = y_norm(&lin, 0.5).unwrap();
        assert!(big > 0.005 && (big / predicted - 1.0).abs() < 0.02, "{big} {predicted}");
        assert!((big / small - 2.0).abs() < 0.05, "{big} {small}");
    }
}
