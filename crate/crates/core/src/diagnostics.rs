//! Critical point classification, the spectral conditions at the ends and the
//! saddle, and the singular limits of the residual at 0 and `s̄`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{MepError, Result};
use crate::geometry::{tangent_data, Curve, DiscretePath};
use crate::landscape::{self, EnergyModel};
use crate::mep::{residual_f, MepSolution};
use crate::stability::{lambda_bar, LambdaProfile};

/// Relative gap separating the tangent eigenvalue from the rest of the
/// spectrum below which it counts as not simple.
pub const DEFAULT_GAP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    Minimizer,
    Index1Saddle,
    Degenerate,
    HigherIndex,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalPointReport {
    pub location: Vec<f64>,
    pub kind: CriticalKind,
    /// Ascending.
    pub spectrum: Vec<f64>,
    /// Eigenvalue whose eigenvector is best aligned with the path tangent, or
    /// without a tangent the lowest eigenvalue.
    pub tangent_eigenvalue: f64,
    /// Distance from the tangent eigenvalue to the rest of the spectrum.
    pub gap: f64,
}

impl CriticalPointReport {
    /// Eigenvalues other than the tangent one.
    pub fn others(&self) -> Vec<f64> {
        let skip = self.tangent_index();
        self.spectrum
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, l)| *l)
            .collect()
    }

    fn tangent_index(&self) -> usize {
        self.spectrum
            .iter()
            .position(|&l| l == self.tangent_eigenvalue)
            .unwrap_or(0)
    }
}

pub fn classify_critical(model: &dyn EnergyModel, y: &DVector<f64>, tol: f64) -> Result<CriticalPointReport> {
    classify_along(model, y, tol, None)
}

/// Classification with the tangent eigenvalue chosen by alignment with `tangent`.
pub fn classify_along(
    model: &dyn EnergyModel,
    y: &DVector<f64>,
    tol: f64,
    tangent: Option<&DVector<f64>>,
) -> Result<CriticalPointReport> {
    let ev = landscape::evaluate(model, y)?;
    let gnorm = ev.gradient.norm();
    if gnorm > tol {
        return Err(MepError::NotCritical(gnorm));
    }
    let eig = ev.hessian.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let pick = match tangent {
        Some(t) => (0..spectrum.len())
            .max_by(|&a, &b| {
                let ca = eig.eigenvectors.column(order[a]).dot(t).abs();
                let cb = eig.eigenvectors.column(order[b]).dot(t).abs();
                ca.total_cmp(&cb)
            })
            .unwrap(),
        None => 0,
    };
    let tangent_eigenvalue = spectrum[pick];
    let gap = spectrum
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pick)
        .map(|(_, l)| (l - tangent_eigenvalue).abs())
        .fold(f64::INFINITY, f64::min);
    let negative = spectrum.iter().filter(|&&l| l < -tol).count();
    let flat = spectrum.iter().any(|&l| l.abs() <= tol);
    let kind = match (flat, negative) {
        (true, _) => CriticalKind::Degenerate,
        (false, 0) => CriticalKind::Minimizer,
        (false, 1) => CriticalKind::Index1Saddle,
        _ => CriticalKind::HigherIndex,
    };
    Ok(CriticalPointReport {
        location: y.iter().copied().collect(),
        kind,
        spectrum,
        tangent_eigenvalue,
        gap,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub a_holds: bool,
    /// Parameters where the path gradient changes sign, by linear interpolation.
    pub zero_crossings: Vec<f64>,
    /// Interior nodes where `|∇E|` has a local minimum below the dip threshold.
    pub gradient_dips: Vec<f64>,
    pub start: Option<CriticalPointReport>,
    pub saddle: Option<CriticalPointReport>,
    pub end: Option<CriticalPointReport>,
    pub b_holds: bool,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub simple_a: bool,
    pub simple_b: bool,
    pub lowest_a: bool,
    pub lowest_b: bool,
    pub gap_a: f64,
    pub gap_b: f64,
    pub omega_s: f64,
    pub omega_b: f64,
    pub sigma_ratio: f64,
    pub gap_tol: f64,
}

pub fn check_assumptions(model: &dyn EnergyModel, sol: &MepSolution) -> Result<AssumptionReport> {
    check_assumptions_with(model, sol, DEFAULT_GAP_TOL)
}

/// Report on the single-barrier structure of the path and the spectral
/// conditions at its ends. Failing conditions are reported, not raised.
pub fn check_assumptions_with(model: &dyn EnergyModel, sol: &MepSolution, gap_tol: f64) -> Result<AssumptionReport> {
    let path = &sol.path;
    let profile = lambda_bar(model, sol)?;
    let tan = tangent_data(&Curve::new(path))?;
    let last = path.len() - 1;
    let crit_tol = critical_tolerance(model, sol)?;

    let zero_crossings = sign_changes(&profile);
    let gradient_dips = gradient_dips(model, path, sol.sbar)?;
    let start = classify_along(model, path.start(), crit_tol, Some(&tan.unit[0])).ok();
    let end = classify_along(model, path.end(), crit_tol, Some(&tan.unit[last])).ok();
    let t_s = {
        let v = path.spline().deriv(sol.sbar);
        let s = v.norm();
        v / s
    };
    let saddle = classify_along(model, &sol.saddle, crit_tol, Some(&t_s)).ok();
    let single_crossing = zero_crossings.len() == 1 && (zero_crossings[0] - sol.sbar).abs() <= 2.0 * max_cell(path);
    let kinds_ok = matches!(&start, Some(r) if r.kind == CriticalKind::Minimizer)
        && matches!(&end, Some(r) if r.kind == CriticalKind::Minimizer)
        && matches!(&saddle, Some(r) if r.kind == CriticalKind::Index1Saddle);
    let a_holds = single_crossing && kinds_ok && gradient_dips.is_empty();

    let end_conditions = |r: &Option<CriticalPointReport>| match r {
        Some(r) => {
            let others = r.others();
            let lowest_other = others.iter().cloned().fold(f64::INFINITY, f64::min);
            let simple = r.gap > gap_tol * r.tangent_eigenvalue.abs().max(f64::MIN_POSITIVE);
            let lowest = r.tangent_eigenvalue <= lowest_other + gap_tol * r.tangent_eigenvalue.abs();
            (r.tangent_eigenvalue, simple, lowest, r.gap, lowest_other)
        }
        None => (f64::NAN, false, false, f64::NAN, f64::NAN),
    };
    let (sigma_a, simple_a, lowest_a, gap_a, _) = end_conditions(&start);
    let (sigma_b, simple_b, lowest_b, gap_b, omega_b) = end_conditions(&end);
    let omega_s = saddle
        .as_ref()
        .map(|r| {
            r.spectrum
                .iter()
                .cloned()
                .filter(|&l| l > 0.0)
                .fold(f64::INFINITY, f64::min)
        })
        .unwrap_or(f64::NAN);
    Ok(AssumptionReport {
        a_holds,
        zero_crossings,
        gradient_dips,
        start,
        saddle,
        end,
        b_holds: simple_a && lowest_a && simple_b && lowest_b,
        sigma_a,
        sigma_b,
        simple_a,
        simple_b,
        lowest_a,
        lowest_b,
        gap_a,
        gap_b,
        omega_s,
        omega_b,
        sigma_ratio: omega_b / profile.dprime1,
        gap_tol,
    })
}

/// Gradient threshold for the three critical points: generous enough for a
/// converged string, far below the gradients met along the path.
fn critical_tolerance(model: &dyn EnergyModel, sol: &MepSolution) -> Result<f64> {
    let worst = [sol.path.start(), sol.path.end(), &sol.saddle]
        .iter()
        .map(|y| landscape::gradient(model, y).map(|g| g.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok((10.0 * worst).max(1e-8))
}

fn max_cell(path: &DiscretePath) -> f64 {
    path.alphas().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn sign_changes(profile: &LambdaProfile) -> Vec<f64> {
    let last = profile.values.len() - 1;
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for i in 1..last {
        let (a, l) = (profile.alphas[i], profile.values[i]);
        if l == 0.0 {
            continue;
        }
        if let Some((pa, pl)) = prev {
            if pl.signum() != l.signum() {
                out.push(pa + (a - pa) * pl / (pl - l));
            }
        }
        prev = Some((a, l));
    }
    out
}

/// Interior local minima of `|∇E|` along the nodes that fall below a small
/// fraction of its largest value, away from the saddle.
fn gradient_dips(model: &dyn EnergyModel, path: &DiscretePath, sbar: f64) -> Result<Vec<f64>> {
    let norms = path
        .nodes()
        .iter()
        .map(|y| landscape::gradient(model, y).map(|g| g.norm()))
        .collect::<Result<Vec<_>>>()?;
    let peak = norms.iter().cloned().fold(0.0, f64::max);
    let cell = max_cell(path);
    let alphas = path.alphas();
    let mut out = Vec::new();
    for i in 2..norms.len() - 2 {
        let a = alphas[i];
        let local_min = norms[i] <= norms[i - 1] && norms[i] <= norms[i + 1];
        if local_min && norms[i] < 1e-2 * peak && (a - sbar).abs() > 2.0 * cell {
            out.push(a);
        }
    }
    Ok(out)
}

/// Singular limits of the residual at a path.
#[derive(Debug, Clone, Serialize)]
pub struct EndpointLimits {
    /// `lim_{α→0⁺} 𝓕(α) / (α(α − 1))` from the closed form.
    pub limit0: Vec<f64>,
    /// `lim_{α→s̄} (𝓕(α) − 𝓕(s̄)) / (α − s̄)` from the closed form.
    pub limit_sbar: Vec<f64>,
    /// The same limits from the spline of the residual samples.
    pub quotient0: Vec<f64>,
    pub quotient_sbar: Vec<f64>,
    /// Parts of `limit0` perpendicular and parallel to the start tangent.
    pub perp0: f64,
    pub tangential0: f64,
}

impl EndpointLimits {
    /// Largest relative disagreement of the two evaluations.
    pub fn disagreement(&self) -> f64 {
        let rel = |a: &[f64], b: &[f64]| {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            d / s
        };
        rel(&self.limit0, &self.quotient0).max(rel(&self.limit_sbar, &self.quotient_sbar))
    }
}

pub fn endpoint_limits(model: &dyn EnergyModel, sol: &MepSolution, path: &DiscretePath) -> Result<EndpointLimits> {
    let curve = Curve::new(path);
    let tan = tangent_data(&curve)?;
    let length = curve.length;
    let sbar = sol.sbar;
    let sigma = sol.sigma_a + sol.sigma_b;
    let denom = sbar * (sbar - 1.0);
    let y_s = curve.spline.eval(sbar);
    let grad_s = landscape::gradient(model, &y_s)?;
    let gamma_s = curve.gamma_at(sbar);

    // F'(x) where τ(x) = 0 and ρ(x) = 0, which holds at 0 and at s̄
    let slope = |h: &DMatrix<f64>, velocity: &DVector<f64>, dc: f64| {
        let speed = velocity.norm();
        let t = velocity / speed;
        let dtau = h * velocity - &grad_s * dc;
        let along = &t * t.dot(&dtau);
        h * velocity - along * (speed / length) + &t * (sigma * (speed - length - dc * gamma_s))
    };
    let h0 = landscape::hessian(model, path.start())?;
    let limit0 = -slope(&h0, &tan.velocity[0], -1.0 / denom);
    let h_s = landscape::hessian(model, &y_s)?;
    let limit_sbar = slope(&h_s, &curve.spline.deriv(sbar), (2.0 * sbar - 1.0) / denom);

    let f = residual_f(model, sol, path)?;
    let fs = f.spline();
    let quotient0 = -fs.deriv(0.0);
    let quotient_sbar = fs.deriv(sbar);
    let t0 = &tan.unit[0];
    let tangential0 = t0.dot(&limit0);
    let perp0 = (&limit0 - t0 * tangential0).norm();
    Ok(EndpointLimits {
        limit0: limit0.iter().copied().collect(),
        limit_sbar: limit_sbar.iter().copied().collect(),
        quotient0: quotient0.iter().copied().collect(),
        quotient_sbar: quotient_sbar.iter().copied().collect(),
        perp0,
        tangential0,
    })
}
