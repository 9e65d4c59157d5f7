//! Linear stability of a minimum energy path: the profile of the path
//! gradient, transported normal frames, the singular boundary value problems
//! along the path, and application and inversion of the linearized residual.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MepError, Result};
use crate::geometry::{
    random_field, tangent_data, x_norm, y_norm, Curve, DiscretePath, FieldRole, NodeField, TangentData,
};
use crate::landscape::{self, EnergyModel};
use crate::mep::{saddle_weight, MepSolution};
use crate::spline::{derivative_weights, differentiation_matrix, gauss_on, interpolation_weights, CubicSpline};

/// Relative least-squares residual above which a collocation solve fails.
pub const COLLOCATION_TOL: f64 = 0.1;

/// `λ̄(α) = (∇E(φ(α)), φ'(α)) / L²` on the nodes with its derivatives.
#[derive(Debug, Clone, Serialize)]
pub struct LambdaProfile {
    pub alphas: Vec<f64>,
    pub sbar: f64,
    pub values: Vec<f64>,
    pub derivative: Vec<f64>,
    pub dprime0: f64,
    pub dprime_sbar: f64,
    pub dprime1: f64,
    /// Bounds of `|λ̄ / (α(α − s̄)(α − 1))|` away from its three zeros.
    pub c_lower: f64,
    pub c_upper: f64,
    /// Interior nodes where λ̄ has the wrong sign for a single barrier.
    pub sign_violations: Vec<usize>,
}

impl LambdaProfile {
    pub fn value_at(&self, x: f64) -> f64 {
        CubicSpline::scalar(&self.alphas, &self.values).eval(x)[0]
    }

    /// Positive before the saddle and negative after it, at every interior node.
    pub fn check_sign_structure(&self) -> Result<()> {
        if self.sign_violations.is_empty() {
            Ok(())
        } else {
            Err(MepError::AssumptionASuspect(format!(
                "path gradient has the wrong sign at {} interior nodes, first at alpha = {}",
                self.sign_violations.len(),
                self.alphas[self.sign_violations[0]]
            )))
        }
    }
}

pub fn lambda_bar(model: &dyn EnergyModel, sol: &MepSolution) -> Result<LambdaProfile> {
    let path = &sol.path;
    let tan = tangent_data(&Curve::new(path))?;
    let l2 = tan.length * tan.length;
    let values = path
        .nodes()
        .iter()
        .zip(&tan.velocity)
        .map(|(y, v)| landscape::gradient(model, y).map(|g| g.dot(v) / l2))
        .collect::<Result<Vec<f64>>>()?;
    Ok(profile_from_values(path.alphas(), sol.sbar, values))
}

fn profile_from_values(alphas: &[f64], sbar: f64, values: Vec<f64>) -> LambdaProfile {
    let spline = CubicSpline::scalar(alphas, &values);
    let derivative: Vec<f64> = spline.knot_derivs().iter().map(|d| d[0]).collect();
    let last = alphas.len() - 1;
    let mut c_lower = f64::INFINITY;
    let mut c_upper: f64 = 0.0;
    let mut sign_violations = Vec::new();
    for i in 1..last {
        let a = alphas[i];
        let half = 0.5 * (alphas[i + 1] - alphas[i - 1]) * 0.5;
        if (a - sbar).abs() >= half {
            let ratio = (values[i] / (a * (a - sbar) * (a - 1.0))).abs();
            c_lower = c_lower.min(ratio);
            c_upper = c_upper.max(ratio);
            let wrong = if a < sbar { values[i] <= 0.0 } else { values[i] >= 0.0 };
            if wrong {
                sign_violations.push(i);
            }
        }
    }
    LambdaProfile {
        alphas: alphas.to_vec(),
        sbar,
        dprime0: derivative[0],
        dprime_sbar: spline.deriv(sbar)[0],
        dprime1: derivative[last],
        values,
        derivative,
        c_lower,
        c_upper,
        sign_violations,
    }
}

/// Orthonormal bases of the normal spaces along the path.
#[derive(Debug, Clone)]
pub struct FrameField {
    pub alphas: Vec<f64>,
    /// `N × (N − 1)` per node.
    pub frames: Vec<DMatrix<f64>>,
    pub derivative: Vec<DMatrix<f64>>,
}

impl FrameField {
    fn flat_spline(&self) -> CubicSpline {
        let flat: Vec<DVector<f64>> = self
            .frames
            .iter()
            .map(|q| DVector::from_column_slice(q.as_slice()))
            .collect();
        CubicSpline::from_points(&self.alphas, &flat)
    }

    /// Interpolated frame, re-orthonormalized.
    pub fn frame_at(&self, x: f64, tangent: &DVector<f64>) -> Result<DMatrix<f64>> {
        let q = self.frames[0].clone();
        let raw = DMatrix::from_column_slice(q.nrows(), q.ncols(), self.flat_spline().eval(x).as_slice());
        orthonormal_transfer(&raw, tangent)
    }
}

/// Orthonormal completion of a unit vector: the coordinate axes least aligned
/// with it, Gram–Schmidt against it, in their natural order.
fn completion(t: &DVector<f64>) -> DMatrix<f64> {
    let dim = t.len();
    let skip = (0..dim).max_by(|&a, &b| t[a].abs().total_cmp(&t[b].abs())).unwrap();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(dim - 1);
    for j in (0..dim).filter(|&j| j != skip) {
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        e -= t * t.dot(&e);
        for c in &cols {
            e -= c * c.dot(&e);
        }
        cols.push(e.normalize());
    }
    DMatrix::from_columns(&cols)
}

/// Orthonormalizes the projection of `q` onto the normal space of `t`, with
/// the transfer matrix given a positive diagonal.
fn orthonormal_transfer(q: &DMatrix<f64>, t: &DVector<f64>) -> Result<DMatrix<f64>> {
    let projected = q - t * (t.transpose() * q);
    let qr = projected.qr();
    let r = qr.r();
    let mut out = qr.q();
    for j in 0..out.ncols() {
        let d = r[(j, j)];
        if d.abs() < 1e-8 {
            return Err(MepError::Frame(format!("transported frame lost rank in column {j}")));
        }
        if d < 0.0 {
            out.column_mut(j).neg_mut();
        }
    }
    Ok(out)
}

pub fn transport_frames(sol: &MepSolution) -> Result<FrameField> {
    frames_along(&sol.path)
}

/// Discrete parallel transport of an orthonormal normal frame along a path.
pub fn frames_along(path: &DiscretePath) -> Result<FrameField> {
    if path.dim() < 2 {
        return Err(MepError::Frame("normal frames need dimension at least two".into()));
    }
    let tan = tangent_data(&Curve::new(path))?;
    let mut frames = vec![completion(&tan.unit[0])];
    for t in &tan.unit[1..] {
        let next = orthonormal_transfer(frames.last().unwrap(), t)?;
        frames.push(next);
    }
    let mut field = FrameField {
        alphas: path.alphas().to_vec(),
        derivative: Vec::new(),
        frames,
    };
    let (rows, cols) = (field.frames[0].nrows(), field.frames[0].ncols());
    field.derivative = field
        .flat_spline()
        .knot_derivs()
        .iter()
        .map(|d| DMatrix::from_column_slice(rows, cols, d.as_slice()))
        .collect();
    Ok(field)
}

/// Coefficients of the perpendicular boundary value problem
/// `λ̄ β' = A β + g` in frame coordinates.
#[derive(Debug, Clone)]
pub struct PerpSystem {
    pub alphas: Vec<f64>,
    pub sbar: f64,
    pub a: Vec<DMatrix<f64>>,
    pub g: Vec<DVector<f64>>,
    /// Projected Hessians `P⊥ ∇²E P⊥`.
    pub b: Vec<DMatrix<f64>>,
    pub lambda: LambdaProfile,
    /// Coefficient and source at the saddle parameter.
    pub a_sbar: DMatrix<f64>,
    pub g_sbar: DVector<f64>,
}

pub fn assemble_perp_system(
    model: &dyn EnergyModel,
    sol: &MepSolution,
    frames: &FrameField,
    f: &NodeField,
) -> Result<PerpSystem> {
    let op = Linearization::new(model, sol)?;
    op.perp_system(frames, f)
}

/// Perpendicular solve in frame coordinates and lifted to the ambient space.
#[derive(Debug, Clone)]
pub struct PerpSolution {
    pub beta: NodeField,
    pub psi: NodeField,
    pub residual: f64,
}

pub fn solve_perp(sys: &PerpSystem, frames: &FrameField) -> Result<PerpSolution> {
    let lu = sys.a_sbar.clone().lu();
    let pin = lu
        .solve(&(-&sys.g_sbar))
        .ok_or_else(|| MepError::DegenerateSaddle("the perpendicular coefficient at the saddle is singular".into()))?;
    if sys.a_sbar.symmetric_eigenvalues().amin() < 1e-10 * sys.a_sbar.norm().max(1.0) {
        return Err(MepError::DegenerateSaddle(
            "the perpendicular coefficient at the saddle is nearly singular".into(),
        ));
    }
    let ode = SingularOde {
        alphas: &sys.alphas,
        sbar: sys.sbar,
        lambda: &sys.lambda.values,
        slopes: [sys.lambda.dprime0, sys.lambda.dprime_sbar, sys.lambda.dprime1],
        a: &sys.a,
        g: &sys.g,
        pin,
    };
    let (beta, residual) = ode.solve()?;
    let psi: Vec<DVector<f64>> = beta.iter().zip(&frames.frames).map(|(b, q)| q * b).collect();
    Ok(PerpSolution {
        beta: NodeField::new(sys.alphas.clone(), beta, FieldRole::Scalar)?,
        psi: NodeField::new(sys.alphas.clone(), psi, FieldRole::Variation)?,
        residual,
    })
}

pub fn solve_tangential(
    model: &dyn EnergyModel,
    sol: &MepSolution,
    psi_perp: &NodeField,
    f: &NodeField,
) -> Result<(NodeField, f64)> {
    Linearization::new(model, sol)?.tangential(psi_perp, f)
}

pub fn apply_df(model: &dyn EnergyModel, sol: &MepSolution, psi: &NodeField, at_mep: bool) -> Result<NodeField> {
    let op = Linearization::new(model, sol)?;
    if at_mep {
        op.apply_at_mep(psi)
    } else {
        op.apply_general(psi)
    }
}

/// Linearization of the residual at an arbitrary path with the saddle
/// parameter and curvatures of `sol`.
pub fn apply_df_at(
    model: &dyn EnergyModel,
    sol: &MepSolution,
    path: &DiscretePath,
    psi: &NodeField,
) -> Result<NodeField> {
    Linearization::at_path(model, sol, path)?.apply_general(psi)
}

pub fn solve_df(model: &dyn EnergyModel, sol: &MepSolution, f: &NodeField) -> Result<NodeField> {
    Ok(Linearization::new(model, sol)?.solve(f)?.psi)
}

/// Pieces of an inverse solve.
#[derive(Debug, Clone)]
pub struct InverseSolution {
    pub psi: NodeField,
    pub perp: PerpSolution,
    pub beta0: NodeField,
    pub tangential_residual: f64,
}

/// Everything along a path that the linearized residual needs, evaluated once.
pub struct Linearization<'a> {
    model: &'a dyn EnergyModel,
    path: DiscretePath,
    sbar: f64,
    sigma: f64,
    curve: Curve,
    tan: TangentData,
    grads: Vec<DVector<f64>>,
    hessians: Vec<DMatrix<f64>>,
    grad_s: DVector<f64>,
    hess_s: DMatrix<f64>,
    tangent_s: DVector<f64>,
    /// Gauss points per cell with their weights and unit tangents.
    quadrature: Vec<Vec<(f64, f64, DVector<f64>)>>,
    /// Gauss points from the start of the saddle's cell up to `s̄`.
    sbar_cell: usize,
    sbar_quadrature: Vec<(f64, f64, DVector<f64>)>,
    lambda: LambdaProfile,
}

impl<'a> Linearization<'a> {
    pub fn new(model: &'a dyn EnergyModel, sol: &MepSolution) -> Result<Self> {
        Self::at_path(model, sol, &sol.path)
    }

    pub fn at_path(model: &'a dyn EnergyModel, sol: &MepSolution, path: &DiscretePath) -> Result<Self> {
        if path.alphas() != sol.path.alphas() {
            return Err(MepError::Input("path and solution use different grids".into()));
        }
        let curve = Curve::new(path);
        let tan = tangent_data(&curve)?;
        let evals: Vec<Result<landscape::Evaluation>> =
            path.nodes().par_iter().map(|y| landscape::evaluate(model, y)).collect();
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
        let sbar = sol.sbar;
        let at_s = landscape::evaluate(model, &curve.spline.eval(sbar))?;
        let unit_at = |x: f64| {
            let v = curve.spline.deriv(x);
            let s = v.norm();
            v / s
        };
        let alphas = path.alphas();
        let quadrature = alphas
            .windows(2)
            .map(|w| {
                gauss_on(w[0], w[1])
                    .iter()
                    .map(|&(x, wt)| (x, wt, unit_at(x)))
                    .collect()
            })
            .collect();
        let sbar_cell = alphas
            .partition_point(|&k| k <= sbar)
            .saturating_sub(1)
            .min(alphas.len() - 2);
        let sbar_quadrature = gauss_on(alphas[sbar_cell], sbar)
            .iter()
            .map(|&(x, wt)| (x, wt, unit_at(x)))
            .collect();
        let l2 = tan.length * tan.length;
        let lambda_values = evals
            .iter()
            .zip(&tan.velocity)
            .map(|(e, v)| e.gradient.dot(v) / l2)
            .collect();
        let lambda = profile_from_values(alphas, sbar, lambda_values);
        Ok(Self {
            model,
            sbar,
            sigma: sol.sigma_a + sol.sigma_b,
            tangent_s: unit_at(sbar),
            grads: evals.iter().map(|e| e.gradient.clone()).collect(),
            hessians: evals.into_iter().map(|e| e.hessian).collect(),
            grad_s: at_s.gradient,
            hess_s: at_s.hessian,
            quadrature,
            sbar_cell,
            sbar_quadrature,
            lambda,
            path: path.clone(),
            curve,
            tan,
        })
    }

    pub fn lambda(&self) -> &LambdaProfile {
        &self.lambda
    }

    fn check_field(&self, field: &NodeField, what: &str) -> Result<()> {
        if field.alphas != self.path.alphas() || field.dim() != self.path.dim() {
            return Err(MepError::Input(format!(
                "{what} does not match the path grid or dimension"
            )));
        }
        let last = field.len() - 1;
        let scale = field.sup_norm().max(1.0);
        if field.values[0].norm() > 1e-10 * scale || field.values[last].norm() > 1e-10 * scale {
            return Err(MepError::Input(format!("{what} does not vanish at the endpoints")));
        }
        Ok(())
    }

    /// Variation of Γ at the nodes and at `s̄`, and of the length, from the
    /// spline of `field`: `∫₀^α (t, ψ') − α ∫₀¹ (t, ψ')`.
    fn gamma_variation(&self, spline: &CubicSpline) -> (Vec<f64>, f64, f64) {
        let cells: Vec<f64> = self
            .quadrature
            .iter()
            .map(|pts| pts.iter().map(|(x, w, t)| w * t.dot(&spline.deriv(*x))).sum())
            .collect();
        let total: f64 = cells.iter().sum();
        let alphas = self.path.alphas();
        let mut running = 0.0;
        let mut nodes = vec![0.0];
        for (c, part) in cells.iter().enumerate() {
            running += part;
            nodes.push(running - alphas[c + 1] * total);
        }
        let last = nodes.len() - 1;
        nodes[last] = 0.0;
        let partial: f64 = self
            .sbar_quadrature
            .iter()
            .map(|(x, w, t)| w * t.dot(&spline.deriv(*x)))
            .sum();
        let to_sbar: f64 = cells[..self.sbar_cell].iter().sum::<f64>() + partial;
        (nodes, to_sbar - self.sbar * total, total)
    }

    /// The linearization at a minimum energy path, simplified with the path
    /// equations: `P⊥Hψ − λ̄P⊥ψ' + c P H_S ψ(s̄) + [σ(δΓ − c δΓ(s̄)) − λ̄ δΓ'] t`.
    ///
    /// Nodal derivatives are the field's derivative samples when it carries
    /// them; the Γ integrals always use its spline.
    pub fn apply_at_mep(&self, psi: &NodeField) -> Result<NodeField> {
        self.check_field(psi, "variation")?;
        let spline = psi.spline();
        let derivs = psi.node_derivatives();
        let psi_s = spline.eval(self.sbar);
        let hpsi_s = &self.hess_s * &psi_s;
        let (dgamma, dgamma_s, dlength) = self.gamma_variation(&spline);
        let last = psi.len() - 1;
        let mut out = Vec::with_capacity(psi.len());
        for (i, &a) in self.path.alphas().iter().enumerate() {
            if i == 0 || i == last {
                out.push(DVector::zeros(psi.dim()));
                continue;
            }
            let t = &self.tan.unit[i];
            let lam = self.lambda.values[i];
            let c = saddle_weight(a, self.sbar);
            let hpsi = &self.hessians[i] * &psi.values[i];
            let perp = |v: &DVector<f64>| v - t * t.dot(v);
            let dgamma_prime = t.dot(&derivs[i]) - dlength;
            let coef = c * t.dot(&hpsi_s) + self.sigma * (dgamma[i] - c * dgamma_s) - lam * dgamma_prime;
            out.push(perp(&hpsi) - perp(&derivs[i]) * lam + t * coef);
        }
        NodeField::new(psi.alphas.clone(), out, FieldRole::Residual)
    }

    /// The exact variation of the discrete residual at this path.
    pub fn apply_general(&self, psi: &NodeField) -> Result<NodeField> {
        self.check_field(psi, "variation")?;
        let spline = psi.spline();
        let derivs = psi.node_derivatives();
        let psi_s = spline.eval(self.sbar);
        let hpsi_s = &self.hess_s * &psi_s;
        let (dgamma, dgamma_s, dlength) = self.gamma_variation(&spline);
        let length = self.curve.length;
        let gammas = crate::geometry::gamma_nodes(&self.curve);
        let gamma_s = self.curve.gamma_at(self.sbar);
        let last = psi.len() - 1;
        let mut out = Vec::with_capacity(psi.len());
        for (i, &a) in self.path.alphas().iter().enumerate() {
            if i == 0 || i == last {
                out.push(DVector::zeros(psi.dim()));
                continue;
            }
            let t = &self.tan.unit[i];
            let v = self.tan.speed[i];
            let c = saddle_weight(a, self.sbar);
            let tau = &self.grads[i] - &self.grad_s * c;
            let rho = gammas.values[i][0] - c * gamma_s;
            let coef = -(v / length) * t.dot(&tau) + self.sigma * rho;
            let dt = (&derivs[i] - t * t.dot(&derivs[i])) / v;
            let dv = t.dot(&derivs[i]);
            let dtau = &self.hessians[i] * &psi.values[i] - &hpsi_s * c;
            let drho = dgamma[i] - c * dgamma_s;
            let dcoef = -(dv / length - v * dlength / (length * length)) * t.dot(&tau)
                - (v / length) * (dt.dot(&tau) + t.dot(&dtau))
                + self.sigma * drho;
            out.push(&self.hessians[i] * &psi.values[i] + &dt * coef + t * dcoef);
        }
        NodeField::new(psi.alphas.clone(), out, FieldRole::Residual)
    }

    pub fn perp_system(&self, frames: &FrameField, f: &NodeField) -> Result<PerpSystem> {
        self.check_field(f, "source")?;
        if frames.alphas != self.path.alphas() || frames.frames[0].nrows() != self.path.dim() {
            return Err(MepError::Input("frames do not match the path".into()));
        }
        let mut a = Vec::with_capacity(f.len());
        let mut g = Vec::with_capacity(f.len());
        let mut b = Vec::with_capacity(f.len());
        for i in 0..f.len() {
            let q = &frames.frames[i];
            let t = &self.tan.unit[i];
            let proj = DMatrix::identity(t.len(), t.len()) - t * t.transpose();
            b.push(&proj * &self.hessians[i] * &proj);
            let qt = q.transpose();
            a.push(&qt * &self.hessians[i] * q - &qt * &frames.derivative[i] * self.lambda.values[i]);
            g.push(-(&qt * &f.values[i]));
        }
        let q_s = frames.frame_at(self.sbar, &self.tangent_s)?;
        let a_sbar = q_s.transpose() * &self.hess_s * &q_s;
        let g_sbar = -(q_s.transpose() * f.value_at(self.sbar));
        Ok(PerpSystem {
            alphas: f.alphas.clone(),
            sbar: self.sbar,
            a,
            g,
            b,
            lambda: self.lambda.clone(),
            a_sbar,
            g_sbar,
        })
    }

    /// Tangential coefficient `β₀` of the inverse given its perpendicular part,
    /// with the relative collocation residual.
    pub fn tangential(&self, psi_perp: &NodeField, f: &NodeField) -> Result<(NodeField, f64)> {
        self.check_field(psi_perp, "perpendicular part")?;
        self.check_field(f, "source")?;
        let spline = psi_perp.spline();
        let derivs = spline.knot_derivs();
        let (ghat, ghat_s, total) = self.gamma_variation(&spline);
        let ts = &self.tangent_s;
        let hpsi_s = &self.hess_s * spline.eval(self.sbar);
        let curvature = ts.dot(&(&self.hess_s * ts));
        if curvature >= 0.0 {
            return Err(MepError::DegenerateSaddle(format!(
                "tangent curvature at the saddle is {curvature:.3e}, not negative"
            )));
        }
        let pin = (ts.dot(&f.value_at(self.sbar)) - ts.dot(&hpsi_s)) / curvature;
        let through_saddle = &hpsi_s + ts * (pin * curvature);
        let mut g0 = Vec::with_capacity(f.len());
        for (i, &a) in self.path.alphas().iter().enumerate() {
            let t = &self.tan.unit[i];
            let c = saddle_weight(a, self.sbar);
            let ghat_prime = t.dot(&derivs[i]) - total;
            let value = self.sigma * ghat[i] - self.lambda.values[i] * ghat_prime - c * self.sigma * (pin + ghat_s)
                + c * t.dot(&through_saddle)
                - t.dot(&f.values[i]);
            g0.push(DVector::from_element(1, value));
        }
        let last = g0.len() - 1;
        g0[0][0] = 0.0;
        g0[last][0] = 0.0;
        let a = vec![DMatrix::from_element(1, 1, self.sigma); f.len()];
        let ode = SingularOde {
            alphas: self.path.alphas(),
            sbar: self.sbar,
            lambda: &self.lambda.values,
            slopes: [self.lambda.dprime0, self.lambda.dprime_sbar, self.lambda.dprime1],
            a: &a,
            g: &g0,
            pin: DVector::from_element(1, pin),
        };
        let (beta, residual) = ode.solve()?;
        Ok((NodeField::new(f.alphas.clone(), beta, FieldRole::Scalar)?, residual))
    }

    /// Inverts the linearization at the minimum energy path.
    pub fn solve(&self, f: &NodeField) -> Result<InverseSolution> {
        self.check_field(f, "source")?;
        let frames = frames_along(&self.path)?;
        let sys = self.perp_system(&frames, f)?;
        let perp = solve_perp(&sys, &frames)?;
        let (beta0, tangential_residual) = self.tangential(&perp.psi, f)?;
        let values = perp
            .psi
            .values
            .iter()
            .zip(&beta0.values)
            .zip(&self.tan.unit)
            .map(|((p, b), t)| p + t * b[0])
            .collect();
        Ok(InverseSolution {
            psi: NodeField::new(f.alphas.clone(), values, FieldRole::Variation)?,
            perp,
            beta0,
            tangential_residual,
        })
    }

    pub fn model(&self) -> &dyn EnergyModel {
        self.model
    }
}

/// `λ̄ β' = A β + g` on [0, 1] with `β(0) = β(1) = 0`, `β(s̄)` pinned, by
/// least-squares collocation at the nodes together with the derivative limits
/// at the zeros of λ̄.
pub(crate) struct SingularOde<'a> {
    pub alphas: &'a [f64],
    pub sbar: f64,
    pub lambda: &'a [f64],
    /// λ̄' at 0, s̄ and 1.
    pub slopes: [f64; 3],
    pub a: &'a [DMatrix<f64>],
    pub g: &'a [DVector<f64>],
    pub pin: DVector<f64>,
}

impl SingularOde<'_> {
    pub fn solve(&self) -> Result<(Vec<DVector<f64>>, f64)> {
        let alphas = self.alphas;
        let last = alphas.len() - 1;
        let k = self.pin.len();
        let interior = last - 1;
        let d = differentiation_matrix(alphas);
        let w = interpolation_weights(alphas, self.sbar);
        let wd = derivative_weights(alphas, self.sbar);
        let g_spline = CubicSpline::from_points(alphas, self.g);
        let flat: Vec<DVector<f64>> = self
            .a
            .iter()
            .map(|m| DVector::from_column_slice(m.as_slice()))
            .collect();
        let a_spline = CubicSpline::from_points(alphas, &flat);
        let unflat = |v: DVector<f64>| DMatrix::from_column_slice(k, k, v.as_slice());
        let a_s = unflat(a_spline.eval(self.sbar));
        let da_s = unflat(a_spline.deriv(self.sbar));
        let identity = DMatrix::<f64>::identity(k, k);

        let mut limits: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
        let limit = |slope: f64, a: &DMatrix<f64>, rhs: DVector<f64>| (&identity * slope - a).lu().solve(&rhs);
        // At an end the derivative limit only selects a solution when some
        // homogeneous mode α^(μ/λ̄') is not C¹ there; otherwise it would fight
        // the spline's approximation of those modes.
        let needs_limit = |slope: f64, a: &DMatrix<f64>| {
            let sym = (a + a.transpose()) * 0.5;
            sym.symmetric_eigenvalues().amin() < slope
        };
        if needs_limit(self.slopes[0], &self.a[0]) {
            if let Some(v) = limit(self.slopes[0], &self.a[0], g_spline.deriv(alphas[0])) {
                limits.push((d.row(0).transpose(), v));
            }
        }
        if let Some(v) = limit(self.slopes[1], &a_s, g_spline.deriv(self.sbar) + &da_s * &self.pin) {
            limits.push((wd.clone(), v));
        }
        if needs_limit(self.slopes[2], &self.a[last]) {
            if let Some(v) = limit(self.slopes[2], &self.a[last], g_spline.deriv(alphas[last])) {
                limits.push((d.row(last).transpose(), v));
            }
        }

        let rows = (interior + limits.len()) * k;
        let mut m = DMatrix::zeros(rows, interior * k);
        let mut r = DVector::zeros(rows);
        for i in 1..last {
            let row = (i - 1) * k;
            for j in 1..last {
                let mut block = &identity * (self.lambda[i] * d[(i, j)]);
                if i == j {
                    block -= &self.a[i];
                }
                m.view_mut((row, (j - 1) * k), (k, k)).copy_from(&block);
            }
            r.rows_mut(row, k).copy_from(&self.g[i]);
        }
        for (n, (weights, value)) in limits.iter().enumerate() {
            let row = (interior + n) * k;
            for j in 1..last {
                m.view_mut((row, (j - 1) * k), (k, k))
                    .copy_from(&(&identity * weights[j]));
            }
            r.rows_mut(row, k).copy_from(value);
        }

        // eliminate the node carrying the largest interpolation weight at s̄
        let star = (1..last).max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs())).unwrap();
        let col_star = (star - 1) * k;
        let star_block = m.columns(col_star, k).into_owned();
        r -= &star_block * &self.pin / w[star];
        for j in (1..last).filter(|&j| j != star) {
            let update = &star_block * (w[j] / w[star]);
            let mut cols = m.columns_mut((j - 1) * k, k);
            cols -= update;
        }
        let keep: Vec<usize> = (0..interior * k).filter(|c| c / k != star - 1).collect();
        let reduced = m.select_columns(&keep);
        let qr = reduced.clone().qr();
        let z = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * &r))
            .ok_or_else(|| MepError::Solver("collocation matrix is rank deficient".into()))?;
        let residual = (&reduced * &z - &r).norm() / r.norm().max(f64::MIN_POSITIVE);
        if !(residual <= COLLOCATION_TOL) {
            return Err(MepError::Solver(format!(
                "collocation residual {residual:.3e} exceeds {COLLOCATION_TOL:.1e}"
            )));
        }

        let mut beta = vec![DVector::zeros(k); alphas.len()];
        let mut cursor = 0;
        for (j, b) in beta.iter_mut().enumerate().take(last).skip(1) {
            if j != star {
                *b = z.rows(cursor, k).into_owned();
                cursor += k;
            }
        }
        let mut star_value = self.pin.clone();
        for j in (1..last).filter(|&j| j != star) {
            star_value -= &beta[j] * w[j];
        }
        beta[star] = star_value / w[star];
        Ok((beta, residual))
    }
}

/// One trial of the stability constant estimate.
#[derive(Debug, Clone, Serialize)]
pub struct GammaTrial {
    pub index: usize,
    pub y_norm_source: f64,
    pub x_norm_solution: f64,
    pub ratio: f64,
    /// `x_norm(solve(apply(ψ)) − ψ) / x_norm(ψ)` for a random variation ψ.
    pub roundtrip_defect: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaEstimate {
    pub gamma_hat: f64,
    pub roundtrip_defect: f64,
    pub trials: Vec<GammaTrial>,
}

/// Control knots of the random sources.
const SOURCE_CONTROLS: usize = 6;

/// Largest `x_norm(solve(f)) / y_norm(f)` over random smooth sources.
pub fn estimate_gamma(model: &dyn EnergyModel, sol: &MepSolution, trials: usize, seed: u64) -> Result<GammaEstimate> {
    estimate_gamma_scaled(model, sol, trials, seed, 1.0)
}

/// As [`estimate_gamma`] with sources normalized to `y_norm = scale`.
pub fn estimate_gamma_scaled(
    model: &dyn EnergyModel,
    sol: &MepSolution,
    trials: usize,
    seed: u64,
    scale: f64,
) -> Result<GammaEstimate> {
    if trials == 0 {
        return Err(MepError::Input("at least one trial is needed".into()));
    }
    let op = Linearization::new(model, sol)?;
    let alphas = sol.path.alphas();
    let dim = sol.path.dim();
    let rows: Vec<Result<GammaTrial>> = (0..trials)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let raw = random_field(alphas, dim, SOURCE_CONTROLS, &mut rng);
            let norm = y_norm(&raw, sol.sbar)?;
            let f = raw.scaled(scale / norm);
            let y = y_norm(&f, sol.sbar)?;
            let x = x_norm(&op.solve(&f)?.psi);
            let probe = random_field(alphas, dim, SOURCE_CONTROLS, &mut rng);
            let back = op.solve(&op.apply_at_mep(&probe)?)?.psi;
            let defect = x_norm(&back.combine(1.0, &probe, -1.0)?) / x_norm(&probe);
            Ok(GammaTrial {
                index,
                y_norm_source: y,
                x_norm_solution: x,
                ratio: x / y,
                roundtrip_defect: defect,
            })
        })
        .collect();
    let trials = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GammaEstimate {
        gamma_hat: trials.iter().map(|t| t.ratio).fold(0.0, f64::max),
        roundtrip_defect: trials.iter().map(|t| t.roundtrip_defect).fold(0.0, f64::max),
        trials,
    })
}
