//! Energy landscapes on ℝ^N: the model abstraction, the built-in analytic
//! surfaces, perturbed models, and a finite-difference consistency check.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MepError, Result};

/// An energy functional with analytic gradient and Hessian.
///
/// Implementations must be pure: evaluating the same point twice yields the
/// same numbers.
pub trait EnergyModel: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn label(&self) -> &str;
    fn params(&self) -> BTreeMap<String, f64>;
    fn energy(&self, y: &DVector<f64>) -> f64;
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64>;

    /// Starting points for locating the two endpoint minimizers, if the model
    /// has a canonical pair.
    fn minimizer_seeds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }
}

pub type SharedModel = Arc<dyn EnergyModel>;

/// Energy, gradient and symmetrized Hessian at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub energy: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn check_dim(model: &dyn EnergyModel, y: &DVector<f64>) -> Result<()> {
    if y.len() != model.dim() {
        return Err(MepError::Input(format!(
            "point has length {} but model '{}' has dimension {}",
            y.len(),
            model.label(),
            model.dim()
        )));
    }
    Ok(())
}

pub fn evaluate(model: &dyn EnergyModel, y: &DVector<f64>) -> Result<Evaluation> {
    check_dim(model, y)?;
    let energy = model.energy(y);
    let gradient = model.gradient(y);
    let h = model.hessian(y);
    let hessian = (&h + h.transpose()) * 0.5;
    if !energy.is_finite() || gradient.iter().chain(hessian.iter()).any(|v| !v.is_finite()) {
        return Err(MepError::ModelEvaluation(format!(
            "model '{}' at {:?}",
            model.label(),
            y.as_slice()
        )));
    }
    Ok(Evaluation {
        energy,
        gradient,
        hessian,
    })
}

/// Checked gradient evaluation.
pub fn gradient(model: &dyn EnergyModel, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(model, y)?;
    let g = model.gradient(y);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MepError::ModelEvaluation(format!(
            "gradient of '{}' at {:?}",
            model.label(),
            y.as_slice()
        )));
    }
    Ok(g)
}

/// Checked, symmetrized Hessian evaluation.
pub fn hessian(model: &dyn EnergyModel, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim(model, y)?;
    let h = model.hessian(y);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(MepError::ModelEvaluation(format!(
            "hessian of '{}' at {:?}",
            model.label(),
            y.as_slice()
        )));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Maximum relative deviations of the analytic derivatives from centered
/// differences.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdReport {
    pub gradient_error: f64,
    pub hessian_error: f64,
}

pub fn fd_consistency(model: &dyn EnergyModel, y: &DVector<f64>, h: f64) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(MepError::Input(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = evaluate(model, y)?;
    let n = model.dim();
    let mut fd_grad = DVector::zeros(n);
    let mut fd_hess = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut plus = y.clone();
        let mut minus = y.clone();
        plus[k] += h;
        minus[k] -= h;
        fd_grad[k] = (model.energy(&plus) - model.energy(&minus)) / (2.0 * h);
        let dg = (model.gradient(&plus) - model.gradient(&minus)) / (2.0 * h);
        fd_hess.set_column(k, &dg);
    }
    let fd_hess = (&fd_hess + fd_hess.transpose()) * 0.5;
    let gscale = eval.gradient.amax().max(1.0);
    let hscale = eval.hessian.amax().max(1.0);
    Ok(FdReport {
        gradient_error: (&eval.gradient - fd_grad).amax() / gscale,
        hessian_error: (&eval.hessian - fd_hess).amax() / hscale,
    })
}

/// `E(x, y) = (x² − 1)² + (κ/2) y²`.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    pub kappa: f64,
}

impl EnergyModel for DoubleWell {
    fn dim(&self) -> usize {
        2
    }
    fn label(&self) -> &str {
        "dw"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("kappa".to_string(), self.kappa)])
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        let (x, z) = (y[0], y[1]);
        (x * x - 1.0).powi(2) + 0.5 * self.kappa * z * z
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let (x, z) = (y[0], y[1]);
        DVector::from_vec(vec![4.0 * x * (x * x - 1.0), self.kappa * z])
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let x = y[0];
        DMatrix::from_row_slice(2, 2, &[12.0 * x * x - 4.0, 0.0, 0.0, self.kappa])
    }
    fn minimizer_seeds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        Some((DVector::from_vec(vec![-0.9, 0.05]), DVector::from_vec(vec![0.9, -0.05])))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct MuellerBrownConstants {
    #[serde(rename = "A")]
    amp: [f64; 4],
    a: [f64; 4],
    b: [f64; 4],
    c: [f64; 4],
    x0: [f64; 4],
    y0: [f64; 4],
}

const MUELLER_BROWN_DATA: &str = include_str!("../data/mueller_brown.json");

/// The four-Gaussian Müller–Brown surface with the literature constants.
#[derive(Debug, Clone)]
pub struct MuellerBrown {
    k: MuellerBrownConstants,
}

impl MuellerBrown {
    pub fn new() -> Self {
        let k = serde_json::from_str(MUELLER_BROWN_DATA).expect("bundled Müller–Brown constants parse");
        Self { k }
    }

    /// Per-term amplitude, exponent gradient and exponent Hessian.
    fn terms(&self, y: &DVector<f64>) -> [(f64, [f64; 2], [f64; 3]); 4] {
        let k = &self.k;
        let mut out = [(0.0, [0.0; 2], [0.0; 3]); 4];
        for i in 0..4 {
            let dx = y[0] - k.x0[i];
            let dy = y[1] - k.y0[i];
            let expo = k.a[i] * dx * dx + k.b[i] * dx * dy + k.c[i] * dy * dy;
            let val = k.amp[i] * expo.exp();
            let u = [2.0 * k.a[i] * dx + k.b[i] * dy, k.b[i] * dx + 2.0 * k.c[i] * dy];
            out[i] = (val, u, [2.0 * k.a[i], k.b[i], 2.0 * k.c[i]]);
        }
        out
    }
}

impl Default for MuellerBrown {
    fn default() -> Self {
        Self::new()
    }
}

impl EnergyModel for MuellerBrown {
    fn dim(&self) -> usize {
        2
    }
    fn label(&self) -> &str {
        "mueller_brown"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        self.terms(y).iter().map(|t| t.0).sum()
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(2);
        for (v, u, _) in self.terms(y) {
            g[0] += v * u[0];
            g[1] += v * u[1];
        }
        g
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(2, 2);
        for (v, u, q) in self.terms(y) {
            h[(0, 0)] += v * (u[0] * u[0] + q[0]);
            h[(0, 1)] += v * (u[0] * u[1] + q[1]);
            h[(1, 1)] += v * (u[1] * u[1] + q[2]);
        }
        h[(1, 0)] = h[(0, 1)];
        h
    }
    fn minimizer_seeds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        Some((
            DVector::from_vec(vec![-0.55, 1.45]),
            DVector::from_vec(vec![0.62, 0.03]),
        ))
    }
}

/// `E(y) = ½ yᵀ M y` for a symmetric positive definite `M`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    m: DMatrix<f64>,
}

impl Quadratic {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(MepError::Configuration(
                "quadratic matrix must be square and non-empty".into(),
            ));
        }
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(MepError::Configuration("quadratic matrix must be symmetric".into()));
        }
        if m.clone().cholesky().is_none() {
            return Err(MepError::Configuration(
                "quadratic matrix must be positive definite".into(),
            ));
        }
        Ok(Self { m })
    }
}

impl EnergyModel for Quadratic {
    fn dim(&self) -> usize {
        self.m.nrows()
    }
    fn label(&self) -> &str {
        "quadratic"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        let mut p = BTreeMap::from([("dim".to_string(), self.dim() as f64)]);
        for i in 0..self.dim() {
            for j in i..self.dim() {
                p.insert(format!("m_{i}_{j}"), self.m[(i, j)]);
            }
        }
        p
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.m * y))
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * y
    }
    fn hessian(&self, _y: &DVector<f64>) -> DMatrix<f64> {
        self.m.clone()
    }
}

/// Isotropic Gaussian wells at seeded random centers inside a weak harmonic
/// confinement.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    centers: Vec<DVector<f64>>,
    depth: f64,
    width: f64,
    confinement: f64,
    seed: u64,
}

impl GaussianMixture {
    pub fn new(dim: usize, wells: usize, seed: u64, depth: f64, width: f64, confinement: f64) -> Result<Self> {
        if dim == 0 || wells == 0 {
            return Err(MepError::Configuration(
                "gaussian_mixture needs dim ≥ 1 and wells ≥ 1".into(),
            ));
        }
        if !(depth > 0.0 && width > 0.0 && confinement >= 0.0) {
            return Err(MepError::Configuration(
                "gaussian_mixture needs depth > 0, width > 0, confinement ≥ 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..wells)
            .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        Ok(Self {
            centers,
            depth,
            width,
            confinement,
            seed,
        })
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }
}

impl EnergyModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.centers[0].len()
    }
    fn label(&self) -> &str {
        "gaussian_mixture"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("dim".to_string(), self.dim() as f64),
            ("wells".to_string(), self.centers.len() as f64),
            ("seed".to_string(), self.seed as f64),
            ("depth".to_string(), self.depth),
            ("width".to_string(), self.width),
            ("confinement".to_string(), self.confinement),
        ])
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        let s2 = self.width * self.width;
        let wells: f64 = self
            .centers
            .iter()
            .map(|c| (-(y - c).norm_squared() / (2.0 * s2)).exp())
            .sum();
        0.5 * self.confinement * y.norm_squared() - self.depth * wells
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let s2 = self.width * self.width;
        let mut g = y * self.confinement;
        for c in &self.centers {
            let d = y - c;
            let w = (-d.norm_squared() / (2.0 * s2)).exp();
            g += d * (self.depth * w / s2);
        }
        g
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let s2 = self.width * self.width;
        let mut h = DMatrix::identity(n, n) * self.confinement;
        for c in &self.centers {
            let d = y - c;
            let w = self.depth * (-d.norm_squared() / (2.0 * s2)).exp();
            h += (DMatrix::identity(n, n) / s2 - &d * d.transpose() / (s2 * s2)) * w;
        }
        h
    }
    fn minimizer_seeds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        if self.centers.len() < 2 {
            return None;
        }
        Some((self.centers[0].clone(), self.centers[1].clone()))
    }
}

/// `W(y) = sin(kx·y₀) cos(ky·y₁)`; a smooth bounded perturbation.
#[derive(Debug, Clone)]
pub struct Sinusoid {
    pub kx: f64,
    pub ky: f64,
    pub dim: usize,
}

impl EnergyModel for Sinusoid {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> &str {
        "sinusoid"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("kx".to_string(), self.kx),
            ("ky".to_string(), self.ky),
            ("dim".to_string(), self.dim as f64),
        ])
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        (self.kx * y[0]).sin() * (self.ky * y[1]).cos()
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let (sx, cx) = (self.kx * y[0]).sin_cos();
        let (sy, cy) = (self.ky * y[1]).sin_cos();
        let mut g = DVector::zeros(self.dim);
        g[0] = self.kx * cx * cy;
        g[1] = -self.ky * sx * sy;
        g
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let (sx, cx) = (self.kx * y[0]).sin_cos();
        let (sy, cy) = (self.ky * y[1]).sin_cos();
        let mut h = DMatrix::zeros(self.dim, self.dim);
        h[(0, 0)] = -self.kx * self.kx * sx * cy;
        h[(0, 1)] = -self.kx * self.ky * cx * sy;
        h[(1, 0)] = h[(0, 1)];
        h[(1, 1)] = -self.ky * self.ky * sx * cy;
        h
    }
}

/// `E_δ = E + δ·W`, optionally restricted to a coordinate subspace.
///
/// With a mask, the energy is evaluated at the projection `P y` of the point
/// onto the kept coordinates; dropped coordinates carry a unit harmonic
/// restraint `½|(I − P) y|²`, so the model is unchanged on the subspace and
/// its minimizers lie in it.
#[derive(Debug, Clone)]
pub struct PerturbedModel {
    pub base: SharedModel,
    pub bump: SharedModel,
    pub delta: f64,
    pub mask: Option<Vec<bool>>,
    label: String,
}

impl PerturbedModel {
    pub fn new(base: SharedModel, bump: SharedModel, delta: f64, mask: Option<Vec<bool>>) -> Result<Self> {
        if base.dim() != bump.dim() {
            return Err(MepError::Input(format!(
                "bump dimension {} differs from base dimension {}",
                bump.dim(),
                base.dim()
            )));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(MepError::Input(format!(
                "perturbation amplitude must be ≥ 0, got {delta}"
            )));
        }
        if let Some(m) = &mask {
            if m.len() != base.dim() {
                return Err(MepError::Input("mask length must equal the model dimension".into()));
            }
        }
        let label = format!("{}+{}*{}", base.label(), delta, bump.label());
        Ok(Self {
            base,
            bump,
            delta,
            mask,
            label,
        })
    }

    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.mask {
            None => y.clone(),
            Some(m) => DVector::from_fn(y.len(), |i, _| if m[i] { y[i] } else { 0.0 }),
        }
    }

    fn restraint(&self, y: &DVector<f64>) -> DVector<f64> {
        y - self.project(y)
    }
}

impl EnergyModel for PerturbedModel {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn label(&self) -> &str {
        &self.label
    }
    fn params(&self) -> BTreeMap<String, f64> {
        let mut p = self.base.params();
        p.insert("delta".to_string(), self.delta);
        p
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        let py = self.project(y);
        self.base.energy(&py) + self.delta * self.bump.energy(&py) + 0.5 * self.restraint(y).norm_squared()
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let py = self.project(y);
        let g = self.base.gradient(&py) + self.bump.gradient(&py) * self.delta;
        self.project(&g) + self.restraint(y)
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let py = self.project(y);
        let mut h = self.base.hessian(&py) + self.bump.hessian(&py) * self.delta;
        if let Some(m) = &self.mask {
            for i in 0..m.len() {
                for j in 0..m.len() {
                    if !(m[i] && m[j]) {
                        h[(i, j)] = 0.0;
                    }
                }
                if !m[i] {
                    h[(i, i)] = 1.0;
                }
            }
        }
        h
    }
    fn minimizer_seeds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        self.base
            .minimizer_seeds()
            .map(|(a, b)| (self.project(&a), self.project(&b)))
    }
}

fn param(params: &BTreeMap<String, f64>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) if v.is_finite() => Ok(*v),
        Some(v) => Err(MepError::Configuration(format!("parameter '{key}' is not finite: {v}"))),
        None => default.ok_or_else(|| MepError::Configuration(format!("missing parameter '{key}'"))),
    }
}

fn count_param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> Result<usize> {
    let v = param(params, key, Some(default))?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(MepError::Configuration(format!(
            "parameter '{key}' must be a non-negative integer"
        )));
    }
    Ok(v as usize)
}

fn reject_unknown(params: &BTreeMap<String, f64>, allowed: &[&str], name: &str) -> Result<()> {
    for k in params.keys() {
        let ok = allowed.contains(&k.as_str()) || (name == "quadratic" && k.starts_with("m_"));
        if !ok {
            return Err(MepError::Configuration(format!(
                "unknown parameter '{k}' for model '{name}'"
            )));
        }
    }
    Ok(())
}

/// Builds one of the named analytic landscapes.
///
/// Families: `dw` (kappa), `mueller_brown`, `quadratic` (dim, scale, m_i_j
/// entries overriding `scale·I`), `gaussian_mixture` (dim, wells, seed, depth,
/// width, confinement) and the perturbation family `sinusoid` (kx, ky, dim).
pub fn make_builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<SharedModel> {
    match name {
        "dw" => {
            reject_unknown(params, &["kappa"], name)?;
            let kappa = param(params, "kappa", Some(10.0))?;
            if !(kappa > 0.0) {
                return Err(MepError::Configuration(format!(
                    "dw needs kappa > 0 so that the saddle is index-1, got {kappa}"
                )));
            }
            Ok(Arc::new(DoubleWell { kappa }))
        }
        "mueller_brown" => {
            reject_unknown(params, &[], name)?;
            Ok(Arc::new(MuellerBrown::new()))
        }
        "quadratic" => {
            reject_unknown(params, &["dim", "scale"], name)?;
            let dim = count_param(params, "dim", 2.0)?;
            if dim == 0 {
                return Err(MepError::Configuration("quadratic needs dim ≥ 1".into()));
            }
            let scale = param(params, "scale", Some(1.0))?;
            let mut m = DMatrix::identity(dim, dim) * scale;
            for (k, v) in params.iter().filter(|(k, _)| k.starts_with("m_")) {
                let idx: Vec<usize> = k[2..].split('_').filter_map(|s| s.parse().ok()).collect();
                if idx.len() != 2 || idx[0] >= dim || idx[1] >= dim {
                    return Err(MepError::Configuration(format!("bad matrix entry key '{k}'")));
                }
                m[(idx[0], idx[1])] = *v;
                m[(idx[1], idx[0])] = *v;
            }
            Ok(Arc::new(Quadratic::new(m)?))
        }
        "gaussian_mixture" => {
            reject_unknown(params, &["dim", "wells", "seed", "depth", "width", "confinement"], name)?;
            Ok(Arc::new(GaussianMixture::new(
                count_param(params, "dim", 2.0)?,
                count_param(params, "wells", 3.0)?,
                count_param(params, "seed", 0.0)? as u64,
                param(params, "depth", Some(1.0))?,
                param(params, "width", Some(0.5))?,
                param(params, "confinement", Some(0.1))?,
            )?))
        }
        "sinusoid" => {
            reject_unknown(params, &["kx", "ky", "dim"], name)?;
            let dim = count_param(params, "dim", 2.0)?;
            if dim < 2 {
                return Err(MepError::Configuration("sinusoid needs dim ≥ 2".into()));
            }
            Ok(Arc::new(Sinusoid {
                kx: param(params, "kx", Some(3.0))?,
                ky: param(params, "ky", Some(2.0))?,
                dim,
            }))
        }
        other => Err(MepError::Configuration(format!("unknown model '{other}'"))),
    }
}

/// Model block of the experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<SharedModel> {
        make_builtin(&self.name, &self.params)
    }
}
