//! Discrete curves on [0, 1]: tangents, arc length, the arc-length defect
//! functional, equal-arclength reparameterization and the two field norms.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{MepError, Result};
use crate::spline::{gauss_on, CubicSpline};

/// Sampled curve `α ↦ φ(α)` with `φ(0) = y_A`, `φ(1) = y_B`.
///
/// Parameters are strictly increasing from 0 to 1. The default grids are
/// uniform; graded grids are accepted so the same machinery can resolve
/// endpoint singularities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    alphas: Vec<f64>,
    nodes: Vec<DVector<f64>>,
}

/// `n + 1` uniform parameters `i / n`.
pub fn uniform_alphas(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Uniform grid on [0, 1] with `n` cells whose first cell is replaced by a
/// geometric sequence reaching down to `alpha_min` with `per_decade` points
/// per factor of ten.
pub fn graded_alphas(n: usize, alpha_min: f64, per_decade: usize) -> Vec<f64> {
    let first = 1.0 / n as f64;
    let decades = (first / alpha_min).log10();
    let count = (decades * per_decade as f64).ceil() as usize;
    let ratio = 10f64.powf(-1.0 / per_decade as f64);
    let mut out = vec![0.0];
    let mut geo: Vec<f64> = (1..=count).map(|k| first * ratio.powi(k as i32)).collect();
    geo.reverse();
    out.extend(geo);
    out.extend(uniform_alphas(n).into_iter().skip(1));
    out
}

fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.len() < 3 {
        return Err(MepError::Input("a path needs at least three nodes".into()));
    }
    if alphas[0] != 0.0 || *alphas.last().unwrap() != 1.0 {
        return Err(MepError::Input("path parameters must start at 0 and end at 1".into()));
    }
    if !alphas.windows(2).all(|w| w[1] > w[0]) {
        return Err(MepError::Input("path parameters must be strictly increasing".into()));
    }
    Ok(())
}

impl DiscretePath {
    pub fn new(alphas: Vec<f64>, nodes: Vec<DVector<f64>>) -> Result<Self> {
        validate_alphas(&alphas)?;
        if nodes.len() != alphas.len() {
            return Err(MepError::Input(format!(
                "{} nodes for {} parameters",
                nodes.len(),
                alphas.len()
            )));
        }
        let dim = nodes[0].len();
        if dim == 0 || nodes.iter().any(|y| y.len() != dim) {
            return Err(MepError::Input("path nodes must share one positive dimension".into()));
        }
        if nodes.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
            return Err(MepError::Input("path nodes must be finite".into()));
        }
        for (i, w) in nodes.windows(2).enumerate() {
            if (&w[1] - &w[0]).norm() == 0.0 {
                return Err(MepError::DegeneratePath(format!("nodes {i} and {} coincide", i + 1)));
            }
        }
        Ok(Self { alphas, nodes })
    }

    /// Nodes on the uniform grid `i / n`.
    pub fn uniform(nodes: Vec<DVector<f64>>) -> Result<Self> {
        let n = nodes.len().saturating_sub(1).max(1);
        Self::new(uniform_alphas(n), nodes)
    }

    /// The straight segment from `ya` to `yb` with `n + 1` nodes.
    pub fn straight(ya: &DVector<f64>, yb: &DVector<f64>, n: usize) -> Result<Self> {
        if ya.len() != yb.len() {
            return Err(MepError::Input("endpoint dimensions differ".into()));
        }
        if (ya - yb).norm() == 0.0 {
            return Err(MepError::Input("endpoints coincide".into()));
        }
        let alphas = uniform_alphas(n);
        let nodes = alphas.iter().map(|&a| ya * (1.0 - a) + yb * a).collect();
        Self::new(alphas, nodes)
    }

    pub fn from_fn(alphas: Vec<f64>, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        let nodes = alphas.iter().map(|&a| f(a)).collect();
        Self::new(alphas, nodes)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.nodes[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        self.nodes.last().unwrap()
    }

    pub fn is_uniform(&self) -> bool {
        let n = (self.len() - 1) as f64;
        self.alphas
            .iter()
            .enumerate()
            .all(|(i, a)| (a - i as f64 / n).abs() <= 1e-14)
    }

    pub fn spline(&self) -> CubicSpline {
        CubicSpline::from_points(&self.alphas, &self.nodes)
    }

    /// Same parameters, new node values.
    pub fn with_nodes(&self, nodes: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(self.alphas.clone(), nodes)
    }

    /// Adds a field of variations node by node.
    pub fn displaced(&self, field: &NodeField, scale: f64) -> Result<Self> {
        if field.len() != self.len() || field.dim() != self.dim() {
            return Err(MepError::Input("variation does not match the path".into()));
        }
        let nodes = self
            .nodes
            .iter()
            .zip(&field.values)
            .map(|(y, v)| y + v * scale)
            .collect();
        self.with_nodes(nodes)
    }

    pub fn eval(&self, alpha: f64) -> DVector<f64> {
        self.spline().eval(alpha)
    }
}

/// The spline through a path together with its cumulative arc length.
#[derive(Debug, Clone)]
pub struct Curve {
    pub spline: CubicSpline,
    /// Arc length from 0 to each knot.
    pub cumulative: Vec<f64>,
    pub length: f64,
}

impl Curve {
    pub fn new(path: &DiscretePath) -> Self {
        Self::from_spline(path.spline())
    }

    pub fn from_spline(spline: CubicSpline) -> Self {
        let knots = spline.knots().to_vec();
        let mut cumulative = vec![0.0; knots.len()];
        for i in 1..knots.len() {
            cumulative[i] = cumulative[i - 1] + segment_length(&spline, knots[i - 1], knots[i]);
        }
        let length = *cumulative.last().unwrap();
        Self {
            spline,
            cumulative,
            length,
        }
    }

    /// Arc length from 0 to `x`.
    pub fn arc_length_to(&self, x: f64) -> f64 {
        let knots = self.spline.knots();
        let cell = knots
            .partition_point(|&k| k <= x)
            .saturating_sub(1)
            .min(knots.len() - 2);
        self.cumulative[cell] + segment_length(&self.spline, knots[cell], x)
    }

    /// Γ at an arbitrary parameter.
    pub fn gamma_at(&self, x: f64) -> f64 {
        self.arc_length_to(x) - x * self.length
    }

    /// Parameter at which the arc length from 0 equals `s`.
    pub fn parameter_at_length(&self, s: f64) -> f64 {
        let knots = self.spline.knots();
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.length {
            return 1.0;
        }
        let cell = self
            .cumulative
            .partition_point(|&c| c <= s)
            .saturating_sub(1)
            .min(knots.len() - 2);
        let (mut lo, mut hi) = (knots[cell], knots[cell + 1]);
        let target = s - self.cumulative[cell];
        let total = self.cumulative[cell + 1] - self.cumulative[cell];
        let mut x = lo + (hi - lo) * (target / total).clamp(0.0, 1.0);
        for _ in 0..60 {
            let g = segment_length(&self.spline, knots[cell], x) - target;
            if g > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let speed = self.spline.deriv(x).norm();
            let mut next = x - g / speed;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-16 {
                x = next;
                break;
            }
            x = next;
        }
        x
    }
}

/// Gauss–Legendre arc length of the spline on `[a, b]`.
pub(crate) fn segment_length(spline: &CubicSpline, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    gauss_on(a, b).iter().map(|&(x, w)| w * spline.deriv(x).norm()).sum()
}

/// Per-node velocity, speed, unit tangent and its derivative.
#[derive(Debug, Clone)]
pub struct TangentData {
    pub velocity: Vec<DVector<f64>>,
    pub speed: Vec<f64>,
    pub unit: Vec<DVector<f64>>,
    pub unit_derivative: Vec<DVector<f64>>,
    pub length: f64,
}

pub fn tangent_field(path: &DiscretePath) -> Result<TangentData> {
    let curve = Curve::new(path);
    tangent_data(&curve)
}

pub(crate) fn tangent_data(curve: &Curve) -> Result<TangentData> {
    let velocity = curve.spline.knot_derivs();
    let accel = curve.spline.knot_second_derivs();
    let speed: Vec<f64> = velocity.iter().map(|v| v.norm()).collect();
    let scale = speed.iter().cloned().fold(0.0, f64::max);
    if let Some(i) = speed.iter().position(|&s| !(s > 1e-14 * scale.max(1e-300))) {
        return Err(MepError::DegeneratePath(format!(
            "zero speed at node {i} (alpha = {})",
            curve.spline.knots()[i]
        )));
    }
    let unit: Vec<DVector<f64>> = velocity.iter().zip(&speed).map(|(v, s)| v / *s).collect();
    let unit_derivative = unit
        .iter()
        .zip(&accel)
        .zip(&speed)
        .map(|((t, a), s)| (a - t * t.dot(a)) / *s)
        .collect();
    Ok(TangentData {
        velocity,
        speed,
        unit,
        unit_derivative,
        length: curve.length,
    })
}

/// Γ(φ)(α_i): arc length to α_i minus α_i times the total length.
///
/// Only arc length enters, so a vanishing speed at isolated nodes is allowed.
pub fn gamma(path: &DiscretePath) -> Result<NodeField> {
    let curve = Curve::new(path);
    Ok(gamma_nodes(&curve))
}

pub(crate) fn gamma_nodes(curve: &Curve) -> NodeField {
    let alphas = curve.spline.knots().to_vec();
    let last = alphas.len() - 1;
    let values: Vec<f64> = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i == 0 || i == last {
                0.0
            } else {
                curve.cumulative[i] - a * curve.length
            }
        })
        .collect();
    NodeField::scalar(alphas, &values)
}

/// Moves the nodes along the interpolating spline so that node `i` sits at
/// arc length `α_i · L`.
pub fn reparameterize(path: &DiscretePath) -> Result<DiscretePath> {
    let curve = Curve::new(path);
    let last = path.len() - 1;
    let nodes = path
        .alphas()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i == 0 || i == last {
                path.nodes()[i].clone()
            } else {
                curve.spline.eval(curve.parameter_at_length(a * curve.length))
            }
        })
        .collect();
    path.with_nodes(nodes)
}

/// Equal-chord redistribution along the polygon through the nodes.
///
/// First-order accurate but free of interpolation overshoot; used while a
/// path is still far from smooth.
pub fn reparameterize_linear(path: &DiscretePath) -> Result<DiscretePath> {
    let nodes = path.nodes();
    let mut cumulative = vec![0.0; nodes.len()];
    for i in 1..nodes.len() {
        cumulative[i] = cumulative[i - 1] + (&nodes[i] - &nodes[i - 1]).norm();
    }
    let length = *cumulative.last().unwrap();
    let last = nodes.len() - 1;
    let out = path
        .alphas()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i == 0 || i == last {
                return nodes[i].clone();
            }
            let s = a * length;
            let k = cumulative.partition_point(|&c| c <= s).saturating_sub(1).min(last - 1);
            let w = (s - cumulative[k]) / (cumulative[k + 1] - cumulative[k]);
            &nodes[k] * (1.0 - w) + &nodes[k + 1] * w
        })
        .collect();
    path.with_nodes(out)
}

/// What a node field represents; carried for reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    Variation,
    Residual,
    Source,
    Scalar,
}

/// One value per path node, optionally with exact derivative samples.
///
/// When derivative samples are present they replace spline differentiation
/// at the nodes, in the norms and in the nodal terms of the linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    pub alphas: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub derivatives: Option<Vec<DVector<f64>>>,
    pub role: FieldRole,
}

impl NodeField {
    pub fn new(alphas: Vec<f64>, values: Vec<DVector<f64>>, role: FieldRole) -> Result<Self> {
        if alphas.len() != values.len() {
            return Err(MepError::Input(format!(
                "{} values for {} nodes",
                values.len(),
                alphas.len()
            )));
        }
        validate_alphas(&alphas)?;
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(MepError::Input("field values must share one dimension".into()));
        }
        Ok(Self {
            alphas,
            values,
            derivatives: None,
            role,
        })
    }

    pub fn scalar(alphas: Vec<f64>, values: &[f64]) -> Self {
        let values = values.iter().map(|&v| DVector::from_element(1, v)).collect();
        Self {
            alphas,
            values,
            derivatives: None,
            role: FieldRole::Scalar,
        }
    }

    pub fn zeros(alphas: &[f64], dim: usize, role: FieldRole) -> Self {
        Self {
            alphas: alphas.to_vec(),
            values: vec![DVector::zeros(dim); alphas.len()],
            derivatives: None,
            role,
        }
    }

    pub fn from_fn(alphas: &[f64], role: FieldRole, f: impl Fn(f64) -> DVector<f64>) -> Self {
        Self {
            alphas: alphas.to_vec(),
            values: alphas.iter().map(|&a| f(a)).collect(),
            derivatives: None,
            role,
        }
    }

    pub fn with_derivatives(mut self, derivatives: Vec<DVector<f64>>) -> Result<Self> {
        if derivatives.len() != self.values.len() || derivatives.iter().any(|d| d.len() != self.dim()) {
            return Err(MepError::Input("derivative samples do not match the field".into()));
        }
        self.derivatives = Some(derivatives);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn scalar_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0]).collect()
    }

    pub fn spline(&self) -> CubicSpline {
        CubicSpline::from_points(&self.alphas, &self.values)
    }

    /// Derivative at every node: exact samples if present, else the spline's.
    pub fn node_derivatives(&self) -> Vec<DVector<f64>> {
        match &self.derivatives {
            Some(d) => d.clone(),
            None => self.spline().knot_derivs(),
        }
    }

    pub fn value_at(&self, x: f64) -> DVector<f64> {
        if let Ok(i) = self.alphas.binary_search_by(|a| a.total_cmp(&x)) {
            return self.values[i].clone();
        }
        self.spline().eval(x)
    }

    pub fn derivative_at(&self, x: f64) -> DVector<f64> {
        match &self.derivatives {
            Some(d) => {
                if let Ok(i) = self.alphas.binary_search_by(|a| a.total_cmp(&x)) {
                    return d[i].clone();
                }
                CubicSpline::from_points(&self.alphas, d).eval(x)
            }
            None => self.spline().deriv(x),
        }
    }

    /// `a·self + b·other`, dropping derivative samples unless both carry them.
    pub fn combine(&self, a: f64, other: &NodeField, b: f64) -> Result<NodeField> {
        if self.alphas != other.alphas || self.dim() != other.dim() {
            return Err(MepError::Input("fields live on different grids".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| x * a + y * b)
            .collect();
        let derivatives = match (&self.derivatives, &other.derivatives) {
            (Some(p), Some(q)) => Some(p.iter().zip(q).map(|(x, y)| x * a + y * b).collect()),
            _ => None,
        };
        Ok(NodeField {
            alphas: self.alphas.clone(),
            values,
            derivatives,
            role: self.role,
        })
    }

    pub fn scaled(&self, c: f64) -> NodeField {
        NodeField {
            alphas: self.alphas.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
            derivatives: self.derivatives.as_ref().map(|d| d.iter().map(|v| v * c).collect()),
            role: self.role,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Node-wise difference of two paths on the same grid.
    pub fn path_difference(a: &DiscretePath, b: &DiscretePath) -> Result<NodeField> {
        if a.alphas() != b.alphas() || a.dim() != b.dim() {
            return Err(MepError::Input("paths live on different grids".into()));
        }
        let values = a.nodes().iter().zip(b.nodes()).map(|(x, y)| x - y).collect();
        NodeField::new(a.alphas().to_vec(), values, FieldRole::Variation)
    }
}

/// C¹ norm: largest value plus largest derivative over the nodes.
pub fn x_norm(field: &NodeField) -> f64 {
    let value = field.sup_norm();
    let slope = field.node_derivatives().iter().map(|d| d.norm()).fold(0.0, f64::max);
    value + slope
}

/// Weighted norm with singular weights at 0, `sbar` and 1.
///
/// The first term is the largest `|f(α)| / |α(α − 1)|`, the second the largest
/// difference quotient against `f(sbar)`. Where a quotient is singular the
/// spline derivative stands in for its limit.
pub fn y_norm(field: &NodeField, sbar: f64) -> Result<f64> {
    if !(sbar > 0.0 && sbar < 1.0) {
        return Err(MepError::Input(format!("sbar = {sbar} is not interior")));
    }
    let scale = field.sup_norm().max(1.0);
    let last = field.len() - 1;
    let (f0, f1) = (field.values[0].norm(), field.values[last].norm());
    if f0 > 1e-10 * scale || f1 > 1e-10 * scale {
        return Err(MepError::NotInY(format!(
            "endpoint values {f0:.3e} and {f1:.3e} are not zero"
        )));
    }
    let derivs = field.node_derivatives();
    let mut weighted = derivs[0].norm().max(derivs[last].norm());
    for i in 1..last {
        let a = field.alphas[i];
        weighted = weighted.max(field.values[i].norm() / (a * (1.0 - a)));
    }
    let at_sbar = field.value_at(sbar);
    let nearest = field
        .alphas
        .iter()
        .enumerate()
        .min_by(|x, y| (x.1 - sbar).abs().total_cmp(&(y.1 - sbar).abs()))
        .map(|(i, _)| i)
        .unwrap();
    let mut quotient = field.derivative_at(sbar).norm();
    for (i, (a, v)) in field.alphas.iter().zip(&field.values).enumerate() {
        if i != nearest {
            quotient = quotient.max((v - &at_sbar).norm() / (a - sbar).abs());
        }
    }
    Ok(weighted + quotient)
}

/// Smooth random field vanishing at both ends, defined by a spline through
/// `controls` random values at fixed interior knots; independent of the grid
/// it is sampled on.
pub fn random_field<R: Rng>(alphas: &[f64], dim: usize, controls: usize, rng: &mut R) -> NodeField {
    let knots: Vec<f64> = (0..controls + 2).map(|k| k as f64 / (controls + 1) as f64).collect();
    let points: Vec<DVector<f64>> = (0..controls + 2)
        .map(|k| {
            if k == 0 || k == controls + 1 {
                DVector::zeros(dim)
            } else {
                DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0))
            }
        })
        .collect();
    let spline = CubicSpline::from_points(&knots, &points);
    let last = alphas.len() - 1;
    let values = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i == 0 || i == last {
                DVector::zeros(dim)
            } else {
                spline.eval(a)
            }
        })
        .collect();
    NodeField {
        alphas: alphas.to_vec(),
        values,
        derivatives: None,
        role: FieldRole::Variation,
    }
}
