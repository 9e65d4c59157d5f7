use std::collections::BTreeMap;
use std::f64::consts::PI;

use mepstab::diagnostics::*;
use mepstab::geometry::{random_field, uniform_alphas, DiscretePath, FieldRole, NodeField};
use mepstab::landscape::{make_builtin, EnergyModel, SharedModel};
use mepstab::mep::{find_minimizer, solve_string, MepSolution};
use mepstab::stability::{lambda_bar, transport_frames, Linearization};
use mepstab::MepError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn dw(kappa: f64) -> SharedModel {
    make_builtin("dw", &BTreeMap::from([("kappa".to_string(), kappa)])).unwrap()
}

fn dw_solution(kappa: f64, n: usize) -> (SharedModel, MepSolution) {
    let m = dw(kappa);
    let sol = solve_string(m.as_ref(), &v(&[-1.0, 0.0]), &v(&[1.0, 0.0]), n, 1e-8).unwrap();
    (m, sol)
}

/// A model composed with a rotation of coordinates.
#[derive(Debug)]
struct Rotated {
    base: SharedModel,
    rot: DMatrix<f64>,
}

impl EnergyModel for Rotated {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn label(&self) -> &str {
        "rotated"
    }
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
    fn energy(&self, y: &DVector<f64>) -> f64 {
        self.base.energy(&(self.rot.transpose() * y))
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.rot * self.base.gradient(&(self.rot.transpose() * y))
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        &self.rot * self.base.hessian(&(self.rot.transpose() * y)) * self.rot.transpose()
    }
}

#[test]
fn double_well_critical_points() {
    let m = dw(10.0);
    let s = classify_critical(m.as_ref(), &v(&[0.0, 0.0]), 1e-8).unwrap();
    assert_eq!(s.kind, CriticalKind::Index1Saddle);
    assert!((s.spectrum[0] + 4.0).abs() < 1e-12 && (s.spectrum[1] - 10.0).abs() < 1e-12);
    let a = classify_critical(m.as_ref(), &v(&[1.0, 0.0]), 1e-8).unwrap();
    assert_eq!(a.kind, CriticalKind::Minimizer);
    assert!((a.spectrum[0] - 8.0).abs() < 1e-12 && (a.spectrum[1] - 10.0).abs() < 1e-12);
    assert!(matches!(
        classify_critical(m.as_ref(), &v(&[0.5, 0.0]), 1e-8),
        Err(MepError::NotCritical(_))
    ));
}

#[test]
fn well_separated_double_well_passes() {
    let (m, sol) = dw_solution(10.0, 101);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    assert!(r.a_holds && r.b_holds, "{r:?}");
    assert!((r.sigma_a - 8.0).abs() < 1e-8 && (r.sigma_b - 8.0).abs() < 1e-8);
    assert!((r.omega_s - 10.0).abs() < 1e-8 && (r.omega_b - 10.0).abs() < 1e-8);
    assert!((r.sigma_ratio - 1.25).abs() < 1e-8);
    assert_eq!(r.zero_crossings.len(), 1);
}

#[test]
fn degenerate_double_well_is_not_simple() {
    let (m, sol) = dw_solution(8.0, 101);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    assert!(!r.simple_a && !r.b_holds);
    assert!(r.a_holds);
}

#[test]
fn soft_double_well_is_not_lowest() {
    let (m, sol) = dw_solution(4.0, 101);
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    assert!(!r.lowest_a && !r.b_holds);
    assert!((r.sigma_ratio - 0.5).abs() < 1e-8);
}

#[test]
fn frozen_coefficients_respect_the_spectral_bounds() {
    for kappa in [10.0, 16.0] {
        let (m, sol) = dw_solution(kappa, 101);
        let r = check_assumptions(m.as_ref(), &sol).unwrap();
        assert!(r.b_holds);
        let frames = transport_frames(&sol).unwrap();
        let f = NodeField::zeros(sol.path.alphas(), 2, FieldRole::Source);
        let sys = Linearization::new(m.as_ref(), &sol)
            .unwrap()
            .perp_system(&frames, &f)
            .unwrap();
        let sym = |a: &DMatrix<f64>| ((a + a.transpose()) * 0.5).symmetric_eigenvalues().amin();
        assert!(sym(&sys.a_sbar) >= r.omega_s - 1e-6);
        assert!(sym(sys.a.last().unwrap()) >= r.omega_b - 1e-6);
    }
}

#[test]
fn mueller_brown_path_has_an_intermediate_minimum() {
    let m = make_builtin("mueller_brown", &BTreeMap::new()).unwrap();
    let (a, b) = m.minimizer_seeds().unwrap();
    let ya = find_minimizer(m.as_ref(), &a, 1e-10).unwrap();
    let yb = find_minimizer(m.as_ref(), &b, 1e-10).unwrap();
    let sol = solve_string(m.as_ref(), &ya, &yb, 151, 1e-6).unwrap();
    let r = check_assumptions(m.as_ref(), &sol).unwrap();
    assert!(!r.a_holds);
    assert_eq!(r.zero_crossings.len(), 3);
    let p = lambda_bar(m.as_ref(), &sol).unwrap();
    assert!(p.c_lower > 0.0);
    assert!(p.check_sign_structure().is_err());
}

#[test]
fn limits_vanish_on_the_exact_path() {
    let m = dw(10.0);
    let path = DiscretePath::from_fn(uniform_alphas(100), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
    let sol = MepSolution::from_path(m.as_ref(), path.clone(), 1e-8).unwrap();
    let lim = endpoint_limits(m.as_ref(), &sol, &path).unwrap();
    assert!(
        lim.limit0.iter().chain(&lim.limit_sbar).all(|x| x.abs() < 1e-5),
        "{lim:?}"
    );
}

#[test]
fn oscillation_near_the_start_is_detected() {
    let m = dw(10.0);
    let alphas = uniform_alphas(400);
    let exact = DiscretePath::from_fn(alphas.clone(), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
    let sol = MepSolution::from_path(m.as_ref(), exact, 1e-8).unwrap();
    let tilted = DiscretePath::from_fn(alphas, |a| v(&[2.0 * a - 1.0, 0.05 * (8.0 * PI * a).sin()])).unwrap();
    let lim = endpoint_limits(m.as_ref(), &sol, &tilted).unwrap();
    assert!(lim.perp0 >= 0.1, "{}", lim.perp0);
    assert!(lim.disagreement() < 1e-3, "{}", lim.disagreement());
}

#[test]
fn closed_form_and_quotient_limits_agree() {
    let m = dw(10.0);
    let alphas = uniform_alphas(200);
    let exact = DiscretePath::from_fn(alphas.clone(), |a| v(&[2.0 * a - 1.0, 0.0])).unwrap();
    let sol = MepSolution::from_path(m.as_ref(), exact.clone(), 1e-8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let bend = random_field(&alphas, 2, 4, &mut rng);
        let path = exact.displaced(&bend, 0.05).unwrap();
        let lim = endpoint_limits(m.as_ref(), &sol, &path).unwrap();
        assert!(lim.disagreement() < 1e-3, "{}", lim.disagreement());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn classification_is_rotation_invariant(theta in 0.0f64..(2.0 * PI), which in 0usize..3) {
        let base = dw(10.0);
        let (c, s) = (theta.cos(), theta.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let point = [v(&[-1.0, 0.0]), v(&[0.0, 0.0]), v(&[1.0, 0.0])][which].clone();
        let plain = classify_critical(base.as_ref(), &point, 1e-8).unwrap();
        let model = Rotated { base, rot: rot.clone() };
        let turned = classify_critical(&model, &(&rot * &point), 1e-8).unwrap();
        prop_assert_eq!(plain.kind, turned.kind);
        for (a, b) in plain.spectrum.iter().zip(&turned.spectrum) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectrum_is_sorted_and_kind_matches(x in -1.5f64..1.5, kappa in 1.0f64..20.0) {
        let m = dw(kappa);
        let point = v(&[x, 0.0]);
        let g = m.gradient(&point).norm();
        let r = classify_critical(m.as_ref(), &point, g + 1e-12).unwrap();
        prop_assert!(r.spectrum.windows(2).all(|w| w[0] <= w[1]));
        let negative = r.spectrum.iter().filter(|&&l| l < -(g + 1e-12)).count();
        match r.kind {
            CriticalKind::Minimizer => prop_assert_eq!(negative, 0),
            CriticalKind::Index1Saddle => prop_assert_eq!(negative, 1),
            CriticalKind::HigherIndex => prop_assert!(negative > 1),
            CriticalKind::Degenerate => prop_assert!(r.spectrum.iter().any(|l| l.abs() <= g + 1e-12)),
        }
    }
}
