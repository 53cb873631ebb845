use std::f64::consts::{FRAC_2_PI, PI};

use cradle_core::fock::{DensOp, FockSpace};
use cradle_core::observables::{
    linspace, local_maxima, negativity_volume, transfer_fidelity, wigner_grid, WignerGrid,
};
use nalgebra::DVector;
use num_complex::Complex64 as C64;
use proptest::prelude::*;

fn coherent(alpha: C64, nc: usize) -> DVector<C64> {
    let mut v = DVector::zeros(nc);
    let mut c = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
    for n in 0..nc {
        if n > 0 {
            c *= alpha / (n as f64).sqrt();
        }
        v[n] = c;
    }
    v
}

fn pure(v: DVector<C64>) -> DensOp {
    let v = &v / C64::new(v.norm(), 0.0);
    DensOp::new(FockSpace::single_mode(v.len()).unwrap(), &v * v.adjoint()).unwrap()
}

/// `(|a> + |-a>)` rotated by `theta`, normalised within the cutoff.
fn cat(alpha: C64, theta: f64, nc: usize) -> DensOp {
    let a = alpha * C64::from_polar(1.0, theta);
    pure(coherent(a, nc) + coherent(-a, nc))
}

#[test]
fn coherent_state_wigner_is_a_gaussian() {
    let alpha = C64::new(1.2, -0.7);
    let rho = pure(coherent(alpha, 40));
    let axis = linspace(-3.0, 3.0, 13);
    let grid = wigner_grid(&rho, 0, &axis, &axis).unwrap();
    for (ip, p) in axis.iter().enumerate() {
        for (ix, x) in axis.iter().enumerate() {
            let d = C64::new(*x, *p) - alpha;
            let expected = FRAC_2_PI * (-2.0 * d.norm_sqr()).exp();
            assert!((grid.at(ix, ip) - expected).abs() < 1e-10, "({x}, {p})");
        }
    }
}

#[test]
fn fock_state_wigner_matches_laguerre_form() {
    // W_n(beta) = (2/pi) (-1)^n L_n(4|beta|^2) exp(-2|beta|^2)
    let nc = 8;
    let axis = linspace(-2.5, 2.5, 11);
    for n in 0..4 {
        let mut v = DVector::zeros(nc);
        v[n] = C64::new(1.0, 0.0);
        let grid = wigner_grid(&pure(v), 0, &axis, &axis).unwrap();
        for (ip, p) in axis.iter().enumerate() {
            for (ix, x) in axis.iter().enumerate() {
                let r = 4.0 * (x * x + p * p);
                let lag = match n {
                    0 => 1.0,
                    1 => 1.0 - r,
                    2 => 1.0 - 2.0 * r + r * r / 2.0,
                    _ => 1.0 - 3.0 * r + 1.5 * r * r - r * r * r / 6.0,
                };
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                let expected = FRAC_2_PI * sign * lag * (-r / 2.0).exp();
                assert!((grid.at(ix, ip) - expected).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn wigner_is_normalised_and_cat_is_negative() {
    let rho = cat(C64::new(2.0, 0.0), 0.0, 30);
    let axis = linspace(-6.0, 6.0, 121);
    let grid = wigner_grid(&rho, 0, &axis, &axis).unwrap();
    assert!((grid.total() - 1.0).abs() < 1e-6);
    assert!(!grid.boundary_warning);
    assert!(negativity_volume(&grid) > 0.1);
    let g = wigner_grid(&pure(coherent(C64::new(2.0, 0.0), 30)), 0, &axis, &axis).unwrap();
    assert!(negativity_volume(&g) < 1e-8);
}

#[test]
fn wigner_csv_round_trip() {
    let rho = cat(C64::new(1.0, 0.5), 0.0, 16);
    let axis = linspace(-3.0, 3.0, 9);
    let grid = wigner_grid(&rho, 1, &axis, &linspace(-2.0, 2.0, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    grid.write_csv(&path).unwrap();
    let back = WignerGrid::read_csv(&path).unwrap();
    assert_eq!(back.values, grid.values);
    assert_eq!(back.x, grid.x);
    assert_eq!(back.p, grid.p);
    assert_eq!(back.mode, 1);
}

#[test]
fn local_maxima_finds_revivals() {
    let t = linspace(0.0, 20.0, 401);
    let v: Vec<f64> = t
        .iter()
        .map(|t| (-t / 10.0).exp() * (t * PI / 5.0).sin().powi(2))
        .collect();
    let peaks = local_maxima(&v);
    assert_eq!(peaks.len(), 4);
    assert!((t[peaks[0]] - 2.5).abs() < 0.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rotated_cat_has_unit_fidelity_at_its_angle(
        re in 0.5f64..2.5,
        theta in 0.0f64..std::f64::consts::PI,
    ) {
        let alpha = C64::new(re, 0.0);
        let rho = cat(alpha, theta, 32);
        let (f, best) = transfer_fidelity(&rho, alpha, 720).unwrap();
        prop_assert!((f - 1.0).abs() < 1e-4, "{} at {}", f, best);
    }

    #[test]
    fn fidelity_lies_in_unit_interval(
        amps in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 16),
        re in 0.5f64..2.0,
    ) {
        let v = DVector::from_iterator(16, amps.into_iter().map(|(a, b)| C64::new(a, b)));
        prop_assume!(v.norm() > 1e-3);
        let (f, _) = transfer_fidelity(&pure(v), C64::new(re, 0.0), 64).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn vacuum_fidelity_with_cat_is_analytic(re in 0.3f64..2.5) {
        let mut v = DVector::zeros(30);
        v[0] = C64::new(1.0, 0.0);
        let (f, _) = transfer_fidelity(&pure(v), C64::new(re, 0.0), 32).unwrap();
        // |<0|cat>|^2 = 4 e^{-a^2} / (2 (1 + e^{-2 a^2}))
        let a2 = re * re;
        let expected = 2.0 * (-a2).exp() / (1.0 + (-2.0 * a2).exp());
        prop_assert!((f - expected).abs() < 1e-10, "{} vs {}", f, expected);
    }
}
