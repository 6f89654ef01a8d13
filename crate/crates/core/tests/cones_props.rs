use pmlab::cones::{check_c2, check_cstar, omega_factors, ConeParams};
use pmlab::grid::{GridFunction, Mesh};
use pmlab::transfer::solve_density;
use pmlab::MapParams;
use proptest::prelude::*;

fn cp(b1: f64, b2: f64, b1_bar: f64, b2_bar: f64) -> ConeParams {
    ConeParams { a: 1.0, b1, b2, b3: 100.0, b1_bar, b2_bar, b3_admissible: true }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn c2_membership_is_scale_invariant_and_monotone(
        s in 0.05f64..0.6,
        c in 0.01f64..100.0,
        extra in 0.0f64..5.0,
    ) {
        let p = MapParams::new(0.3).unwrap();
        let m = Mesh::standard(&p, 512).unwrap();
        let f = GridFunction::from_fn(&m, s, |x| x.powf(-s));
        // x^{-s}: x|φ′|/φ = s, x²φ″/φ = s(s+1)
        let base = cp(s + 0.01, s * (s + 1.0) + 0.01, s - 0.01, s * (s + 1.0) - 0.01);
        let r = check_c2(&f, &base);
        prop_assert!(r.verdict);
        prop_assert_eq!(check_c2(&f.scale(c), &base).verdict, true);
        let looser = cp(base.b1 + extra, base.b2 + extra, base.b1_bar, base.b2_bar);
        prop_assert!(check_c2(&f, &looser).worst_margin >= 0.0);
        let tighter = cp(s - 0.01, base.b2, base.b1_bar, base.b2_bar);
        prop_assert!(!check_c2(&f, &tighter).verdict);
    }

    #[test]
    fn omega_factors_are_positive_and_one_at_alpha_zero(y in 1e-6f64..0.5, b1 in 1.0f64..3.0) {
        let params = cp(b1, 3.0 * b1 + 21.0, 0.0, 0.0);
        let o = omega_factors(&MapParams::new(0.0).unwrap(), y, &params).unwrap();
        prop_assert!((o.omega1 - 1.0).abs() < 1e-12 && (o.omega2 - 1.0).abs() < 1e-12);
        let o = omega_factors(&MapParams::new(0.35).unwrap(), y, &params).unwrap();
        prop_assert!(o.omega1 > 0.0 && o.omega2 > 0.0 && o.omega3 > 0.0);
    }
}

#[test]
fn cstar_rejects_increasing_functions() {
    let p = MapParams::new(0.2).unwrap();
    let m = Mesh::standard(&p, 1024).unwrap();
    let d = solve_density(&p, &m, 1e-13, 10_000).unwrap();
    let rising = GridFunction::from_fn(&m, 0.0, |x| 1.0 + x);
    assert!(!check_cstar(&rising, &p, &d, 10.0).unwrap().verdict);
    assert!(check_cstar(&d.density, &p, &d, 2.0).unwrap().verdict);
}
