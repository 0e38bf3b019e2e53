use gsc_core::continuum::affine::{from_affine, to_affine};
use gsc_core::continuum::{
    coupling_operator, energy_functional, pde_step, stable_time_step, verify_affine_connection,
};
use gsc_core::lattice::gsc_step;
use gsc_core::model::{de_map, de_step, Side};
use gsc_core::potential::{de_residual, find_fixed_points};
use gsc_core::{
    Chart, ContinuumField, CouplingConfig, LatticeField, ProductModel, RegularBec, SystemModel,
    Vector, VectorState,
};
use proptest::prelude::*;

fn product(eps: f64) -> ProductModel {
    ProductModel::new(vec![
        Box::new(RegularBec::new(3, 6, eps).unwrap()),
        Box::new(RegularBec::new(4, 8, eps).unwrap()),
    ])
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

fn degrees() -> impl Strategy<Value = (u32, u32)> {
    (3u32..6).prop_flat_map(|l| (Just(l), l..12))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivatives_match_finite_differences((l, r) in degrees(), eps in 0.05f64..1.0, x in 0.05f64..0.95) {
        const H: f64 = 1e-5;
        let m = RegularBec::new(l, r, eps).unwrap();
        for side in [Side::G, Side::F] {
            let fd_grad = (side.value(&m, &[x + H]) - side.value(&m, &[x - H])) / (2.0 * H);
            let fd_hess = (side.grad(&m, &[x + H])[0] - side.grad(&m, &[x - H])[0]) / (2.0 * H);
            let fd_third = (side.hess(&m, &[x + H])[(0, 0)] - side.hess(&m, &[x - H])[(0, 0)]) / (2.0 * H);
            prop_assert!(rel(side.grad(&m, &[x])[0], fd_grad) < 1e-5);
            prop_assert!(rel(side.hess(&m, &[x])[(0, 0)], fd_hess) < 1e-5);
            prop_assert!(rel(side.third(&m, &[x]).get(0, 0, 0), fd_third) < 1e-5);
        }
    }

    #[test]
    fn hessians_symmetric_and_g_semidefinite(eps in 0.05f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let m = product(eps);
        for side in [Side::G, Side::F] {
            let h = side.hess(&m, &[a, b]);
            prop_assert!((&h - h.transpose()).amax() < 1e-12);
            prop_assert!(side.third(&m, &[a, b]).symmetry_defect() < 1e-12);
        }
        let g = m.hess_g(&[a, b]);
        prop_assert!(g.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn de_step_is_the_erasure_recursion((l, r) in degrees(), eps in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let m = RegularBec::new(l, r, eps).unwrap();
        let (next, _) = de_step(&m, &VectorState::u(&[u])).unwrap();
        let textbook = eps * (1.0 - (1.0 - u).powi(r as i32 - 1)).powi(l as i32 - 1);
        prop_assert!((next.values[0] - textbook).abs() < 1e-12);
    }

    #[test]
    fn affine_round_trip(eps in 0.05f64..1.0, a in 0.02f64..0.6, b in 0.02f64..0.6) {
        let m = product(eps);
        let u = VectorState::u(&[a, b]);
        let back = from_affine(&m, &to_affine(&m, &u).unwrap(), None).unwrap();
        prop_assert!((back.values - u.values).amax() < 1e-10);
    }

    #[test]
    fn connection_vanishes(eps in 0.05f64..1.0, u in 0.02f64..0.6) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        prop_assert!(verify_affine_connection(&m, &[u]).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn window_reduces_to_uncoupled(k in 1usize..=3, l in 2usize..5, eps in 0.3f64..0.6, seed in any::<u64>()) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        let cfg = CouplingConfig::new(k, l, 0, Vector::zeros(1)).unwrap();
        let data: Vec<f64> = (0..cfg.sites()).map(|i| ((seed.wrapping_add(i as u64) % 997) as f64) / 996.0).collect();
        let field = LatticeField::from_data(cfg, 1, data.clone()).unwrap();
        let next = gsc_step(&m, &field).unwrap();
        for (i, u) in data.iter().enumerate() {
            prop_assert_eq!(next.site(i)[0], de_map(&m, &[*u])[0]);
        }
    }

    #[test]
    fn reflection_symmetry_is_preserved(k in 1usize..=2, l in 2usize..8, w in 0usize..4, eps in 0.3f64..0.6,
                                        profile in proptest::collection::vec(0.0f64..1.0, 8)) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        let cfg = CouplingConfig::new(k, l, w, Vector::zeros(1)).unwrap();
        let value = |pos: &[i64]| pos.iter().map(|p| profile[p.unsigned_abs() as usize]).product::<f64>();
        let data: Vec<f64> = (0..cfg.sites()).map(|i| value(&cfg.position(i))).collect();
        let mut field = LatticeField::from_data(cfg.clone(), 1, data).unwrap();
        for _ in 0..3 {
            field = gsc_step(&m, &field).unwrap();
            for i in 0..cfg.sites() {
                let pos = cfg.position(i);
                for axis in 0..k {
                    let mut mirror = pos.clone();
                    mirror[axis] = -mirror[axis];
                    prop_assert_eq!(field.get(&pos)[0], field.get(&mirror)[0]);
                }
            }
        }
    }

    #[test]
    fn iteration_from_worst_state_is_monotone(k in 1usize..=2, l in 2usize..10, w in 1usize..3, eps in 0.3f64..0.6) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        let cfg = CouplingConfig::new(k, l, w, Vector::zeros(1)).unwrap();
        let mut field = LatticeField::uniform(cfg.clone(), &[1.0]).unwrap();
        for _ in 0..20 {
            let next = gsc_step(&m, &field).unwrap();
            for i in 0..cfg.sites() {
                prop_assert!(next.site(i)[0] <= field.site(i)[0]);
            }
            field = next;
        }
    }

    #[test]
    fn fixed_points_satisfy_potential_equality(eps in 0.3f64..1.0) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        let report = find_fixed_points(&m, 1001).unwrap();
        prop_assert!(!report.points.is_empty());
        for p in &report.points {
            prop_assert!(de_residual(&m, &p.u).amax() < 1e-10);
            prop_assert!((p.potential - p.dual_potential).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn explicit_step_never_raises_energy(eps in 0.4f64..0.55, chart_u in any::<bool>(), k in 1usize..=2,
                                         amp in 0.05f64..0.9, freq in 1.0f64..4.0, m_exp in -3.0f64..-1.0) {
        let m = RegularBec::new(3, 6, eps).unwrap();
        let chart = if chart_u { Chart::UAffine } else { Chart::VAffine };
        let n = if k == 1 { 65 } else { 17 };
        let mc = 10f64.powf(m_exp);
        let hi = if chart_u { 0.9 * eps } else { 0.95 };
        let mut field = ContinuumField::new(&m, k, n, chart, mc, &[0.0], &[0.0]).unwrap()
            .with_interior(&m, |x| {
                let s: f64 = x.iter().map(|xi| (freq * xi).sin().powi(2) * (1.0 - xi * xi)).product();
                vec![(amp * s).min(hi)]
            })
            .unwrap();
        let dt = stable_time_step(&m, chart, k, n, mc).unwrap();
        let mut h = energy_functional(&m, &field).unwrap();
        for _ in 0..20 {
            field = pde_step(&m, &field, dt).unwrap();
            let next = energy_functional(&m, &field).unwrap();
            prop_assert!(next <= h + 1e-9, "energy rose by {}", next - h);
            h = next;
        }
    }
}

/// Second-order accuracy of the coupling operator on a smooth field.
#[test]
fn coupling_operator_converges_at_second_order() {
    let m = RegularBec::new(3, 6, 0.45).unwrap();
    let at_center = |n: usize| {
        let f = ContinuumField::new(&m, 1, n, Chart::VAffine, 1e-2, &[0.0], &[0.0])
            .unwrap()
            .with_interior(&m, |x| {
                vec![0.6 * (1.0 - x[0] * x[0]) * (0.5 + 0.3 * (2.0 * x[0] + 0.4).sin().powi(2))]
            })
            .unwrap();
        let node = (0..f.nodes())
            .find(|&i| (f.coords(i)[0] - 0.25).abs() < 1e-12)
            .unwrap();
        coupling_operator(&m, &f, node).unwrap()[0]
    };
    let (c1, c2, c3) = (at_center(33), at_center(65), at_center(129));
    let ratio = (c1 - c2) / (c2 - c3);
    assert!((ratio - 4.0).abs() < 0.3, "refinement ratio {ratio}");
}

#[test]
fn product_connection_has_block_structure() {
    let m = product(0.45);
    let gamma = verify_affine_connection(&m, &[0.3, 0.1]).unwrap();
    assert!(gamma.max_abs() < 1e-6);
}
