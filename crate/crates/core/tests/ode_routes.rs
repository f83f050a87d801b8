use nalgebra::DMatrix;
use odegrad::ode::{hessian_closed_form, sensitivities_closed_form, FnGradient};
use odegrad::{Gradient, GradientModel, Integrator, SplineBasis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_positive_model(rng: &mut ChaCha8Rng) -> GradientModel {
    let m = rng.random_range(4..=10);
    let basis = SplineBasis::new(0.0, 1.0, m, 4).unwrap();
    let beta = basis.norm_factors().iter().map(|c| rng.random_range(0.3..2.0) / c).collect();
    GradientModel::new(basis, beta).unwrap()
}

fn rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn sensitivity_routes_agree_on_random_positive_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let integ = Integrator::new(1e-3);
    for case in 0..20 {
        let model = random_positive_model(&mut rng);
        assert!(model.is_positive());
        let x_start = rng.random_range(0.1..0.5);
        let traj = integ.solve_trajectory(&model, 0.05, 0.95, x_start).unwrap();
        let tq: Vec<f64> = (0..9).map(|i| 0.05 + 0.1 * (i + 1) as f64).filter(|&t| t <= 0.95).collect();
        let ode = integ.sensitivities(&model, &traj, &tq).unwrap();
        let closed = sensitivities_closed_form(&model, &traj, &tq).unwrap();
        let gap = rel_gap(&ode.jacobian, &closed.jacobian);
        assert!(gap < 1e-6, "case {case}: jacobian gap {gap:e}");
        for (a, b) in ode.initial_sensitivity.iter().zip(&closed.initial_sensitivity) {
            assert!((a - b).abs() < 1e-6 * b.abs(), "case {case}: {a} vs {b}");
        }
        let h_ode = integ.hessian_sensitivities(&model, &traj, &ode, &tq).unwrap().hessian.unwrap();
        let h_closed = hessian_closed_form(&model, &traj, &tq).unwrap();
        let scale = h_closed.iter().map(|h| h.amax()).fold(0.0, f64::max);
        for (a, b) in h_ode.iter().zip(&h_closed) {
            let gap = (a - b).amax() / scale;
            assert!(gap < 1e-5, "case {case}: hessian gap {gap:e}");
        }
    }
}

#[test]
fn rk4_is_fourth_order_on_exponential_growth() {
    let g = FnGradient(|x: f64| [x, 1.0, 0.0]);
    let err = |h: f64| {
        let traj = Integrator::new(h).solve_trajectory(&g, 0.0, 1.0, 1.0).unwrap();
        (traj.x_end() - 1f64.exp()).abs()
    };
    let e: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&h| err(h)).collect();
    assert!(e[0] / e[1] >= 14.0, "{e:?}");
    assert!(e[1] / e[2] >= 14.0, "{e:?}");
}

#[test]
fn exit_through_the_upper_end_continues_with_boundary_slope() {
    let basis = SplineBasis::new(0.0, 1.0, 6, 4).unwrap();
    let beta = basis.norm_factors().iter().enumerate().map(|(k, c)| (1.0 + 0.3 * k as f64) / c).collect();
    let model = GradientModel::new(basis, beta).unwrap();
    let traj = Integrator::new(1e-3).solve_trajectory(&model, 0.0, 2.0, 0.5).unwrap();
    let slope = model.value(1.0);
    let t_exit = traj.t_grid().iter().zip(traj.x_values()).find(|(_, &x)| x >= 1.0).map(|(t, _)| *t).unwrap();
    let x_exit = traj.at(t_exit).unwrap();
    for t in [t_exit + 0.1, 1.5, 2.0] {
        let expected = x_exit + slope * (t - t_exit);
        assert!((traj.at(t).unwrap() - expected).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn positive_gradients_give_increasing_trajectories(
        raw in prop::collection::vec(0.05f64..3.0, 5),
        x_start in -0.5f64..1.5,
    ) {
        let basis = SplineBasis::new(0.0, 1.0, 5, 4).unwrap();
        let beta = raw.iter().zip(basis.norm_factors()).map(|(b, c)| b / c).collect();
        let model = GradientModel::new(basis, beta).unwrap();
        prop_assume!(model.is_positive());
        let traj = Integrator::new(1e-2).solve_trajectory(&model, 0.0, 1.0, x_start).unwrap();
        prop_assert!(traj.x_values().windows(2).all(|w| w[1] > w[0]));
    }
}
