use odegrad::smooth::{cv_bandwidth, log_grid, LocalPoly};
use odegrad::{Dataset, Kernel, SampleSplit};
use proptest::prelude::*;

fn design(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

fn kernel_strategy() -> impl Strategy<Value = Kernel> {
    prop_oneof![Just(Kernel::Gaussian), Just(Kernel::Epanechnikov)]
}

proptest! {
    #[test]
    fn local_polynomials_reproduce_polynomials(
        coef in prop::collection::vec(-2.0f64..2.0, 4),
        degree in 1usize..=3,
        h in 0.08f64..0.4,
        t0 in 0.0f64..1.0,
        kernel in kernel_strategy(),
    ) {
        let times = design(60);
        let poly = |t: f64| coef.iter().take(degree + 1).enumerate().map(|(k, c)| c * t.powi(k as i32)).sum::<f64>();
        let dpoly = |t: f64| coef.iter().take(degree + 1).enumerate().skip(1).map(|(k, c)| k as f64 * c * t.powi(k as i32 - 1)).sum::<f64>();
        let data = Dataset::new(times.clone(), times.iter().map(|&t| poly(t)).collect()).unwrap();
        let est = LocalPoly::new(degree, h, kernel).unwrap().fit_at(&data, t0).unwrap();
        prop_assert!((est.level - poly(t0)).abs() < 1e-10);
        prop_assert!((est.slope - dpoly(t0)).abs() < 1e-8);
    }

    #[test]
    fn fits_are_linear_in_the_values(
        ys in prop::collection::vec(-1.0f64..1.0, 40),
        a in -3.0f64..3.0,
        t0 in 0.0f64..1.0,
    ) {
        let times = design(40);
        let fit = LocalPoly::new(2, 0.15, Kernel::Gaussian).unwrap();
        let base = fit.fit_at(&Dataset::new(times.clone(), ys.clone()).unwrap(), t0).unwrap();
        let scaled = fit.fit_at(&Dataset::new(times, ys.iter().map(|y| a * y).collect()).unwrap(), t0).unwrap();
        prop_assert!((scaled.level - a * base.level).abs() < 1e-10);
        prop_assert!((scaled.slope - a * base.slope).abs() < 1e-8);
    }

    #[test]
    fn split_halves_are_disjoint_and_cover(n in 0usize..500) {
        let split = SampleSplit::even_odd(n);
        let mut all: Vec<usize> = split.endpoint_indices.iter().chain(&split.fit_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(split.endpoint_indices.iter().all(|i| i % 2 == 0));
    }
}

#[test]
fn cv_prefers_wide_bandwidths_for_linear_data() {
    let times = design(50);
    let data = Dataset::new(times.clone(), times.iter().map(|t| 0.3 + 2.0 * t).collect()).unwrap();
    let grid = log_grid(0.02, 0.5, 20);
    assert_eq!(cv_bandwidth(&data, 1, Kernel::Gaussian, &grid).unwrap(), grid[19]);
}
