//! Gauss–Legendre rules and an adaptive integrator built on them.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Nodes come from Newton iteration on the three-term Legendre recurrence,
/// which is accurate to machine precision for the small `n` used here.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&z, &w)| (mid + half * z, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Adaptive bisection driven by a 10-point Gauss–Legendre rule.
///
/// An interval is accepted once the single-panel estimate and the sum of
/// its two halves agree to `abs_tol + rel_tol * |estimate|`.
pub struct AdaptiveQuadrature {
    rule: GaussLegendre,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for AdaptiveQuadrature {
    fn default() -> Self {
        Self {
            rule: GaussLegendre::new(10),
            abs_tol: 1e-14,
            rel_tol: 1e-12,
            max_depth: 30,
        }
    }
}

impl AdaptiveQuadrature {
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        if a == b {
            return 0.0;
        }
        let whole = self.rule.integrate(a, b, &mut f);
        self.refine(a, b, whole, &mut f, 0)
    }

    fn refine<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, whole: f64, f: &mut F, depth: u32) -> f64 {
        let mid = 0.5 * (a + b);
        let left = self.rule.integrate(a, mid, &mut *f);
        let right = self.rule.integrate(mid, b, &mut *f);
        let both = left + right;
        if depth >= self.max_depth || (both - whole).abs() <= self.abs_tol + self.rel_tol * both.abs() {
            return both;
        }
        self.refine(a, mid, left, f, depth + 1) + self.refine(mid, b, right, f, depth + 1)
    }

    /// Integrates over `[a, b]` splitting at every breakpoint strictly inside it.
    pub fn integrate_piecewise<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, breaks: &[f64], mut f: F) -> f64 {
        let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
        let mut cuts: Vec<f64> = Vec::with_capacity(breaks.len() + 2);
        cuts.push(lo);
        cuts.extend(breaks.iter().copied().filter(|&x| x > lo && x < hi));
        cuts.push(hi);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        sign * cuts.windows(2).map(|w| self.integrate(w[0], w[1], &mut f)).sum::<f64>()
    }

    /// Vector-valued variant: `f(x, out)` writes `dim` components and the
    /// result is accumulated into `acc`. Refinement stops when every
    /// component meets the tolerance.
    pub fn integrate_vec<F: FnMut(f64, &mut [f64])>(&self, a: f64, b: f64, dim: usize, acc: &mut [f64], mut f: F) {
        if a == b {
            return;
        }
        let mut scratch = vec![0.0; dim];
        let whole = self.rule_vec(a, b, dim, &mut f, &mut scratch);
        self.refine_vec(a, b, &whole, dim, &mut f, &mut scratch, acc, 0);
    }

    fn rule_vec<F: FnMut(f64, &mut [f64])>(&self, a: f64, b: f64, dim: usize, f: &mut F, scratch: &mut [f64]) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (x, w) in self.rule.mapped(a, b) {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            f(x, scratch);
            for (o, v) in out.iter_mut().zip(scratch.iter()) {
                *o += w * v;
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn refine_vec<F: FnMut(f64, &mut [f64])>(
        &self,
        a: f64,
        b: f64,
        whole: &[f64],
        dim: usize,
        f: &mut F,
        scratch: &mut [f64],
        acc: &mut [f64],
        depth: u32,
    ) {
        let mid = 0.5 * (a + b);
        let left = self.rule_vec(a, mid, dim, f, scratch);
        let right = self.rule_vec(mid, b, dim, f, scratch);
        let ok = depth >= self.max_depth
            || (0..dim).all(|i| {
                let both = left[i] + right[i];
                (both - whole[i]).abs() <= self.abs_tol + self.rel_tol * both.abs()
            });
        if ok {
            for i in 0..dim {
                acc[i] += left[i] + right[i];
            }
            return;
        }
        self.refine_vec(a, mid, &left, dim, f, scratch, acc, depth + 1);
        self.refine_vec(mid, b, &right, dim, f, scratch, acc, depth + 1);
    }
}
