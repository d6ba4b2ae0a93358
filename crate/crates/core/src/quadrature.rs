//! Gauss–Legendre rules and their tensor products.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut z = ((i as f64 + 0.75) / (n as f64 + 0.5) * PI).cos();
        let mut dp = 1.0;
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
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (x.iter().map(|t| mid + half * t).collect(), w.iter().map(|t| half * t).collect())
}

/// Tensor-product rule over a box; each point is visited with its weight.
#[derive(Debug, Clone)]
pub struct TensorRule {
    axes: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TensorRule {
    pub fn new(lo: &[f64], hi: &[f64], n: usize) -> Self {
        Self { axes: lo.iter().zip(hi).map(|(&a, &b)| gauss_legendre_on(n, a, b)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.0.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Call `f(point, weight)` for every node.
    pub fn for_each(&self, mut f: impl FnMut(&[f64], f64)) {
        let d = self.axes.len();
        let mut idx = vec![0usize; d];
        let mut p: Vec<f64> = self.axes.iter().map(|a| a.0[0]).collect();
        for _ in 0..self.len() {
            let w: f64 = (0..d).map(|k| self.axes[k].1[idx[k]]).product();
            f(&p, w);
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < self.axes[k].0.len() {
                    p[k] = self.axes[k].0[idx[k]];
                    break;
                }
                idx[k] = 0;
                p[k] = self.axes[k].0[0];
            }
        }
    }

    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut s = 0.0;
        self.for_each(|p, w| s += w * f(p));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for k in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn gaussian_integral() {
        let (x, w) = gauss_legendre_on(60, -8.0, 8.0);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (-x * x / 2.0).exp()).sum();
        assert!((s - (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tensor_rule_volume_and_moment() {
        let r = TensorRule::new(&[0.0, -1.0], &[2.0, 1.0], 4);
        assert_eq!(r.len(), 16);
        assert!((r.integrate(|_| 1.0) - 4.0).abs() < 1e-14);
        assert!((r.integrate(|p| p[0] * p[1] * p[1]) - 4.0 / 3.0).abs() < 1e-14);
    }
}
