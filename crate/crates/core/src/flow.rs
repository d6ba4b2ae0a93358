//! Velocity fields that can be evaluated at arbitrary points of `Ω̄`.

/// Point evaluation of a solvent velocity field `u(x)`.
pub trait VelocitySampler: Sync {
    fn dim(&self) -> usize;

    /// Write `u(x)` into `out` (`out.len() == x.len() == dim`).
    fn sample_into(&self, x: &[f64], out: &mut [f64]);

    fn sample(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(x, &mut out);
        out
    }

    /// Gradient `(∇u)_{ab} = ∂u_a/∂x_b`, row-major; central differences by
    /// default.
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let h = 1e-6;
        let mut g = vec![0.0; d * d];
        let mut xp = x.to_vec();
        let mut up = vec![0.0; d];
        let mut um = vec![0.0; d];
        for b in 0..d {
            xp[b] = x[b] + h;
            self.sample_into(&xp, &mut up);
            xp[b] = x[b] - h;
            self.sample_into(&xp, &mut um);
            xp[b] = x[b];
            for a in 0..d {
                g[a * d + b] = (up[a] - um[a]) / (2.0 * h);
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroFlow {
    pub dim: usize,
}

impl VelocitySampler for ZeroFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim * self.dim]
    }
}

/// Closed-form divergence-free cellular flow on the box `[-a, a] × [-b, b]`
/// derived from the stream function
/// `ψ = A (1 - (x/a)²)² (1 - (y/b)²)²`, `u = (∂_y ψ, -∂_x ψ)`.
/// It vanishes with its stream function on the boundary.
#[derive(Debug, Clone, Copy)]
pub struct CellularFlow {
    pub amplitude: f64,
    pub half_x: f64,
    pub half_y: f64,
}

impl CellularFlow {
    pub fn new(amplitude: f64, half_x: f64, half_y: f64) -> Self {
        Self { amplitude, half_x, half_y }
    }

    pub fn stream_function(&self, x: f64, y: f64) -> f64 {
        let sx = 1.0 - (x / self.half_x).powi(2);
        let sy = 1.0 - (y / self.half_y).powi(2);
        self.amplitude * sx * sx * sy * sy
    }
}

impl VelocitySampler for CellularFlow {
    fn dim(&self) -> usize {
        2
    }

    fn sample_into(&self, x: &[f64], out: &mut [f64]) {
        let (a, b) = (self.half_x, self.half_y);
        let sx = 1.0 - (x[0] / a).powi(2);
        let sy = 1.0 - (x[1] / b).powi(2);
        let dsx = -2.0 * x[0] / (a * a);
        let dsy = -2.0 * x[1] / (b * b);
        out[0] = self.amplitude * sx * sx * 2.0 * sy * dsy;
        out[1] = -self.amplitude * 2.0 * sx * dsx * sy * sy;
    }
}

/// Any `Fn(&[f64], &mut [f64])` closure of known dimension.
pub struct FnFlow<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> FnFlow<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> VelocitySampler for FnFlow<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cellular_flow_is_divergence_free_and_vanishes_on_walls() {
        let flow = CellularFlow::new(2.0, 1.0, 0.5);
        for &(x, y) in &[(0.1, 0.2), (-0.7, 0.3), (0.5, -0.45)] {
            let g = flow.gradient(&[x, y]);
            assert!((g[0] + g[3]).abs() < 1e-8);
        }
        for &p in &[[1.0, 0.2], [-1.0, -0.1], [0.3, 0.5], [0.0, -0.5]] {
            let u = flow.sample(&p);
            assert!(u[0].abs() < 1e-15 && u[1].abs() < 1e-15);
        }
    }

    #[test]
    fn cellular_flow_matches_stream_function_derivatives() {
        let flow = CellularFlow::new(1.5, 1.0, 1.0);
        let h = 1e-6;
        let (x, y) = (0.31, -0.47);
        let u = flow.sample(&[x, y]);
        let dpsi_dy = (flow.stream_function(x, y + h) - flow.stream_function(x, y - h)) / (2.0 * h);
        let dpsi_dx = (flow.stream_function(x + h, y) - flow.stream_function(x - h, y)) / (2.0 * h);
        assert!((u[0] - dpsi_dy).abs() < 1e-8);
        assert!((u[1] + dpsi_dx).abs() < 1e-8);
    }
}
