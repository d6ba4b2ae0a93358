//! Hookean springs and the Kramers polymeric stress.

use std::io::Write;

use crate::chain_dynamics::ChainState;
use crate::error::{Error, Result};
use crate::grid::TensorGrid;
use crate::quadrature::TensorRule;

pub fn hookean_force(q: &[f64], h: f64) -> Vec<f64> {
    q.iter().map(|x| h * x).collect()
}

/// A symmetric `d × d` tensor per cell of a fluid grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StressField {
    pub grid: TensorGrid,
    pub time: f64,
    /// Row-major `d × d` block per cell.
    pub values: Vec<f64>,
    /// Denominator behind each cell (chain count or `∫ψ dq`); zero marks a
    /// cell set to 0 by the 0/0 convention.
    pub weights: Vec<f64>,
}

impl StressField {
    pub fn zeros(grid: &TensorGrid, time: f64) -> Self {
        let d = grid.ndim();
        Self { grid: grid.clone(), time, values: vec![0.0; grid.len() * d * d], weights: vec![0.0; grid.len()] }
    }

    pub fn dim(&self) -> usize {
        self.grid.ndim()
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let dd = self.dim() * self.dim();
        &self.values[c * dd..(c + 1) * dd]
    }

    pub fn frobenius(&self, c: usize) -> f64 {
        self.cell(c).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_frobenius(&self) -> f64 {
        (0..self.grid.len()).map(|c| self.frobenius(c)).fold(0.0, f64::max)
    }

    /// Symmetry (to `tol` relative to the cell norm) and positive
    /// semidefiniteness of every cell.
    pub fn check_symmetric_psd(&self, tol: f64) -> Result<()> {
        let d = self.dim();
        for c in 0..self.grid.len() {
            let k = self.cell(c);
            let scale = self.frobenius(c).max(f64::MIN_POSITIVE);
            for a in 0..d {
                for b in 0..a {
                    if (k[a * d + b] - k[b * d + a]).abs() > tol * scale {
                        return Err(Error::InvalidParameter { name: "stress", reason: format!("cell {c} is not symmetric") });
                    }
                }
            }
            let m = nalgebra::DMatrix::from_row_slice(d, d, k);
            let min = m.symmetric_eigenvalues().min();
            if min < -tol * scale {
                return Err(Error::InvalidParameter { name: "stress", reason: format!("cell {c} has eigenvalue {min:e} < 0") });
            }
        }
        Ok(())
    }

    /// `max_x |𝕂(x)|_F ≤ bound`.
    pub fn check_bound(&self, bound: f64) -> Result<()> {
        let m = self.max_frobenius();
        if m <= bound {
            Ok(())
        } else {
            Err(Error::InvalidParameter { name: "stress", reason: format!("Frobenius norm {m:e} exceeds the bound {bound:e}") })
        }
    }

    /// Merge `factor^d` blocks of child cells into one parent cell using the
    /// stored weights.
    pub fn coarsen(&self, factor: usize) -> Result<StressField> {
        let d = self.dim();
        let shape = self.grid.shape();
        if factor == 0 || shape.iter().any(|n| n % factor != 0) {
            return Err(Error::GridMismatch(format!("cannot coarsen {shape:?} by {factor}")));
        }
        let lo = self.grid.lower().to_vec();
        let hi: Vec<f64> = (0..d).map(|k| self.grid.upper(k)).collect();
        let n: Vec<usize> = shape.iter().map(|n| n / factor).collect();
        let parent = TensorGrid::new(&lo, &hi, &n)?;
        let dd = d * d;
        let mut sums = vec![0.0; parent.len() * dd];
        let mut weights = vec![0.0; parent.len()];
        let mut pidx = vec![0usize; d];
        for (c, idx) in self.grid.indices().enumerate() {
            for k in 0..d {
                pidx[k] = idx[k] / factor;
            }
            let p = parent.flat(&pidx);
            let w = self.weights[c];
            weights[p] += w;
            for e in 0..dd {
                sums[p * dd + e] += w * self.values[c * dd + e];
            }
        }
        let values =
            sums.chunks(dd).zip(&weights).flat_map(|(s, &w)| s.iter().map(move |x| if w > 0.0 { x / w } else { 0.0 })).collect();
        Ok(StressField { grid: parent, time: self.time, values, weights })
    }

    /// Rows `time, i[, j[, k]], K_11, K_12, ...`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        let d = self.dim();
        if header {
            let mut cols = vec!["time".to_string()];
            cols.extend(["i", "j", "k"].iter().take(d).map(|s| s.to_string()));
            for a in 0..d {
                for b in 0..d {
                    cols.push(format!("K{}{}", a + 1, b + 1));
                }
            }
            writeln!(w, "{}", cols.join(","))?;
        }
        for (c, idx) in self.grid.indices().enumerate() {
            write!(w, "{:e}", self.time)?;
            for i in idx {
                write!(w, ",{i}")?;
            }
            for x in self.cell(c) {
                write!(w, ",{x:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `J · H · sup_{q∈D} |q|²`.
pub fn stress_bound(springs: usize, h: f64, sup_norm_sq: f64) -> f64 {
    springs as f64 * h * sup_norm_sq
}

fn accumulate_chain(r: &[f64], d: usize, h: f64, out: &mut [f64]) {
    let beads = r.len() / d;
    for s in 0..beads - 1 {
        for a in 0..d {
            let qa = r[(s + 1) * d + a] - r[s * d + a];
            for b in 0..d {
                let qb = r[(s + 1) * d + b] - r[s * d + b];
                out[a * d + b] += h * qa * qb;
            }
        }
    }
}

/// Per-chain `Σ_j F(q_j) ⊗ q_j`, row-major.
pub fn chain_stress(r: &[f64], d: usize, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    accumulate_chain(r, d, h, &mut out);
    out
}

/// Conditional expectation of `Σ_j H q_j ⊗ q_j` given the centre of mass,
/// realised by binning chains into the cells of `grid`. Empty cells hold 0.
pub fn kramers_from_ensemble(chains: &[ChainState], grid: &TensorGrid, h: f64, time: f64) -> StressField {
    let d = grid.ndim();
    let dd = d * d;
    let mut field = StressField::zeros(grid, time);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    for c in chains {
        let beads = c.r.len() / d;
        x.fill(0.0);
        for j in 0..beads {
            for k in 0..d {
                x[k] += c.r[j * d + k];
            }
        }
        for k in 0..d {
            idx[k] = grid.locate(k, x[k] / beads as f64);
        }
        let b = grid.flat(&idx);
        field.weights[b] += 1.0;
        accumulate_chain(&c.r, d, h, &mut field.values[b * dd..(b + 1) * dd]);
    }
    for b in 0..grid.len() {
        let n = field.weights[b];
        if n > 0.0 {
            for e in &mut field.values[b * dd..(b + 1) * dd] {
                *e /= n;
            }
        }
    }
    field
}

/// Quadrature of the configuration integrals defining the macroscopic stress.
#[derive(Debug, Clone)]
pub struct ConfigQuadrature {
    pub springs: usize,
    pub dim: usize,
    pub rule: TensorRule,
}

impl ConfigQuadrature {
    /// Gauss–Legendre with `nodes` points per axis over `D^J`, `D` given by
    /// per-axis bounds.
    pub fn new(springs: usize, q_lo: &[f64], q_hi: &[f64], nodes: usize) -> Self {
        let dim = q_lo.len();
        let lo: Vec<f64> = (0..springs).flat_map(|_| q_lo.iter().copied()).collect();
        let hi: Vec<f64> = (0..springs).flat_map(|_| q_hi.iter().copied()).collect();
        Self { springs, dim, rule: TensorRule::new(&lo, &hi, nodes) }
    }

    fn moments(&self, x: &[f64], h: f64, psi: &dyn Fn(&[f64], &[f64]) -> f64) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut num = vec![0.0; d * d];
        let mut den = 0.0;
        self.rule.for_each(|q, w| {
            let p = psi(x, q);
            if p == 0.0 {
                return;
            }
            den += w * p;
            for s in 0..self.springs {
                let qs = &q[s * d..(s + 1) * d];
                for a in 0..d {
                    for b in 0..d {
                        num[a * d + b] += w * p * h * qs[a] * qs[b];
                    }
                }
            }
        });
        (num, den)
    }
}

/// Ratio form `∫ Σ_j F(q_j)⊗q_j ψ dq / ∫ ψ dq` at each cell centre of
/// `grid`; cells with `∫ψ dq = 0` hold 0.
pub fn kramers_macro(
    psi: &dyn Fn(&[f64], &[f64]) -> f64,
    quad: &ConfigQuadrature,
    grid: &TensorGrid,
    h: f64,
    time: f64,
) -> StressField {
    let d = grid.ndim();
    let dd = d * d;
    let mut field = StressField::zeros(grid, time);
    let mut x = vec![0.0; d];
    for (c, idx) in grid.indices().enumerate() {
        for k in 0..d {
            x[k] = grid.center(k, idx[k]);
        }
        let (num, den) = quad.moments(&x, h, psi);
        field.weights[c] = den;
        if den > 0.0 {
            for e in 0..dd {
                field.values[c * dd + e] = num[e] / den;
            }
        }
    }
    field
}

/// Number-density form `n ∫ Σ_j F(q_j)⊗q_j ψ dq`, valid when `∫ψ dq = 1/n`.
pub fn kramers_macro_n(
    psi: &dyn Fn(&[f64], &[f64]) -> f64,
    quad: &ConfigQuadrature,
    grid: &TensorGrid,
    h: f64,
    n: f64,
    time: f64,
) -> StressField {
    let d = grid.ndim();
    let dd = d * d;
    let mut field = StressField::zeros(grid, time);
    let mut x = vec![0.0; d];
    for (c, idx) in grid.indices().enumerate() {
        for k in 0..d {
            x[k] = grid.center(k, idx[k]);
        }
        let (num, den) = quad.moments(&x, h, psi);
        field.weights[c] = den;
        for e in 0..dd {
            field.values[c * dd + e] = n * num[e];
        }
    }
    field
}
