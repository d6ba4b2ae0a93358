//! Convex flow domains, the configuration domain `D = Ω − Ω`, and the
//! specular wall law.

use crate::error::{Error, Result};

/// Relative tolerance (times the diameter) used to classify boundary points.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum DomainKind {
    /// Axis-aligned box `Π [lo_k, hi_k]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Ball of the given radius centred at the origin (a disk for `d = 2`).
    Disk { radius: f64 },
}

/// Bounded convex domain with its centroid at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexDomain {
    kind: DomainKind,
    dim: usize,
}

impl ConvexDomain {
    /// Box with the given side lengths, recentred so that the centroid is 0.
    pub fn new_box(extents: &[(f64, f64)]) -> Result<Self> {
        let dim = extents.len();
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDomain(format!("dimension {dim} not in 1..=3")));
        }
        let mut lo = Vec::with_capacity(dim);
        let mut hi = Vec::with_capacity(dim);
        for (k, &(a, b)) in extents.iter().enumerate() {
            if !(b > a) || !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidDomain(format!("axis {k}: need lo < hi")));
            }
            let half = 0.5 * (b - a);
            lo.push(-half);
            hi.push(half);
        }
        Ok(Self { kind: DomainKind::Box { lo, hi }, dim })
    }

    /// The cube `[-half, half]^dim`.
    pub fn cube(half: f64, dim: usize) -> Result<Self> {
        Self::new_box(&vec![(-half, half); dim])
    }

    pub fn disk(radius: f64, dim: usize) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidDomain("radius must be positive".into()));
        }
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDomain(format!("dimension {dim} not in 1..=3")));
        }
        Ok(Self { kind: DomainKind::Disk { radius }, dim })
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_box(&self) -> bool {
        matches!(self.kind, DomainKind::Box { .. })
    }

    /// Smallest axis-aligned box containing the domain.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.kind {
            DomainKind::Box { lo, hi } => (lo.clone(), hi.clone()),
            DomainKind::Disk { radius } => (vec![-radius; self.dim], vec![*radius; self.dim]),
        }
    }

    pub fn diameter(&self) -> f64 {
        match &self.kind {
            DomainKind::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt(),
            DomainKind::Disk { radius } => 2.0 * radius,
        }
    }

    pub fn volume(&self) -> f64 {
        match &self.kind {
            DomainKind::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
            DomainKind::Disk { radius } => match self.dim {
                1 => 2.0 * radius,
                2 => std::f64::consts::PI * radius * radius,
                _ => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            },
        }
    }

    fn tol(&self) -> f64 {
        BOUNDARY_TOL * self.diameter()
    }

    /// Signed distance to `∂Ω`: negative inside, positive outside.
    pub fn signed_distance(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        match &self.kind {
            DomainKind::Box { lo, hi } => {
                let mut outside = 0.0;
                let mut inside = f64::INFINITY;
                for k in 0..self.dim {
                    let below = lo[k] - z[k];
                    let above = z[k] - hi[k];
                    let excess = below.max(above);
                    if excess > 0.0 {
                        outside += excess * excess;
                    }
                    inside = inside.min(-excess);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    -inside
                }
            }
            DomainKind::Disk { radius } => norm(z) - radius,
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.signed_distance(z) <= self.tol()
    }

    /// Unit outward normal at a boundary point.
    ///
    /// At box edges and corners the face with the smallest distance wins,
    /// ties going to the lowest axis index (low face before high face).
    pub fn outward_normal(&self, z: &[f64]) -> Result<Vec<f64>> {
        let distance = self.signed_distance(z);
        if distance.abs() > self.tol() {
            return Err(Error::PointNotOnBoundary { distance });
        }
        let mut n = vec![0.0; self.dim];
        match &self.kind {
            DomainKind::Box { lo, hi } => {
                let mut best = (f64::INFINITY, 0usize, 0.0);
                for k in 0..self.dim {
                    let dl = (z[k] - lo[k]).abs();
                    let dh = (hi[k] - z[k]).abs();
                    if dl < best.0 {
                        best = (dl, k, -1.0);
                    }
                    if dh < best.0 {
                        best = (dh, k, 1.0);
                    }
                }
                n[best.1] = best.2;
            }
            DomainKind::Disk { .. } => {
                let r = norm(z);
                for k in 0..self.dim {
                    n[k] = z[k] / r;
                }
            }
        }
        Ok(n)
    }

    pub fn configuration_domain(&self) -> ConfigurationDomain {
        ConfigurationDomain::new(self.clone())
    }

    /// Move `end` back into the domain by specular reflection of the path
    /// `start -> end`, reflecting `vel` (the bead's velocity block) at every
    /// wall hit. Crossings are resolved in order of crossing time.
    ///
    /// Returns the number of reflections, or `None` when more than
    /// `max_reflections` were needed.
    pub fn reflect_path(&self, start: &[f64], end: &mut [f64], vel: &mut [f64], max_reflections: usize) -> Option<usize> {
        let d = self.dim;
        let mut from = [0.0f64; 3];
        from[..d].copy_from_slice(start);
        let mut count = 0;
        loop {
            match &self.kind {
                DomainKind::Box { lo, hi } => {
                    // earliest crossing along the straight segment from -> end
                    let mut first: Option<(f64, usize, f64)> = None;
                    for k in 0..d {
                        let delta = end[k] - from[k];
                        let wall = if end[k] > hi[k] {
                            hi[k]
                        } else if end[k] < lo[k] {
                            lo[k]
                        } else {
                            continue;
                        };
                        let t = if delta != 0.0 { ((wall - from[k]) / delta).clamp(0.0, 1.0) } else { 0.0 };
                        if first.is_none_or(|(tb, _, _)| t < tb) {
                            first = Some((t, k, wall));
                        }
                    }
                    let Some((t, k, wall)) = first else { return Some(count) };
                    count += 1;
                    if count > max_reflections {
                        return None;
                    }
                    for m in 0..d {
                        from[m] += t * (end[m] - from[m]);
                    }
                    from[k] = wall;
                    end[k] = 2.0 * wall - end[k];
                    vel[k] = -vel[k];
                }
                DomainKind::Disk { radius } => {
                    if norm(&end[..d]) <= *radius {
                        return Some(count);
                    }
                    count += 1;
                    if count > max_reflections {
                        return None;
                    }
                    // exit point: |from + t (end - from)| = radius, t in [0, 1]
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut c = -radius * radius;
                    for m in 0..d {
                        let dm = end[m] - from[m];
                        a += dm * dm;
                        b += 2.0 * from[m] * dm;
                        c += from[m] * from[m];
                    }
                    let t =
                        if a > 0.0 { ((-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)).clamp(0.0, 1.0) } else { 0.0 };
                    let mut hit = [0.0f64; 3];
                    for m in 0..d {
                        hit[m] = from[m] + t * (end[m] - from[m]);
                    }
                    let rh = norm(&hit[..d]);
                    let mut n = [0.0f64; 3];
                    for m in 0..d {
                        n[m] = hit[m] / rh;
                        hit[m] = n[m] * radius;
                    }
                    let excess: f64 = (0..d).map(|m| (end[m] - hit[m]) * n[m]).sum();
                    let vn: f64 = (0..d).map(|m| vel[m] * n[m]).sum();
                    for m in 0..d {
                        end[m] -= 2.0 * excess * n[m];
                        vel[m] -= 2.0 * vn * n[m];
                    }
                    // pull the new start point strictly inside to avoid re-hitting
                    // the same tangent point
                    for m in 0..d {
                        from[m] = hit[m] * (1.0 - 1e-15);
                    }
                }
            }
        }
    }
}

/// `D = Ω − Ω` and its tight half-width `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationDomain {
    source: ConvexDomain,
    half_width: f64,
}

impl ConfigurationDomain {
    pub fn new(source: ConvexDomain) -> Self {
        let half_width = match source.kind() {
            DomainKind::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max),
            DomainKind::Disk { radius } => 2.0 * radius,
        };
        Self { source, half_width }
    }

    pub fn source(&self) -> &ConvexDomain {
        &self.source
    }

    /// Tight `L` with `D ⊂ [-L, L]^d`.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Per-axis bounds of `D` (exact for boxes, the bounding cube for disks).
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.source.bounding_box();
        let s: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
        (s.iter().map(|x| -x).collect(), s)
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        match self.source.kind() {
            DomainKind::Box { lo, hi } => {
                q.iter().zip(lo.iter().zip(hi)).all(|(x, (a, b))| x.abs() <= (b - a) * (1.0 + BOUNDARY_TOL))
            }
            DomainKind::Disk { radius } => norm(q) <= 2.0 * radius * (1.0 + BOUNDARY_TOL),
        }
    }

    /// `sup_{q ∈ D} |q|²`.
    pub fn sup_norm_sq(&self) -> f64 {
        match self.source.kind() {
            DomainKind::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| (b - a).powi(2)).sum(),
            DomainKind::Disk { radius } => 4.0 * radius * radius,
        }
    }
}

/// Specular velocity for bead `bead`: `v* = v - 2 (v_j · n) n` in that
/// bead's block; every other block is untouched.
pub fn specular_reflect(v: &[f64], bead: usize, n: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    specular_reflect_in_place(&mut out, bead, n);
    out
}

pub fn specular_reflect_in_place(v: &mut [f64], bead: usize, n: &[f64]) {
    let d = n.len();
    let block = &mut v[bead * d..(bead + 1) * d];
    let vn: f64 = block.iter().zip(n).map(|(a, b)| a * b).sum();
    for (x, nk) in block.iter_mut().zip(n) {
        *x -= 2.0 * vn * nk;
    }
}

/// Arithmetic mean of the bead positions (`r` stored bead-major, `d`
/// components per bead).
pub fn center_of_mass(domain: &ConvexDomain, r: &[f64]) -> Result<Vec<f64>> {
    let d = domain.dim();
    let beads = r.len() / d;
    let tol = domain.tol();
    let mut x = vec![0.0; d];
    for j in 0..beads {
        let rj = &r[j * d..(j + 1) * d];
        let distance = domain.signed_distance(rj);
        if distance > tol {
            return Err(Error::BeadOutsideDomain { bead: j, distance });
        }
        for k in 0..d {
            x[k] += rj[k];
        }
    }
    for xk in &mut x {
        *xk /= beads as f64;
    }
    Ok(x)
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> ConvexDomain {
        ConvexDomain::cube(1.0, 2).unwrap()
    }

    #[test]
    fn signed_distance_examples() {
        let b = unit_square();
        assert_eq!(b.signed_distance(&[0.0, 0.0]), -1.0);
        assert_eq!(b.signed_distance(&[1.0, 0.3]), 0.0);
        let disk = ConvexDomain::disk(2.0, 2).unwrap();
        assert!((disk.signed_distance(&[3.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn box_is_recentred() {
        let b = ConvexDomain::new_box(&[(0.0, 4.0), (1.0, 2.0)]).unwrap();
        assert_eq!(b.bounding_box(), (vec![-2.0, -0.5], vec![2.0, 0.5]));
        // centroid distance = -min half side
        assert_eq!(b.signed_distance(&[0.0, 0.0]), -0.5);
    }

    #[test]
    fn invalid_domains() {
        assert!(ConvexDomain::new_box(&[(1.0, 1.0)]).is_err());
        assert!(ConvexDomain::disk(0.0, 2).is_err());
        assert!(ConvexDomain::new_box(&[]).is_err());
    }

    #[test]
    fn normals() {
        let b = unit_square();
        assert_eq!(b.outward_normal(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.outward_normal(&[-1.0, 0.5]).unwrap(), vec![-1.0, 0.0]);
        // corner: tie broken by the lowest axis
        assert_eq!(b.outward_normal(&[1.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        let disk = ConvexDomain::disk(1.0, 2).unwrap();
        assert_eq!(disk.outward_normal(&[0.0, -1.0]).unwrap(), vec![0.0, -1.0]);
        assert!(matches!(b.outward_normal(&[0.5, 0.0]), Err(Error::PointNotOnBoundary { .. })));
    }

    #[test]
    fn configuration_domain_of_box() {
        let b = ConvexDomain::new_box(&[(0.0, 2.0), (0.0, 1.0)]).unwrap();
        let c = b.configuration_domain();
        assert_eq!(c.bounds(), (vec![-2.0, -1.0], vec![2.0, 1.0]));
        assert_eq!(c.half_width(), 2.0);
        assert_eq!(c.sup_norm_sq(), 5.0);
        assert!(c.contains(&[0.0, 0.0]));
        assert!(c.contains(&[-2.0, 1.0]));
        assert!(!c.contains(&[0.0, 1.5]));
    }

    #[test]
    fn reflection_examples() {
        let v = specular_reflect(&[-1.0, 2.0], 0, &[1.0, 0.0]);
        assert_eq!(v, vec![1.0, 2.0]);
        let v = vec![5.0, 5.0, 0.0, 3.0];
        assert_eq!(specular_reflect(&v, 1, &[1.0, 0.0]), v);
        let v = specular_reflect(&[3.0, -4.0], 0, &[0.0, 1.0]);
        assert_eq!(v[0] * v[0] + v[1] * v[1], 25.0);
        assert_eq!(v, vec![3.0, 4.0]);
    }

    #[test]
    fn centre_of_mass_examples() {
        let b = ConvexDomain::cube(1.0, 2).unwrap();
        assert_eq!(center_of_mass(&b, &[0.0, 0.0, 1.0, 0.0]).unwrap(), vec![0.5, 0.0]);
        let x = center_of_mass(&b, &[0.3, 0.2, 0.3, 0.2, 0.3, 0.2]).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] - 0.2).abs() < 1e-15);
        assert_eq!(center_of_mass(&b, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(center_of_mass(&b, &[0.0, 0.0, 1.5, 0.0]), Err(Error::BeadOutsideDomain { bead: 1, .. })));
    }

    #[test]
    fn box_path_reflection_mirrors_overshoot() {
        let b = ConvexDomain::cube(1.0, 2).unwrap();
        let mut end = [1.3, 0.5];
        let mut vel = [2.0, 1.0];
        assert_eq!(b.reflect_path(&[0.9, 0.5], &mut end, &mut vel, 8), Some(1));
        assert!((end[0] - 0.7).abs() < 1e-14);
        assert_eq!(vel, [-2.0, 1.0]);
        // corner: both faces crossed
        let mut end = [1.2, -1.1];
        let mut vel = [1.0, -1.0];
        assert_eq!(b.reflect_path(&[0.9, -0.9], &mut end, &mut vel, 8), Some(2));
        assert!(b.contains(&end));
        assert_eq!(vel, [-1.0, 1.0]);
        // too many wall hits
        let mut end = [9.5, 0.0];
        let mut vel = [1.0, 0.0];
        assert_eq!(b.reflect_path(&[0.0, 0.0], &mut end, &mut vel, 3), None);
    }

    #[test]
    fn disk_path_reflection_stays_inside() {
        let disk = ConvexDomain::disk(1.0, 2).unwrap();
        let mut end = [1.2, 0.0];
        let mut vel = [1.0, 0.5];
        assert_eq!(disk.reflect_path(&[0.8, 0.0], &mut end, &mut vel, 8), Some(1));
        assert!((end[0] - 0.8).abs() < 1e-12 && end[1].abs() < 1e-12);
        assert!((vel[0] + 1.0).abs() < 1e-15 && (vel[1] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn reflection_is_an_isometric_involution(
            v in prop::collection::vec(-10.0f64..10.0, 6),
            theta in 0.0f64..std::f64::consts::TAU,
            bead in 0usize..3,
        ) {
            let n = [theta.cos(), theta.sin()];
            let once = specular_reflect(&v, bead, &n);
            let twice = specular_reflect(&once, bead, &n);
            for (a, b) in v.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let n0: f64 = v.iter().map(|x| x * x).sum();
            let n1: f64 = once.iter().map(|x| x * x).sum();
            prop_assert!((n0 - n1).abs() <= 1e-12 * (1.0 + n0));
            let vn: f64 = (0..2).map(|k| v[2 * bead + k] * n[k]).sum();
            let wn: f64 = (0..2).map(|k| once[2 * bead + k] * n[k]).sum();
            prop_assert!((vn + wn).abs() <= 1e-12 * (1.0 + vn.abs()));
        }

        #[test]
        fn centre_of_mass_stays_in_convex_domain(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..8),
            disk in any::<bool>(),
        ) {
            let dom = if disk { ConvexDomain::disk(1.0, 2).unwrap() } else { ConvexDomain::cube(1.0, 2).unwrap() };
            let r: Vec<f64> = pts
                .iter()
                .flat_map(|&(a, b)| {
                    let s = if disk { (a * a + b * b).sqrt().max(1.0) } else { 1.0 };
                    [a / s, b / s]
                })
                .collect();
            let x = center_of_mass(&dom, &r).unwrap();
            prop_assert!(dom.contains(&x));
        }

        #[test]
        fn signed_distance_is_one_lipschitz(
            a in prop::array::uniform2(-3.0f64..3.0),
            b in prop::array::uniform2(-3.0f64..3.0),
        ) {
            for dom in [ConvexDomain::cube(1.0, 2).unwrap(), ConvexDomain::disk(1.5, 2).unwrap()] {
                let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                let diff = (dom.signed_distance(&a) - dom.signed_distance(&b)).abs();
                prop_assert!(diff <= dist + 1e-12);
            }
        }
    }
}
