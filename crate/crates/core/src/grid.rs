//! Truncated space-time grid shared by every discretized object.

use crate::error::{Error, Result};
use crate::scalar::Real;
use std::sync::Arc;

/// Uniform rectangular grid on `[-R, R]^dim x [t0, T]`.
///
/// Spacings are exact by construction: `dx = 2R/(nx-1)`, `dt = (T-t0)/nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid<S: Real> {
    pub dim: usize,
    pub box_halfwidth: S,
    pub nx: usize,
    pub t0: S,
    pub t_final: S,
    pub nt: usize,
    pub dx: S,
    pub dt: S,
}

impl<S: Real> SpaceTimeGrid<S> {
    pub fn new(dim: usize, box_halfwidth: S, nx: usize, t0: S, t_final: S, nt: usize) -> Result<Arc<Self>> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {dim}")));
        }
        if nx < 8 {
            return Err(Error::InvalidGrid(format!("nx must be >= 8, got {nx}")));
        }
        if nt < 8 {
            return Err(Error::InvalidGrid(format!("nt must be >= 8, got {nt}")));
        }
        if box_halfwidth <= S::zero() {
            return Err(Error::InvalidGrid("box halfwidth must be positive".into()));
        }
        if t0 < S::zero() || t0 >= t_final {
            return Err(Error::InvalidGrid("need 0 <= t0 < T".into()));
        }
        let dx = S::of(2.0) * box_halfwidth / S::from_usize(nx - 1).unwrap();
        let dt = (t_final - t0) / S::from_usize(nt).unwrap();
        Ok(Arc::new(Self { dim, box_halfwidth, nx, t0, t_final, nt, dx, dt }))
    }

    /// 1D helper with the common defaults.
    pub fn line(box_halfwidth: S, nx: usize, t0: S, t_final: S, nt: usize) -> Result<Arc<Self>> {
        Self::new(1, box_halfwidth, nx, t0, t_final, nt)
    }

    /// Number of spatial nodes (`nx` in 1D, `nx^2` in 2D).
    pub fn node_count(&self) -> usize {
        if self.dim == 1 { self.nx } else { self.nx * self.nx }
    }

    /// Number of stored time slices (`nt + 1`).
    pub fn time_count(&self) -> usize {
        self.nt + 1
    }

    pub fn time(&self, k: usize) -> S {
        self.t0 + self.dt * S::from_usize(k).unwrap()
    }

    /// Coordinate along one axis.
    pub fn axis(&self, i: usize) -> S {
        -self.box_halfwidth + self.dx * S::from_usize(i).unwrap()
    }

    /// Node position; the second coordinate is zero in 1D.
    pub fn position(&self, node: usize) -> [S; 2] {
        if self.dim == 1 {
            [self.axis(node), S::zero()]
        } else {
            [self.axis(node / self.nx), self.axis(node % self.nx)]
        }
    }

    pub fn node_index_2d(&self, ix: usize, iy: usize) -> usize {
        ix * self.nx + iy
    }

    /// Trapezoid weight along one axis (half cells at the ends).
    pub fn axis_weight(&self, i: usize) -> S {
        if i == 0 || i == self.nx - 1 { self.dx * S::of(0.5) } else { self.dx }
    }

    /// Trapezoid quadrature weight of a node.
    pub fn weight(&self, node: usize) -> S {
        if self.dim == 1 {
            self.axis_weight(node)
        } else {
            self.axis_weight(node / self.nx) * self.axis_weight(node % self.nx)
        }
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[S]) -> S {
        assert_eq!(values.len(), self.node_count());
        values.iter().enumerate().map(|(i, &v)| self.weight(i) * v).sum()
    }

    /// Whether a point lies inside the truncated box.
    pub fn contains(&self, p: [S; 2]) -> bool {
        let r = self.box_halfwidth;
        let ok0 = p[0] >= -r && p[0] <= r;
        if self.dim == 1 { ok0 } else { ok0 && p[1] >= -r && p[1] <= r }
    }

    /// Grid restricted to `[t1, T]` with the same spatial mesh and time step.
    /// `k1` is the time index of `t1`; the new mesh reuses the old slice times.
    pub fn restrict_from(&self, k1: usize) -> Result<Arc<Self>> {
        if k1 + 8 > self.nt {
            return Err(Error::InvalidGrid(format!(
                "restriction at index {k1} leaves fewer than 8 time steps"
            )));
        }
        Ok(Arc::new(Self {
            dim: self.dim,
            box_halfwidth: self.box_halfwidth,
            nx: self.nx,
            t0: self.time(k1),
            t_final: self.t_final,
            nt: self.nt - k1,
            dx: self.dx,
            dt: self.dt,
        }))
    }

    /// Grid with both meshes refined by a factor two (same box and horizon).
    pub fn refined(&self) -> Result<Arc<Self>> {
        Self::new(self.dim, self.box_halfwidth, 2 * self.nx - 1, self.t0, self.t_final, 2 * self.nt)
    }

    /// Multilinear interpolation of nodal values at an arbitrary point.
    /// Points outside the box are clamped to it.
    pub fn interpolate(&self, values: &[S], p: [S; 2]) -> S {
        debug_assert_eq!(values.len(), self.node_count());
        let clamp_frac = |x: S| -> (usize, S) {
            let r = self.box_halfwidth;
            let x = x.max(-r).min(r);
            let s = (x + r) / self.dx;
            let i = s.floor().as_f64() as usize;
            let i = i.min(self.nx - 2);
            (i, s - S::from_usize(i).unwrap())
        };
        if self.dim == 1 {
            let (i, f) = clamp_frac(p[0]);
            values[i] * (S::one() - f) + values[i + 1] * f
        } else {
            let (i, fx) = clamp_frac(p[0]);
            let (j, fy) = clamp_frac(p[1]);
            let v00 = values[self.node_index_2d(i, j)];
            let v01 = values[self.node_index_2d(i, j + 1)];
            let v10 = values[self.node_index_2d(i + 1, j)];
            let v11 = values[self.node_index_2d(i + 1, j + 1)];
            let a = v00 * (S::one() - fy) + v01 * fy;
            let b = v10 * (S::one() - fy) + v11 * fy;
            a * (S::one() - fx) + b * fx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacings_are_exact() {
        let g = SpaceTimeGrid::<f64>::line(4.0, 9, 0.0, 1.0, 10).unwrap();
        assert_eq!(g.dx, 1.0);
        assert_eq!(g.dt, 0.1);
        assert_eq!(g.axis(0), -4.0);
        assert_eq!(g.axis(8), 4.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpaceTimeGrid::<f64>::line(4.0, 4, 0.0, 1.0, 10).is_err());
        assert!(SpaceTimeGrid::<f64>::line(4.0, 9, 0.0, 1.0, 4).is_err());
        assert!(SpaceTimeGrid::<f64>::line(-1.0, 9, 0.0, 1.0, 10).is_err());
        assert!(SpaceTimeGrid::<f64>::line(4.0, 9, 1.0, 1.0, 10).is_err());
        assert!(SpaceTimeGrid::<f64>::new(3, 4.0, 9, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn trapezoid_weights_sum_to_box_measure() {
        let g = SpaceTimeGrid::<f64>::new(2, 3.0, 13, 0.0, 1.0, 8).unwrap();
        let total: f64 = (0..g.node_count()).map(|i| g.weight(i)).sum();
        assert!((total - 36.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let g = SpaceTimeGrid::<f64>::new(2, 2.0, 9, 0.0, 1.0, 8).unwrap();
        let vals: Vec<f64> = (0..g.node_count())
            .map(|n| {
                let p = g.position(n);
                3.0 * p[0] - 0.5 * p[1] + 1.0
            })
            .collect();
        let v = g.interpolate(&vals, [0.37, -1.21]);
        assert!((v - (3.0 * 0.37 + 0.5 * 1.21 + 1.0)).abs() < 1e-12);
    }
}
