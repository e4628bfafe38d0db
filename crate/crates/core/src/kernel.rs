//! Reproducing-kernel velocity fields: evaluation, exact spatial Jacobians,
//! and the V-norm / hybrid norm.
//!
//! The kernel is a scalar Gaussian times the 3×3 identity,
//! K(x,y) = exp(−|x−y|²/(2σ_V²))·Id, optionally a weighted sum over several
//! widths. All sums are O(N²) direct summation, parallel over output points
//! with fixed-order inner accumulation so results are bit-reproducible at
//! any thread count.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::TriMesh;
use crate::{Error, Result};

/// Gaussian RKHS kernel family: one or more (width, weight) components.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelSpec {
    /// Multi-scale components (σ_V in mm, weight > 0). At least one.
    pub scales: Vec<(f64, f64)>,
}

impl KernelSpec {
    /// Single-scale Gaussian of width `sigma`.
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec {
            scales: vec![(sigma, 1.0)],
        }
    }

    /// Multi-scale Gaussian sum.
    pub fn multi_scale(scales: Vec<(f64, f64)>) -> Self {
        KernelSpec { scales }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("kernel needs at least one scale".into()));
        }
        for &(w, c) in &self.scales {
            if !(w > 0.0) || !(c > 0.0) {
                return Err(Error::Config(format!(
                    "kernel widths and weights must be positive, got ({w}, {c})"
                )));
            }
        }
        Ok(())
    }

    /// Scalar kernel value k(x, y) = Σ w_s · exp(−|x−y|²/(2σ_s²)).
    pub fn scalar(&self, x: &Point3<f64>, y: &Point3<f64>) -> f64 {
        let d2 = (x - y).norm_squared();
        self.scales
            .iter()
            .map(|&(s, w)| w * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }

    /// v(x) = Σ_l k(x, q_l)·α_l.
    pub fn eval_velocity(
        &self,
        points: &[Point3<f64>],
        momenta: &[Vector3<f64>],
        x: &Point3<f64>,
    ) -> Vector3<f64> {
        debug_assert_eq!(points.len(), momenta.len());
        let mut v = Vector3::zeros();
        for (q, a) in points.iter().zip(momenta) {
            v += self.scalar(x, q) * a;
        }
        v
    }

    /// Exact spatial Jacobian Dv(x) = Σ_l α_l ⊗ ∇_x k(x, q_l) with
    /// ∇_x k = −Σ_s (w_s g_s/σ_s²)(x−q_l).
    pub fn eval_velocity_jacobian(
        &self,
        points: &[Point3<f64>],
        momenta: &[Vector3<f64>],
        x: &Point3<f64>,
    ) -> Matrix3<f64> {
        let mut jac = Matrix3::zeros();
        for (q, a) in points.iter().zip(momenta) {
            let diff = x - q;
            let d2 = diff.norm_squared();
            let mut coeff = 0.0;
            for &(s, w) in &self.scales {
                coeff += w * (-d2 / (2.0 * s * s)).exp() / (s * s);
            }
            // α ⊗ (−coeff·diff)ᵀ
            jac -= coeff * a * diff.transpose();
        }
        jac
    }

    /// div v(x) = trace(Dv(x)), computed directly.
    pub fn eval_divergence(
        &self,
        points: &[Point3<f64>],
        momenta: &[Vector3<f64>],
        x: &Point3<f64>,
    ) -> f64 {
        let mut div = 0.0;
        for (q, a) in points.iter().zip(momenta) {
            let diff = x - q;
            let d2 = diff.norm_squared();
            let mut coeff = 0.0;
            for &(s, w) in &self.scales {
                coeff += w * (-d2 / (2.0 * s * s)).exp() / (s * s);
            }
            div -= coeff * a.dot(&diff);
        }
        div
    }

    /// Velocity at many output points, parallel over outputs.
    pub fn velocities_at(
        &self,
        points: &[Point3<f64>],
        momenta: &[Vector3<f64>],
        at: &[Point3<f64>],
    ) -> Vec<Vector3<f64>> {
        at.par_iter()
            .map(|x| self.eval_velocity(points, momenta, x))
            .collect()
    }

    /// ‖v‖²_V = Σ_{k,l} k(q_k, q_l)·α_kᵀα_l.
    ///
    /// Row sums are computed independently (parallel) and reduced in index
    /// order.
    pub fn vnorm_sq(&self, points: &[Point3<f64>], momenta: &[Vector3<f64>]) -> f64 {
        let rows: Vec<f64> = points
            .par_iter()
            .zip(momenta.par_iter())
            .map(|(qk, ak)| {
                let mut acc = 0.0;
                for (ql, al) in points.iter().zip(momenta) {
                    acc += self.scalar(qk, ql) * ak.dot(al);
                }
                acc
            })
            .collect();
        rows.iter().sum()
    }

    /// Hybrid norm ‖v‖²_q = ‖v‖²_V + λ_h·Σ_f area_f·|Dv(centroid_f)|²_F,
    /// with the surface integral over the mesh carrying the current vertex
    /// positions.
    pub fn hybrid_norm_sq(
        &self,
        mesh_at_q: &TriMesh,
        momenta: &[Vector3<f64>],
        lambda_h: f64,
    ) -> Result<f64> {
        let base = self.vnorm_sq(&mesh_at_q.vertices, momenta);
        if lambda_h == 0.0 {
            return Ok(base);
        }
        let fg = mesh_at_q.face_geometry()?;
        let face_terms: Vec<f64> = fg
            .centroids
            .par_iter()
            .zip(fg.areas.par_iter())
            .map(|(c, &area)| {
                let jac = self.eval_velocity_jacobian(&mesh_at_q.vertices, momenta, c);
                area * jac.norm_squared()
            })
            .collect();
        Ok(base + lambda_h * face_terms.iter().sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn velocity_at_center_is_momentum() {
        let spec = KernelSpec::gaussian(0.7);
        let q = vec![Point3::origin()];
        let a = vec![Vector3::new(1.0, 0.0, 0.0)];
        assert_relative_eq!(
            spec.eval_velocity(&q, &a, &Point3::origin()),
            Vector3::new(1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn velocity_at_one_sigma() {
        let sigma = 0.7;
        let spec = KernelSpec::gaussian(sigma);
        let q = vec![Point3::origin()];
        let a = vec![Vector3::new(1.0, 0.0, 0.0)];
        let v = spec.eval_velocity(&q, &a, &Point3::new(sigma, 0.0, 0.0));
        assert_relative_eq!(v.x, (-0.5_f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v.y, 0.0);
    }

    #[test]
    fn midpoint_of_symmetric_pair() {
        let sigma = 0.9;
        let d = 0.6;
        let spec = KernelSpec::gaussian(sigma);
        let q = vec![
            Point3::new(-d / 2.0, 0.0, 0.0),
            Point3::new(d / 2.0, 0.0, 0.0),
        ];
        let alpha = Vector3::new(0.3, -0.2, 0.1);
        let a = vec![alpha, alpha];
        let v = spec.eval_velocity(&q, &a, &Point3::origin());
        let expected = 2.0 * (-d * d / (8.0 * sigma * sigma)).exp();
        assert_relative_eq!(v, expected * alpha, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_vanishes_at_particle_center() {
        let spec = KernelSpec::gaussian(0.5);
        let q = vec![Point3::new(0.2, -0.1, 0.4)];
        let a = vec![Vector3::new(1.0, 2.0, 3.0)];
        let jac = spec.eval_velocity_jacobian(&q, &a, &q[0]);
        assert!(jac.norm() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = KernelSpec::multi_scale(vec![(0.6, 1.0), (1.2, 0.5)]);
        let n = 20;
        for _ in 0..10 {
            let q: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            let a: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect();
            let x = Point3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let jac = spec.eval_velocity_jacobian(&q, &a, &x);
            let h = 1e-5 * 0.6;
            let mut fd = Matrix3::zeros();
            for d in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let col = (spec.eval_velocity(&q, &a, &xp) - spec.eval_velocity(&q, &a, &xm))
                    / (2.0 * h);
                fd.set_column(d, &col);
            }
            assert!(
                (jac - fd).norm() / fd.norm().max(1e-12) < 1e-6,
                "FD mismatch: {:?} vs {:?}",
                jac,
                fd
            );
        }
    }

    #[test]
    fn divergence_equals_trace_of_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = KernelSpec::gaussian(0.8);
        let q: Vec<Point3<f64>> = (0..15)
            .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let a: Vec<Vector3<f64>> = (0..15)
            .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let x = Point3::new(0.3, 0.3, 0.3);
        let jac = spec.eval_velocity_jacobian(&q, &a, &x);
        assert_relative_eq!(
            spec.eval_divergence(&q, &a, &x),
            jac.trace(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn vnorm_single_particle() {
        let spec = KernelSpec::gaussian(0.5);
        let q = vec![Point3::origin()];
        let a = vec![Vector3::new(0.3, -0.4, 1.2)];
        assert_relative_eq!(spec.vnorm_sq(&q, &a), a[0].norm_squared());
    }

    #[test]
    fn vnorm_cancelling_momenta() {
        let spec = KernelSpec::gaussian(0.5);
        let p = Point3::new(0.1, 0.2, 0.3);
        let q = vec![p, p];
        let alpha = Vector3::new(1.0, -2.0, 0.5);
        let a = vec![alpha, -alpha];
        assert_relative_eq!(spec.vnorm_sq(&q, &a), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn vnorm_matches_gram_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = KernelSpec::gaussian(0.6);
        let q: Vec<Point3<f64>> = (0..3)
            .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let a: Vec<Vector3<f64>> = (0..3)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        // explicit 9×9 Gram matrix (k(q_i,q_j)·I blocks)
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expected += spec.scalar(&q[i], &q[j]) * a[i].dot(&a[j]);
            }
        }
        assert_relative_eq!(spec.vnorm_sq(&q, &a), expected, epsilon = 1e-13);
    }

    #[test]
    fn reproducing_property_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = KernelSpec::multi_scale(vec![(0.4, 0.7), (1.0, 0.3)]);
        let n = 12;
        let q: Vec<Point3<f64>> = (0..n)
            .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let a: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let pairing: f64 = q
            .iter()
            .zip(&a)
            .map(|(ql, al)| al.dot(&spec.eval_velocity(&q, &a, ql)))
            .sum();
        assert_relative_eq!(pairing, spec.vnorm_sq(&q, &a), max_relative = 1e-12);
    }

    #[test]
    fn hybrid_norm_reduces_to_vnorm_at_zero_lambda() {
        let spec = KernelSpec::gaussian(0.5);
        let mesh = crate::synth::icosphere(1, 1.0);
        let a: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| p.coords * 0.1).collect();
        let h0 = spec.hybrid_norm_sq(&mesh, &a, 0.0).unwrap();
        assert_relative_eq!(h0, spec.vnorm_sq(&mesh.vertices, &a));
    }

    #[test]
    fn hybrid_norm_single_face_single_particle() {
        let spec = KernelSpec::gaussian(0.8);
        let mesh = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        // one particle at vertex 0 (kernel sums run over mesh vertices, so
        // supply momenta for all three, two of them zero)
        let a = vec![
            Vector3::new(0.2, -0.6, 0.4),
            Vector3::zeros(),
            Vector3::zeros(),
        ];
        let lambda = 0.8;
        let fg = mesh.face_geometry().unwrap();
        let jac = spec.eval_velocity_jacobian(&mesh.vertices, &a, &fg.centroids[0]);
        let expected = spec.vnorm_sq(&mesh.vertices, &a) + lambda * fg.areas[0] * jac.norm_squared();
        assert_relative_eq!(
            spec.hybrid_norm_sq(&mesh, &a, lambda).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn translation_invariance() {
        let spec = KernelSpec::gaussian(0.7);
        let q = vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-0.4, 0.0, 0.9)];
        let a = vec![Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, -1.0, 0.2)];
        let x = Point3::new(0.5, 0.5, 0.5);
        let t = Vector3::new(3.0, -2.0, 7.0);
        let qt: Vec<Point3<f64>> = q.iter().map(|p| p + t).collect();
        assert_relative_eq!(
            spec.eval_velocity(&q, &a, &x),
            spec.eval_velocity(&qt, &a, &(x + t)),
            epsilon = 1e-14
        );
    }
}
