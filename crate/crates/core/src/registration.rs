//! Constrained diffeomorphic registration of an inner surface onto an outer
//! one.
//!
//! The flow is kernel-reduced: vertex positions q(t) carry momenta α(t), the
//! velocity field is v(x) = Σ_l k(x, q_l)·α_l, and trajectories are explicit
//! Euler steps q[i+1] = q[i] + Δt·v_i(q[i]). The objective combines kinetic
//! energy (plain or hybrid norm), a varifold endpoint attachment, and an
//! augmented-Lagrangian term driving the velocity normal to the evolving
//! surface at every vertex and step. Gradients are exact (reverse-mode
//! through the Euler steps); the optimizer is limited-memory BFGS with a
//! strong-Wolfe line search inside an augmented-Lagrangian outer loop.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attachment::{self, VarifoldSpec};
use crate::kernel::KernelSpec;
use crate::mesh::TriMesh;
use crate::{Error, Result};

/// Regularizer for the non-smooth constraint form √(vᵀv + ε²) − νᵀv − ε.
pub const CONSTRAINT_EPSILON: f64 = 1e-8;

/// How the normality constraint is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintForm {
    /// c = |v|² − (νᵀv)², the squared tangential speed. Smooth everywhere,
    /// sign-blind (an inward normal flow also satisfies it); the orientation
    /// diagnostic in the report tracks the inward fraction.
    SmoothQuadratic,
    /// c = √(vᵀv + ε²) − νᵀv − ε. Zero only for outward normal flow, but
    /// needs the ε regularization to be differentiable at v = 0.
    Oriented,
}

/// Augmented-Lagrangian schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AlSchedule {
    /// Initial penalty μ₀.
    pub mu0: f64,
    /// Penalty growth factor applied when the residual stalls.
    pub growth: f64,
    /// Required fractional decrease of max|c| per outer iteration; less
    /// progress than this triggers μ growth.
    pub decrease_ratio: f64,
}

impl Default for AlSchedule {
    fn default() -> Self {
        AlSchedule {
            mu0: 1.0,
            growth: 10.0,
            decrease_ratio: 0.25,
        }
    }
}

/// Inner (quasi-Newton) solver settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSolverConfig {
    /// Number of curvature pairs kept by L-BFGS.
    pub memory: usize,
    /// Iteration cap per outer loop.
    pub max_iterations: usize,
    /// Strong-Wolfe sufficient-decrease constant.
    pub wolfe_c1: f64,
    /// Strong-Wolfe curvature constant.
    pub wolfe_c2: f64,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        InnerSolverConfig {
            memory: 10,
            max_iterations: 200,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
        }
    }
}

/// Full registration configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub kernel: KernelSpec,
    pub varifold: VarifoldSpec,
    /// Hybrid-norm weight λ_h ≥ 0 on the surface integral of |Dv|²_F
    /// (0 = plain kernel norm).
    pub lambda_h: f64,
    /// Attachment weight γ_D. `None` auto-scales to
    /// `gamma_auto_scale / E(S₀, S₁)` so the initial attachment term has a
    /// fixed magnitude.
    pub gamma_d: Option<f64>,
    pub gamma_auto_scale: f64,
    /// Number of Euler time steps N_t.
    pub n_t: usize,
    pub constraint_form: ConstraintForm,
    pub al: AlSchedule,
    pub inner: InnerSolverConfig,
    /// Stop when max|c| drops below this…
    pub tol_c: f64,
    /// …and the sup-norm of the inner gradient below this.
    pub tol_g: f64,
    /// Outer (multiplier-update) iteration cap.
    pub max_outer: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            kernel: KernelSpec::gaussian(0.6),
            varifold: VarifoldSpec::new(0.7),
            lambda_h: 0.0,
            gamma_d: None,
            gamma_auto_scale: 2000.0,
            n_t: 10,
            constraint_form: ConstraintForm::SmoothQuadratic,
            al: AlSchedule::default(),
            inner: InnerSolverConfig::default(),
            tol_c: 1e-3,
            tol_g: 1e-5,
            max_outer: 20,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.varifold.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_h >= 0.0) {
            return bad(format!("lambda_h must be >= 0, got {}", self.lambda_h));
        }
        if let Some(g) = self.gamma_d {
            if !(g > 0.0) {
                return bad(format!("gamma_d must be > 0, got {g}"));
            }
        }
        if !(self.gamma_auto_scale > 0.0) {
            return bad(format!(
                "gamma_auto_scale must be > 0, got {}",
                self.gamma_auto_scale
            ));
        }
        if self.n_t < 1 {
            return bad("n_t must be >= 1".into());
        }
        if !(self.al.mu0 > 0.0 && self.al.growth > 1.0) {
            return bad(format!(
                "AL schedule needs mu0 > 0 and growth > 1, got mu0={}, growth={}",
                self.al.mu0, self.al.growth
            ));
        }
        if !(self.al.decrease_ratio > 0.0 && self.al.decrease_ratio < 1.0) {
            return bad(format!(
                "AL decrease_ratio must lie in (0,1), got {}",
                self.al.decrease_ratio
            ));
        }
        if self.inner.memory < 1 || self.inner.max_iterations < 1 || self.max_outer < 1 {
            return bad("solver memory and iteration caps must be >= 1".into());
        }
        if !(self.inner.wolfe_c1 > 0.0
            && self.inner.wolfe_c1 < self.inner.wolfe_c2
            && self.inner.wolfe_c2 < 1.0)
        {
            return bad(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={}, c2={}",
                self.inner.wolfe_c1, self.inner.wolfe_c2
            ));
        }
        if !(self.tol_c >= 0.0) || !(self.tol_g > 0.0) {
            return bad(format!(
                "tolerances need tol_c >= 0 and tol_g > 0, got tol_c={}, tol_g={}",
                self.tol_c, self.tol_g
            ));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        1.0 / self.n_t as f64
    }
}

/// Resolved attachment weight: the configured γ_D, or
/// `gamma_auto_scale / E(source, target)` when auto-scaling.
pub fn resolve_gamma_d(
    config: &RegistrationConfig,
    source: &TriMesh,
    target: &TriMesh,
) -> Result<f64> {
    match config.gamma_d {
        Some(g) => Ok(g),
        None => {
            let e0 = attachment::varifold_energy(&config.varifold, source, target)?;
            if e0 > 1e-300 {
                Ok(config.gamma_auto_scale / e0)
            } else {
                // already matched: any finite weight is equivalent
                Ok(1.0)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// flow state

/// The optimization state: trajectories, momenta, multipliers, penalty, and
/// the (fixed) topology of the evolving surface, so that checkpoints are
/// self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlowStateRepr", try_from = "FlowStateRepr")]
pub struct FlowState {
    /// Time nodes t_i = i/N_t, i = 0..N_t.
    pub times: Vec<f64>,
    /// Vertex positions per time node, `positions[i][k]` (N_t+1 × N).
    /// `positions[0]` is the inner-surface vertex set.
    pub positions: Vec<Vec<Point3<f64>>>,
    /// Momenta per time step, `momenta[i][k]` (N_t × N).
    pub momenta: Vec<Vec<Vector3<f64>>>,
    /// Constraint multipliers λ per time step and vertex (N_t × N).
    pub multipliers: Vec<Vec<f64>>,
    /// Augmented-Lagrangian penalty.
    pub mu: f64,
    /// Triangles of the evolving surface (shared by every time node).
    pub faces: Vec<[usize; 3]>,
}

/// Serialized form: plain nested arrays, row-major over (time, vertex, xyz).
#[derive(Serialize, Deserialize, Clone)]
struct FlowStateRepr {
    times: Vec<f64>,
    positions: Vec<Vec<[f64; 3]>>,
    momenta: Vec<Vec<[f64; 3]>>,
    multipliers: Vec<Vec<f64>>,
    mu: f64,
    faces: Vec<[usize; 3]>,
}

impl From<FlowState> for FlowStateRepr {
    fn from(s: FlowState) -> Self {
        FlowStateRepr {
            times: s.times,
            positions: s
                .positions
                .iter()
                .map(|sl| sl.iter().map(|p| [p.x, p.y, p.z]).collect())
                .collect(),
            momenta: s
                .momenta
                .iter()
                .map(|sl| sl.iter().map(|v| [v.x, v.y, v.z]).collect())
                .collect(),
            multipliers: s.multipliers,
            mu: s.mu,
            faces: s.faces,
        }
    }
}

impl TryFrom<FlowStateRepr> for FlowState {
    type Error = String;

    fn try_from(r: FlowStateRepr) -> std::result::Result<Self, String> {
        let state = FlowState {
            times: r.times,
            positions: r
                .positions
                .iter()
                .map(|sl| sl.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
                .collect(),
            momenta: r
                .momenta
                .iter()
                .map(|sl| sl.iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect())
                .collect(),
            multipliers: r.multipliers,
            mu: r.mu,
            faces: r.faces,
        };
        state.validate_shapes().map_err(|e| e.to_string())?;
        Ok(state)
    }
}

impl FlowState {
    /// Zero-momentum state on the inner mesh (trajectories constant at q0).
    pub fn with_zero_momenta(config: &RegistrationConfig, inner: &TriMesh) -> Self {
        let nt = config.n_t;
        let n = inner.n_vertices();
        FlowState {
            times: (0..=nt).map(|i| i as f64 / nt as f64).collect(),
            positions: vec![inner.vertices.clone(); nt + 1],
            momenta: vec![vec![Vector3::zeros(); n]; nt],
            multipliers: vec![vec![0.0; n]; nt],
            mu: config.al.mu0,
            faces: inner.faces.clone(),
        }
    }

    /// State carrying the given momenta (multipliers zero), with positions
    /// freshly integrated from the inner mesh.
    pub fn from_momenta(
        config: &RegistrationConfig,
        inner: &TriMesh,
        momenta: Vec<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        let positions = integrate_forward(config, &inner.vertices, &momenta)?;
        let n = inner.n_vertices();
        let nt = config.n_t;
        let state = FlowState {
            times: (0..=nt).map(|i| i as f64 / nt as f64).collect(),
            positions,
            momenta,
            multipliers: vec![vec![0.0; n]; nt],
            mu: config.al.mu0,
            faces: inner.faces.clone(),
        };
        state.validate_shapes()?;
        Ok(state)
    }

    pub fn n_steps(&self) -> usize {
        self.momenta.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    /// The trajectory of one vertex across all time nodes.
    pub fn vertex_trajectory(&self, k: usize) -> Vec<Point3<f64>> {
        self.positions.iter().map(|sl| sl[k]).collect()
    }

    /// The evolving surface at time node `i`.
    pub fn mesh_at(&self, i: usize) -> TriMesh {
        TriMesh {
            vertices: self.positions[i].clone(),
            faces: self.faces.clone(),
            vertex_scalars: Default::default(),
            vertex_vectors: Default::default(),
            face_scalars: Default::default(),
        }
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let nt = self.momenta.len();
        let n = self.n_vertices();
        let bad = |msg: String| Err(Error::Config(msg));
        if self.positions.len() != nt + 1 {
            return bad(format!(
                "expected {} position slices for {} steps, got {}",
                nt + 1,
                nt,
                self.positions.len()
            ));
        }
        if self.times.len() != nt + 1 {
            return bad("times length must equal position slices".into());
        }
        if self.multipliers.len() != nt {
            return bad("one multiplier slice per time step required".into());
        }
        if self.positions.iter().any(|sl| sl.len() != n)
            || self.momenta.iter().any(|sl| sl.len() != n)
            || self.multipliers.iter().any(|sl| sl.len() != n)
        {
            return bad("inconsistent vertex counts across time slices".into());
        }
        if !(self.mu > 0.0) {
            return bad(format!("penalty mu must be > 0, got {}", self.mu));
        }
        if self.faces.iter().flatten().any(|&vi| vi >= n) {
            return bad("face index out of range for vertex count".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// forward integration

/// Explicit Euler integration of the kernel flow:
/// q[i+1][k] = q[i][k] + Δt·Σ_l k(q[i][k], q[i][l])·α[i][l].
pub fn integrate_forward(
    config: &RegistrationConfig,
    q0: &[Point3<f64>],
    momenta: &[Vec<Vector3<f64>>],
) -> Result<Vec<Vec<Point3<f64>>>> {
    if momenta.len() != config.n_t {
        return Err(Error::Config(format!(
            "momenta carry {} steps but config.n_t = {}",
            momenta.len(),
            config.n_t
        )));
    }
    let dt = config.dt();
    let mut qs = Vec::with_capacity(momenta.len() + 1);
    qs.push(q0.to_vec());
    for (i, alpha) in momenta.iter().enumerate() {
        if alpha.len() != q0.len() {
            return Err(Error::Config(format!(
                "momentum slice {i} has {} entries for {} vertices",
                alpha.len(),
                q0.len()
            )));
        }
        let q = &qs[i];
        let v = config.kernel.velocities_at(q, alpha, q);
        let next: Vec<Point3<f64>> = q.iter().zip(&v).map(|(p, vk)| p + dt * vk).collect();
        if next
            .iter()
            .any(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "vertex position after Euler step {i}"
            )));
        }
        qs.push(next);
    }
    Ok(qs)
}

// ---------------------------------------------------------------------------
// constraints

/// Per-vertex normality residuals of a velocity sample on a mesh.
///
/// Smooth-quadratic form: c_k = |v_k|² − (ν_kᵀv_k)², the squared tangential
/// speed. Oriented form: c_k = √(v_kᵀv_k + ε²) − ν_kᵀv_k − ε.
pub fn constraint_residuals(
    config: &RegistrationConfig,
    mesh_at_q: &TriMesh,
    velocities: &[Vector3<f64>],
) -> Result<Vec<f64>> {
    if velocities.len() != mesh_at_q.n_vertices() {
        return Err(Error::Config(format!(
            "{} velocity samples for {} vertices",
            velocities.len(),
            mesh_at_q.n_vertices()
        )));
    }
    let normals = mesh_at_q.vertex_normals()?;
    Ok(residuals_from(config.constraint_form, &normals, velocities))
}

fn residuals_from(
    form: ConstraintForm,
    normals: &[Vector3<f64>],
    velocities: &[Vector3<f64>],
) -> Vec<f64> {
    normals
        .iter()
        .zip(velocities)
        .map(|(nu, v)| match form {
            ConstraintForm::SmoothQuadratic => {
                let nv = nu.dot(v);
                v.norm_squared() - nv * nv
            }
            ConstraintForm::Oriented => {
                (v.norm_squared() + CONSTRAINT_EPSILON * CONSTRAINT_EPSILON).sqrt()
                    - nu.dot(v)
                    - CONSTRAINT_EPSILON
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// objective and gradient

/// Term-by-term decomposition of the augmented objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    /// Σ_i Δt·‖v_i‖²_{q_i} (hybrid norm when λ_h > 0).
    pub kinetic: f64,
    /// γ_D·E(S(q[N_t]), target).
    pub attachment: f64,
    /// Σ_{i,k} [−λ·c + (μ/2)·c²].
    pub augmented_lagrangian: f64,
    pub max_residual: f64,
}

/// Evaluates the augmented objective at the state's momenta/multipliers.
pub fn objective(
    config: &RegistrationConfig,
    state: &FlowState,
    target: &TriMesh,
) -> Result<ObjectiveBreakdown> {
    let ev = Evaluator::from_state(config, state, target)?;
    let (breakdown, _) = ev.evaluate(&state.momenta, &state.multipliers, state.mu, false)?;
    Ok(breakdown)
}

/// Exact gradient of [`objective`] with respect to every momentum α[i][k],
/// by reverse-mode accumulation through the Euler steps.
pub fn objective_gradient(
    config: &RegistrationConfig,
    state: &FlowState,
    target: &TriMesh,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    let ev = Evaluator::from_state(config, state, target)?;
    let (_, grad) = ev.evaluate(&state.momenta, &state.multipliers, state.mu, true)?;
    Ok(grad.expect("gradient requested"))
}

/// Shared objective/gradient machinery. Topology is fixed; only vertex
/// positions evolve.
struct Evaluator<'a> {
    config: &'a RegistrationConfig,
    q0: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    target: &'a TriMesh,
    gamma: f64,
    dt: f64,
}

/// Everything the forward sweep produces that the backward sweep or the outer
/// loop's reporting needs.
struct ForwardData {
    /// Positions at every time node (N_t+1 slices).
    qs: Vec<Vec<Point3<f64>>>,
    /// Velocities at vertices per step.
    vs: Vec<Vec<Vector3<f64>>>,
    /// Unit vertex normals per step.
    normals: Vec<Vec<Vector3<f64>>>,
    /// Magnitudes of the raw (area-weighted) normal sums per step.
    raw_mags: Vec<Vec<f64>>,
    /// Constraint residuals per step.
    residuals: Vec<Vec<f64>>,
    /// αᵀKα per step (unscaled by Δt).
    kinetic: Vec<f64>,
    /// Surface integral Σ_f area_f·|Dv(c_f)|²_F per step (unscaled by λ_h).
    hybrid: Vec<f64>,
    /// Minimum face area across all time nodes.
    min_face_area: f64,
    /// max_k |Δt·v_i(q_k)| across all steps.
    max_step_displacement: f64,
    /// Fraction of (step, vertex) samples with νᵀv < 0.
    misoriented_fraction: f64,
}

impl ForwardData {
    fn max_residual(&self) -> f64 {
        self.residuals
            .iter()
            .flatten()
            .fold(0.0_f64, |m, &c| m.max(c.abs()))
    }
}

impl<'a> Evaluator<'a> {
    fn from_state(
        config: &'a RegistrationConfig,
        state: &FlowState,
        target: &'a TriMesh,
    ) -> Result<Self> {
        config.validate()?;
        state.validate_shapes()?;
        if state.n_steps() != config.n_t {
            return Err(Error::Config(format!(
                "state has {} steps but config.n_t = {}",
                state.n_steps(),
                config.n_t
            )));
        }
        let inner0 = state.mesh_at(0);
        let gamma = resolve_gamma_d(config, &inner0, target)?;
        Ok(Evaluator {
            config,
            q0: state.positions[0].clone(),
            faces: state.faces.clone(),
            target,
            gamma,
            dt: config.dt(),
        })
    }

    fn new(
        config: &'a RegistrationConfig,
        inner: &TriMesh,
        target: &'a TriMesh,
        gamma: f64,
    ) -> Self {
        Evaluator {
            config,
            q0: inner.vertices.clone(),
            faces: inner.faces.clone(),
            target,
            gamma,
            dt: config.dt(),
        }
    }

    fn mesh_with(&self, vertices: Vec<Point3<f64>>) -> TriMesh {
        TriMesh {
            vertices,
            faces: self.faces.clone(),
            vertex_scalars: Default::default(),
            vertex_vectors: Default::default(),
            face_scalars: Default::default(),
        }
    }

    /// Integrates the flow and gathers per-step geometry, velocities and
    /// residuals. Fails on degenerate evolving faces, identifying the step.
    fn forward(&self, momenta: &[Vec<Vector3<f64>>]) -> Result<ForwardData> {
        let nt = momenta.len();
        let kernel = &self.config.kernel;
        let mut qs = Vec::with_capacity(nt + 1);
        qs.push(self.q0.clone());
        let mut vs = Vec::with_capacity(nt);
        let mut normals = Vec::with_capacity(nt);
        let mut raw_mags = Vec::with_capacity(nt);
        let mut residuals = Vec::with_capacity(nt);
        let mut kinetic = Vec::with_capacity(nt);
        let mut hybrid = Vec::with_capacity(nt);
        let mut min_face_area = f64::INFINITY;
        let mut max_step_displacement = 0.0_f64;
        let mut misoriented = 0usize;

        for i in 0..nt {
            let q = &qs[i];
            let mesh = self.mesh_with(q.clone());
            let fg = mesh.face_geometry().map_err(|e| at_step(e, i))?;
            min_face_area = fg.areas.iter().fold(min_face_area, |m, &a| m.min(a));

            let v = kernel.velocities_at(q, &momenta[i], q);
            for vk in &v {
                max_step_displacement = max_step_displacement.max(self.dt * vk.norm());
            }
            kinetic.push(
                momenta[i]
                    .iter()
                    .zip(&v)
                    .map(|(a, vk)| a.dot(vk))
                    .sum::<f64>(),
            );
            if self.config.lambda_h > 0.0 {
                let face_terms: Vec<f64> = fg
                    .centroids
                    .par_iter()
                    .zip(fg.areas.par_iter())
                    .map(|(c, &area)| {
                        let jac = kernel.eval_velocity_jacobian(q, &momenta[i], c);
                        area * jac.norm_squared()
                    })
                    .collect();
                hybrid.push(face_terms.iter().sum());
            } else {
                hybrid.push(0.0);
            }

            // area-weighted vertex normals of the evolving surface
            let raw = mesh.vertex_normal_sums();
            let mut nus = Vec::with_capacity(raw.len());
            let mut mags = Vec::with_capacity(raw.len());
            for (k, s) in raw.iter().enumerate() {
                let m = s.norm();
                if !(m > 1e-150) {
                    return Err(Error::NonFinite(format!(
                        "vertex normal vanished at vertex {k}, time step {i}"
                    )));
                }
                nus.push(s / m);
                mags.push(m);
            }
            misoriented += nus
                .iter()
                .zip(&v)
                .filter(|(nu, vk)| nu.dot(vk) < 0.0)
                .count();
            residuals.push(residuals_from(self.config.constraint_form, &nus, &v));
            normals.push(nus);
            raw_mags.push(mags);

            let next: Vec<Point3<f64>> = q.iter().zip(&v).map(|(p, vk)| p + self.dt * vk).collect();
            if next
                .iter()
                .any(|p| !p.coords.iter().all(|c| c.is_finite()))
            {
                return Err(Error::NonFinite(format!(
                    "vertex position after Euler step {i}"
                )));
            }
            vs.push(v);
            qs.push(next);
        }
        // endpoint geometry check (attachment differentiates through it)
        let end_mesh = self.mesh_with(qs[nt].clone());
        let end_fg = end_mesh.face_geometry().map_err(|e| at_step(e, nt))?;
        min_face_area = end_fg.areas.iter().fold(min_face_area, |m, &a| m.min(a));

        let samples = nt * self.q0.len();
        Ok(ForwardData {
            qs,
            vs,
            normals,
            raw_mags,
            residuals,
            kinetic,
            hybrid,
            min_face_area,
            max_step_displacement,
            misoriented_fraction: if samples > 0 {
                misoriented as f64 / samples as f64
            } else {
                0.0
            },
        })
    }

    /// Objective value and (optionally) the exact momentum gradient.
    fn evaluate(
        &self,
        momenta: &[Vec<Vector3<f64>>],
        multipliers: &[Vec<f64>],
        mu: f64,
        want_grad: bool,
    ) -> Result<(ObjectiveBreakdown, Option<Vec<Vec<Vector3<f64>>>>)> {
        let nt = momenta.len();
        let n = self.q0.len();
        let fwd = self.forward(momenta)?;

        let kinetic: f64 = (0..nt)
            .map(|i| self.dt * (fwd.kinetic[i] + self.config.lambda_h * fwd.hybrid[i]))
            .sum();
        let al_term: f64 = (0..nt)
            .map(|i| {
                fwd.residuals[i]
                    .iter()
                    .zip(&multipliers[i])
                    .map(|(&c, &lam)| -lam * c + 0.5 * mu * c * c)
                    .sum::<f64>()
            })
            .sum();
        let end_mesh = self.mesh_with(fwd.qs[nt].clone());
        let attachment_e = self.gamma
            * attachment::varifold_energy(&self.config.varifold, &end_mesh, self.target)
                .map_err(|e| at_step(e, nt))?;
        let total = kinetic + attachment_e + al_term;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective (kinetic {kinetic}, attachment {attachment_e}, AL {al_term})"
            )));
        }
        let breakdown = ObjectiveBreakdown {
            total,
            kinetic,
            attachment: attachment_e,
            augmented_lagrangian: al_term,
            max_residual: fwd.max_residual(),
        };
        if !want_grad {
            return Ok((breakdown, None));
        }

        // Reverse sweep. p carries ∂F/∂q_{i+1} accumulated from later terms.
        let kernel = &self.config.kernel;
        let mut grad = vec![vec![Vector3::zeros(); n]; nt];
        let mut p: Vec<Vector3<f64>> = attachment::varifold_gradient(
            &self.config.varifold,
            &end_mesh,
            self.target,
        )
        .map_err(|e| at_step(e, nt))?
        .into_iter()
        .map(|g| self.gamma * g)
        .collect();

        for i in (0..nt).rev() {
            let q = &fwd.qs[i];
            let v = &fwd.vs[i];
            let alpha = &momenta[i];
            let nus = &fwd.normals[i];
            let mags = &fwd.raw_mags[i];

            // dAL/dc per sample, then cotangents on v and ν
            let mut gv = vec![Vector3::zeros(); n];
            let mut gnu = vec![Vector3::zeros(); n];
            for k in 0..n {
                let tau = -multipliers[i][k] + mu * fwd.residuals[i][k];
                match self.config.constraint_form {
                    ConstraintForm::SmoothQuadratic => {
                        let nv = nus[k].dot(&v[k]);
                        gv[k] = tau * 2.0 * (v[k] - nv * nus[k]);
                        gnu[k] = -tau * 2.0 * nv * v[k];
                    }
                    ConstraintForm::Oriented => {
                        let speed =
                            (v[k].norm_squared() + CONSTRAINT_EPSILON * CONSTRAINT_EPSILON).sqrt();
                        gv[k] = tau * (v[k] / speed - nus[k]);
                        gnu[k] = -tau * v[k];
                    }
                }
            }

            // q-gradient at this step
            let mut gq = vec![Vector3::zeros(); n];
            // normals: ν = ñ/|ñ| with ñ the sum of incident raw face normals
            let cot_raw: Vec<Vector3<f64>> = (0..n)
                .map(|k| {
                    let g = gnu[k];
                    (g - nus[k] * nus[k].dot(&g)) / mags[k]
                })
                .collect();
            scatter_raw_normal_cotangents(q, &self.faces, &cot_raw, &mut gq);

            // kinetic + constraint-velocity + transport, fused via
            // bilinearity of ∇_q[bᵀK(q)a] in b
            let w: Vec<Vector3<f64>> = (0..n)
                .map(|k| self.dt * alpha[k] + gv[k] + self.dt * p[k])
                .collect();
            let dq = grad_q_bilinear(kernel, q, alpha, &w);
            for k in 0..n {
                gq[k] += dq[k];
            }

            // hybrid surface term
            if self.config.lambda_h > 0.0 {
                let mesh = self.mesh_with(q.clone());
                let (h_da, h_dq) =
                    hybrid_surface_grad(kernel, &mesh, alpha).map_err(|e| at_step(e, i))?;
                let scale = self.dt * self.config.lambda_h;
                for k in 0..n {
                    grad[i][k] += scale * h_da[k];
                    gq[k] += scale * h_dq[k];
                }
            }

            // momentum gradient: 2Δt·v + K(gv + Δt·p)
            let kw: Vec<Vector3<f64>> = {
                let combined: Vec<Vector3<f64>> =
                    (0..n).map(|k| gv[k] + self.dt * p[k]).collect();
                kernel.velocities_at(q, &combined, q)
            };
            for k in 0..n {
                grad[i][k] += 2.0 * self.dt * v[k] + kw[k];
            }

            // adjoint update p ← p + ∂(step terms)/∂q_i
            for k in 0..n {
                p[k] += gq[k];
            }
        }
        Ok((breakdown, Some(grad)))
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::DegenerateFace { face, step: None } => Error::DegenerateFace {
            face,
            step: Some(step),
        },
        other => other,
    }
}

/// ∇_{q_m} Σ_{k,l} k(q_k, q_l)·(b_k·a_l), the position gradient of the
/// bilinear kernel pairing bᵀK(q)a (both argument fields held fixed).
fn grad_q_bilinear(
    spec: &KernelSpec,
    q: &[Point3<f64>],
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    (0..q.len())
        .into_par_iter()
        .map(|m| {
            let mut acc = Vector3::zeros();
            for l in 0..q.len() {
                let diff = q[m] - q[l];
                let d2 = diff.norm_squared();
                let mut coeff = 0.0;
                for &(s, wgt) in &spec.scales {
                    coeff += wgt * (-d2 / (2.0 * s * s)).exp() / (s * s);
                }
                acc -= coeff * (b[m].dot(&a[l]) + a[m].dot(&b[l])) * diff;
            }
            acc
        })
        .collect()
}

/// Adds ∂(Σ_f G_f·U_f)/∂vertices where G_f = ½(b−a)×(c−a) is the raw face
/// normal and U_f the sum of the given per-vertex cotangents over the
/// face's corners.
fn scatter_raw_normal_cotangents(
    vertices: &[Point3<f64>],
    faces: &[[usize; 3]],
    vertex_cotangents: &[Vector3<f64>],
    out: &mut [Vector3<f64>],
) {
    for f in faces {
        let u = vertex_cotangents[f[0]] + vertex_cotangents[f[1]] + vertex_cotangents[f[2]];
        let e1 = vertices[f[1]] - vertices[f[0]];
        let e2 = vertices[f[2]] - vertices[f[0]];
        let gb = 0.5 * e2.cross(&u);
        let gc = 0.5 * u.cross(&e1);
        out[f[0]] -= gb + gc;
        out[f[1]] += gb;
        out[f[2]] += gc;
    }
}

/// Gradient of the hybrid surface term T = Σ_f area_f·|Dv(c_f)|²_F with
/// respect to momenta and vertex positions. Dv is the exact kernel velocity
/// Jacobian; positions enter through kernel sources, centroids and areas.
fn hybrid_surface_grad(
    spec: &KernelSpec,
    mesh: &TriMesh,
    momenta: &[Vector3<f64>],
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let n = mesh.n_vertices();
    let q = &mesh.vertices;
    let fg = mesh.face_geometry()?;
    let nf = mesh.faces.len();

    // per-face Jacobians and their doubled area-weighted cotangents
    let jacs: Vec<Matrix3<f64>> = fg
        .centroids
        .par_iter()
        .map(|c| spec.eval_velocity_jacobian(q, momenta, c))
        .collect();
    let ys: Vec<Matrix3<f64>> = jacs
        .iter()
        .zip(&fg.areas)
        .map(|(m, &a)| 2.0 * a * m)
        .collect();

    // kernel radial coefficients: β = Σ w·g/σ², β2 = Σ w·g/σ⁴
    let betas = |x: &Point3<f64>, y: &Point3<f64>| -> (f64, f64) {
        let d2 = (x - y).norm_squared();
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &(s, w) in &spec.scales {
            let g = w * (-d2 / (2.0 * s * s)).exp();
            b1 += g / (s * s);
            b2 += g / (s * s * s * s);
        }
        (b1, b2)
    };

    // source-side parts, parallel over momenta carriers
    let d_alpha: Vec<Vector3<f64>> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut acc = Vector3::zeros();
            for f in 0..nf {
                let d = fg.centroids[f] - q[l];
                let (b1, _) = betas(&fg.centroids[f], &q[l]);
                acc -= b1 * (ys[f] * d);
            }
            acc
        })
        .collect();
    let mut d_q: Vec<Vector3<f64>> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut acc = Vector3::zeros();
            for f in 0..nf {
                let d = fg.centroids[f] - q[l];
                let (b1, b2) = betas(&fg.centroids[f], &q[l]);
                let ayd = momenta[l].dot(&(ys[f] * d));
                acc += b1 * (ys[f].transpose() * momenta[l]) - b2 * ayd * d;
            }
            acc
        })
        .collect();

    // evaluation-point (centroid) and area parts, scattered face by face
    let gx: Vec<Vector3<f64>> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let mut acc = Vector3::zeros();
            for l in 0..n {
                let d = fg.centroids[f] - q[l];
                let (b1, b2) = betas(&fg.centroids[f], &q[l]);
                let ayd = momenta[l].dot(&(ys[f] * d));
                acc += b2 * ayd * d - b1 * (ys[f].transpose() * momenta[l]);
            }
            acc
        })
        .collect();
    for (fi, f) in mesh.faces.iter().enumerate() {
        let third = gx[fi] / 3.0;
        d_q[f[0]] += third;
        d_q[f[1]] += third;
        d_q[f[2]] += third;
        // area derivative: cotangent |Dv|²·n̂ on the raw face normal
        let u = jacs[fi].norm_squared() * fg.normals[fi];
        let e1 = q[f[1]] - q[f[0]];
        let e2 = q[f[2]] - q[f[0]];
        let gb = 0.5 * e2.cross(&u);
        let gc = 0.5 * u.cross(&e1);
        d_q[f[0]] -= gb + gc;
        d_q[f[1]] += gb;
        d_q[f[2]] += gc;
    }
    Ok((d_alpha, d_q))
}

// ---------------------------------------------------------------------------
// L-BFGS with strong Wolfe line search

// carries the full solve diagnostics; not every field has a consumer
#[allow(dead_code)]
struct LbfgsOutcome {
    x: Vec<f64>,
    f: f64,
    grad_inf: f64,
    iterations: usize,
    /// Objective after every accepted step, for monotonicity checks.
    accepted: Vec<f64>,
    grad_converged: bool,
}

/// Minimizes via two-loop L-BFGS. The callback returns `Ok(None)` for
/// infeasible trial points (non-finite objective, degenerate geometry), which
/// the line search treats as +∞; an infeasible *accepted* iterate is a hard
/// error upstream.
fn lbfgs<F>(
    mut eval: F,
    x0: Vec<f64>,
    memory: usize,
    max_iterations: usize,
    tol_g: f64,
    c1: f64,
    c2: f64,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<Option<(f64, Vec<f64>)>>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = match eval(&x)? {
        Some(fg) => fg,
        None => {
            return Err(Error::NonFinite(
                "objective at the initial iterate".into(),
            ))
        }
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut accepted = Vec::new();
    let mut iterations = 0;
    let mut stagnant = 0;
    let mut grad_converged = inf_norm(&g) <= tol_g;

    while !grad_converged && iterations < max_iterations {
        // two-loop recursion for d = −H·g
        let mut d: Vec<f64> = g.iter().map(|&v| -v).collect();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for j in (0..m).rev() {
            let a = rho_hist[j] * dot(&s_hist[j], &d);
            alphas[j] = a;
            axpy(&mut d, -a, &y_hist[j]);
        }
        if m > 0 {
            let j = m - 1;
            let scale = dot(&s_hist[j], &y_hist[j]) / dot(&y_hist[j], &y_hist[j]);
            for v in &mut d {
                *v *= scale;
            }
        }
        for j in 0..m {
            let b = rho_hist[j] * dot(&y_hist[j], &d);
            axpy(&mut d, alphas[j] - b, &s_hist[j]);
        }
        let mut dphi0 = dot(&g, &d);
        if dphi0 >= 0.0 {
            // curvature history unusable; restart from steepest descent
            d = g.iter().map(|&v| -v).collect();
            dphi0 = dot(&g, &d);
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            if dphi0 >= 0.0 {
                break; // zero gradient
            }
        }

        match wolfe_search(&mut eval, &x, f, &g, &d, dphi0, c1, c2)? {
            Some((step, fx, gx)) => {
                let x_new: Vec<f64> = x
                    .iter()
                    .zip(&d)
                    .map(|(xi, di)| xi + step * di)
                    .collect();
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gx.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-10 * norm(&s) * norm(&y) {
                    if s_hist.len() == memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                let f_prev = f;
                x = x_new;
                f = fx;
                g = gx;
                iterations += 1;
                accepted.push(f);
                if (f_prev - f).abs() <= 1e-14 * f_prev.abs().max(f.abs()).max(1.0) {
                    stagnant += 1;
                    if stagnant >= 2 {
                        break;
                    }
                } else {
                    stagnant = 0;
                }
                grad_converged = inf_norm(&g) <= tol_g;
            }
            None => break, // line search exhausted
        }
    }
    let _ = n;
    Ok(LbfgsOutcome {
        grad_inf: inf_norm(&g),
        x,
        f,
        iterations,
        accepted,
        grad_converged,
    })
}

/// Strong-Wolfe line search (bracket then zoom). Returns the accepted step
/// with its objective and gradient, or `None` when no acceptable step exists
/// in budget.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    eval: &mut F,
    x: &[f64],
    phi0: f64,
    g0: &[f64],
    d: &[f64],
    dphi0: f64,
    c1: f64,
    c2: f64,
) -> Result<Option<(f64, f64, Vec<f64>)>>
where
    F: FnMut(&[f64]) -> Result<Option<(f64, Vec<f64>)>>,
{
    let probe = |eval: &mut F, a: f64| -> Result<Option<(f64, f64, Vec<f64>)>> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        Ok(eval(&xt)?.map(|(f, g)| {
            let dphi = dot(&g, d);
            (f, dphi, g)
        }))
    };
    let _ = g0;

    let mut a_prev = 0.0;
    let mut phi_prev = phi0;
    let mut a = 1.0;
    let mut bracket: Option<(f64, f64, f64, f64)> = None; // lo, phi_lo, hi, phi at hi (unused)
    for iter in 0..20 {
        match probe(eval, a)? {
            Some((phi, dphi, g)) => {
                if phi > phi0 + c1 * a * dphi0 || (iter > 0 && phi >= phi_prev) {
                    bracket = Some((a_prev, phi_prev, a, phi));
                    break;
                }
                if dphi.abs() <= -c2 * dphi0 {
                    return Ok(Some((a, phi, g)));
                }
                if dphi >= 0.0 {
                    bracket = Some((a, phi, a_prev, phi_prev));
                    break;
                }
                a_prev = a;
                phi_prev = phi;
                a *= 2.0;
            }
            None => {
                // infeasible: treat as +∞, bracket between last good and here
                bracket = Some((a_prev, phi_prev, a, f64::INFINITY));
                break;
            }
        }
    }
    let (mut lo, mut phi_lo, mut hi, _) = match bracket {
        Some(b) => b,
        None => return Ok(None), // 20 doublings without bracketing or Wolfe
    };
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= 1e-16 * lo.abs().max(1.0) {
            break;
        }
        match probe(eval, mid)? {
            Some((phi, dphi, g)) => {
                if phi > phi0 + c1 * mid * dphi0 || phi >= phi_lo {
                    hi = mid;
                } else {
                    if dphi.abs() <= -c2 * dphi0 {
                        return Ok(Some((mid, phi, g)));
                    }
                    if dphi * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = mid;
                    phi_lo = phi;
                    best = Some((mid, phi, g));
                }
            }
            None => hi = mid,
        }
    }
    // zoom collapsed: fall back to the best sufficient-decrease point
    Ok(best)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// ---------------------------------------------------------------------------
// outer augmented-Lagrangian loop

/// Per-outer-iteration progress record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterIterationStats {
    pub objective: f64,
    pub kinetic: f64,
    pub attachment: f64,
    pub augmented_lagrangian: f64,
    pub max_residual: f64,
    pub grad_inf_norm: f64,
    pub inner_iterations: usize,
    /// Penalty in force during this inner solve.
    pub mu: f64,
    /// Fraction of (step, vertex) samples with inward velocity (νᵀv < 0).
    pub misoriented_fraction: f64,
}

/// Solver summary, including the totals of a typical performance table:
/// vertex/face counts, total inner iterations, wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub outer_iterations: Vec<OuterIterationStats>,
    pub vertices: usize,
    pub faces: usize,
    pub total_inner_iterations: usize,
    pub wall_time_seconds: f64,
    /// Resolved attachment weight γ_D actually used.
    pub gamma_d: f64,
    /// Minimum evolving face area across all time nodes at the final state.
    pub min_face_area: f64,
    /// Largest single-step vertex displacement at the final state.
    pub max_step_displacement: f64,
    /// Mean edge length of the inner mesh, the step-sanity yardstick.
    pub mean_edge_length: f64,
    /// max_step_displacement < mean_edge_length at the final state.
    pub step_sanity_ok: bool,
    /// Bounding-box containment heuristic for "inner nested in outer"
    /// (informational only).
    pub inner_bbox_contained: bool,
}

/// Runs the full augmented-Lagrangian optimization from the zero flow.
pub fn optimize(
    config: &RegistrationConfig,
    inner: &TriMesh,
    outer: &TriMesh,
) -> Result<(FlowState, ConvergenceReport)> {
    config.validate()?;
    inner.validate()?;
    outer.validate()?;
    let started = Instant::now();
    let nt = config.n_t;
    let n = inner.n_vertices();
    let gamma = resolve_gamma_d(config, inner, outer)?;
    let evaluator = Evaluator::new(config, inner, outer, gamma);

    let (ilo, ihi) = inner.bounding_box();
    let (olo, ohi) = outer.bounding_box();
    let inner_bbox_contained =
        (0..3).all(|d| ilo[d] >= olo[d] - 1e-12 && ihi[d] <= ohi[d] + 1e-12);

    let mut x = vec![0.0; nt * n * 3];
    let mut multipliers = vec![vec![0.0; n]; nt];
    let mut mu = config.al.mu0;
    let mut outer_stats = Vec::new();
    let mut total_inner = 0;
    let mut prev_maxc = f64::INFINITY;
    let mut converged = false;

    for _outer in 0..config.max_outer {
        let x_before = x.clone();
        let mults = multipliers.clone();
        let outcome = lbfgs(
            |xs: &[f64]| {
                let momenta = unflatten(xs, nt, n);
                match evaluator.evaluate(&momenta, &mults, mu, true) {
                    Ok((b, g)) => Ok(Some((b.total, flatten(&g.expect("gradient"))))),
                    // treat geometric blow-ups at probe points as +∞
                    Err(Error::NonFinite(_)) | Err(Error::DegenerateFace { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            },
            x,
            config.inner.memory,
            config.inner.max_iterations,
            config.tol_g,
            config.inner.wolfe_c1,
            config.inner.wolfe_c2,
        )?;
        x = outcome.x;
        total_inner += outcome.iterations;

        // residuals and diagnostics at the inner solution
        let momenta = unflatten(&x, nt, n);
        let fwd = evaluator.forward(&momenta)?;
        let (breakdown, _) = evaluator.evaluate(&momenta, &multipliers, mu, false)?;
        let maxc = fwd.max_residual();
        outer_stats.push(OuterIterationStats {
            objective: breakdown.total,
            kinetic: breakdown.kinetic,
            attachment: breakdown.attachment,
            augmented_lagrangian: breakdown.augmented_lagrangian,
            max_residual: maxc,
            grad_inf_norm: outcome.grad_inf,
            inner_iterations: outcome.iterations,
            mu,
            misoriented_fraction: fwd.misoriented_fraction,
        });

        if maxc < config.tol_c && outcome.grad_inf < config.tol_g {
            converged = true;
            break;
        }
        // Once the constraint is satisfied, further outers can only refine the
        // multipliers; if the inner solve no longer moves the momenta, stop —
        // continuing would just rescale the Lagrangian terms without changing
        // the flow.
        let dx: f64 = x
            .iter()
            .zip(&x_before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let xnorm: f64 = x_before.iter().map(|v| v * v).sum::<f64>().sqrt();
        let stagnant = outcome.iterations == 0 || dx <= 1e-8 * xnorm.max(1.0);
        if maxc < config.tol_c && stagnant {
            break;
        }
        // first-order multiplier update
        for i in 0..nt {
            for k in 0..n {
                multipliers[i][k] -= mu * fwd.residuals[i][k];
            }
        }
        // Grow the penalty only while the constraint is still violated and the
        // residual is not shrinking fast enough; growing it after the residual
        // has met its tolerance inflates the objective for no benefit.
        if maxc >= config.tol_c && maxc > config.al.decrease_ratio * prev_maxc {
            mu *= config.al.growth;
        }
        prev_maxc = maxc;
    }

    let momenta = unflatten(&x, nt, n);
    let fwd = evaluator.forward(&momenta)?;
    let mean_edge = inner.mean_edge_length();
    let report = ConvergenceReport {
        converged,
        outer_iterations: outer_stats,
        vertices: n,
        faces: inner.n_faces(),
        total_inner_iterations: total_inner,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        gamma_d: gamma,
        min_face_area: fwd.min_face_area,
        max_step_displacement: fwd.max_step_displacement,
        mean_edge_length: mean_edge,
        step_sanity_ok: fwd.max_step_displacement < mean_edge,
        inner_bbox_contained,
    };
    let state = FlowState {
        times: (0..=nt).map(|i| i as f64 / nt as f64).collect(),
        positions: fwd.qs,
        momenta,
        multipliers,
        mu,
        faces: inner.faces.clone(),
    };
    Ok((state, report))
}

fn flatten(momenta: &[Vec<Vector3<f64>>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(momenta.len() * momenta.first().map_or(0, Vec::len) * 3);
    for slice in momenta {
        for v in slice {
            out.extend_from_slice(&[v.x, v.y, v.z]);
        }
    }
    out
}

fn unflatten(x: &[f64], nt: usize, n: usize) -> Vec<Vec<Vector3<f64>>> {
    debug_assert_eq!(x.len(), nt * n * 3);
    (0..nt)
        .map(|i| {
            (0..n)
                .map(|k| {
                    let o = (i * n + k) * 3;
                    Vector3::new(x[o], x[o + 1], x[o + 2])
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpointing

/// Writes config + state as one JSON document.
pub fn save_checkpoint(path: &Path, config: &RegistrationConfig, state: &FlowState) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        config: &'a RegistrationConfig,
        state: &'a FlowState,
    }
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &Doc { config, state })?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(RegistrationConfig, FlowState)> {
    #[derive(Deserialize)]
    struct Doc {
        config: RegistrationConfig,
        state: FlowState,
    }
    let file = std::fs::File::open(path)?;
    let doc: Doc = serde_json::from_reader(std::io::BufReader::new(file))?;
    doc.config.validate()?;
    Ok((doc.config, doc.state))
}
