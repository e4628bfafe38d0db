//! Varifold data attachment between triangulated surfaces.
//!
//! The bilinear form is discretized at face centroids with face areas as
//! quadrature weights:
//!
//!   D(S, S') = Σ_f Σ_g χ(c_f, c_g)·(1 + (n_f·n_g)²)·a_f·a_g
//!
//! with Gaussian χ(x,y) = exp(−|x−y|²/(2σ_W²)) and unit face normals n. The
//! attachment energy is the squared varifold norm
//! E = D(S,S) − 2D(S,S') + D(S',S'), which vanishes exactly at a perfect
//! match; its gradient with respect to the vertices of S is analytic.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::TriMesh;
use crate::{Error, Result};

/// Varifold kernel parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VarifoldSpec {
    /// Spatial kernel width σ_W (mm).
    pub sigma_w: f64,
    /// Normalize each bilinear term by the product of total surface areas
    /// (scale-free energy). Off by default.
    #[serde(default)]
    pub normalize: bool,
}

impl VarifoldSpec {
    pub fn new(sigma_w: f64) -> Self {
        VarifoldSpec {
            sigma_w,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w > 0.0) {
            return Err(Error::Config(format!(
                "varifold width must be positive, got {}",
                self.sigma_w
            )));
        }
        Ok(())
    }
}

/// Face-level quadrature data: centroids, raw (area-scaled) normals, areas.
struct FaceData {
    centroids: Vec<Point3<f64>>,
    /// G_f = area_f · n̂_f (half the edge cross product).
    raw_normals: Vec<Vector3<f64>>,
    areas: Vec<f64>,
    total_area: f64,
}

fn face_data(mesh: &TriMesh) -> Result<FaceData> {
    let fg = mesh.face_geometry()?;
    let raw_normals: Vec<Vector3<f64>> = fg
        .normals
        .iter()
        .zip(&fg.areas)
        .map(|(n, &a)| n * a)
        .collect();
    let total_area = fg.areas.iter().sum();
    Ok(FaceData {
        centroids: fg.centroids,
        raw_normals,
        areas: fg.areas,
        total_area,
    })
}

/// One term of the double sum, written in terms of centroids and raw
/// normals: χ·(t_f·t_g + s²/(t_f·t_g)) with s = G_f·G_g, t = |G|.
#[inline]
fn pair_term(
    cf: &Point3<f64>,
    gf: &Vector3<f64>,
    af: f64,
    cg: &Point3<f64>,
    gg: &Vector3<f64>,
    ag: f64,
    inv_two_sw2: f64,
) -> f64 {
    let chi = (-(cf - cg).norm_squared() * inv_two_sw2).exp();
    let s = gf.dot(gg);
    chi * (af * ag + s * s / (af * ag))
}

fn bilinear_raw(a: &FaceData, b: &FaceData, sigma_w: f64) -> f64 {
    let inv_two_sw2 = 1.0 / (2.0 * sigma_w * sigma_w);
    let rows: Vec<f64> = (0..a.areas.len())
        .into_par_iter()
        .map(|f| {
            let mut acc = 0.0;
            for g in 0..b.areas.len() {
                acc += pair_term(
                    &a.centroids[f],
                    &a.raw_normals[f],
                    a.areas[f],
                    &b.centroids[g],
                    &b.raw_normals[g],
                    b.areas[g],
                    inv_two_sw2,
                );
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

/// Orders two meshes canonically so that `varifold_bilinear(S, S')` and
/// `varifold_bilinear(S', S)` run the identical summation and return
/// bit-identical values.
fn canonical_order<'a>(s: &'a TriMesh, t: &'a TriMesh) -> (&'a TriMesh, &'a TriMesh) {
    let key = |m: &TriMesh| (m.faces.len(), m.vertices.len());
    match key(s).cmp(&key(t)) {
        std::cmp::Ordering::Less => (s, t),
        std::cmp::Ordering::Greater => (t, s),
        std::cmp::Ordering::Equal => {
            // tie-break on raw coordinate bits, then topology
            let coords = |m: &TriMesh| {
                m.vertices
                    .iter()
                    .flat_map(|p| p.coords.iter().map(|c| c.to_bits()).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            if coords(s) <= coords(t) {
                (s, t)
            } else {
                (t, s)
            }
        }
    }
}

/// The varifold bilinear form D(S, S'). Symmetric in its arguments, exactly:
/// the summation order is canonicalized so swapped calls are bit-identical.
pub fn varifold_bilinear(spec: &VarifoldSpec, s: &TriMesh, t: &TriMesh) -> Result<f64> {
    spec.validate()?;
    let (first, second) = canonical_order(s, t);
    let fa = face_data(first)?;
    let fb = face_data(second)?;
    let mut d = bilinear_raw(&fa, &fb, spec.sigma_w);
    if spec.normalize {
        d /= fa.total_area * fb.total_area;
    }
    Ok(d)
}

/// Attachment energy E = D(S,S) − 2·D(S,S') + D(S',S'). Non-negative up to
/// round-off; exactly zero for S = S'.
pub fn varifold_energy(spec: &VarifoldSpec, s: &TriMesh, t: &TriMesh) -> Result<f64> {
    spec.validate()?;
    let fs = face_data(s)?;
    let ft = face_data(t)?;
    Ok(energy_from_data(spec, &fs, &ft))
}

fn energy_from_data(spec: &VarifoldSpec, fs: &FaceData, ft: &FaceData) -> f64 {
    let dss = bilinear_raw(fs, fs, spec.sigma_w);
    let dst = bilinear_raw(fs, ft, spec.sigma_w);
    let dtt = bilinear_raw(ft, ft, spec.sigma_w);
    if spec.normalize {
        dss / (fs.total_area * fs.total_area) - 2.0 * dst / (fs.total_area * ft.total_area)
            + dtt / (ft.total_area * ft.total_area)
    } else {
        dss - 2.0 * dst + dtt
    }
}

/// Per-face gradient of Σ_g ρ(f, g) with respect to (c_f, G_f), holding the
/// second mesh fixed.
fn grad1_rows(a: &FaceData, b: &FaceData, sigma_w: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let inv_sw2 = 1.0 / (sigma_w * sigma_w);
    let inv_two_sw2 = 0.5 * inv_sw2;
    (0..a.areas.len())
        .into_par_iter()
        .map(|f| {
            let cf = a.centroids[f];
            let gf = a.raw_normals[f];
            let tf = a.areas[f];
            let mut gc = Vector3::zeros();
            let mut gg = Vector3::zeros();
            for g in 0..b.areas.len() {
                let cg = b.centroids[g];
                let ggv = b.raw_normals[g];
                let tg = b.areas[g];
                let diff = cf - cg;
                let chi = (-diff.norm_squared() * inv_two_sw2).exp();
                let s = gf.dot(&ggv);
                let val = tf * tg + s * s / (tf * tg);
                // ∂χ/∂c_f = −χ·(c_f−c_g)/σ_W²
                gc -= (chi * val * inv_sw2) * diff;
                // ∂val/∂G_f = (t_g/t_f − s²/(t_f³ t_g))·G_f + (2s/(t_f t_g))·G_g
                gg += chi * ((tg / tf - s * s / (tf * tf * tf * tg)) * gf + (2.0 * s / (tf * tg)) * ggv);
            }
            (gc, gg)
        })
        .collect()
}

/// Scatters per-face cotangents onto vertices: the centroid part spreads
/// one third to each corner, the raw-normal part follows the cross-product
/// derivative of G = ½(b−a)×(c−a).
fn scatter_face_gradients(
    mesh: &TriMesh,
    rows: &[(Vector3<f64>, Vector3<f64>)],
    scale: f64,
    out: &mut [Vector3<f64>],
) {
    for (f, (gc, gg)) in mesh.faces.iter().zip(rows) {
        let (pa, pb, pc) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        let third = scale / 3.0 * gc;
        out[f[0]] += third;
        out[f[1]] += third;
        out[f[2]] += third;
        let e1 = pb - pa;
        let e2 = pc - pa;
        let u = scale * gg;
        // ∂(G·u)/∂b = ½ e2×u, ∂(G·u)/∂c = ½ u×e1, ∂(G·u)/∂a = −(both)
        let gb = 0.5 * e2.cross(&u);
        let gcv = 0.5 * u.cross(&e1);
        out[f[0]] -= gb + gcv;
        out[f[1]] += gb;
        out[f[2]] += gcv;
    }
}

/// Gradient of the total face area with respect to vertices (used by the
/// normalized energy's quotient rule).
fn total_area_gradient(mesh: &TriMesh, fd: &FaceData) -> Vec<Vector3<f64>> {
    let rows: Vec<(Vector3<f64>, Vector3<f64>)> = fd
        .raw_normals
        .iter()
        .zip(&fd.areas)
        .map(|(g, &a)| (Vector3::zeros(), g / a))
        .collect();
    let mut out = vec![Vector3::zeros(); mesh.vertices.len()];
    scatter_face_gradients(mesh, &rows, 1.0, &mut out);
    out
}

/// Gradient of [`varifold_energy`] with respect to the vertices of `s`.
pub fn varifold_gradient(
    spec: &VarifoldSpec,
    s: &TriMesh,
    t: &TriMesh,
) -> Result<Vec<Vector3<f64>>> {
    spec.validate()?;
    let fs = face_data(s)?;
    let ft = face_data(t)?;
    let rows_ss = grad1_rows(&fs, &fs, spec.sigma_w);
    let rows_st = grad1_rows(&fs, &ft, spec.sigma_w);
    let mut grad = vec![Vector3::zeros(); s.vertices.len()];
    if !spec.normalize {
        // E = D(S,S) − 2D(S,S') + const; by symmetry d[D(S,S)] = 2·grad1.
        scatter_face_gradients(s, &rows_ss, 2.0, &mut grad);
        scatter_face_gradients(s, &rows_st, -2.0, &mut grad);
    } else {
        let dss = bilinear_raw(&fs, &fs, spec.sigma_w);
        let dst = bilinear_raw(&fs, &ft, spec.sigma_w);
        let (a_s, a_t) = (fs.total_area, ft.total_area);
        // E = Dss/As² − 2Dst/(As·At) + Dtt/At²
        scatter_face_gradients(s, &rows_ss, 2.0 / (a_s * a_s), &mut grad);
        scatter_face_gradients(s, &rows_st, -2.0 / (a_s * a_t), &mut grad);
        let ga = total_area_gradient(s, &fs);
        let coeff = -2.0 * dss / (a_s * a_s * a_s) + 2.0 * dst / (a_s * a_s * a_t);
        for (g, g_area) in grad.iter_mut().zip(&ga) {
            *g += coeff * g_area;
        }
    }
    Ok(grad)
}
