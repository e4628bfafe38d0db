//! Synthetic nested-surface fixtures with analytic oracles.
//!
//! Every generator is deterministic: the same spec (including seed) produces
//! bit-identical meshes. Where closed forms exist, the fixture also provides
//! oracle values — exact thickness, equivolumetric layer radii, harmonic
//! interpolant values, mean curvature — used by tests as ground truth.

use std::collections::HashMap;

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::mesh::TriMesh;
use crate::{Error, Result};

/// A synthetic inner/outer surface pair.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub inner: TriMesh,
    pub outer: TriMesh,
    /// Named constants and closed-form identifiers for downstream checks.
    pub oracle: serde_json::Value,
}

/// Parameters of a synthetic fixture.
///
/// Serialized with a `kind` tag (`sphere-pair`, `cylinder-pair`, `sheet-pair`,
/// `folded-sheet-pair`, `flower-tube-pair`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FixtureSpec {
    /// Concentric icospheres of radii `a < b`.
    SpherePair {
        a: f64,
        b: f64,
        #[serde(default = "default_subdivision")]
        subdivision: u32,
        /// Seeds a random rotation of the base icosahedron, giving
        /// independent triangulations of the same geometry.
        #[serde(default)]
        seed: u64,
    },
    /// Coaxial open tubes of radii `a < b` along z.
    CylinderPair {
        a: f64,
        b: f64,
        #[serde(default = "default_length")]
        length: f64,
        #[serde(default = "default_around")]
        radial_segments: usize,
        #[serde(default = "default_along")]
        axial_segments: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Parallel planar sheets z = 0 and z = separation.
    SheetPair {
        separation: f64,
        #[serde(default = "default_extent")]
        extent: f64,
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Sinusoidally folded sheet z = A·sin(2πx/L) and its normal offset.
    FoldedSheetPair {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_wavelength")]
        wavelength: f64,
        #[serde(default = "default_fold_separation")]
        separation: f64,
        #[serde(default = "default_extent")]
        extent: f64,
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Inner circular tube inside an outer "flower" tube
    /// r(θ) = r0 + amplitude·cos(petals·θ), both extruded along z.
    FlowerTubePair {
        a: f64,
        r0: f64,
        #[serde(default = "default_petal_amplitude")]
        amplitude: f64,
        #[serde(default = "default_petals")]
        petals: u32,
        #[serde(default = "default_length")]
        length: f64,
        #[serde(default = "default_around")]
        radial_segments: usize,
        #[serde(default = "default_along")]
        axial_segments: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_subdivision() -> u32 {
    3
}
fn default_length() -> f64 {
    4.0
}
fn default_around() -> usize {
    48
}
fn default_along() -> usize {
    24
}
fn default_extent() -> f64 {
    2.0
}
fn default_resolution() -> usize {
    24
}
fn default_amplitude() -> f64 {
    0.5
}
fn default_wavelength() -> f64 {
    2.0
}
fn default_fold_separation() -> f64 {
    0.3
}
fn default_petal_amplitude() -> f64 {
    0.3
}
fn default_petals() -> u32 {
    5
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match *self {
            FixtureSpec::SpherePair { a, b, subdivision, .. } => {
                if !(a > 0.0 && b > a) {
                    return fail(format!("sphere pair needs 0 < a < b, got a={a}, b={b}"));
                }
                if subdivision > 7 {
                    return fail(format!("sphere subdivision {subdivision} too deep (max 7)"));
                }
            }
            FixtureSpec::CylinderPair { a, b, length, radial_segments, axial_segments, .. } => {
                if !(a > 0.0 && b > a) {
                    return fail(format!("cylinder pair needs 0 < a < b, got a={a}, b={b}"));
                }
                if !(length > 0.0) || radial_segments < 3 || axial_segments < 1 {
                    return fail("cylinder pair needs positive length, >=3 radial and >=1 axial segments".into());
                }
            }
            FixtureSpec::SheetPair { separation, extent, resolution, .. } => {
                if !(separation > 0.0 && extent > 0.0) || resolution < 1 {
                    return fail("sheet pair needs positive separation, extent and resolution".into());
                }
            }
            FixtureSpec::FoldedSheetPair { amplitude, wavelength, separation, extent, resolution, .. } => {
                if !(amplitude >= 0.0 && wavelength > 0.0 && separation > 0.0 && extent > 0.0)
                    || resolution < 1
                {
                    return fail("folded sheet pair has a non-positive parameter".into());
                }
            }
            FixtureSpec::FlowerTubePair { a, r0, amplitude, petals, length, radial_segments, axial_segments, .. } => {
                if !(a > 0.0 && r0 - amplitude.abs() > a) {
                    return fail(format!(
                        "flower tube needs min outer radius r0-|A| = {} above inner radius a = {a}",
                        r0 - amplitude.abs()
                    ));
                }
                if petals == 0 || !(length > 0.0) || radial_segments < 3 || axial_segments < 1 {
                    return fail("flower tube needs >=1 petal, positive length, >=3 radial and >=1 axial segments".into());
                }
            }
        }
        Ok(())
    }

    /// Exact thickness of the laminar region at `point` (on the inner
    /// surface), where a closed form exists.
    pub fn oracle_thickness(&self, _point: &Point3<f64>) -> Option<f64> {
        match *self {
            FixtureSpec::SpherePair { a, b, .. } | FixtureSpec::CylinderPair { a, b, .. } => {
                Some(b - a)
            }
            FixtureSpec::SheetPair { separation, .. } => Some(separation),
            FixtureSpec::FoldedSheetPair { .. } | FixtureSpec::FlowerTubePair { .. } => None,
        }
    }

    /// Exact radius of the equivolumetric layer at volume fraction ε.
    pub fn oracle_layer_radius(&self, eps: f64) -> Option<f64> {
        match *self {
            // equal enclosed volume between concentric spheres
            FixtureSpec::SpherePair { a, b, .. } => {
                Some((a.powi(3) + eps * (b.powi(3) - a.powi(3))).cbrt())
            }
            // equal cross-section area between coaxial cylinders
            FixtureSpec::CylinderPair { a, b, .. } => {
                Some((a * a + eps * (b * b - a * a)).sqrt())
            }
            // uniform slab: layers are evenly spaced in z
            FixtureSpec::SheetPair { separation, .. } => Some(eps * separation),
            _ => None,
        }
    }

    /// Exact harmonic interpolant (0 on inner, 1 on outer) at `point`.
    pub fn oracle_f(&self, point: &Point3<f64>) -> Option<f64> {
        match *self {
            FixtureSpec::SpherePair { a, b, .. } => {
                let r = point.coords.norm();
                Some((1.0 / a - 1.0 / r) / (1.0 / a - 1.0 / b))
            }
            FixtureSpec::CylinderPair { a, b, .. } => {
                let r = point.coords.xy().norm();
                Some((r / a).ln() / (b / a).ln())
            }
            FixtureSpec::SheetPair { separation, .. } => Some(point.z / separation),
            _ => None,
        }
    }

    /// Exact mean curvature of the sphere of radius `r` in the laminar
    /// region (outward normals): H = −1/r.
    pub fn oracle_mean_curvature(&self, r: f64) -> Option<f64> {
        match self {
            FixtureSpec::SpherePair { .. } => Some(-1.0 / r),
            _ => None,
        }
    }

    fn oracle_json(&self) -> serde_json::Value {
        match *self {
            FixtureSpec::SpherePair { a, b, .. } => json!({
                "constants": {"a": a, "b": b},
                "thickness": b - a,
                "layer_radius": "cbrt(a^3 + eps*(b^3 - a^3))",
                "harmonic_interpolant": "(1/a - 1/r) / (1/a - 1/b)",
                "mean_curvature": "-1/r",
            }),
            FixtureSpec::CylinderPair { a, b, .. } => json!({
                "constants": {"a": a, "b": b},
                "thickness": b - a,
                "layer_radius": "sqrt(a^2 + eps*(b^2 - a^2))",
                "harmonic_interpolant": "ln(r/a) / ln(b/a)",
            }),
            FixtureSpec::SheetPair { separation, .. } => json!({
                "constants": {"separation": separation},
                "thickness": separation,
                "layer_height": "eps * separation",
                "harmonic_interpolant": "z / separation",
            }),
            FixtureSpec::FoldedSheetPair { amplitude, wavelength, separation, .. } => json!({
                "constants": {"amplitude": amplitude, "wavelength": wavelength, "separation": separation},
                "note": "no closed-form thickness; use cross-method comparison",
            }),
            FixtureSpec::FlowerTubePair { a, r0, amplitude, petals, .. } => json!({
                "constants": {"a": a, "r0": r0, "amplitude": amplitude, "petals": petals},
                "outer_radius": "r0 + amplitude*cos(petals*theta)",
            }),
        }
    }
}

/// Generates the fixture, validating mesh invariants and checking that the
/// two surfaces do not intersect.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let (inner, outer) = match *spec {
        FixtureSpec::SpherePair { a, b, subdivision, seed } => {
            let rot = seeded_rotation(seed);
            (
                icosphere_oriented(subdivision, a, &rot),
                icosphere_oriented(subdivision, b, &rot),
            )
        }
        FixtureSpec::CylinderPair { a, b, length, radial_segments, axial_segments, .. } => (
            tube(radial_segments, axial_segments, length, |theta| {
                let (s, c) = theta.sin_cos();
                (a * c, a * s)
            })?,
            tube(radial_segments, axial_segments, length, |theta| {
                let (s, c) = theta.sin_cos();
                (b * c, b * s)
            })?,
        ),
        FixtureSpec::SheetPair { separation, extent, resolution, .. } => (
            sheet(extent, resolution, |_, _| 0.0)?,
            sheet(extent, resolution, |_, _| separation)?,
        ),
        FixtureSpec::FoldedSheetPair { amplitude, wavelength, separation, extent, resolution, .. } => {
            folded_sheets(amplitude, wavelength, separation, extent, resolution)?
        }
        FixtureSpec::FlowerTubePair { a, r0, amplitude, petals, length, radial_segments, axial_segments, .. } => (
            tube(radial_segments, axial_segments, length, |theta| {
                let (s, c) = theta.sin_cos();
                (a * c, a * s)
            })?,
            tube(radial_segments, axial_segments, length, |theta| {
                let r = r0 + amplitude * (petals as f64 * theta).cos();
                let (s, c) = theta.sin_cos();
                (r * c, r * s)
            })?,
        ),
    };
    if meshes_intersect(&inner, &outer) {
        return Err(Error::NonNested(
            "generated inner and outer surfaces intersect".into(),
        ));
    }
    Ok(Fixture {
        inner,
        outer,
        oracle: spec.oracle_json(),
    })
}

// ---------------------------------------------------------------------------
// primitive builders

/// Unit icosahedron (golden-ratio construction) with outward-oriented faces.
fn icosahedron() -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let verts = vec![
        Point3::new(-1.0, t, 0.0),
        Point3::new(1.0, t, 0.0),
        Point3::new(-1.0, -t, 0.0),
        Point3::new(1.0, -t, 0.0),
        Point3::new(0.0, -1.0, t),
        Point3::new(0.0, 1.0, t),
        Point3::new(0.0, -1.0, -t),
        Point3::new(0.0, 1.0, -t),
        Point3::new(t, 0.0, -1.0),
        Point3::new(t, 0.0, 1.0),
        Point3::new(-t, 0.0, -1.0),
        Point3::new(-t, 0.0, 1.0),
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (verts, faces)
}

/// Geodesic sphere: `subdivisions` rounds of midpoint subdivision of an
/// icosahedron, every vertex projected to radius `radius`.
/// Vertex count is 10·4^s + 2 (642 at s = 3, 2562 at s = 4).
pub fn icosphere(subdivisions: u32, radius: f64) -> TriMesh {
    icosphere_oriented(subdivisions, radius, &Rotation3::identity())
}

/// [`icosphere`] with the base icosahedron rotated by a seeded random
/// rotation: same geometry, independent triangulation.
pub fn icosphere_seeded(subdivisions: u32, radius: f64, seed: u64) -> TriMesh {
    icosphere_oriented(subdivisions, radius, &seeded_rotation(seed))
}

fn seeded_rotation(seed: u64) -> Rotation3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    let axis = Unit::new_normalize(Vector3::new(s * phi.cos(), s * phi.sin(), z));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Rotation3::from_axis_angle(&axis, angle)
}

fn icosphere_oriented(subdivisions: u32, radius: f64, rot: &Rotation3<f64>) -> TriMesh {
    let (mut verts, mut faces) = icosahedron();
    for v in &mut verts {
        *v = rot * *v;
    }
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mid = |cache: &mut HashMap<(usize, usize), usize>,
                       verts: &mut Vec<Point3<f64>>,
                       i: usize,
                       j: usize| {
                let key = (i.min(j), i.max(j));
                *cache.entry(key).or_insert_with(|| {
                    verts.push(Point3::from((verts[i].coords + verts[j].coords) * 0.5));
                    verts.len() - 1
                })
            };
            let ab = mid(&mut cache, &mut verts, f[0], f[1]);
            let bc = mid(&mut cache, &mut verts, f[1], f[2]);
            let ca = mid(&mut cache, &mut verts, f[2], f[0]);
            new_faces.push([f[0], ab, ca]);
            new_faces.push([f[1], bc, ab]);
            new_faces.push([f[2], ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    for v in &mut verts {
        let n = v.coords.norm();
        *v = Point3::from(v.coords * (radius / n));
    }
    TriMesh::new(verts, faces).expect("icosphere construction is always valid")
}

/// Open tube along z: `around` vertices per ring, `along` axial segments,
/// cross-section given by `profile(theta) -> (x, y)`. Faces are oriented
/// outward for a counter-clockwise profile.
pub(crate) fn tube(
    around: usize,
    along: usize,
    length: f64,
    profile: impl Fn(f64) -> (f64, f64),
) -> Result<TriMesh> {
    let mut verts = Vec::with_capacity(around * (along + 1));
    for iz in 0..=along {
        let z = length * (iz as f64 / along as f64 - 0.5);
        for it in 0..around {
            let theta = std::f64::consts::TAU * it as f64 / around as f64;
            let (x, y) = profile(theta);
            verts.push(Point3::new(x, y, z));
        }
    }
    let mut faces = Vec::with_capacity(2 * around * along);
    for iz in 0..along {
        for it in 0..around {
            let a = iz * around + it;
            let b = iz * around + (it + 1) % around;
            let c = a + around;
            let d = b + around;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    TriMesh::new(verts, faces)
}

/// Planar grid sheet over [−extent/2, extent/2]² with height field `z(x,y)`.
/// Faces oriented with normals toward +z for a flat sheet.
pub(crate) fn sheet(extent: f64, resolution: usize, z: impl Fn(f64, f64) -> f64) -> Result<TriMesh> {
    let n = resolution;
    let mut verts = Vec::with_capacity((n + 1) * (n + 1));
    for iy in 0..=n {
        let y = extent * (iy as f64 / n as f64 - 0.5);
        for ix in 0..=n {
            let x = extent * (ix as f64 / n as f64 - 0.5);
            verts.push(Point3::new(x, y, z(x, y)));
        }
    }
    let mut faces = Vec::with_capacity(2 * n * n);
    for iy in 0..n {
        for ix in 0..n {
            let a = iy * (n + 1) + ix;
            let b = a + 1;
            let c = a + (n + 1);
            let d = c + 1;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    TriMesh::new(verts, faces)
}

/// Sinusoidal sheet z = A·sin(2πx/L) plus its constant-distance normal
/// offset. The offset moves each point along the exact surface normal of the
/// analytic sine surface (which is independent of y).
fn folded_sheets(
    amplitude: f64,
    wavelength: f64,
    separation: f64,
    extent: f64,
    resolution: usize,
) -> Result<(TriMesh, TriMesh)> {
    let k = std::f64::consts::TAU / wavelength;
    let inner = sheet(extent, resolution, |x, _| amplitude * (k * x).sin())?;
    let mut outer = inner.clone();
    for v in &mut outer.vertices {
        let slope = amplitude * k * (k * v.x).cos();
        let n = Vector3::new(-slope, 0.0, 1.0) / (1.0 + slope * slope).sqrt();
        *v += separation * n;
    }
    outer.validate()?;
    Ok((inner, outer))
}

// ---------------------------------------------------------------------------
// intersection check

/// Segment–triangle intersection (Möller–Trumbore restricted to t ∈ [0,1]).
fn segment_hits_triangle(
    p: &Point3<f64>,
    q: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> bool {
    let dir = q - p;
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return false; // parallel (coplanar overlap not treated as a hit)
    }
    let inv = 1.0 / det;
    let s = p - a;
    let u = inv * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = s.cross(&e1);
    let v = inv * dir.dot(&qv);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let t = inv * e2.dot(&qv);
    (0.0..=1.0).contains(&t)
}

fn tri_bbox(m: &TriMesh, f: &[usize; 3]) -> (Point3<f64>, Point3<f64>) {
    let mut lo = m.vertices[f[0]];
    let mut hi = m.vertices[f[0]];
    for &vi in &f[1..] {
        let v = m.vertices[vi];
        for d in 0..3 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    (lo, hi)
}

fn bbox_overlap(a: &(Point3<f64>, Point3<f64>), b: &(Point3<f64>, Point3<f64>)) -> bool {
    (0..3).all(|d| a.0[d] <= b.1[d] && b.0[d] <= a.1[d])
}

/// True if any triangle of `a` intersects any triangle of `b` (edge-through-
/// face test; coplanar overlaps are not detected).
pub fn meshes_intersect(a: &TriMesh, b: &TriMesh) -> bool {
    let boxes_b: Vec<_> = b.faces.iter().map(|f| tri_bbox(b, f)).collect();
    a.faces.iter().any(|fa| {
        let bb_a = tri_bbox(a, fa);
        let (p0, p1, p2) = (a.vertices[fa[0]], a.vertices[fa[1]], a.vertices[fa[2]]);
        b.faces.iter().zip(&boxes_b).any(|(fb, bb_b)| {
            if !bbox_overlap(&bb_a, bb_b) {
                return false;
            }
            let (q0, q1, q2) = (b.vertices[fb[0]], b.vertices[fb[1]], b.vertices[fb[2]]);
            segment_hits_triangle(&p0, &p1, &q0, &q1, &q2)
                || segment_hits_triangle(&p1, &p2, &q0, &q1, &q2)
                || segment_hits_triangle(&p2, &p0, &q0, &q1, &q2)
                || segment_hits_triangle(&q0, &q1, &p0, &p1, &p2)
                || segment_hits_triangle(&q1, &q2, &p0, &p1, &p2)
                || segment_hits_triangle(&q2, &q0, &p0, &p1, &p2)
        })
    })
}
