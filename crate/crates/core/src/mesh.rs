//! Triangulated surfaces: data structure, OFF/VTK I/O, and discrete
//! differential-geometry primitives (normals, areas, one-rings, mean
//! curvature, tangential divergence).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::{Error, Result};

/// Minimum admissible face area (mm²).
pub const MIN_FACE_AREA: f64 = 1e-12;

/// An oriented triangle mesh, manifold with boundary (open surfaces are
/// first-class). Optional named attribute channels ride along and survive
/// VTK round-trips.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// Named per-vertex scalar channels.
    pub vertex_scalars: BTreeMap<String, Vec<f64>>,
    /// Named per-vertex vector channels.
    pub vertex_vectors: BTreeMap<String, Vec<Vector3<f64>>>,
    /// Named per-face scalar channels.
    pub face_scalars: BTreeMap<String, Vec<f64>>,
}

/// Per-face geometry: unit normal, area, centroid.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    pub normals: Vec<Vector3<f64>>,
    pub areas: Vec<f64>,
    pub centroids: Vec<Point3<f64>>,
}

impl TriMesh {
    /// Builds a mesh and checks the structural invariants: indices in range,
    /// no repeated vertex within a face, faces non-degenerate, edges manifold
    /// and consistently oriented.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriMesh {
            vertices,
            faces,
            vertex_scalars: BTreeMap::new(),
            vertex_vectors: BTreeMap::new(),
            face_scalars: BTreeMap::new(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Checks all structural invariants; called by [`TriMesh::new`] and after
    /// file loads.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (vi, v) in self.vertices.iter().enumerate() {
            if !v.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMesh(format!("vertex {vi} is not finite")));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {} but there are only {n} vertices",
                    f.iter().max().unwrap()
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex")));
            }
            if face_area(&self.vertices, f) <= MIN_FACE_AREA {
                return Err(Error::DegenerateFace {
                    face: fi,
                    step: None,
                });
            }
        }
        // Orientation consistency: a directed edge may appear at most once;
        // an undirected edge in at most two faces.
        let mut directed: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if directed.insert((a, b), fi).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "directed edge ({a},{b}) traversed twice — inconsistent orientation or non-manifold at face {fi}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-face unit normals, areas, centroids. Orientation follows the face
    /// winding.
    pub fn face_geometry(&self) -> Result<FaceGeometry> {
        let mut normals = Vec::with_capacity(self.faces.len());
        let mut areas = Vec::with_capacity(self.faces.len());
        let mut centroids = Vec::with_capacity(self.faces.len());
        for (fi, f) in self.faces.iter().enumerate() {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            let raw = (b - a).cross(&(c - a));
            let area = 0.5 * raw.norm();
            if area <= MIN_FACE_AREA {
                return Err(Error::DegenerateFace {
                    face: fi,
                    step: None,
                });
            }
            normals.push(raw / (2.0 * area));
            areas.push(area);
            // Sum the corners in vertex-index order: reversing the winding
            // permutes the face tuple, and float addition is not
            // permutation-invariant, so summing in tuple order would let a
            // flip shift the centroid by an ulp. The raw normal needs no such
            // care — swapping the cross-product arguments negates it exactly.
            let mut idx = *f;
            idx.sort_unstable();
            let sum = self.vertices[idx[0]].coords
                + self.vertices[idx[1]].coords
                + self.vertices[idx[2]].coords;
            centroids.push(Point3::from(sum / 3.0));
        }
        Ok(FaceGeometry {
            normals,
            areas,
            centroids,
        })
    }

    /// Per-vertex unit normals: area-weighted average of incident face
    /// normals (the sum of raw area-scaled face normals, normalized).
    pub fn vertex_normals(&self) -> Result<Vec<Vector3<f64>>> {
        let raw = self.vertex_normal_sums();
        raw.into_iter()
            .enumerate()
            .map(|(vi, s)| {
                let n = s.norm();
                if n <= 0.0 {
                    return Err(Error::IsolatedVertex(vi));
                }
                Ok(s / n)
            })
            .collect()
    }

    /// Unnormalized per-vertex normal sums Σ_{f ∋ v} area_f·n̂_f. Zero for
    /// isolated vertices.
    pub fn vertex_normal_sums(&self) -> Vec<Vector3<f64>> {
        let mut sums = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            // 0.5·(b−a)×(c−a) has length = face area and direction = n̂.
            let an = 0.5 * (b - a).cross(&(c - a));
            sums[f[0]] += an;
            sums[f[1]] += an;
            sums[f[2]] += an;
        }
        sums
    }

    /// Total area of the faces incident to `vertex` (the one-ring area).
    pub fn one_ring_area(&self, vertex: usize) -> f64 {
        self.faces
            .iter()
            .filter(|f| f.contains(&vertex))
            .map(|f| face_area(&self.vertices, f))
            .sum()
    }

    /// One-ring areas for every vertex in one pass.
    pub fn one_ring_areas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vertices.len()];
        for f in &self.faces {
            let a = face_area(&self.vertices, f);
            out[f[0]] += a;
            out[f[1]] += a;
            out[f[2]] += a;
        }
        out
    }

    /// Flags vertices lying on a boundary edge (an undirected edge used by
    /// only one face).
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut count: std::collections::HashMap<(usize, usize), u32> =
            std::collections::HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut boundary = vec![false; self.vertices.len()];
        for (&(a, b), &c) in &count {
            if c == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        boundary
    }

    /// True when the mesh has no boundary edges.
    pub fn is_closed(&self) -> bool {
        !self.boundary_vertices().into_iter().any(|b| b)
    }

    /// Per-vertex mean curvature via the cotangent mean-curvature-normal
    /// estimator with mixed Voronoi areas, sign fixed so an outward-oriented
    /// sphere of radius R has H = −1/R. Returns (H, boundary flags);
    /// boundary values are unreliable and must not be used silently.
    pub fn mean_curvature(&self) -> Result<(Vec<f64>, Vec<bool>)> {
        let n = self.vertices.len();
        let normals = self.vertex_normals()?;
        let mut lap = vec![Vector3::<f64>::zeros(); n];
        let mut area = vec![0.0_f64; n];
        for f in &self.faces {
            let (ia, ib, ic) = (f[0], f[1], f[2]);
            let (pa, pb, pc) = (self.vertices[ia], self.vertices[ib], self.vertices[ic]);
            let cot_a = cotangent(pa, pb, pc);
            let cot_b = cotangent(pb, pc, pa);
            let cot_c = cotangent(pc, pa, pb);
            // Cotangent Laplacian: edge (a,b) is weighted by the cotangent of
            // the opposite angle (at c), and so on.
            lap[ia] += cot_c * (pb - pa) + cot_b * (pc - pa);
            lap[ib] += cot_c * (pa - pb) + cot_a * (pc - pb);
            lap[ic] += cot_b * (pa - pc) + cot_a * (pb - pc);
            // Mixed Voronoi area: Voronoi weights for acute triangles; for an
            // obtuse triangle, half the area at the obtuse corner and a
            // quarter at the others.
            let fa = face_area(&self.vertices, f);
            if cot_a <= 0.0 || cot_b <= 0.0 || cot_c <= 0.0 {
                let (obtuse, others) = if cot_a <= 0.0 {
                    (ia, [ib, ic])
                } else if cot_b <= 0.0 {
                    (ib, [ia, ic])
                } else {
                    (ic, [ia, ib])
                };
                area[obtuse] += fa / 2.0;
                area[others[0]] += fa / 4.0;
                area[others[1]] += fa / 4.0;
            } else {
                let e_bc = (pc - pb).norm_squared();
                let e_ca = (pa - pc).norm_squared();
                let e_ab = (pb - pa).norm_squared();
                area[ia] += (e_ca * cot_b + e_ab * cot_c) / 8.0;
                area[ib] += (e_ab * cot_c + e_bc * cot_a) / 8.0;
                area[ic] += (e_bc * cot_a + e_ca * cot_b) / 8.0;
            }
        }
        let boundary = self.boundary_vertices();
        let h = (0..n)
            .map(|vi| {
                if area[vi] <= 0.0 {
                    return Err(Error::IsolatedVertex(vi));
                }
                // lap points along the inward mean-curvature normal for a
                // convex outward-oriented surface; projecting onto the
                // outward vertex normal yields H = −1/R on the sphere.
                Ok(lap[vi].dot(&normals[vi]) / (4.0 * area[vi]))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((h, boundary))
    }

    /// Discrete tangential divergence of a per-vertex vector field: the
    /// normal component is projected out, the face-wise constant gradient of
    /// the P1 interpolant is summed, and face values are area-averaged onto
    /// vertices. Returns (divergence, boundary flags).
    pub fn surface_divergence(&self, field: &[Vector3<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
        if field.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "field has {} entries for {} vertices",
                field.len(),
                self.vertices.len()
            )));
        }
        let normals = self.vertex_normals()?;
        let tangential: Vec<Vector3<f64>> = field
            .iter()
            .zip(&normals)
            .map(|(v, nu)| v - nu * v.dot(nu))
            .collect();
        let n = self.vertices.len();
        let mut acc = vec![0.0_f64; n];
        let mut wsum = vec![0.0_f64; n];
        for f in &self.faces {
            let (pa, pb, pc) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            let raw = (pb - pa).cross(&(pc - pa));
            let double_area = raw.norm();
            let nf = raw / double_area;
            let area = 0.5 * double_area;
            // Gradient of the P1 hat function of vertex a on this face:
            // n̂ × (opposite edge) / (2·area).
            let grad_a = nf.cross(&(pc - pb)) / double_area;
            let grad_b = nf.cross(&(pa - pc)) / double_area;
            let grad_c = nf.cross(&(pb - pa)) / double_area;
            let div_f = tangential[f[0]].dot(&grad_a)
                + tangential[f[1]].dot(&grad_b)
                + tangential[f[2]].dot(&grad_c);
            for &vi in f {
                acc[vi] += area * div_f;
                wsum[vi] += area;
            }
        }
        let boundary = self.boundary_vertices();
        let div = (0..n)
            .map(|vi| {
                if wsum[vi] <= 0.0 {
                    return Err(Error::IsolatedVertex(vi));
                }
                Ok(acc[vi] / wsum[vi])
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((div, boundary))
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    /// Mean edge length over undirected edges.
    pub fn mean_edge_length(&self) -> f64 {
        let mut seen = std::collections::HashSet::new();
        let mut total = 0.0;
        let mut count = 0usize;
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    total += (self.vertices[a] - self.vertices[b]).norm();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    // ------------------------------------------------------------------
    // File I/O
    // ------------------------------------------------------------------

    /// Loads a mesh, dispatching on extension: `.off` → OFF, anything else →
    /// VTK legacy ASCII polydata.
    pub fn load(path: &Path) -> Result<TriMesh> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("off") | Some("OFF") => Self::load_off(path),
            _ => Self::load_vtk(path),
        }
    }

    /// Saves a mesh, dispatching on extension like [`TriMesh::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("off") | Some("OFF") => self.save_off(path),
            _ => self.save_vtk(path),
        }
    }

    pub fn load_off(path: &Path) -> Result<TriMesh> {
        let pathname = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let mut tokens = TokenStream::new(BufReader::new(file), pathname);
        let header = tokens.next_token()?;
        if header != "OFF" {
            return Err(tokens.error("expected OFF header"));
        }
        let nv: usize = tokens.parse_next("vertex count")?;
        let nf: usize = tokens.parse_next("face count")?;
        let _ne: usize = tokens.parse_next("edge count")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let x: f64 = tokens.parse_next("vertex coordinate")?;
            let y: f64 = tokens.parse_next("vertex coordinate")?;
            let z: f64 = tokens.parse_next("vertex coordinate")?;
            vertices.push(Point3::new(x, y, z));
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let arity: usize = tokens.parse_next("face arity")?;
            if arity != 3 {
                return Err(tokens.error(&format!("only triangles supported, got {arity}-gon")));
            }
            let i: usize = tokens.parse_next("face index")?;
            let j: usize = tokens.parse_next("face index")?;
            let k: usize = tokens.parse_next("face index")?;
            faces.push([i, j, k]);
        }
        TriMesh::new(vertices, faces)
    }

    pub fn save_off(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "OFF");
        let _ = writeln!(out, "{} {} 0", self.n_vertices(), self.n_faces());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
        }
        write_atomic(path, &out)
    }

    pub fn load_vtk(path: &Path) -> Result<TriMesh> {
        let pathname = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        let err = |line: usize, msg: &str| Error::Parse {
            path: pathname.clone(),
            line,
            msg: msg.to_string(),
        };
        let mut i = 0usize;
        let next_content = |i: &mut usize| -> Option<(usize, String)> {
            while *i < lines.len() {
                let l = lines[*i].trim().to_string();
                *i += 1;
                if !l.is_empty() {
                    return Some((*i, l));
                }
            }
            None
        };
        // header: "# vtk DataFile Version x", title, ASCII, DATASET POLYDATA
        let (ln, l) = next_content(&mut i).ok_or_else(|| err(1, "empty file"))?;
        if !l.starts_with("# vtk DataFile") {
            return Err(err(ln, "missing VTK header"));
        }
        let _title = next_content(&mut i);
        let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "truncated header"))?;
        if l != "ASCII" {
            return Err(err(ln, "only ASCII VTK supported"));
        }
        let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "truncated header"))?;
        if l != "DATASET POLYDATA" {
            return Err(err(ln, "expected DATASET POLYDATA"));
        }
        let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "missing POINTS"))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some("POINTS") {
            return Err(err(ln, "expected POINTS"));
        }
        let nv: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad POINTS count"))?;
        // read 3·nv floats
        let mut coords = Vec::with_capacity(3 * nv);
        while coords.len() < 3 * nv {
            let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "truncated POINTS"))?;
            for tok in l.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(ln, &format!("bad coordinate {tok:?}")))?;
                coords.push(v);
            }
        }
        let vertices: Vec<Point3<f64>> = coords
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "missing POLYGONS"))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some("POLYGONS") {
            return Err(err(ln, "expected POLYGONS"));
        }
        let nf: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad POLYGONS count"))?;
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (ln, l) = next_content(&mut i).ok_or_else(|| err(i, "truncated POLYGONS"))?;
            let idx: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(ln, &format!("bad index {t:?}"))))
                .collect::<Result<_>>()?;
            if idx.len() != 4 || idx[0] != 3 {
                return Err(err(ln, "only triangles supported"));
            }
            faces.push([idx[1], idx[2], idx[3]]);
        }
        let mut mesh = TriMesh::new(vertices, faces)?;
        // optional POINT_DATA / CELL_DATA attribute sections
        let mut section = 0usize; // 1 = point data, 2 = cell data
        while let Some((ln, l)) = next_content(&mut i) {
            let mut parts = l.split_whitespace();
            match parts.next() {
                Some("POINT_DATA") => section = 1,
                Some("CELL_DATA") => section = 2,
                Some("SCALARS") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| err(ln, "SCALARS missing name"))?
                        .to_string();
                    // skip LOOKUP_TABLE line
                    let (_, lt) = next_content(&mut i).ok_or_else(|| err(i, "truncated SCALARS"))?;
                    if !lt.starts_with("LOOKUP_TABLE") {
                        return Err(err(ln, "expected LOOKUP_TABLE after SCALARS"));
                    }
                    let count = if section == 1 { mesh.n_vertices() } else { mesh.n_faces() };
                    let mut vals = Vec::with_capacity(count);
                    while vals.len() < count {
                        let (ln, l) =
                            next_content(&mut i).ok_or_else(|| err(i, "truncated SCALARS data"))?;
                        for tok in l.split_whitespace() {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| err(ln, &format!("bad scalar {tok:?}")))?;
                            vals.push(v);
                        }
                    }
                    if section == 1 {
                        mesh.vertex_scalars.insert(name, vals);
                    } else {
                        mesh.face_scalars.insert(name, vals);
                    }
                }
                Some("VECTORS") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| err(ln, "VECTORS missing name"))?
                        .to_string();
                    let count = if section == 1 { mesh.n_vertices() } else { mesh.n_faces() };
                    let mut vals = Vec::with_capacity(3 * count);
                    while vals.len() < 3 * count {
                        let (ln, l) =
                            next_content(&mut i).ok_or_else(|| err(i, "truncated VECTORS data"))?;
                        for tok in l.split_whitespace() {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| err(ln, &format!("bad vector component {tok:?}")))?;
                            vals.push(v);
                        }
                    }
                    let vecs: Vec<Vector3<f64>> = vals
                        .chunks_exact(3)
                        .map(|c| Vector3::new(c[0], c[1], c[2]))
                        .collect();
                    if section == 1 {
                        mesh.vertex_vectors.insert(name, vecs);
                    }
                }
                _ => return Err(err(ln, &format!("unexpected section {l:?}"))),
            }
        }
        Ok(mesh)
    }

    pub fn save_vtk(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "# vtk DataFile Version 3.0");
        let _ = writeln!(out, "lamina surface");
        let _ = writeln!(out, "ASCII");
        let _ = writeln!(out, "DATASET POLYDATA");
        let _ = writeln!(out, "POINTS {} double", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        let _ = writeln!(out, "POLYGONS {} {}", self.n_faces(), 4 * self.n_faces());
        for f in &self.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
        }
        if !self.vertex_scalars.is_empty() || !self.vertex_vectors.is_empty() {
            let _ = writeln!(out, "POINT_DATA {}", self.n_vertices());
            for (name, vals) in &self.vertex_scalars {
                let _ = writeln!(out, "SCALARS {name} float 1");
                let _ = writeln!(out, "LOOKUP_TABLE default");
                for v in vals {
                    let _ = writeln!(out, "{v}");
                }
            }
            for (name, vecs) in &self.vertex_vectors {
                let _ = writeln!(out, "VECTORS {name} float");
                for v in vecs {
                    let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
                }
            }
        }
        if !self.face_scalars.is_empty() {
            let _ = writeln!(out, "CELL_DATA {}", self.n_faces());
            for (name, vals) in &self.face_scalars {
                let _ = writeln!(out, "SCALARS {name} float 1");
                let _ = writeln!(out, "LOOKUP_TABLE default");
                for v in vals {
                    let _ = writeln!(out, "{v}");
                }
            }
        }
        write_atomic(path, &out)
    }
}

/// Area of one face.
fn face_area(vertices: &[Point3<f64>], f: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Cotangent of the angle at `p` in triangle (p, q, r).
fn cotangent(p: Point3<f64>, q: Point3<f64>, r: Point3<f64>) -> f64 {
    let u = q - p;
    let v = r - p;
    u.dot(&v) / u.cross(&v).norm()
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(contents.as_bytes())?;
    Ok(())
}

/// Whitespace token reader for OFF files, tracking line numbers for errors.
struct TokenStream<R: BufRead> {
    reader: R,
    path: String,
    line: usize,
    buffer: Vec<String>,
}

impl<R: BufRead> TokenStream<R> {
    fn new(reader: R, path: String) -> Self {
        TokenStream {
            reader,
            path,
            line: 0,
            buffer: Vec::new(),
        }
    }

    fn next_token(&mut self) -> Result<String> {
        loop {
            if let Some(tok) = self.buffer.pop() {
                return Ok(tok);
            }
            let mut line = String::new();
            if self.reader.read_line(&mut line)? == 0 {
                return Err(self.error("unexpected end of file"));
            }
            self.line += 1;
            let content = line.split('#').next().unwrap_or("");
            self.buffer = content.split_whitespace().rev().map(String::from).collect();
        }
    }

    fn parse_next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.next_token()?;
        tok.parse()
            .map_err(|_| self.error(&format!("expected {what}, got {tok:?}")))
    }

    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_triangle() -> TriMesh {
        TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    /// Uniform planar grid over [0,1]² with nx×ny vertices, CCW winding
    /// seen from +z.
    fn planar_grid(nx: usize, ny: usize) -> TriMesh {
        let mut vertices = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                vertices.push(Point3::new(
                    i as f64 / (nx - 1) as f64,
                    j as f64 / (ny - 1) as f64,
                    0.0,
                ));
            }
        }
        let mut faces = Vec::new();
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                let k = i * ny + j;
                faces.push([k, k + ny, k + 1]);
                faces.push([k + 1, k + ny, k + ny + 1]);
            }
        }
        TriMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn face_geometry_reference_triangle() {
        let m = single_triangle();
        let fg = m.face_geometry().unwrap();
        assert_relative_eq!(fg.normals[0], Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(fg.areas[0], 0.5);
        assert_relative_eq!(
            fg.centroids[0],
            Point3::new(1.0 / 3.0, 1.0 / 3.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn degenerate_face_rejected() {
        let r = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        assert!(matches!(r, Err(Error::DegenerateFace { face: 0, .. })));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let r = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 3]],
        );
        assert!(matches!(r, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn repeated_vertex_rejected() {
        let r = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 1]],
        );
        assert!(matches!(r, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn inconsistent_orientation_rejected() {
        // Two triangles sharing edge (1,2) traversed in the same direction.
        let r = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.5, 1.0, 0.0),
                Point3::new(1.5, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 1, 2]],
        );
        assert!(matches!(r, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn flat_grid_vertex_normals() {
        let m = planar_grid(4, 4);
        for n in m.vertex_normals().unwrap() {
            assert_relative_eq!(n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn one_ring_two_right_triangles() {
        // Two unit right triangles forming a square share vertex 0.
        let m = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        assert_relative_eq!(m.one_ring_area(0), 1.0);
    }

    #[test]
    fn one_ring_sum_is_three_times_total_area() {
        let m = planar_grid(5, 5);
        let total: f64 = m.face_geometry().unwrap().areas.iter().sum();
        let ring_sum: f64 = m.one_ring_areas().iter().sum();
        assert_relative_eq!(ring_sum, 3.0 * total, epsilon = 1e-12);
    }

    #[test]
    fn planar_interior_curvature_is_zero() {
        let m = planar_grid(5, 5);
        let (h, boundary) = m.mean_curvature().unwrap();
        for (hi, b) in h.iter().zip(&boundary) {
            if !b {
                assert!(hi.abs() < 1e-8, "interior H = {hi}");
            }
        }
    }

    #[test]
    fn divergence_of_constant_field_vanishes() {
        let m = planar_grid(5, 5);
        let field = vec![Vector3::new(0.3, -0.7, 0.0); m.n_vertices()];
        let (div, boundary) = m.surface_divergence(&field).unwrap();
        for (d, b) in div.iter().zip(&boundary) {
            if !b {
                assert!(d.abs() < 1e-12, "div = {d}");
            }
        }
    }

    #[test]
    fn divergence_of_linear_field() {
        let m = planar_grid(6, 6);
        let field: Vec<Vector3<f64>> = m
            .vertices
            .iter()
            .map(|p| Vector3::new(p.x, p.y, 0.0))
            .collect();
        let (div, boundary) = m.surface_divergence(&field).unwrap();
        for (d, b) in div.iter().zip(&boundary) {
            if !b {
                assert_relative_eq!(*d, 2.0, max_relative = 0.02);
            }
        }
    }

    #[test]
    fn divergence_of_rotational_field() {
        let m = planar_grid(6, 6);
        let field: Vec<Vector3<f64>> = m
            .vertices
            .iter()
            .map(|p| Vector3::new(-p.y, p.x, 0.0))
            .collect();
        let (div, boundary) = m.surface_divergence(&field).unwrap();
        for (d, b) in div.iter().zip(&boundary) {
            if !b {
                assert!(d.abs() < 0.02, "div = {d}");
            }
        }
    }

    #[test]
    fn off_round_trip() {
        let m = single_triangle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.off");
        m.save_off(&path).unwrap();
        let l = TriMesh::load_off(&path).unwrap();
        assert_eq!(l.faces, m.faces);
        for (a, b) in l.vertices.iter().zip(&m.vertices) {
            assert_relative_eq!(a, b);
        }
    }

    #[test]
    fn off_index_out_of_range_is_parse_time_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.off");
        std::fs::write(&path, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n").unwrap();
        assert!(TriMesh::load_off(&path).is_err());
    }

    #[test]
    fn vtk_round_trip_with_channels() {
        let mut m = planar_grid(3, 3);
        m.vertex_scalars.insert(
            "thickness".into(),
            (0..m.n_vertices()).map(|i| i as f64 * 0.5).collect(),
        );
        m.vertex_vectors.insert(
            "flow".into(),
            (0..m.n_vertices())
                .map(|i| Vector3::new(i as f64, 0.0, -1.0))
                .collect(),
        );
        m.face_scalars.insert(
            "area_ratio".into(),
            (0..m.n_faces()).map(|i| 1.0 + i as f64).collect(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.vtk");
        m.save_vtk(&path).unwrap();
        let l = TriMesh::load_vtk(&path).unwrap();
        assert_eq!(l.faces, m.faces);
        for (a, b) in l.vertices.iter().zip(&m.vertices) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
        assert_eq!(l.vertex_scalars["thickness"], m.vertex_scalars["thickness"]);
        assert_eq!(l.vertex_vectors["flow"], m.vertex_vectors["flow"]);
        assert_eq!(l.face_scalars["area_ratio"], m.face_scalars["area_ratio"]);
    }

    #[test]
    fn malformed_vtk_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vtk");
        std::fs::write(&path, "# vtk DataFile Version 3.0\nt\nASCII\nDATASET POLYDATA\nPOINTS x double\n").unwrap();
        match TriMesh::load_vtk(&path) {
            Err(Error::Parse { line, .. }) => assert!(line > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn boundary_detection() {
        let m = planar_grid(4, 4);
        let b = m.boundary_vertices();
        // corners and edges of the grid are boundary; the 4 interior
        // vertices are not
        assert_eq!(b.iter().filter(|&&x| x).count(), 12);
        assert!(!m.is_closed());
    }
}
