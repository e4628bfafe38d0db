//! Distance distributions between vertex sets and thickness comparisons.
//!
//! The headline metric is the symmetric surface distance used by
//! cortical-surface pipelines: map each source vertex to its nearest target
//! vertex, map that target vertex back to its nearest source vertex, and
//! average the two hop lengths. Because the maps are nearest-vertex (not
//! nearest-point-on-surface) the metric systematically underestimates true
//! laminar thickness on curved, folded geometry — quantifying that bias
//! against streamline thickness is what [`compare_report`] is for.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Point-to-point metric ρ used inside the symmetric distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PointMetric {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl PointMetric {
    fn apply(&self, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
        let d2 = (a - b).norm_squared();
        match self {
            PointMetric::Euclidean => d2.sqrt(),
            PointMetric::SquaredEuclidean => d2,
        }
    }
}

/// A bag of non-negative per-vertex distances with summary statistics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistanceDistribution {
    /// One distance per source vertex, in source order.
    pub distances: Vec<f64>,
    /// Free-form identifiers for provenance in reports.
    pub source: String,
    pub target: String,
}

impl DistanceDistribution {
    pub fn new(
        distances: Vec<f64>,
        source: impl Into<String>,
        target: impl Into<String>,
    ) -> Result<DistanceDistribution> {
        if distances.is_empty() {
            return Err(Error::Config(
                "a distance distribution needs at least one sample".into(),
            ));
        }
        for (i, d) in distances.iter().enumerate() {
            if !d.is_finite() || *d < 0.0 {
                return Err(Error::NonFinite(format!(
                    "distance {i} is {d}; distances must be finite and non-negative"
                )));
            }
        }
        Ok(DistanceDistribution {
            distances,
            source: source.into(),
            target: target.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    /// Linear-interpolation quantile (the same convention as numpy's
    /// default): q = 0 gives the minimum, q = 1 the maximum.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let mut sorted = self.distances.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn max(&self) -> f64 {
        self.distances.iter().cloned().fold(0.0, f64::max)
    }

    /// Empirical CDF over `n_bins` equal-width bins spanning [0, max]:
    /// returns (bin upper edge, cumulative fraction) pairs. The last
    /// fraction is exactly 1.
    pub fn cdf(&self, n_bins: usize) -> Result<Vec<(f64, f64)>> {
        if n_bins == 0 {
            return Err(Error::Config("cdf needs at least one bin".into()));
        }
        let hi = self.max().max(f64::MIN_POSITIVE);
        let n = self.distances.len() as f64;
        let mut out = Vec::with_capacity(n_bins);
        for b in 1..=n_bins {
            let upper = hi * b as f64 / n_bins as f64;
            let count = self.distances.iter().filter(|&&d| d <= upper).count();
            out.push((upper, count as f64 / n));
        }
        // the max sample always falls in the last bin
        out.last_mut().expect("n_bins >= 1").1 = 1.0;
        Ok(out)
    }

    /// Writes `index,distance` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "index,distance")?;
        for (i, d) in self.distances.iter().enumerate() {
            writeln!(w, "{i},{d}")?;
        }
        Ok(())
    }

    /// Writes `bin_upper,cum_fraction` rows.
    pub fn save_cdf_csv(&self, path: &Path, n_bins: usize) -> Result<()> {
        let cdf = self.cdf(n_bins)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "bin_upper,cum_fraction")?;
        for (upper, frac) in cdf {
            writeln!(w, "{upper},{frac}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// nearest-vertex maps

/// Brute-force nearest-vertex map: for each query point the index of the
/// closest point in `targets`, ties resolved to the lowest index.
pub fn nearest_vertex_map(queries: &[Point3<f64>], targets: &[Point3<f64>]) -> Result<Vec<usize>> {
    if targets.is_empty() {
        return Err(Error::Config("nearest-vertex map needs targets".into()));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, t) in targets.iter().enumerate() {
                let d2 = (q - t).norm_squared();
                if d2 < best.0 {
                    best = (d2, i);
                }
            }
            best.1
        })
        .collect())
}

/// Uniform spatial hash over the target bounding box. Queries walk outward
/// cell ring by cell ring and stop once no unexplored cell can hold a point
/// at most as close as the current best, so results (including the
/// lowest-index tie rule) match the brute-force map exactly.
struct PointGrid<'a> {
    points: &'a [Point3<f64>],
    lo: Point3<f64>,
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    fn build(points: &'a [Point3<f64>]) -> PointGrid<'a> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi - lo).amax().max(1e-12);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = (extent / per_axis).max(1e-12);
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let c = Self::clamp_cell(&lo, cell, &dims, p);
            buckets[c[0] + dims[0] * (c[1] + dims[1] * c[2])].push(i as u32);
        }
        PointGrid {
            points,
            lo,
            cell,
            dims,
            buckets,
        }
    }

    fn clamp_cell(lo: &Point3<f64>, cell: f64, dims: &[usize; 3], p: &Point3<f64>) -> [usize; 3] {
        std::array::from_fn(|a| {
            (((p[a] - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1)
        })
    }

    /// Squared distance from `p` to the axis-aligned box of cell `c`; zero
    /// inside. Used only to certify that the ring search may stop — it
    /// never affects which distances are computed.
    fn cell_box_dist2(&self, c: &[usize; 3], p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = self.lo[a] + c[a] as f64 * self.cell;
            let hi = lo + self.cell;
            let d = if p[a] < lo {
                lo - p[a]
            } else if p[a] > hi {
                p[a] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    fn nearest(&self, p: &Point3<f64>) -> usize {
        let center = Self::clamp_cell(&self.lo, self.cell, &self.dims, p);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1);
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=max_ring {
            let mut ring_reachable = false;
            self.for_ring(&center, ring, |cell_idx, c| {
                // skip cells that provably cannot beat or tie the best
                if best.1 != usize::MAX && self.cell_box_dist2(c, p) > best.0 {
                    return;
                }
                ring_reachable = true;
                for &i in &self.buckets[cell_idx] {
                    let d2 = (p - self.points[i as usize]).norm_squared();
                    if d2 < best.0 || (d2 == best.0 && (i as usize) < best.1) {
                        best = (d2, i as usize);
                    }
                }
            });
            if best.1 != usize::MAX && !ring_reachable && ring > 0 {
                break;
            }
        }
        best.1
    }

    /// Visits every in-bounds cell at Chebyshev distance `ring` from
    /// `center`, in a fixed deterministic order.
    fn for_ring(&self, center: &[usize; 3], ring: usize, mut f: impl FnMut(usize, &[usize; 3])) {
        let r = ring as isize;
        let c = [center[0] as isize, center[1] as isize, center[2] as isize];
        for dk in -r..=r {
            for dj in -r..=r {
                for di in -r..=r {
                    if di.abs().max(dj.abs()).max(dk.abs()) != r {
                        continue;
                    }
                    let (i, j, k) = (c[0] + di, c[1] + dj, c[2] + dk);
                    if i < 0
                        || j < 0
                        || k < 0
                        || i >= self.dims[0] as isize
                        || j >= self.dims[1] as isize
                        || k >= self.dims[2] as isize
                    {
                        continue;
                    }
                    let cell = [i as usize, j as usize, k as usize];
                    f(
                        cell[0] + self.dims[0] * (cell[1] + self.dims[1] * cell[2]),
                        &cell,
                    );
                }
            }
        }
    }
}

/// Grid-accelerated nearest-vertex map; produces exactly the same indices as
/// [`nearest_vertex_map`].
pub fn nearest_vertex_map_grid(
    queries: &[Point3<f64>],
    targets: &[Point3<f64>],
) -> Result<Vec<usize>> {
    if targets.is_empty() {
        return Err(Error::Config("nearest-vertex map needs targets".into()));
    }
    let grid = PointGrid::build(targets);
    Ok(queries.iter().map(|q| grid.nearest(q)).collect())
}

/// Symmetric nearest-vertex surface distance: for each source vertex r with
/// nearest target f(r) and nearest-source map g on the targets,
/// d(r) = (ρ(r, f(r)) + ρ(f(r), g(f(r)))) / 2.
///
/// Asymmetric in general: swapping the roles of source and target changes
/// the distribution.
pub fn fs_distance(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    metric: PointMetric,
) -> Result<DistanceDistribution> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config(
            "surface distance needs non-empty source and target".into(),
        ));
    }
    let fwd = nearest_vertex_map_grid(source, target)?;
    let back = nearest_vertex_map_grid(target, source)?;
    let distances = source
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let t = &target[fwd[i]];
            let s_back = &source[back[fwd[i]]];
            0.5 * (metric.apply(r, t) + metric.apply(t, s_back))
        })
        .collect();
    DistanceDistribution::new(distances, "source", "target")
}

// ---------------------------------------------------------------------------
// thickness comparison

/// Streamline thickness samples from a laminar system, excluding seeds whose
/// equivolumetric pass fell back (flagged). Returns the distribution and the
/// number of excluded seeds.
pub fn thickness_distribution(
    laminar: &crate::laminar::LaminarSystem,
) -> Result<(DistanceDistribution, usize)> {
    // before the equivolumetric pass runs, `flagged` is empty: keep all seeds
    let kept: Vec<f64> = laminar
        .thickness
        .iter()
        .enumerate()
        .filter(|(k, _)| !laminar.flagged.get(*k).copied().unwrap_or(false))
        .map(|(_, &t)| t)
        .collect();
    let excluded = laminar.n_seeds() - kept.len();
    let dist = DistanceDistribution::new(kept, "inner-surface seeds", "streamline length")?;
    Ok((dist, excluded))
}

/// Side-by-side summary of a vertex-distance distribution against streamline
/// thickness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub fs_mean: f64,
    pub fs_median: f64,
    pub thickness_mean: f64,
    pub thickness_median: f64,
    /// fs_mean − thickness_mean (negative when the vertex metric reads low).
    pub mean_difference: f64,
    /// True when the nearest-vertex metric underestimates streamline
    /// thickness on average.
    pub underestimates: bool,
    pub n_fs_samples: usize,
    pub n_thickness_samples: usize,
    /// Seeds excluded from the thickness distribution by the laminar flags.
    pub flagged_excluded: usize,
}

pub fn compare_report(
    fs: &DistanceDistribution,
    thickness: &DistanceDistribution,
    flagged_excluded: usize,
) -> CompareReport {
    let fs_mean = fs.mean();
    let thickness_mean = thickness.mean();
    CompareReport {
        fs_mean,
        fs_median: fs.median(),
        thickness_mean,
        thickness_median: thickness.median(),
        mean_difference: fs_mean - thickness_mean,
        underestimates: fs_mean < thickness_mean,
        n_fs_samples: fs.len(),
        n_thickness_samples: thickness.len(),
        flagged_excluded,
    }
}

impl CompareReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(1), 40, 2.0);
        let d = fs_distance(&pts, &pts, PointMetric::Euclidean).unwrap();
        assert!(d.distances.iter().all(|&x| x == 0.0));
        assert_eq!(d.mean(), 0.0);
    }

    #[test]
    fn two_triangle_example_is_asymmetric() {
        // all of B's vertices cluster near one vertex of A, so the two
        // directions see very different hop patterns
        let a = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let b = vec![
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.1, 0.0, 1.0),
            Point3::new(0.0, 0.1, 1.0),
        ];
        let ab = fs_distance(&a, &b, PointMetric::Euclidean).unwrap();
        let ba = fs_distance(&b, &a, PointMetric::Euclidean).unwrap();
        assert!(
            (ab.mean() - ba.mean()).abs() > 0.05,
            "expected asymmetry, got {} vs {}",
            ab.mean(),
            ba.mean()
        );
    }

    #[test]
    fn rigid_motion_leaves_distances_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_points(&mut rng, 60, 1.5);
        let b = random_points(&mut rng, 45, 1.5);
        let base = fs_distance(&a, &b, PointMetric::Euclidean).unwrap();
        let rot = Rotation3::from_euler_angles(0.4, -1.1, 2.2);
        let shift = Vector3::new(3.0, -1.0, 0.5);
        let move_all =
            |pts: &[Point3<f64>]| -> Vec<Point3<f64>> { pts.iter().map(|p| rot * p + shift).collect() };
        let moved = fs_distance(&move_all(&a), &move_all(&b), PointMetric::Euclidean).unwrap();
        for (d0, d1) in base.distances.iter().zip(&moved.distances) {
            assert!((d0 - d1).abs() < 1e-10, "rigid drift {d0} vs {d1}");
        }
    }

    #[test]
    fn grid_map_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let nq = rng.gen_range(1..40);
            let nt = rng.gen_range(1..60);
            let scale = rng.gen_range(0.1..10.0);
            let queries = random_points(&mut rng, nq, scale);
            let targets = random_points(&mut rng, nt, scale);
            let brute = nearest_vertex_map(&queries, &targets).unwrap();
            let grid = nearest_vertex_map_grid(&queries, &targets).unwrap();
            assert_eq!(brute, grid, "mismatch in case {case}");
        }
    }

    #[test]
    fn ties_resolve_to_the_lowest_index() {
        // duplicated target: both paths must pick index 1, never 3
        let targets = vec![
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(-4.0, 2.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
        ];
        let queries = vec![Point3::new(1.0, 1.0, 0.9), Point3::new(1.1, 1.0, 1.0)];
        assert_eq!(nearest_vertex_map(&queries, &targets).unwrap(), vec![1, 1]);
        assert_eq!(
            nearest_vertex_map_grid(&queries, &targets).unwrap(),
            vec![1, 1]
        );
        // symmetric pair equidistant from the query
        let sym = vec![Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let q = vec![Point3::origin()];
        assert_eq!(nearest_vertex_map(&q, &sym).unwrap(), vec![0]);
        assert_eq!(nearest_vertex_map_grid(&q, &sym).unwrap(), vec![0]);
    }

    #[test]
    fn squared_metric_squares_each_hop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_points(&mut rng, 25, 2.0);
        let b = random_points(&mut rng, 30, 2.0);
        let plain = fs_distance(&a, &b, PointMetric::Euclidean).unwrap();
        let squared = fs_distance(&a, &b, PointMetric::SquaredEuclidean).unwrap();
        // maps agree, so both hops square individually; check on a vertex
        // whose two hops happen to be equal is fragile — instead verify the
        // squared version with an independent recomputation
        let fwd = nearest_vertex_map(&a, &b).unwrap();
        let back = nearest_vertex_map(&b, &a).unwrap();
        for (i, r) in a.iter().enumerate() {
            let t = &b[fwd[i]];
            let s = &a[back[fwd[i]]];
            let expect = 0.5 * ((r - t).norm_squared() + (t - s).norm_squared());
            assert!((squared.distances[i] - expect).abs() < 1e-12);
            let expect_plain = 0.5 * ((r - t).norm() + (t - s).norm());
            assert!((plain.distances[i] - expect_plain).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_statistics_match_hand_values() {
        let d = DistanceDistribution::new(vec![4.0, 1.0, 3.0, 2.0], "a", "b").unwrap();
        assert_eq!(d.mean(), 2.5);
        assert_eq!(d.median(), 2.5);
        assert_eq!(d.quantile(0.0), 1.0);
        assert_eq!(d.quantile(1.0), 4.0);
        assert!((d.quantile(0.25) - 1.75).abs() < 1e-12);
        assert_eq!(d.max(), 4.0);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let d = DistanceDistribution::new(samples, "u", "v").unwrap();
        let cdf = d.cdf(32).unwrap();
        let mut prev = 0.0;
        for &(_, frac) in &cdf {
            assert!(frac >= prev, "cdf not monotone");
            prev = frac;
        }
        assert_eq!(cdf.last().unwrap().1, 1.0);
        // uniform samples: cumulative fraction tracks upper/3 within 1/sqrt(n)
        let tol = 1.0 / (n as f64).sqrt() * 3.0;
        for &(upper, frac) in &cdf {
            let expect = (upper / 3.0).min(1.0);
            assert!(
                (frac - expect).abs() < tol,
                "cdf {frac} vs uniform {expect} at {upper}"
            );
        }
    }

    #[test]
    fn invalid_distances_are_rejected() {
        assert!(DistanceDistribution::new(vec![], "a", "b").is_err());
        assert!(DistanceDistribution::new(vec![1.0, -0.5], "a", "b").is_err());
        assert!(DistanceDistribution::new(vec![f64::NAN], "a", "b").is_err());
        let d = DistanceDistribution::new(vec![1.0], "a", "b").unwrap();
        assert!(d.cdf(0).is_err());
    }

    #[test]
    fn compare_report_flags_underestimation() {
        let fs = DistanceDistribution::new(vec![0.8, 0.9, 0.85], "s", "t").unwrap();
        let thick = DistanceDistribution::new(vec![1.0, 1.05, 0.98], "s", "len").unwrap();
        let report = compare_report(&fs, &thick, 2);
        assert!(report.underestimates);
        assert!(report.mean_difference < 0.0);
        assert_eq!(report.flagged_excluded, 2);
        assert_eq!(report.n_fs_samples, 3);
        let reversed = compare_report(&thick, &fs, 0);
        assert!(!reversed.underestimates);
    }

    #[test]
    fn csv_and_json_outputs_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let d = DistanceDistribution::new(vec![0.5, 1.5, 1.0], "s", "t").unwrap();
        let csv_path = dir.path().join("dist.csv");
        d.save_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,distance");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0.5");

        let cdf_path = dir.path().join("cdf.csv");
        d.save_cdf_csv(&cdf_path, 3).unwrap();
        let text = std::fs::read_to_string(&cdf_path).unwrap();
        assert!(text.starts_with("bin_upper,cum_fraction\n"));
        assert_eq!(text.lines().count(), 4);

        let report = compare_report(&d, &d, 0);
        let json_path = dir.path().join("report.json");
        report.save_json(&json_path).unwrap();
        let parsed: CompareReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn thickness_distribution_excludes_flagged_seeds() {
        use crate::registration::{FlowState, RegistrationConfig};
        let mesh = crate::synth::icosphere(0, 1.0);
        let config = RegistrationConfig {
            n_t: 2,
            ..RegistrationConfig::default()
        };
        let state = FlowState::with_zero_momenta(&config, &mesh);
        let mut laminar = crate::laminar::LaminarSystem::from_flow(&state).unwrap();
        let n = laminar.n_seeds();
        laminar.thickness = (0..n).map(|i| 1.0 + i as f64 * 0.01).collect();
        laminar.flagged = vec![false; n];
        laminar.flagged[3] = true;
        laminar.flagged[7] = true;
        let (dist, excluded) = thickness_distribution(&laminar).unwrap();
        assert_eq!(excluded, 2);
        assert_eq!(dist.len(), n - 2);
        assert!(!dist.distances.contains(&1.03));
    }
}
