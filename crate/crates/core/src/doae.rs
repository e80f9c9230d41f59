//! Direction-of-arrival extraction from multiband acoustic maps and the
//! localization metrics used to score it.
//!
//! The extraction head mirrors a fixed recipe: sum the per-band rasters,
//! keep the 18 strongest cells, run weighted K-means with K = 3 on the unit
//! sphere, then merge centroids closer than 15 degrees. Scoring matches
//! estimates to references per frame with an optimal assignment and reports
//! the localization error (mean matched great-circle distance, degrees) and
//! localization recall (matched references, percent).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::beamform::SphericalAcousticMap;
use crate::geometry::{
    angles_from_direction, direction_from_angles, great_circle, Tessellation,
};

/// Number of raster cells kept before clustering.
pub const TOP_CELLS: usize = 18;
/// Cluster count for the K-means head.
pub const KMEANS_K: usize = 3;
/// Centroids closer than this merge into one source.
pub const MERGE_DEG: f64 = 15.0;
/// Fixed seed for K-means++ initialization; the head is deterministic.
const KMEANS_SEED: u64 = 0x5eed_d0ae;
const MAX_ITERS: usize = 50;
const CONVERGENCE_RAD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DoaError {
    #[error("raster grid must be at least 2x2, got {az}x{el}")]
    GridTooSmall { az: usize, el: usize },
    #[error("raster values must be finite and >= 0")]
    BadRasterValue,
    #[error("map has {got} points, tessellation has {expected}")]
    MapSizeMismatch { expected: usize, got: usize },
    #[error("no bands given")]
    NoBands,
    #[error("estimates cover {estimates} frames, references {references}")]
    FrameCountMismatch {
        estimates: usize,
        references: usize,
    },
    #[error("estimate file format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multiband image on a regular azimuth/elevation grid. Azimuth cells tile
/// [-180, 180) and elevation cells tile [-90, 90], both left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    values: Array3<f64>,
}

impl RasterMap {
    pub fn new(values: Array3<f64>) -> Result<Self, DoaError> {
        let (f, a, e) = values.dim();
        if f == 0 {
            return Err(DoaError::NoBands);
        }
        if a < 2 || e < 2 {
            return Err(DoaError::GridTooSmall { az: a, el: e });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DoaError::BadRasterValue);
        }
        Ok(Self { values })
    }

    pub fn n_bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn az_bins(&self) -> usize {
        self.values.dim().1
    }

    pub fn el_bins(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Center angles of cell (a, e) in degrees.
    pub fn cell_center(&self, a: usize, e: usize) -> (f64, f64) {
        let az = -180.0 + (a as f64 + 0.5) * 360.0 / self.az_bins() as f64;
        let el = -90.0 + (e as f64 + 0.5) * 180.0 / self.el_bins() as f64;
        (az, el)
    }

    /// Sum over bands, the sheet the clustering head runs on.
    pub fn band_sum(&self) -> Array2<f64> {
        let (f, a, e) = self.values.dim();
        let mut out = Array2::zeros((a, e));
        for band in 0..f {
            for i in 0..a {
                for j in 0..e {
                    out[(i, j)] += self.values[(band, i, j)];
                }
            }
        }
        out
    }
}

/// Projects per-band spherical maps onto the angular grid. Each band is
/// min-max normalized to [0, 1] first (a constant band maps to zero), then
/// every cell takes the value of the tessellation node nearest to the cell
/// center.
pub fn rasterize(
    maps: &[SphericalAcousticMap],
    tess: &Tessellation,
    az_bins: usize,
    el_bins: usize,
) -> Result<RasterMap, DoaError> {
    if maps.is_empty() {
        return Err(DoaError::NoBands);
    }
    if az_bins < 2 || el_bins < 2 {
        return Err(DoaError::GridTooSmall {
            az: az_bins,
            el: el_bins,
        });
    }
    for map in maps {
        if map.n_points() != tess.len() {
            return Err(DoaError::MapSizeMismatch {
                expected: tess.len(),
                got: map.n_points(),
            });
        }
    }

    let mut cell_nodes = Vec::with_capacity(az_bins * el_bins);
    let probe = RasterMap {
        values: Array3::zeros((1, az_bins, el_bins)),
    };
    for a in 0..az_bins {
        for e in 0..el_bins {
            let (az, el) = probe.cell_center(a, e);
            cell_nodes.push(tess.nearest_node(&direction_from_angles(az, el)));
        }
    }

    let mut values = Array3::zeros((maps.len(), az_bins, el_bins));
    for (f, map) in maps.iter().enumerate() {
        let v = map.intensities();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for a in 0..az_bins {
            for e in 0..el_bins {
                let node = cell_nodes[a * el_bins + e];
                values[(f, a, e)] = if span > 0.0 { (v[node] - lo) / span } else { 0.0 };
            }
        }
    }
    RasterMap::new(values)
}

/// One extracted source: where it points and how much raster weight backs
/// it. `index` is the window or label frame the estimate belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    pub index: usize,
    pub direction: Vector3<f64>,
    pub weight: f64,
}

/// Clustering head: top cells, weighted spherical K-means, 15 degree merge.
/// Returns at most three unit-norm estimates; an all-zero raster yields an
/// empty list.
pub fn kmeans_doae(raster: &RasterMap, index: usize) -> Vec<DoaEstimate> {
    let sheet = raster.band_sum();
    let (a_bins, e_bins) = sheet.dim();

    // Highest TOP_CELLS cells; ties resolved toward the lower linear index.
    let mut cells: Vec<(usize, f64)> = sheet
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, v))
        .collect();
    cells.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    cells.truncate(TOP_CELLS);
    cells.retain(|(_, v)| *v > 0.0);
    if cells.is_empty() {
        return Vec::new();
    }

    let points: Vec<Vector3<f64>> = cells
        .iter()
        .map(|(i, _)| {
            let (az, el) = raster.cell_center(i / e_bins, i % e_bins);
            direction_from_angles(az, el)
        })
        .collect();
    let weights: Vec<f64> = cells.iter().map(|(_, v)| *v).collect();
    debug_assert!(a_bins * e_bins >= points.len());

    let mut centroids = kmeans_pp_init(&points, &weights);
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..MAX_ITERS {
        for (p, dir) in points.iter().enumerate() {
            assignment[p] = (0..centroids.len())
                .min_by(|&i, &j| {
                    great_circle(dir, &centroids[i])
                        .partial_cmp(&great_circle(dir, &centroids[j]))
                        .unwrap()
                })
                .unwrap();
        }
        let mut moved = 0.0f64;
        for (k, centroid) in centroids.iter_mut().enumerate() {
            let mut acc = Vector3::zeros();
            for (p, dir) in points.iter().enumerate() {
                if assignment[p] == k {
                    acc += weights[p] * dir;
                }
            }
            if acc.norm() > 0.0 {
                let next = acc.normalize();
                moved = moved.max(great_circle(centroid, &next));
                *centroid = next;
            }
        }
        if moved < CONVERGENCE_RAD {
            break;
        }
    }

    let mut clusters: Vec<(Vector3<f64>, f64)> = centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let w = points
                .iter()
                .zip(&weights)
                .enumerate()
                .filter(|(p, _)| assignment[*p] == k)
                .map(|(_, (_, w))| w)
                .sum();
            (*c, w)
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();

    // Iterative merge: fuse the closest pair under the threshold until all
    // survivors are mutually separated.
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let d = great_circle(&clusters[i].0, &clusters[j].0).to_degrees();
                if d <= MERGE_DEG && best.map_or(true, |(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        match best {
            Some((i, j, _)) => {
                let (di, wi) = clusters[i];
                let (dj, wj) = clusters[j];
                let fused = (wi * di + wj * dj).normalize();
                clusters[i] = (fused, wi + wj);
                clusters.remove(j);
            }
            None => break,
        }
    }

    clusters.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
    clusters
        .into_iter()
        .map(|(direction, weight)| DoaEstimate {
            index,
            direction,
            weight,
        })
        .collect()
}

/// Weighted K-means++ seeding with a fixed stream so the head stays
/// deterministic.
fn kmeans_pp_init(points: &[Vector3<f64>], weights: &[f64]) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED);
    let mut centroids = Vec::with_capacity(KMEANS_K);
    let first = weighted_pick(weights, &mut rng);
    centroids.push(points[first]);
    while centroids.len() < KMEANS_K {
        let scores: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, w)| {
                let d = centroids
                    .iter()
                    .map(|c| great_circle(p, c))
                    .fold(f64::INFINITY, f64::min);
                w * d * d
            })
            .collect();
        let total: f64 = scores.iter().sum();
        let pick = if total > 0.0 {
            weighted_pick(&scores, &mut rng)
        } else {
            weighted_pick(weights, &mut rng)
        };
        centroids.push(points[pick]);
    }
    centroids
}

fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Localization scores. `le_deg` averages great-circle error over matched
/// pairs (0 when nothing matched); `lr_percent` counts matched references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub le_deg: f64,
    pub lr_percent: f64,
    pub matched: usize,
    pub total_references: usize,
    pub total_estimates: usize,
    pub per_frame: Vec<FrameScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub matched: usize,
    pub references: usize,
    pub estimates: usize,
    pub sum_error_deg: f64,
}

impl EvalResult {
    /// Per-frame CSV: frame,matched,references,estimates,mean_error_deg.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from("frame,matched,references,estimates,mean_error_deg\n");
        for f in &self.per_frame {
            let mean = if f.matched > 0 {
                f.sum_error_deg / f.matched as f64
            } else {
                0.0
            };
            writeln!(
                out,
                "{},{},{},{},{}",
                f.frame, f.matched, f.references, f.estimates, mean
            )
            .unwrap();
        }
        out
    }
}

/// Scores frame-aligned estimates against references. Within each frame the
/// assignment minimizing total great-circle distance is used (optimal, not
/// greedy). With `gate_deg` set, matched pairs farther than the gate are
/// discarded from both LE and LR.
pub fn evaluate(
    estimates: &[Vec<DoaEstimate>],
    references: &[Vec<Vector3<f64>>],
    gate_deg: Option<f64>,
) -> Result<EvalResult, DoaError> {
    if estimates.len() != references.len() {
        return Err(DoaError::FrameCountMismatch {
            estimates: estimates.len(),
            references: references.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(references.len());
    let mut matched = 0usize;
    let mut total_refs = 0usize;
    let mut total_ests = 0usize;
    let mut sum_deg = 0.0f64;
    for (frame, (ests, refs)) in estimates.iter().zip(references).enumerate() {
        total_refs += refs.len();
        total_ests += ests.len();
        let mut frame_matched = 0usize;
        let mut frame_sum = 0.0f64;
        if !ests.is_empty() && !refs.is_empty() {
            let cost: Vec<Vec<f64>> = ests
                .iter()
                .map(|e| {
                    refs.iter()
                        .map(|r| great_circle(&e.direction, r).to_degrees())
                        .collect()
                })
                .collect();
            for (i, j) in hungarian_min(&cost) {
                let d = cost[i][j];
                if gate_deg.map_or(true, |g| d <= g) {
                    frame_matched += 1;
                    frame_sum += d;
                }
            }
        }
        matched += frame_matched;
        sum_deg += frame_sum;
        per_frame.push(FrameScore {
            frame,
            matched: frame_matched,
            references: refs.len(),
            estimates: ests.len(),
            sum_error_deg: frame_sum,
        });
    }
    Ok(EvalResult {
        le_deg: if matched > 0 {
            sum_deg / matched as f64
        } else {
            0.0
        },
        lr_percent: if total_refs > 0 {
            100.0 * matched as f64 / total_refs as f64
        } else {
            0.0
        },
        matched,
        total_references: total_refs,
        total_estimates: total_ests,
        per_frame,
    })
}

/// Minimum-cost assignment via the O(n^3) dual-potential method. Returns
/// min(rows, cols) pairs (row, col) covering the cheaper side completely.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 || cost[0].is_empty() {
        return Vec::new();
    }
    let cols = cost[0].len();
    // The potential method wants rows <= cols; transpose if necessary.
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect();
        return hungarian_min(&t).into_iter().map(|(j, i)| (i, j)).collect();
    }

    let inf = f64::INFINITY;
    // 1-based potentials; p[j] is the row matched to column j.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=cols)
        .filter(|&j| p[j] > 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

/// Reassigns per-window estimates to the label frame whose center is
/// nearest each window's timestamp.
pub fn estimates_to_frames(
    per_window: &[Vec<DoaEstimate>],
    window_times: &[f64],
    n_frames: usize,
    frame_duration: f64,
) -> Vec<Vec<DoaEstimate>> {
    let mut frames: Vec<Vec<DoaEstimate>> = vec![Vec::new(); n_frames];
    for (w, ests) in per_window.iter().enumerate() {
        if n_frames == 0 {
            break;
        }
        let t = window_times[w];
        let raw = (t / frame_duration - 0.5).round();
        let frame = raw.clamp(0.0, (n_frames - 1) as f64) as usize;
        for e in ests {
            frames[frame].push(DoaEstimate {
                index: frame,
                ..e.clone()
            });
        }
    }
    frames
}

/// CSV rows frame_index,azimuth_deg,elevation_deg,weight.
pub fn write_estimates_csv(path: &Path, frames: &[Vec<DoaEstimate>]) -> Result<(), DoaError> {
    let mut out = String::from("frame_index,azimuth_deg,elevation_deg,weight\n");
    for (i, frame) in frames.iter().enumerate() {
        for e in frame {
            let (az, el) = angles_from_direction(&e.direction);
            writeln!(out, "{i},{az},{el},{}", e.weight).unwrap();
        }
    }
    crate::train::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_estimates_csv(path: &Path, n_frames: usize) -> Result<Vec<Vec<DoaEstimate>>, DoaError> {
    let text = std::fs::read_to_string(path)?;
    let mut frames: Vec<Vec<DoaEstimate>> = vec![Vec::new(); n_frames];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(DoaError::Format(format!(
                "line {} has {} fields, expected 4",
                lineno + 1,
                parts.len()
            )));
        }
        let bad = |what: &str| DoaError::Format(format!("bad {what} on line {}", lineno + 1));
        let frame: usize = parts[0].parse().map_err(|_| bad("frame_index"))?;
        let az: f64 = parts[1].parse().map_err(|_| bad("azimuth"))?;
        let el: f64 = parts[2].parse().map_err(|_| bad("elevation"))?;
        let weight: f64 = parts[3].parse().map_err(|_| bad("weight"))?;
        if frame >= n_frames {
            return Err(DoaError::Format(format!(
                "frame index {frame} out of range 0..{n_frames}"
            )));
        }
        frames[frame].push(DoaEstimate {
            index: frame,
            direction: direction_from_angles(az, el),
            weight,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fibonacci_tessellation;
    use nalgebra::Rotation3;

    fn one_hot_map(n: usize, node: usize, band_hz: f64) -> SphericalAcousticMap {
        let mut v = vec![0.0; n];
        v[node] = 2.5;
        SphericalAcousticMap::new(v, band_hz)
    }

    /// Raster with a single hot cell at the given angles.
    fn hot_raster(az_bins: usize, el_bins: usize, spots: &[(f64, f64, f64)]) -> RasterMap {
        let mut values = Array3::zeros((1, az_bins, el_bins));
        for &(az, el, w) in spots {
            let a = (((az + 180.0) / 360.0 * az_bins as f64).floor() as usize).min(az_bins - 1);
            let e = (((el + 90.0) / 180.0 * el_bins as f64).floor() as usize).min(el_bins - 1);
            values[(0, a, e)] = w;
        }
        RasterMap::new(values).unwrap()
    }

    #[test]
    fn rasterize_puts_one_hot_peak_in_owning_cell() {
        let tess = fibonacci_tessellation(162, 6).unwrap();
        let node = 41;
        let map = one_hot_map(162, node, 2000.0);
        let raster = rasterize(&[map], &tess, 72, 36).unwrap();
        // Several adjacent cells may share the hot node when node spacing
        // exceeds the cell size; the cell holding the node's own angles
        // must be one of them and carry the normalized peak.
        let (az, el) = angles_from_direction(&tess.points()[node]);
        let a = (((az + 180.0) / 360.0 * 72.0).floor() as usize).min(71);
        let e = (((el + 90.0) / 180.0 * 36.0).floor() as usize).min(35);
        assert_eq!(raster.values()[(0, a, e)], 1.0, "peak at owning cell");
        let max = raster.values().iter().copied().fold(0.0f64, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn rasterize_zeroes_constant_band() {
        let tess = fibonacci_tessellation(64, 5).unwrap();
        let map = SphericalAcousticMap::new(vec![3.3; 64], 2000.0);
        let raster = rasterize(&[map], &tess, 24, 12).unwrap();
        assert!(raster.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_cells_use_nearby_nodes() {
        // Every cell's source node stays within the lattice's own max
        // nearest-neighbor spacing of the cell center.
        let tess = fibonacci_tessellation(242, 6).unwrap();
        let max_spacing = tess
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                tess.points()
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| great_circle(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max);
        let probe = RasterMap {
            values: Array3::zeros((1, 72, 36)),
        };
        for a in 0..72 {
            for e in 0..36 {
                let (az, el) = probe.cell_center(a, e);
                let dir = direction_from_angles(az, el);
                let node = tess.nearest_node(&dir);
                let d = great_circle(&dir, &tess.points()[node]);
                assert!(
                    d <= max_spacing,
                    "cell ({a},{e}) is {:.3} rad from node, spacing {:.3}",
                    d,
                    max_spacing
                );
            }
        }
    }

    #[test]
    fn single_hot_cell_yields_single_estimate() {
        let raster = hot_raster(72, 36, &[(42.5, 20.0, 1.0)]);
        let ests = kmeans_doae(&raster, 7);
        assert_eq!(ests.len(), 1);
        assert_eq!(ests[0].index, 7);
        let (az, el) = angles_from_direction(&ests[0].direction);
        assert!((az - 42.5).abs() < 2.6 && (el - 20.0).abs() < 2.6);
        assert!((ests[0].direction.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distant_blobs_stay_separate_nearby_blobs_merge() {
        let far = hot_raster(72, 36, &[(-20.0, 0.0, 1.0), (20.0, 0.0, 1.0)]);
        let ests = kmeans_doae(&far, 0);
        assert_eq!(ests.len(), 2, "40 degree blobs should stay separate");
        for e in &ests {
            let (az, el) = angles_from_direction(&e.direction);
            assert!(el.abs() < 2.6);
            assert!((az.abs() - 20.0).abs() < 2.6, "az {az}");
        }

        let near = hot_raster(72, 36, &[(-5.0, 0.0, 1.0), (5.0, 0.0, 1.0)]);
        let ests = kmeans_doae(&near, 0);
        assert_eq!(ests.len(), 1, "10 degree blobs should merge");
        let (az, el) = angles_from_direction(&ests[0].direction);
        assert!(az.abs() < 2.6 && el.abs() < 2.6, "merged at ({az},{el})");
    }

    #[test]
    fn all_zero_raster_gives_no_estimates() {
        let raster = RasterMap::new(Array3::zeros((2, 24, 12))).unwrap();
        assert!(kmeans_doae(&raster, 0).is_empty());
    }

    #[test]
    fn estimates_separated_and_unit_norm_for_random_rasters() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values =
                Array3::from_shape_fn((2, 36, 18), |_| rng.gen_range(0.0..1.0));
            let raster = RasterMap::new(values).unwrap();
            let ests = kmeans_doae(&raster, 0);
            assert!(ests.len() <= KMEANS_K);
            for e in &ests {
                assert!((e.direction.norm() - 1.0).abs() < 1e-9);
                assert!(e.weight > 0.0);
            }
            for i in 0..ests.len() {
                for j in (i + 1)..ests.len() {
                    let d = great_circle(&ests[i].direction, &ests[j].direction).to_degrees();
                    assert!(d > MERGE_DEG, "seed {seed}: estimates {d:.2} deg apart");
                }
            }
        }
    }

    fn est(direction: Vector3<f64>) -> DoaEstimate {
        DoaEstimate {
            index: 0,
            direction: direction.normalize(),
            weight: 1.0,
        }
    }

    #[test]
    fn perfect_predictions_score_zero_error_full_recall() {
        let dirs = [
            direction_from_angles(10.0, 5.0),
            direction_from_angles(-60.0, 30.0),
        ];
        let ests = vec![vec![est(dirs[0]), est(dirs[1])]; 4];
        let refs = vec![vec![dirs[0], dirs[1]]; 4];
        let r = evaluate(&ests, &refs, None).unwrap();
        assert!(r.le_deg < 1e-9);
        assert_eq!(r.lr_percent, 100.0);
        assert_eq!(r.matched, 8);
    }

    #[test]
    fn constant_offset_scores_exactly_five_degrees() {
        let mut ests = Vec::new();
        let mut refs = Vec::new();
        for i in 0..8 {
            let az = -140.0 + 40.0 * i as f64;
            refs.push(vec![direction_from_angles(az, 0.0)]);
            ests.push(vec![est(direction_from_angles(az + 5.0, 0.0))]);
        }
        let r = evaluate(&ests, &refs, None).unwrap();
        assert!((r.le_deg - 5.0).abs() < 1e-9, "LE {}", r.le_deg);
        assert_eq!(r.lr_percent, 100.0);
    }

    #[test]
    fn missing_prediction_halves_recall() {
        let d1 = direction_from_angles(0.0, 0.0);
        let d2 = direction_from_angles(90.0, 0.0);
        let ests = vec![vec![est(d1)]];
        let refs = vec![vec![d1, d2]];
        let r = evaluate(&ests, &refs, None).unwrap();
        assert!(r.le_deg < 1e-9);
        assert_eq!(r.lr_percent, 50.0);
        assert_eq!(r.matched, 1);
        assert_eq!(r.total_references, 2);
    }

    #[test]
    fn rotating_everything_leaves_scores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rot = Rotation3::from_euler_angles(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        let mut ests = Vec::new();
        let mut refs = Vec::new();
        let mut ests_rot = Vec::new();
        let mut refs_rot = Vec::new();
        for _ in 0..6 {
            let mut e_frame = Vec::new();
            let mut r_frame = Vec::new();
            let mut er_frame = Vec::new();
            let mut rr_frame = Vec::new();
            for _ in 0..3 {
                let d = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                let q = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                e_frame.push(est(d));
                r_frame.push(q);
                er_frame.push(est(rot * d));
                rr_frame.push(rot * q);
            }
            ests.push(e_frame);
            refs.push(r_frame);
            ests_rot.push(er_frame);
            refs_rot.push(rr_frame);
        }
        let a = evaluate(&ests, &refs, None).unwrap();
        let b = evaluate(&ests_rot, &refs_rot, None).unwrap();
        assert!((a.le_deg - b.le_deg).abs() < 1e-9);
        assert!((a.lr_percent - b.lr_percent).abs() < 1e-9);
    }

    #[test]
    fn mismatched_frame_counts_error() {
        let refs = vec![vec![direction_from_angles(0.0, 0.0)]];
        assert!(matches!(
            evaluate(&[], &refs, None).unwrap_err(),
            DoaError::FrameCountMismatch { .. }
        ));
    }

    #[test]
    fn gate_discards_far_matches() {
        let d = direction_from_angles(0.0, 0.0);
        let far = direction_from_angles(90.0, 0.0);
        let r = evaluate(&[vec![est(far)]], &[vec![d]], Some(10.0)).unwrap();
        assert_eq!(r.matched, 0);
        assert_eq!(r.lr_percent, 0.0);
        let r = evaluate(&[vec![est(far)]], &[vec![d]], None).unwrap();
        assert_eq!(r.matched, 1);
    }

    /// Brute-force minimum assignment by permutation enumeration.
    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        let (small, large, flip) = if rows <= cols {
            (rows, cols, false)
        } else {
            (cols, rows, true)
        };
        let at = |i: usize, j: usize| if flip { cost[j][i] } else { cost[i][j] };
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..large).collect();
        // Heap's algorithm over the large side; first `small` entries pair up.
        fn heaps(n: usize, arr: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
            if n <= 1 {
                visit(arr);
                return;
            }
            for i in 0..n {
                heaps(n - 1, arr, visit);
                if n % 2 == 0 {
                    arr.swap(i, n - 1);
                } else {
                    arr.swap(0, n - 1);
                }
            }
        }
        heaps(large, &mut perm, &mut |p: &[usize]| {
            let total: f64 = (0..small).map(|i| at(i, p[i])).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    #[test]
    fn hungarian_matches_brute_force_on_small_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..200 {
            let rows = rng.gen_range(1..=4);
            let cols = rng.gen_range(1..=4);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(0.0..180.0)).collect())
                .collect();
            let pairs = hungarian_min(&cost);
            assert_eq!(pairs.len(), rows.min(cols));
            let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            let best = brute_force_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "trial {trial}: hungarian {total} vs brute force {best}"
            );
            let mut seen_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut seen_cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            seen_rows.dedup();
            seen_cols.sort_unstable();
            seen_cols.dedup();
            assert_eq!(seen_cols.len(), pairs.len());
            assert_eq!(seen_rows.len(), pairs.len());
        }
    }

    #[test]
    fn window_estimates_land_in_nearest_frame() {
        let per_window = vec![
            vec![est(direction_from_angles(0.0, 0.0))],
            vec![est(direction_from_angles(10.0, 0.0))],
            vec![est(direction_from_angles(20.0, 0.0))],
        ];
        let times = vec![0.04, 0.16, 0.97];
        let frames = estimates_to_frames(&per_window, &times, 10, 0.1);
        assert_eq!(frames[0].len(), 1);
        assert_eq!(frames[1].len(), 1);
        assert_eq!(frames[9].len(), 1);
        assert_eq!(frames[9][0].index, 9);
        assert!(frames[2..9].iter().all(|f| f.is_empty()));
    }

    #[test]
    fn estimates_csv_round_trips() {
        let frames = vec![
            vec![est(direction_from_angles(15.0, -10.0))],
            vec![],
            vec![
                est(direction_from_angles(-120.0, 44.0)),
                est(direction_from_angles(0.0, 88.0)),
            ],
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.csv");
        write_estimates_csv(&path, &frames).unwrap();
        let back = read_estimates_csv(&path, 3).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[1].is_empty());
        for (orig, read) in frames.iter().zip(&back) {
            assert_eq!(orig.len(), read.len());
            for (a, b) in orig.iter().zip(read) {
                assert!((a.direction - b.direction).norm() < 1e-9);
                assert_eq!(a.weight, b.weight);
            }
        }
    }
}
