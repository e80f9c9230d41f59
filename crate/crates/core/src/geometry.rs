//! Microphone array geometries, spherical tessellations, and steering matrices.
//!
//! Directions are unit vectors in array-centered coordinates: +x forward,
//! +y left, +z up. Azimuth is measured from +x toward +y, elevation from the
//! horizontal plane toward +z.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("array needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("non-finite position at channel {0}")]
    NonFinitePosition(usize),
    #[error("tessellation needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("k_neighbors must be in 1..n_points, got k={k} for n={n}")]
    BadNeighborCount { k: usize, n: usize },
    #[error("channel index {index} out of range for {channels}-channel array (1-based)")]
    IndexOutOfRange { index: usize, channels: usize },
    #[error("duplicate channel index {0}")]
    DuplicateIndex(usize),
    #[error("band frequency must be positive, got {0}")]
    BadFrequency(f64),
    #[error("speed of sound must be positive, got {0}")]
    BadSpeedOfSound(f64),
    #[error("unknown geometry name {0:?} (built-ins: \"em32\", \"tetra\")")]
    UnknownName(String),
    #[error("geometry file: {0}")]
    Io(#[from] std::io::Error),
    #[error("geometry file: {0}")]
    Parse(String),
}

/// Great-circle (angular) distance between two unit vectors, radians.
pub fn great_circle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Unit direction vector from azimuth/elevation in degrees.
pub fn direction_from_angles(azimuth_deg: f64, elevation_deg: f64) -> Vector3<f64> {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// (azimuth, elevation) in degrees for a unit direction vector.
pub fn angles_from_direction(dir: &Vector3<f64>) -> (f64, f64) {
    let el = dir.z.clamp(-1.0, 1.0).asin();
    let az = dir.y.atan2(dir.x);
    (az.to_degrees(), el.to_degrees())
}

/// Microphone positions in meters, re-centered so the centroid sits at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<Vector3<f64>>,
    name: String,
}

/// Eigenmike em32 capsule angles: (colatitude from +z, azimuth), degrees,
/// in channel order 1..=32, on a rigid sphere of radius 0.042 m.
const EM32_ANGLES_DEG: [(f64, f64); 32] = [
    (69.0, 0.0),
    (90.0, 32.0),
    (111.0, 0.0),
    (90.0, 328.0),
    (32.0, 0.0),
    (55.0, 45.0),
    (90.0, 69.0),
    (125.0, 45.0),
    (148.0, 0.0),
    (125.0, 315.0),
    (90.0, 291.0),
    (55.0, 315.0),
    (21.0, 91.0),
    (58.0, 90.0),
    (121.0, 90.0),
    (159.0, 89.0),
    (69.0, 180.0),
    (90.0, 212.0),
    (111.0, 180.0),
    (90.0, 148.0),
    (32.0, 180.0),
    (55.0, 225.0),
    (90.0, 249.0),
    (125.0, 225.0),
    (148.0, 180.0),
    (125.0, 135.0),
    (90.0, 111.0),
    (55.0, 135.0),
    (21.0, 269.0),
    (58.0, 270.0),
    (122.0, 270.0),
    (159.0, 271.0),
];

const ARRAY_RADIUS_M: f64 = 0.042;

impl ArrayGeometry {
    /// Build a geometry from raw positions (meters). Positions are re-centered
    /// so their centroid lands on the origin.
    pub fn new(name: impl Into<String>, positions: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if positions.len() < 2 {
            return Err(GeometryError::TooFewChannels(positions.len()));
        }
        for (m, p) in positions.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinitePosition(m));
            }
        }
        let mut g = Self {
            positions,
            name: name.into(),
        };
        g.recenter();
        Ok(g)
    }

    /// Look up a built-in geometry by name.
    pub fn builtin(name: &str) -> Result<Self, GeometryError> {
        match name {
            "em32" => Ok(Self::em32()),
            "tetra" => Ok(Self::tetra()),
            other => Err(GeometryError::UnknownName(other.to_string())),
        }
    }

    /// 32-channel Eigenmike em32 capsule layout, radius 0.042 m.
    pub fn em32() -> Self {
        let positions = EM32_ANGLES_DEG
            .iter()
            .map(|&(colat_deg, az_deg)| {
                let colat = colat_deg.to_radians();
                let az = az_deg.to_radians();
                Vector3::new(
                    ARRAY_RADIUS_M * colat.sin() * az.cos(),
                    ARRAY_RADIUS_M * colat.sin() * az.sin(),
                    ARRAY_RADIUS_M * colat.cos(),
                )
            })
            .collect();
        Self::new("em32", positions).expect("em32 table is valid")
    }

    /// Regular tetrahedron of circumradius 0.042 m.
    pub fn tetra() -> Self {
        let s = ARRAY_RADIUS_M / 3.0f64.sqrt();
        let positions = vec![
            Vector3::new(s, s, s),
            Vector3::new(s, -s, -s),
            Vector3::new(-s, s, -s),
            Vector3::new(-s, -s, s),
        ];
        Self::new("tetra", positions).expect("tetra table is valid")
    }

    fn recenter(&mut self) {
        let centroid = self.positions.iter().sum::<Vector3<f64>>() / self.positions.len() as f64;
        for p in &mut self.positions {
            *p -= centroid;
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    /// Restrict to a subset of channels given by 1-based indices (Eigenmike
    /// channel numbering). The subset is re-centered.
    pub fn subset_channels(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        let mut seen = vec![false; self.channels()];
        let mut positions = Vec::with_capacity(indices.len());
        for &idx in indices {
            if idx == 0 || idx > self.channels() {
                return Err(GeometryError::IndexOutOfRange {
                    index: idx,
                    channels: self.channels(),
                });
            }
            if seen[idx - 1] {
                return Err(GeometryError::DuplicateIndex(idx));
            }
            seen[idx - 1] = true;
            positions.push(self.positions[idx - 1]);
        }
        Self::new(format!("{}-sub{}", self.name, indices.len()), positions)
    }

    /// Write as a structured-text file: name, unit ("m"), xyz rows.
    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let file = GeometryFile {
            name: self.name.clone(),
            unit: "m".to_string(),
            positions: self.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
        };
        let text = toml::to_string(&file).map_err(|e| GeometryError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Read a geometry file written by [`ArrayGeometry::save`].
    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        let file: GeometryFile =
            toml::from_str(&text).map_err(|e| GeometryError::Parse(e.to_string()))?;
        if file.unit != "m" {
            return Err(GeometryError::Parse(format!(
                "unsupported unit {:?}, expected \"m\"",
                file.unit
            )));
        }
        let positions = file
            .positions
            .iter()
            .map(|&[x, y, z]| Vector3::new(x, y, z))
            .collect();
        Self::new(file.name, positions)
    }
}

#[derive(Serialize, Deserialize)]
struct GeometryFile {
    name: String,
    unit: String,
    positions: Vec<[f64; 3]>,
}

/// Near-uniform direction grid on the unit sphere with a symmetric
/// k-nearest-neighbor graph.
///
/// Points follow an equal-area spiral from the north pole to the south pole,
/// so consecutive indices are spatial near-neighbors; 1-D convolutions over
/// the index order therefore act along the sphere surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Tessellation {
    points: Vec<Vector3<f64>>,
    neighbor_lists: Vec<Vec<usize>>,
}

impl Tessellation {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbor_lists
    }

    /// Index of the node closest (great-circle) to `dir`.
    pub fn nearest_node(&self, dir: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = p.dot(dir);
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        best
    }

    /// Mean great-circle distance from each node to its nearest neighbor, radians.
    pub fn mean_nearest_spacing(&self) -> f64 {
        let n = self.points.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    best = best.min(great_circle(&self.points[i], &self.points[j]));
                }
            }
            total += best;
        }
        total / n as f64
    }

    /// Nodes within `hops` edges of `node` in the neighbor graph (including it).
    pub fn nodes_within_hops(&self, node: usize, hops: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[node] = 0;
        let mut queue = std::collections::VecDeque::from([node]);
        let mut out = vec![node];
        while let Some(i) = queue.pop_front() {
            if dist[i] == hops {
                continue;
            }
            for &j in &self.neighbor_lists[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    out.push(j);
                    queue.push_back(j);
                }
            }
        }
        out
    }
}

/// Build an `n_points` spiral tessellation with symmetrized k-nearest-neighbor
/// lists. Index order follows the spiral from pole to pole.
pub fn fibonacci_tessellation(
    n_points: usize,
    k_neighbors: usize,
) -> Result<Tessellation, GeometryError> {
    if n_points < 4 {
        return Err(GeometryError::TooFewPoints(n_points));
    }
    if k_neighbors == 0 || k_neighbors >= n_points {
        return Err(GeometryError::BadNeighborCount {
            k: k_neighbors,
            n: n_points,
        });
    }

    let n = n_points as f64;
    let mut points = Vec::with_capacity(n_points);
    let mut azimuth = 0.0f64;
    for i in 0..n_points {
        // Equal-area latitudes, offset half a step from the poles.
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
        let sin_theta = (1.0 - z * z).sqrt();
        // Azimuth advances so the arc length between consecutive points is
        // close to the mean lattice spacing (winding spiral).
        if i > 0 {
            azimuth += 3.6 / (n.sqrt() * sin_theta);
        }
        points.push(Vector3::new(
            sin_theta * azimuth.cos(),
            sin_theta * azimuth.sin(),
            z,
        ));
    }

    // Symmetrized k-nearest-neighbor graph under great-circle distance.
    // Great-circle order equals descending-dot order on the unit sphere.
    let mut neighbor_lists: Vec<Vec<usize>> = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let mut by_dot: Vec<(usize, f64)> = (0..n_points)
            .filter(|&j| j != i)
            .map(|j| (j, points[i].dot(&points[j])))
            .collect();
        by_dot.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        neighbor_lists.push(by_dot[..k_neighbors].iter().map(|&(j, _)| j).collect());
    }
    let knn = neighbor_lists.clone();
    for (i, nbrs) in knn.iter().enumerate() {
        for &j in nbrs {
            if !neighbor_lists[j].contains(&i) {
                neighbor_lists[j].push(i);
            }
        }
    }
    for list in &mut neighbor_lists {
        list.sort_unstable();
    }

    Ok(Tessellation {
        points,
        neighbor_lists,
    })
}

/// Per-band complex phase responses of the array toward every tessellation
/// direction. Column n is the steering vector for direction r_n.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringMatrix {
    entries: DMatrix<Complex64>,
    wavelength: f64,
    band_hz: f64,
}

impl SteeringMatrix {
    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn band_hz(&self) -> f64 {
        self.band_hz
    }

    pub fn channels(&self) -> usize {
        self.entries.nrows()
    }

    pub fn directions(&self) -> usize {
        self.entries.ncols()
    }

    /// Steering vector (column) for direction index n.
    pub fn column(&self, n: usize) -> nalgebra::DVectorView<'_, Complex64> {
        self.entries.column(n)
    }
}

/// A[m][n] = exp(-j * (2*pi/lambda) * p_m . r_n), lambda = c / band_hz.
pub fn steering_matrix(
    geometry: &ArrayGeometry,
    tess: &Tessellation,
    band_hz: f64,
    speed_of_sound: f64,
) -> Result<SteeringMatrix, GeometryError> {
    if !(band_hz > 0.0) {
        return Err(GeometryError::BadFrequency(band_hz));
    }
    if !(speed_of_sound > 0.0) {
        return Err(GeometryError::BadSpeedOfSound(speed_of_sound));
    }
    let wavelength = speed_of_sound / band_hz;
    let wavenumber = 2.0 * PI / wavelength;
    let m = geometry.channels();
    let n = tess.len();
    let entries = DMatrix::from_fn(m, n, |mi, ni| {
        let phase = -wavenumber * geometry.positions()[mi].dot(&tess.points()[ni]);
        Complex64::from_polar(1.0, phase)
    });
    Ok(SteeringMatrix {
        entries,
        wavelength,
        band_hz,
    })
}
