use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vec3::{self, add, scale};
use super::{GeometryError, NormalizationTransform, Point3, PointIndex, TriangleIndex, TriangleMesh};
use crate::rng;

/// Training points for one shape. `normals` is meaningful only where
/// `on_surface` is set and holds zeros elsewhere.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Point3>,
    pub unsigned_distance: Vec<f64>,
    pub on_surface: Vec<bool>,
    pub normals: Vec<Point3>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &SampleSet) {
        self.points.extend_from_slice(&other.points);
        self.unsigned_distance.extend_from_slice(&other.unsigned_distance);
        self.on_surface.extend_from_slice(&other.on_surface);
        self.normals.extend_from_slice(&other.normals);
    }

    pub fn surface_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.on_surface[i]).collect()
    }

    pub fn space_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.on_surface[i]).collect()
    }
}

/// Area-uniform surface samples carrying the flat normal of their face.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<SampleSet, GeometryError> {
    if mesh.num_faces() == 0 {
        return Err(GeometryError::EmptyMesh);
    }
    if count == 0 {
        return Err(GeometryError::InvalidArgument("surface sample count must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.num_faces());
    let mut total = 0.0;
    for f in 0..mesh.num_faces() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total.is_nan() || total <= 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let mut rng = rng::stream(seed, "sample_surface", 0);
    let mut out = SampleSet::default();
    for _ in 0..count {
        let target = rng.random::<f64>() * total;
        let f = cumulative
            .partition_point(|&c| c <= target)
            .min(mesh.num_faces() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let [a, b, c] = mesh.triangle(f);
        let p = add(add(scale(a, 1.0 - s), scale(b, s * (1.0 - r2))), scale(c, s * r2));
        out.points.push(p);
        out.unsigned_distance.push(0.0);
        out.on_surface.push(true);
        out.normals.push(mesh.face_normal(f));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Standard deviation of the wide Gaussian, in normalized units.
    pub sigma_global: f64,
    /// The narrow Gaussian's deviation is the distance to this neighbour.
    pub knn_k: usize,
    /// Replaces the k-NN deviation when set.
    pub sigma_local_override: Option<f64>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            sigma_global: 0.3,
            knn_k: 50,
            sigma_local_override: None,
        }
    }
}

/// Off-surface samples: every drawn surface centre emits one point from a
/// narrow Gaussian (width = distance to its k-th nearest other surface
/// sample) and one from a wide Gaussian. Unsigned distances are exact
/// distances to `index`.
pub fn sample_perturbed(
    surface: &SampleSet,
    index: &TriangleIndex,
    count: usize,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<SampleSet, GeometryError> {
    if surface.is_empty() {
        return Err(GeometryError::InvalidArgument("no surface samples to perturb".into()));
    }
    if cfg.sigma_local_override.is_none() && surface.len() <= cfg.knn_k {
        return Err(GeometryError::InvalidArgument(format!(
            "{} surface samples, need more than knn_k = {}",
            surface.len(),
            cfg.knn_k
        )));
    }
    let mut rng = rng::stream(seed, "sample_perturbed", 0);
    let centers: Vec<usize> = (0..count.div_ceil(2))
        .map(|_| rng.random_range(0..surface.len()))
        .collect();

    let sigma_local: Vec<f64> = match cfg.sigma_local_override {
        Some(s) => vec![s; centers.len()],
        None => {
            let tree = PointIndex::new(surface.points.clone());
            centers
                .par_iter()
                .map(|&c| {
                    // the centre itself is its own 0-th neighbour
                    let nn = tree.knn_sq(surface.points[c], cfg.knn_k + 1);
                    nn.last().map(|&(_, d2)| d2.sqrt()).unwrap_or(0.0)
                })
                .collect()
        }
    };

    let mut points = Vec::with_capacity(count);
    for (k, &c) in centers.iter().enumerate() {
        let x = surface.points[c];
        for sigma in [sigma_local[k], cfg.sigma_global] {
            let noise: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            points.push(add(x, scale(noise, sigma)));
        }
    }
    points.truncate(count);
    let unsigned_distance: Vec<f64> = points.par_iter().map(|&p| index.distance(p).0).collect();
    Ok(SampleSet {
        unsigned_distance,
        on_surface: vec![false; points.len()],
        normals: vec![[0.0; 3]; points.len()],
        points,
    })
}

/// JSON sidecar describing a sample cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCacheInfo {
    pub shape_id: String,
    pub surface_count: usize,
    pub perturbed_count: usize,
    pub seed: u64,
    pub sigma_global: f64,
    pub knn_k: usize,
    pub sigma_local_override: Option<f64>,
    pub mesh_hash: String,
    pub config_hash: String,
    pub normalization: NormalizationTransform,
    /// Row layout of the binary file.
    pub columns: Vec<String>,
}

pub const SAMPLE_COLUMNS: [&str; 8] = ["x", "y", "z", "d_u", "nx", "ny", "nz", "on_surface"];

/// Writes one little-endian `f64` record of 8 columns per sample plus the
/// JSON sidecar.
pub fn write_sample_cache(
    bin_path: &Path,
    json_path: &Path,
    samples: &SampleSet,
    info: &SampleCacheInfo,
) -> Result<(), GeometryError> {
    let mut bytes = Vec::with_capacity(samples.len() * 64);
    for i in 0..samples.len() {
        let p = samples.points[i];
        let n = samples.normals[i];
        let flag = if samples.on_surface[i] { 1.0 } else { 0.0 };
        for v in [p[0], p[1], p[2], samples.unsigned_distance[i], n[0], n[1], n[2], flag] {
            bytes.extend_from_slice(&f64::to_le_bytes(v));
        }
    }
    fs::write(bin_path, bytes)?;
    let json = serde_json::to_string_pretty(info)
        .map_err(|e| GeometryError::InvalidArgument(e.to_string()))?;
    fs::write(json_path, json)?;
    Ok(())
}

pub fn read_sample_cache(bin_path: &Path, json_path: &Path) -> Result<(SampleSet, SampleCacheInfo), GeometryError> {
    let load = |msg: String| GeometryError::Load {
        path: bin_path.display().to_string(),
        message: msg,
    };
    let info: SampleCacheInfo = serde_json::from_str(&fs::read_to_string(json_path)?)
        .map_err(|e| load(format!("sidecar {}: {e}", json_path.display())))?;
    let bytes = fs::read(bin_path)?;
    if bytes.len() % 64 != 0 {
        return Err(load(format!("length {} is not a multiple of 64", bytes.len())));
    }
    let n = bytes.len() / 64;
    if n != info.surface_count + info.perturbed_count {
        return Err(load(format!(
            "{n} records but the sidecar announces {}",
            info.surface_count + info.perturbed_count
        )));
    }
    let mut s = SampleSet::default();
    for rec in bytes.chunks_exact(64) {
        let v: Vec<f64> = rec
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        s.points.push([v[0], v[1], v[2]]);
        s.unsigned_distance.push(v[3]);
        s.normals.push([v[4], v[5], v[6]]);
        s.on_surface.push(v[7] != 0.0);
    }
    Ok((s, info))
}

/// Largest deviation of any surface normal from unit length.
pub fn max_normal_error(s: &SampleSet) -> f64 {
    s.surface_indices()
        .iter()
        .map(|&i| (vec3::norm(s.normals[i]) - 1.0).abs())
        .fold(0.0, f64::max)
}
