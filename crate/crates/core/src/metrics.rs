//! Reconstruction metrics: Chamfer and Hausdorff distances between point
//! samples, point-to-surface errors from ground-truth vertices, and error
//! statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    sample_surface, GeometryError, NormalizationTransform, Point3, PointIndex, TriangleIndex, TriangleMesh,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{0}: empty point set")]
    EmptySet(&'static str),
    #[error("reconstruction is empty")]
    EmptyReconstruction,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferVariant {
    /// Halved sum of the two directed means of nearest-neighbour distances.
    #[default]
    Unsquared,
    /// Same with squared distances.
    Squared,
}

fn directed(from: &[Point3], to: &PointIndex) -> Vec<f64> {
    from.par_iter()
        .map(|&p| to.nearest_sq(p).expect("nonempty target").1)
        .collect()
}

fn check(a: &[Point3], b: &[Point3], what: &'static str) -> Result<(), MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySet(what));
    }
    Ok(())
}

/// Both directed nearest-neighbour squared distance lists.
fn both_directions(a: &[Point3], b: &[Point3]) -> (Vec<f64>, Vec<f64>) {
    let ia = PointIndex::new(a.to_vec());
    let ib = PointIndex::new(b.to_vec());
    (directed(a, &ib), directed(b, &ia))
}

pub fn chamfer_distance(a: &[Point3], b: &[Point3], variant: ChamferVariant) -> Result<f64, MetricError> {
    check(a, b, "chamfer_distance")?;
    let (ab, ba) = both_directions(a, b);
    let term = |d: &[f64]| {
        let s: f64 = match variant {
            ChamferVariant::Unsquared => d.iter().map(|v| v.sqrt()).sum(),
            ChamferVariant::Squared => d.iter().sum(),
        };
        s / d.len() as f64
    };
    Ok(0.5 * (term(&ab) + term(&ba)))
}

pub fn hausdorff_distance(a: &[Point3], b: &[Point3]) -> Result<f64, MetricError> {
    check(a, b, "hausdorff_distance")?;
    let (ab, ba) = both_directions(a, b);
    Ok(ab.iter().chain(&ba).fold(0.0f64, |m, &v| m.max(v)).sqrt())
}

/// Exact distance from every ground-truth vertex to the reconstructed
/// triangle surface.
pub fn point_to_surface_errors(gt_vertices: &[Point3], recon: &TriangleMesh) -> Result<Vec<f64>, MetricError> {
    if recon.num_faces() == 0 {
        return Err(MetricError::EmptyReconstruction);
    }
    let index = TriangleIndex::new(recon)?;
    Ok(gt_vertices.par_iter().map(|&p| index.distance(p).0).collect())
}

/// Nearest-rank percentile: the value at sorted position `⌈p·n/100⌉ − 1`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStatistics {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
    /// Percentages of errors above 5, 10 and 20 mm. `None` when the input
    /// unit has no known millimetre conversion.
    pub pct_over_5mm: Option<f64>,
    pub pct_over_10mm: Option<f64>,
    pub pct_over_20mm: Option<f64>,
}

/// Statistics of distances given in normalized units; values are reported
/// in input units through `transform`.
pub fn error_statistics(
    distances: &[f64],
    transform: &NormalizationTransform,
) -> Result<ErrorStatistics, MetricError> {
    if distances.is_empty() {
        return Err(MetricError::EmptySet("error_statistics"));
    }
    let mut d: Vec<f64> = distances.iter().map(|&v| transform.length_to_input(v)).collect();
    d.sort_by(f64::total_cmp);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let median = nearest_rank(&d, 50.0);
    let pct = |mm: f64| {
        transform.mm_per_unit().map(|k| {
            let thr = mm / k;
            100.0 * d.iter().filter(|&&v| v > thr).count() as f64 / n
        })
    };
    Ok(ErrorStatistics {
        count: d.len(),
        mean,
        std,
        median,
        p50: median,
        p90: nearest_rank(&d, 90.0),
        max: *d.last().unwrap(),
        pct_over_5mm: pct(5.0),
        pct_over_10mm: pct(10.0),
        pct_over_20mm: pct(20.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Points sampled on each surface for CD and HD.
    pub surface_samples: usize,
    pub seed: u64,
    pub chamfer: ChamferVariant,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            surface_samples: 30_000,
            seed: 0,
            chamfer: ChamferVariant::Unsquared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub method: String,
    pub shape: String,
    pub unit: String,
    pub chamfer_variant: ChamferVariant,
    pub cd: f64,
    pub hd: f64,
    /// CD and HD in millimetres, when the unit converts.
    pub cd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub ed: ErrorStatistics,
    pub net_params: Option<usize>,
    pub latent_params: Option<usize>,
    pub surface_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Compares a reconstruction with its ground truth. Both meshes are in
/// normalized coordinates; reported lengths are converted to input units.
pub fn evaluate(
    gt: &TriangleMesh,
    recon: &TriangleMesh,
    transform: &NormalizationTransform,
    cfg: &MetricConfig,
) -> Result<(f64, f64, ErrorStatistics, Vec<f64>), MetricError> {
    if recon.num_faces() == 0 {
        return Err(MetricError::EmptyReconstruction);
    }
    // one seed for both, so identical meshes give identical samples
    let seed = crate::rng::derive_seed(cfg.seed, "metric.surface", 0);
    let a = sample_surface(gt, cfg.surface_samples, seed)?.points;
    let b = sample_surface(recon, cfg.surface_samples, seed)?.points;
    let cd = chamfer_distance(&a, &b, cfg.chamfer)?;
    let hd = hausdorff_distance(&a, &b)?;
    let errors = point_to_surface_errors(gt.vertices(), recon)?;
    let stats = error_statistics(&errors, transform)?;
    let cd = match cfg.chamfer {
        ChamferVariant::Unsquared => transform.length_to_input(cd),
        ChamferVariant::Squared => transform.length_to_input(transform.length_to_input(cd)),
    };
    Ok((cd, transform.length_to_input(hd), stats, errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_and_hausdorff_examples() {
        let a = [[0.0; 3]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_distance(&a, &a, ChamferVariant::Unsquared).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&a, &b, ChamferVariant::Unsquared).unwrap(), 1.0);
        let a2 = [[0.0; 3], [2.0, 0.0, 0.0]];
        assert_eq!(hausdorff_distance(&a2, &a).unwrap(), 2.0);
        assert!(matches!(hausdorff_distance(&[], &a), Err(MetricError::EmptySet(_))));
    }

    #[test]
    fn statistics_examples() {
        let id = NormalizationTransform::identity();
        let s = error_statistics(&[4.0, 1.0, 3.0, 2.0], &id).unwrap();
        assert_eq!((s.median, s.mean, s.p90), (2.0, 2.5, 4.0));
        let z = error_statistics(&[0.0; 5], &NormalizationTransform { unit_name: "mm".into(), ..id.clone() }).unwrap();
        assert_eq!((z.mean, z.std, z.pct_over_5mm), (0.0, 0.0, Some(0.0)));
        let c = error_statistics(&[0.25; 7], &id).unwrap();
        assert_eq!((c.mean, c.std), (0.25, 0.0));
        assert_eq!(c.pct_over_5mm, None);
    }
}
