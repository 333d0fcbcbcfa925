//! Perturbation-size metrics between an adversarial cloud and its clean source.
//!
//! Chamfer and Hausdorff are directed (adversarial to clean) and use squared
//! Euclidean distances. Nearest-pair ties resolve to the lower clean index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, dot, estimate_normals, sub, PointCloud, Vec3};
use crate::io::fmt9;
use crate::par::Exec;

/// For every point of `from`, the index of its nearest point in `to` and the
/// squared distance to it.
pub fn nearest_pairs(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    nearest_pairs_with(from, to, Exec::Sequential)
}

pub fn nearest_pairs_with(from: &[Vec3], to: &[Vec3], exec: Exec) -> Vec<(usize, f64)> {
    exec.map_slice(from, |p| {
        let mut best = (0usize, f64::INFINITY);
        for (j, q) in to.iter().enumerate() {
            let d = dist2(*p, *q);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    })
}

fn nonempty(adv: &PointCloud, clean: &PointCloud) -> Result<()> {
    if adv.is_empty() || clean.is_empty() {
        return Err(Error::invalid("metric needs two nonempty clouds"));
    }
    Ok(())
}

/// Frobenius norm of the per-point displacement between corresponding points.
pub fn l2_norm_distance(adv: &PointCloud, clean: &PointCloud) -> Result<f64> {
    if adv.len() != clean.len() {
        return Err(Error::invalid(format!(
            "point counts differ: {} vs {}",
            adv.len(),
            clean.len()
        )));
    }
    Ok(adv
        .points
        .iter()
        .zip(&clean.points)
        .map(|(a, c)| dist2(*a, *c))
        .sum::<f64>()
        .sqrt())
}

/// Mean over adversarial points of the squared distance to the nearest clean point.
pub fn chamfer(adv: &PointCloud, clean: &PointCloud) -> Result<f64> {
    nonempty(adv, clean)?;
    let pairs = nearest_pairs(&adv.points, &clean.points);
    Ok(pairs.iter().map(|p| p.1).sum::<f64>() / adv.len() as f64)
}

/// Max over adversarial points of the squared distance to the nearest clean point.
pub fn hausdorff(adv: &PointCloud, clean: &PointCloud) -> Result<f64> {
    nonempty(adv, clean)?;
    let pairs = nearest_pairs(&adv.points, &clean.points);
    Ok(pairs.iter().map(|p| p.1).fold(0.0, f64::max))
}

/// Point-to-plane distortion against precomputed unit normals of the clean cloud.
pub fn plane_distortion_with_normals(adv: &PointCloud, clean: &PointCloud, normals: &[Vec3]) -> Result<f64> {
    nonempty(adv, clean)?;
    if normals.len() != clean.len() {
        return Err(Error::invalid("one normal per clean point required"));
    }
    let pairs = nearest_pairs(&adv.points, &clean.points);
    let total: f64 = adv
        .points
        .iter()
        .zip(&pairs)
        .map(|(p, &(j, _))| {
            let proj = dot(sub(*p, clean.points[j]), normals[j]);
            proj * proj
        })
        .sum();
    Ok(total / adv.len() as f64)
}

/// Mean squared projection of each nearest-pair displacement onto the clean
/// point's normal, with normals re-estimated from the clean cloud using `k`
/// neighbors.
pub fn plane_distortion(adv: &PointCloud, clean: &PointCloud, k: usize) -> Result<f64> {
    nonempty(adv, clean)?;
    if clean.len() < 2 {
        // A single clean point has no surface; every direction is normal.
        return chamfer(adv, clean);
    }
    let est = estimate_normals(clean, k)?;
    plane_distortion_with_normals(adv, clean, est.cloud.normals.as_deref().unwrap())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_norm: f64,
    pub d_chamfer: f64,
    pub d_hausdorff: f64,
    pub d_plane: f64,
}

pub const METRIC_CSV_HEADER: &str = "instance_id,d_norm,d_chamfer,d_hausdorff,d_plane";

impl MetricReport {
    pub fn csv_row(&self, instance_id: &str) -> String {
        format!(
            "{instance_id},{},{},{},{}",
            fmt9(self.d_norm),
            fmt9(self.d_chamfer),
            fmt9(self.d_hausdorff),
            fmt9(self.d_plane)
        )
    }

    /// Component-wise mean; all zeros for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let mut m = MetricReport::default();
        for r in reports {
            m.d_norm += r.d_norm;
            m.d_chamfer += r.d_chamfer;
            m.d_hausdorff += r.d_hausdorff;
            m.d_plane += r.d_plane;
        }
        m.d_norm /= n;
        m.d_chamfer /= n;
        m.d_hausdorff /= n;
        m.d_plane /= n;
        m
    }
}

pub fn full_report(adv: &PointCloud, clean: &PointCloud, k: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        d_norm: l2_norm_distance(adv, clean)?,
        d_chamfer: chamfer(adv, clean)?,
        d_hausdorff: hausdorff(adv, clean)?,
        d_plane: plane_distortion(adv, clean, k)?,
    })
}
