//! Point clouds, exact k-nearest-neighbor search, local covariance analysis
//! and surface normal estimation.

use log::warn;

use crate::error::{Error, Result};
use crate::par::Exec;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// An ordered set of 3D points with optional unit normals and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub label: Option<usize>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty or non-finite input.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            normals: None,
            label: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        self.normals = Some(normals);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.points.len() {
                return Err(Error::invalid(format!(
                    "{} normals for {} points",
                    normals.len(),
                    self.points.len()
                )));
            }
            if let Some(i) = normals.iter().position(|u| (norm(*u) - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("normal {i} is not unit length")));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(c, *p);
        }
        scale(c, 1.0 / self.points.len() as f64)
    }

    /// Radius of the smallest origin-centred ball around the centroid that
    /// contains every point.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| norm(sub(*p, c)))
            .fold(0.0, f64::max)
    }

    /// Copy of the cloud restricted to `indices`, keeping normals and label.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            label: self.label,
        }
    }

    /// Applies a rotation matrix to points and normals alike.
    pub fn rotated(&self, r: &Mat3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| mat_vec(r, *p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|u| mat_vec(r, *u)).collect()),
            label: self.label,
        }
    }
}

/// Centers the cloud at its centroid and rescales it so the farthest point
/// has norm 1. A cloud whose points all coincide maps to the origin.
pub fn normalize_unit_ball(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.validate()?;
    let c = cloud.centroid();
    let centered: Vec<Vec3> = cloud.points.iter().map(|p| sub(*p, c)).collect();
    let r = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    let points = if r > 0.0 {
        centered.iter().map(|p| scale(*p, 1.0 / r)).collect()
    } else {
        vec![[0.0; 3]; centered.len()]
    };
    Ok(PointCloud {
        points,
        normals: cloud.normals.clone(),
        label: cloud.label,
    })
}

/// Per-point lists of nearest neighbor indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

/// Exact Euclidean k-NN by brute force, excluding the query point itself.
/// Ties are broken by lower index; `k` is truncated to `n - 1`.
pub fn knn(cloud: &PointCloud, k: usize) -> NeighborIndex {
    knn_with(cloud, k, Exec::default())
}

pub fn knn_with(cloud: &PointCloud, k: usize, exec: Exec) -> NeighborIndex {
    let n = cloud.len();
    let kk = k.min(n.saturating_sub(1));
    let pts = &cloud.points;
    let neighbors = exec.map_range(n, |i| {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(pts[i], pts[j]), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < cand.len() && kk > 0 {
            cand.select_nth_unstable_by(kk - 1, cmp);
            cand.truncate(kk);
        } else {
            cand.truncate(kk);
        }
        cand.sort_unstable_by(cmp);
        cand.into_iter().map(|(_, j)| j).collect()
    });
    NeighborIndex { k: kk, neighbors }
}

/// Sum of outer products of neighbor offsets around point `i`.
pub fn covariance_matrix(cloud: &PointCloud, index: &NeighborIndex, i: usize) -> Mat3 {
    let p = cloud.points[i];
    let mut s = [[0.0; 3]; 3];
    for &j in &index.neighbors[i] {
        let d = sub(cloud.points[j], p);
        for r in 0..3 {
            for c in r..3 {
                s[r][c] += d[r] * d[c];
            }
        }
    }
    // Fill the lower triangle by copy so the result is exactly symmetric.
    for r in 0..3 {
        for c in 0..r {
            s[r][c] = s[c][r];
        }
    }
    s
}

/// Scatter of point `i` and its neighbors about their common mean. This is
/// what normal estimation decomposes: unlike [`covariance_matrix`], its
/// smallest eigenvector is not tilted by one-sided neighborhoods on curved
/// surfaces.
pub fn local_scatter(cloud: &PointCloud, index: &NeighborIndex, i: usize) -> Mat3 {
    let nbrs = &index.neighbors[i];
    let members = || std::iter::once(i).chain(nbrs.iter().copied()).map(|j| cloud.points[j]);
    let count = (nbrs.len() + 1) as f64;
    let mean = scale(members().fold([0.0; 3], add), 1.0 / count);
    let mut s = [[0.0; 3]; 3];
    for p in members() {
        let d = sub(p, mean);
        for r in 0..3 {
            for c in r..3 {
                s[r][c] += d[r] * d[c];
            }
        }
    }
    for r in 0..3 {
        for c in 0..r {
            s[r][c] = s[c][r];
        }
    }
    s
}

/// Eigen-decomposition of a symmetric 3x3 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFrame {
    /// Sorted nonincreasing.
    pub eigenvalues: [f64; 3],
    /// `eigenvectors[j]` pairs with `eigenvalues[j]`.
    pub eigenvectors: [Vec3; 3],
}

impl LocalFrame {
    /// Eigenvector of the smallest eigenvalue.
    pub fn least(&self) -> Vec3 {
        self.eigenvectors[2]
    }

    pub fn reconstruct(&self) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for j in 0..3 {
            let e = self.eigenvectors[j];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += self.eigenvalues[j] * e[r] * e[c];
                }
            }
        }
        m
    }
}

/// Cyclic Jacobi eigen-solver for symmetric 3x3 matrices.
pub fn eigen_symmetric3(s: &Mat3) -> Result<LocalFrame> {
    let scale_ref = s
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if s.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    for r in 0..3 {
        for c in 0..r {
            if (s[r][c] - s[c][r]).abs() > 1e-9 * scale_ref.max(1.0) {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({r},{c})"
                )));
            }
        }
    }
    let mut a = *s;
    for r in 0..3 {
        for c in 0..r {
            let m = 0.5 * (a[r][c] + a[c][r]);
            a[r][c] = m;
            a[c][r] = m;
        }
    }
    let mut v: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let frob = a.iter().flat_map(|r| r.iter()).map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..64 {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off <= 1e-18 * frob.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let sn = t * c;
            // A <- J^T A J with the rotation acting on rows/cols p and q.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - sn * akq;
                a[k][q] = sn * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - sn * aqk;
                a[q][k] = sn * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - sn * vq;
                row[q] = sn * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let eigenvalues = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let col = |j: usize| -> Vec3 {
        let e = [v[0][j], v[1][j], v[2][j]];
        scale(e, 1.0 / norm(e))
    };
    Ok(LocalFrame {
        eigenvalues,
        eigenvectors: [col(order[0]), col(order[1]), col(order[2])],
    })
}

/// Normals plus the indices that fell back to the default direction.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub fallback: Vec<usize>,
}

pub const FALLBACK_NORMAL: Vec3 = [0.0, 0.0, 1.0];

/// Orients `u` away from the centroid; ties go to +z, then +y, then +x.
fn orient(u: Vec3, outward: Vec3) -> Vec3 {
    let d = dot(u, outward);
    if d.abs() >= 1e-9 {
        return if d < 0.0 { scale(u, -1.0) } else { u };
    }
    for axis in [2usize, 1, 0] {
        if u[axis].abs() > 1e-12 {
            return if u[axis] < 0.0 { scale(u, -1.0) } else { u };
        }
    }
    u
}

/// Estimates unit normals as the least-significant eigenvector of each
/// point's [`local_scatter`], oriented outward from the cloud centroid.
///
/// Neighborhoods whose covariance has fewer than two significant
/// eigenvalues (coincident or collinear neighbors) get [`FALLBACK_NORMAL`]
/// and are reported in [`NormalEstimate::fallback`].
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    estimate_normals_with(cloud, k, Exec::default())
}

pub fn estimate_normals_with(cloud: &PointCloud, k: usize, exec: Exec) -> Result<NormalEstimate> {
    cloud.validate()?;
    if cloud.len() < 2 {
        return Err(Error::invalid("normal estimation needs at least 2 points"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let index = knn_with(cloud, k, exec);
    let centroid = cloud.centroid();
    let per_point: Vec<Option<Vec3>> = exec.map_range(cloud.len(), |i| {
        let s = local_scatter(cloud, &index, i);
        let frame = eigen_symmetric3(&s).ok()?;
        let [l1, l2, _] = frame.eigenvalues;
        if l1 < 1e-12 || l2 <= 1e-10 * l1 {
            return None;
        }
        Some(orient(frame.least(), sub(cloud.points[i], centroid)))
    });
    let mut fallback = Vec::new();
    let normals = per_point
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            u.unwrap_or_else(|| {
                fallback.push(i);
                FALLBACK_NORMAL
            })
        })
        .collect();
    if !fallback.is_empty() {
        warn!(
            "{} of {} points have a degenerate neighborhood; using fallback normal",
            fallback.len(),
            cloud.len()
        );
    }
    Ok(NormalEstimate {
        cloud: PointCloud {
            points: cloud.points.clone(),
            normals: Some(normals),
            label: cloud.label,
        },
        fallback,
    })
}

/// Rotation about the z axis by `angle` radians.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about a unit `axis` by `angle` radians (Rodrigues).
pub fn rotation_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let a = scale(axis, 1.0 / norm(axis));
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + a[0] * a[0] * t, a[0] * a[1] * t - a[2] * s, a[0] * a[2] * t + a[1] * s],
        [a[1] * a[0] * t + a[2] * s, c + a[1] * a[1] * t, a[1] * a[2] * t - a[0] * s],
        [a[2] * a[0] * t - a[1] * s, a[2] * a[1] * t + a[0] * s, c + a[2] * a[2] * t],
    ]
}
