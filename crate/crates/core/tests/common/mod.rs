//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's geometry or metric code.

#![allow(dead_code)]

use pc_advkit::geometry::{PointCloud, Vec3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(random_points(n, seed)).unwrap()
}

fn d2(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Full sort of every other point by (distance, index).
pub fn brute_knn(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d2(points[i], points[j]), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k.min(n - 1)).map(|x| x.1).collect()
        })
        .collect()
}

/// Nearest clean index and squared distance for each adversarial point,
/// lowest index on ties.
pub fn brute_nearest(adv: &[Vec3], clean: &[Vec3]) -> Vec<(usize, f64)> {
    adv.iter()
        .map(|p| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, q) in clean.iter().enumerate() {
                let d = d2(*p, *q);
                if d < best.1 || (d == best.1 && j < best.0) {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

pub fn brute_chamfer(adv: &[Vec3], clean: &[Vec3]) -> f64 {
    let v = brute_nearest(adv, clean);
    v.iter().map(|x| x.1).sum::<f64>() / adv.len() as f64
}

pub fn brute_hausdorff(adv: &[Vec3], clean: &[Vec3]) -> f64 {
    brute_nearest(adv, clean).iter().map(|x| x.1).fold(0.0, f64::max)
}

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes. Returns
/// eigenvalues and eigenvectors (as columns of the accumulated rotation).
pub fn jacobi_eigen(m: [[f64; 3]; 3]) -> ([f64; 3], [Vec3; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut b = a;
            for r in 0..3 {
                b[r][p] = c * a[r][p] - s * a[r][q];
                b[r][q] = s * a[r][p] + c * a[r][q];
            }
            let mut b2 = b;
            for col in 0..3 {
                b2[p][col] = c * b[p][col] - s * b[q][col];
                b2[q][col] = s * b[p][col] + c * b[q][col];
            }
            a = b2;
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let vals = [a[0][0], a[1][1], a[2][2]];
    let vecs = [0, 1, 2].map(|j| [v[0][j], v[1][j], v[2][j]]);
    (vals, vecs)
}

/// Unoriented normal of point `i`: eigenvector of the smallest eigenvalue of
/// the scatter of the point and its neighbors about their mean.
pub fn brute_normal(points: &[Vec3], neighbors: &[usize], i: usize) -> Vec3 {
    let members: Vec<Vec3> = std::iter::once(i).chain(neighbors.iter().copied()).map(|j| points[j]).collect();
    let m = members.len() as f64;
    let mean = [0, 1, 2].map(|c| members.iter().map(|p| p[c]).sum::<f64>() / m);
    let mut s = [[0.0; 3]; 3];
    for p in &members {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                s[r][c] += d[r] * d[c];
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(s);
    let mut k = 0;
    for j in 1..3 {
        if vals[j] < vals[k] {
            k = j;
        }
    }
    vecs[k]
}

/// Sign-free plane distortion with normals recomputed by the oracles above.
pub fn brute_plane_distortion(adv: &[Vec3], clean: &[Vec3], k: usize) -> f64 {
    let nbrs = brute_knn(clean, k);
    let pairs = brute_nearest(adv, clean);
    adv.iter()
        .zip(&pairs)
        .map(|(p, &(j, _))| {
            let u = brute_normal(clean, &nbrs[j], j);
            let d = [p[0] - clean[j][0], p[1] - clean[j][1], p[2] - clean[j][2]];
            (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]).powi(2)
        })
        .sum::<f64>()
        / adv.len() as f64
}

pub fn angle_between_lines(a: Vec3, b: Vec3) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    let c = ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)).abs().min(1.0);
    c.acos()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for t in i..=j {
                r[idx[t]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}
