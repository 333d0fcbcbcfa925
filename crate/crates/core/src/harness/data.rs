//! Synthetic shape datasets and mesh surface sampling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cross, norm, normalize_unit_ball, sub, PointCloud, Vec3};
use crate::io::{read_off, write_ply, Mesh};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    PlaneWithBumps,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Cone,
        ShapeKind::PlaneWithBumps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Cone => "cone",
            ShapeKind::PlaneWithBumps => "plane_with_bumps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub classes: Vec<ShapeKind>,
    pub points_per_cloud: usize,
    pub instances_per_class: usize,
    pub jitter_sigma: f64,
    /// Per-axis scale factors are drawn from `[1 - v, 1 + v]` per instance.
    pub scale_variation: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            classes: ShapeKind::ALL.to_vec(),
            points_per_cloud: 256,
            instances_per_class: 64,
            jitter_sigma: 0.01,
            scale_variation: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if self.points_per_cloud < 32 {
            return Err(Error::invalid("points_per_cloud must be at least 32"));
        }
        if self.instances_per_class < 2 {
            return Err(Error::invalid("instances_per_class must be at least 2"));
        }
        if !(self.jitter_sigma >= 0.0) || !(0.0..1.0).contains(&self.scale_variation) {
            return Err(Error::invalid("jitter_sigma must be >= 0 and scale_variation in [0, 1)"));
        }
        Ok(())
    }
}

/// Labelled clouds split into train and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub class_names: Vec<String>,
    #[serde(with = "cloud_list")]
    pub train: Vec<PointCloud>,
    #[serde(with = "cloud_list")]
    pub test: Vec<PointCloud>,
}

mod cloud_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        label: usize,
        points: Vec<Vec3>,
    }

    pub fn serialize<S: Serializer>(clouds: &[PointCloud], s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = clouds
            .iter()
            .map(|c| Entry {
                label: c.label.unwrap_or(0),
                points: c.points.clone(),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<PointCloud>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| PointCloud {
                points: e.points,
                normals: None,
                label: Some(e.label),
            })
            .collect())
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: Dataset = serde_json::from_str(&text)?;
        let c = ds.num_classes();
        for cl in ds.train.iter().chain(&ds.test) {
            cl.validate()?;
            if cl.label.is_none_or(|y| y >= c) {
                return Err(Error::invalid(format!("{}: label out of range", path.display())));
            }
        }
        Ok(ds)
    }

    /// Writes every cloud as `<dir>/<split>_<index>_<class>.ply`.
    pub fn export_ply(&self, dir: &Path) -> Result<()> {
        for (split, clouds) in [("train", &self.train), ("test", &self.test)] {
            for (i, c) in clouds.iter().enumerate() {
                let name = &self.class_names[c.label.unwrap_or(0)];
                write_ply(&dir.join(format!("{split}_{i:04}_{name}.ply")), c)?;
            }
        }
        Ok(())
    }
}

fn unit_sphere(rng: &mut seed::Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let r = norm(v);
        if r > 1e-12 {
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;

fn bump_height(x: f64, y: f64) -> f64 {
    const BUMPS: [(f64, f64, f64); 3] = [(-0.4, -0.3, 0.25), (0.45, 0.1, 0.2), (-0.05, 0.55, 0.15)];
    BUMPS
        .iter()
        .map(|&(cx, cy, h)| h * (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.08).exp())
        .sum()
}

/// One point on the canonical surface of `kind`, uniform with respect to area
/// except for the bumpy plane, which is uniform in its xy footprint.
pub fn sample_surface_point(kind: ShapeKind, rng: &mut seed::Rng) -> Vec3 {
    match kind {
        ShapeKind::Sphere => unit_sphere(rng),
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let (a, b) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeKind::Cylinder => {
            // Side area 4*pi, each cap pi.
            let u = rng.random_range(0.0..6.0);
            let theta = rng.random_range(0.0..2.0 * PI);
            if u < 4.0 {
                [theta.cos(), theta.sin(), rng.random_range(-1.0..=1.0)]
            } else {
                let r = rng.random_range(0.0..1.0f64).sqrt();
                let z = if u < 5.0 { 1.0 } else { -1.0 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeKind::Torus => loop {
            let theta = rng.random_range(0.0..2.0 * PI);
            let phi = rng.random_range(0.0..2.0 * PI);
            let w = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.random_range(0.0..1.0) < w {
                let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                break [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()];
            }
        },
        ShapeKind::Cone => {
            // Apex at z = 1, base radius 1 at z = -1; lateral area pi*sqrt(5), base pi.
            let lateral = 5f64.sqrt();
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..lateral + 1.0) < lateral {
                let t = rng.random_range(0.0..1.0f64).sqrt();
                [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
            } else {
                let r = rng.random_range(0.0..1.0f64).sqrt();
                [r * theta.cos(), r * theta.sin(), -1.0]
            }
        }
        ShapeKind::PlaneWithBumps => {
            let (x, y) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            [x, y, bump_height(x, y)]
        }
    }
}

/// `n` canonical surface samples of `kind` without jitter or normalization.
pub fn sample_shape(kind: ShapeKind, n: usize, rng: &mut seed::Rng) -> Vec<Vec3> {
    (0..n).map(|_| sample_surface_point(kind, rng)).collect()
}

/// One instance: canonical samples, random per-axis scaling, Gaussian jitter,
/// then unit-ball normalization.
pub fn generate_instance(spec: &SyntheticDatasetSpec, class: usize, seed_value: u64) -> Result<PointCloud> {
    let mut rng = seed::rng(seed_value);
    let kind = spec.classes[class];
    let v = spec.scale_variation;
    let scale: Vec3 = [0, 1, 2].map(|_| if v > 0.0 { rng.random_range(1.0 - v..=1.0 + v) } else { 1.0 });
    let jitter = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let points = sample_shape(kind, spec.points_per_cloud, &mut rng)
        .into_iter()
        .map(|p| {
            let mut q = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
            if spec.jitter_sigma > 0.0 {
                for c in &mut q {
                    *c += jitter.sample(&mut rng);
                }
            }
            q
        })
        .collect();
    Ok(normalize_unit_ball(&PointCloud::new(points)?)?.with_label(class))
}

/// Generates every instance from its own sub-seed and splits each class 80/20
/// after a seeded shuffle.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let m = spec.instances_per_class;
    let n_train = ((m as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, m - 1);
    for class in 0..spec.classes.len() {
        let mut order: Vec<usize> = (0..m).collect();
        let mut rng = seed::rng(seed::derive_indexed(spec.seed, "split", class as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for (pos, &i) in order.iter().enumerate() {
            let s = seed::derive_indexed(seed::derive_indexed(spec.seed, "cloud", class as u64), "instance", i as u64);
            let cloud = generate_instance(spec, class, s)?;
            if pos < n_train {
                train.push(cloud);
            } else {
                test.push(cloud);
            }
        }
    }
    Ok(Dataset {
        class_names: spec.classes.iter().map(|k| k.name().to_string()).collect(),
        train,
        test,
    })
}

fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Fan triangulation of every polygon.
pub fn triangulate(mesh: &Mesh) -> Vec<[usize; 3]> {
    mesh.faces
        .iter()
        .flat_map(|f| (1..f.len().saturating_sub(1)).map(move |k| [f[0], f[k], f[k + 1]]))
        .collect()
}

/// Area-weighted uniform samples on the mesh surface, with the index of the
/// triangle each one came from.
pub fn sample_mesh(mesh: &Mesh, n: usize, rng: &mut seed::Rng) -> Result<Vec<(Vec3, usize)>> {
    let tris = triangulate(mesh);
    if tris.is_empty() {
        return Err(Error::invalid("mesh has no faces to sample"));
    }
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in &tris {
        total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random_range(0.0..total);
            let k = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
            let [a, b, c] = tris[k].map(|i| mesh.vertices[i]);
            let r1 = rng.random_range(0.0..1.0f64).sqrt();
            let r2 = rng.random_range(0.0..1.0f64);
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            let p = [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i]);
            (p, k)
        })
        .collect())
}

/// Reads an OFF mesh and returns `n` area-weighted surface samples,
/// normalized to the unit ball.
pub fn ingest_off(path: &Path, n: usize, seed_value: u64) -> Result<PointCloud> {
    let mesh = read_off(path)?;
    if mesh.faces.is_empty() {
        return Err(Error::invalid(format!("{}: mesh has no faces", path.display())));
    }
    let mut rng = seed::rng(seed_value);
    let points = sample_mesh(&mesh, n, &mut rng)?.into_iter().map(|(p, _)| p).collect();
    normalize_unit_ball(&PointCloud::new(points)?)
}

/// Loads every `.off` file under `dir` (sorted by path); the class of a file is
/// its parent directory name, classes numbered in sorted order.
pub fn ingest_off_dir(dir: &Path, n: usize, seed_value: u64) -> Result<(Vec<String>, Vec<PointCloud>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
                files.push(p);
            }
        }
    }
    files.sort();
    let class_of = |p: &Path| {
        p.parent()
            .and_then(|d| d.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut names: Vec<String> = files.iter().map(|p| class_of(p)).collect();
    names.sort();
    names.dedup();
    let clouds = files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let label = names.binary_search(&class_of(p)).unwrap();
            Ok(ingest_off(p, n, seed::derive_indexed(seed_value, "ingest", i as u64))?.with_label(label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((names, clouds))
}
