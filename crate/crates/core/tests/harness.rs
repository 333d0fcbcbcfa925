use std::collections::HashMap;
use std::fs;
use std::path::Path;

use pc_advkit::attack::AttackConfig;
use pc_advkit::geometry::{normalize_unit_ball, PointCloud};
use pc_advkit::harness::data::{ingest_off, sample_mesh, ShapeKind, SyntheticDatasetSpec};
use pc_advkit::harness::experiment::{run_experiment, DatasetSource, ExperimentConfig};
use pc_advkit::io::{format_off, Mesh};
use pc_advkit::seed;

/// Axis-aligned box as six quads, faces ordered -x, +x, -y, +y, -z, +z.
fn box_mesh(sx: f64, sy: f64, sz: f64) -> Mesh {
    let v = |i: usize| {
        [
            if i & 1 == 0 { 0.0 } else { sx },
            if i & 2 == 0 { 0.0 } else { sy },
            if i & 4 == 0 { 0.0 } else { sz },
        ]
    };
    Mesh {
        vertices: (0..8).map(v).collect(),
        faces: vec![
            vec![0, 2, 6, 4],
            vec![1, 5, 7, 3],
            vec![0, 4, 5, 1],
            vec![2, 3, 7, 6],
            vec![0, 1, 3, 2],
            vec![4, 6, 7, 5],
        ],
    }
}

/// Pearson statistic of per-face counts against area-proportional
/// expectations; 15.086 is the 0.99 quantile of chi-square with 5 dof.
fn chi_square_faces(sx: f64, sy: f64, sz: f64, seed_value: u64) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("box.off");
    let mesh = box_mesh(sx, sy, sz);
    fs::write(&path, format_off(&mesh)).unwrap();
    let n = 10_000;
    let cloud = ingest_off(&path, n, seed_value).unwrap();

    // Replaying the seeded sampler recovers which triangle each point came from.
    let raw = sample_mesh(&mesh, n, &mut seed::rng(seed_value)).unwrap();
    let replay = normalize_unit_ball(&PointCloud::new(raw.iter().map(|x| x.0).collect()).unwrap()).unwrap();
    assert_eq!(replay.points, cloud.points);
    assert!((cloud.bounding_radius() - 1.0).abs() < 1e-12);

    let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy];
    let total: f64 = areas.iter().sum();
    let mut counts = [0usize; 6];
    for (_, tri) in &raw {
        counts[tri / 2] += 1;
    }
    counts
        .iter()
        .zip(areas)
        .map(|(&c, a)| {
            let e = n as f64 * a / total;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn ingest_off_is_area_weighted() {
    assert!(chi_square_faces(1.0, 1.0, 1.0, 3) < 15.086);
    assert!(chi_square_faces(1.0, 2.0, 3.0, 4) < 15.086);
}

#[test]
fn ingest_off_rejects_faceless_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pts.off");
    fs::write(&path, "OFF\n3 0 0\n0 0 0\n1 0 0\n0 1 0\n").unwrap();
    assert!(ingest_off(&path, 10, 0).is_err());
}

#[test]
fn malformed_off_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.off");
    fs::write(&path, "OFF\n3 1 0\n0 0 0\n1 zero 0\n0 1 0\n3 0 1 2\n").unwrap();
    let msg = ingest_off(&path, 10, 0).unwrap_err().to_string();
    assert!(msg.contains("bad.off:4"), "{msg}");
}

fn small(out: &Path, attack: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 9,
        output_dir: out.to_path_buf(),
        dataset: DatasetSource::Synthetic(SyntheticDatasetSpec {
            classes: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cone],
            points_per_cloud: 40,
            instances_per_class: 10,
            ..SyntheticDatasetSpec::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.models.train.epochs = 4;
    cfg.attack.enabled = attack;
    cfg.attack.targets_per_instance = 2;
    cfg.attack.fgsm = true;
    cfg.attack.fgsm_iterations = 10;
    cfg.attack.config = AttackConfig {
        bound: 0.2,
        iterations: 30,
        ..AttackConfig::default()
    };
    cfg
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

/// Recomputes every aggregate cell from instances.csv alone.
#[test]
fn aggregates_match_instance_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(dir.path(), true)).unwrap();
    assert!(!report.rows.is_empty());
    let (header, rows) = read_csv(&dir.path().join("instances.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();

    let mut rates: HashMap<(String, String), (usize, usize)> = HashMap::new();
    let mut bump = |key: (String, String), hit: bool| {
        let e = rates.entry(key).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    };
    let mut plane: HashMap<String, (f64, usize)> = HashMap::new();
    for row in &rows {
        let attack = row[col("attack")].clone();
        bump((attack.clone(), "arch-a".into()), row[col("white_box_success")] == "1");
        for (i, h) in header.iter().enumerate() {
            if let Some(v) = h.strip_prefix("transfer_") {
                bump((attack.clone(), v.to_string()), row[i] == "1");
            }
            if let Some(d) = h.strip_prefix("defense_") {
                bump((format!("defense:{d}"), attack.clone()), row[i] == "1");
            }
        }
        let e = plane.entry(attack).or_default();
        e.0 += row[col("d_plane")].parse::<f64>().unwrap();
        e.1 += 1;
    }
    let check = |file: &str, prefix: &str| {
        let (_, cells) = read_csv(&dir.path().join(file));
        assert!(!cells.is_empty());
        for c in cells {
            let key = (format!("{prefix}{}", c[0]), c[1].clone());
            let (hits, n) = rates[&key];
            assert_eq!(c[3].parse::<usize>().unwrap(), n, "{key:?}");
            let got: f64 = c[2].parse().unwrap();
            assert!((got - hits as f64 / n as f64).abs() < 1e-8, "{key:?}: {got} vs {hits}/{n}");
        }
    };
    check("transfer.csv", "");
    check("defense.csv", "defense:");

    for (attack, m) in &report.mean_metrics {
        let (sum, n) = plane[attack];
        let want = sum / n as f64;
        assert!((m.d_plane - want).abs() <= 1e-8 * want.abs().max(1e-12), "{attack}");
    }

    // Diagonal of the transfer table: white-box rates.
    for cell in report.transfer.iter().filter(|c| c.column == report.white_box) {
        let rs: Vec<_> = report.rows.iter().filter(|r| r.attack == cell.row).collect();
        let hits = rs.iter().filter(|r| r.white_box_success).count();
        assert_eq!(cell.success_rate, hits as f64 / rs.len() as f64);
    }
}

#[test]
fn disabled_attack_reports_only_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(dir.path(), false)).unwrap();
    assert!(report.rows.is_empty() && report.transfer.is_empty() && report.defense.is_empty());
    assert_eq!(report.clean_accuracy.len(), 2);
    let mut files: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["clean_accuracy.csv", "models", "report.json"]);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = small(Path::new("x"), true);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str("{\"seed\": 4}").unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.models, ExperimentConfig::default().models);
}
