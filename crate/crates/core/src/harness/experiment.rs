//! End-to-end experiment orchestration and report files.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{fgsm_baseline_with, run_ita_with, AttackConfig, AttackInstance, AttackResult, Objective};
use crate::defense::{adversarial_train, noise_along_normal, sor, srs, AdvTrainConfig, DefenseConfig};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::harness::data::{generate_dataset, ingest_off_dir, Dataset, SyntheticDatasetSpec};
use crate::io::fmt9;
use crate::metrics::{MetricReport, METRIC_CSV_HEADER};
use crate::nn::{accuracy, train_classifier, Architecture, ClassifierModel, TrainConfig};
use crate::par::Exec;
use crate::seed;
use crate::transform::{adversarial_learn_with, AdvLearnConfig, TransformModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticDatasetSpec),
    /// `.off` meshes under `path`, one class per parent directory.
    OffDir { path: PathBuf, points_per_cloud: usize },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticDatasetSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelsConfig {
    /// Architecture the attacks are crafted on.
    pub white_box: String,
    /// Architectures the attacks are transferred to.
    pub victims: Vec<String>,
    pub train: TrainConfig,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            white_box: "arch-a".into(),
            victims: vec!["arch-b".into()],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackStage {
    pub enabled: bool,
    pub config: AttackConfig,
    /// Wrong classes attacked per test cloud (capped at C - 1).
    pub targets_per_instance: usize,
    /// Upper limit on attacked (cloud, target) pairs; 0 means no limit.
    pub max_instances: usize,
    /// Also run the FGSM comparator at epsilon = bound.
    pub fgsm: bool,
    pub fgsm_iterations: usize,
}

impl Default for AttackStage {
    fn default() -> Self {
        AttackStage {
            enabled: true,
            config: AttackConfig::default(),
            targets_per_instance: 1,
            max_instances: 0,
            fgsm: false,
            fgsm_iterations: crate::attack::FGSM_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvLearnStage {
    pub enabled: bool,
    pub config: AdvLearnConfig,
    /// Training clouds used as the adversarial-learning working set.
    pub working_set: usize,
}

impl Default for AdvLearnStage {
    fn default() -> Self {
        AdvLearnStage {
            enabled: false,
            config: AdvLearnConfig::default(),
            working_set: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseStage {
    pub input: Option<DefenseConfig>,
    /// Trains vanilla and constraint-regularized adversarial copies of the
    /// first victim (or the white-box model without victims).
    pub adv_train: Option<AdvTrainConfig>,
}

impl Default for DefenseStage {
    fn default() -> Self {
        DefenseStage {
            input: Some(DefenseConfig::default()),
            adv_train: None,
        }
    }
}

/// File locations for single-purpose subcommands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobPaths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub victims: Vec<PathBuf>,
    pub transform: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub target: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub models: ModelsConfig,
    pub attack: AttackStage,
    pub adv_learn: AdvLearnStage,
    pub defenses: DefenseStage,
    pub job: JobPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("pc-advkit-out"),
            dataset: DatasetSource::default(),
            models: ModelsConfig::default(),
            attack: AttackStage::default(),
            adv_learn: AdvLearnStage::default(),
            defenses: DefenseStage::default(),
            job: JobPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        Architecture::by_tag(&self.models.white_box)?;
        for v in &self.models.victims {
            Architecture::by_tag(v)?;
        }
        if let DatasetSource::OffDir { path, .. } = &self.dataset {
            if !path.exists() {
                return Err(Error::invalid(format!("dataset directory {} does not exist", path.display())));
            }
        }
        if let Some(d) = &self.defenses.input {
            d.validate()?;
        }
        if self.adv_learn.enabled {
            self.adv_learn.config.validate()?;
        }
        Ok(())
    }

    pub fn sub_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }
}

/// Builds the configured dataset; synthetic data is seeded from the
/// experiment seed.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => generate_dataset(&SyntheticDatasetSpec {
            seed: cfg.sub_seed("dataset"),
            ..spec.clone()
        }),
        DatasetSource::OffDir { path, points_per_cloud } => {
            let (names, clouds) = ingest_off_dir(path, *points_per_cloud, cfg.sub_seed("dataset"))?;
            if names.len() < 2 {
                return Err(Error::invalid("mesh dataset needs at least two class directories"));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in 0..names.len() {
                let members: Vec<&PointCloud> = clouds.iter().filter(|c| c.label == Some(class)).collect();
                let n_train = ((members.len() as f64) * 0.8).round() as usize;
                for (i, c) in members.into_iter().enumerate() {
                    if i < n_train {
                        train.push(c.clone());
                    } else {
                        test.push(c.clone());
                    }
                }
            }
            Ok(Dataset {
                class_names: names,
                train,
                test,
            })
        }
    }
}

/// Trains one architecture with seeds derived from `seed_value` and the tag.
pub fn train_model(
    tag: &str,
    data: &Dataset,
    train_cfg: &TrainConfig,
    seed_value: u64,
) -> Result<(ClassifierModel, crate::nn::TrainHistory)> {
    let arch = Architecture::by_tag(tag)?;
    let init = ClassifierModel::new(arch, data.num_classes(), seed::derive(seed_value, &format!("init-{tag}")))?;
    let cfg = TrainConfig {
        seed: seed::derive(seed_value, &format!("train-{tag}")),
        ..train_cfg.clone()
    };
    train_classifier(&init, &data.train, &data.test, &cfg)
}

/// Correctly classified clouds paired with seeded wrong target classes.
pub fn select_instances(
    model: &ClassifierModel,
    clouds: &[PointCloud],
    prefix: &str,
    targets_per_instance: usize,
    max_instances: usize,
    seed_value: u64,
) -> Vec<AttackInstance> {
    let c = model.num_classes;
    let predictions = Exec::default().map_slice(clouds, |cl| model.predict(cl));
    let mut out = Vec::new();
    for (i, (cloud, pred)) in clouds.iter().zip(predictions).enumerate() {
        let Some(y) = cloud.label else { continue };
        if pred != y {
            info!("skipping misclassified {prefix}{i}: label {y}, predicted {pred}");
            continue;
        }
        let mut wrong: Vec<usize> = (0..c).filter(|&k| k != y).collect();
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "targets", i as u64));
        let take = targets_per_instance.clamp(1, wrong.len());
        rand::seq::SliceRandom::shuffle(wrong.as_mut_slice(), &mut rng);
        let mut targets = wrong[..take].to_vec();
        targets.sort_unstable();
        for t in targets {
            out.push(AttackInstance {
                id: format!("{prefix}{i:04}-y{t}"),
                cloud: cloud.clone(),
                target: t,
            });
        }
    }
    if max_instances > 0 {
        out.truncate(max_instances);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackVariant<'a> {
    Ita,
    ItaTransformed(&'a TransformModel),
    Fgsm { iterations: usize },
}

impl AttackVariant<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            AttackVariant::Ita => "ita",
            AttackVariant::ItaTransformed(_) => "ita_t",
            AttackVariant::Fgsm { .. } => "fgsm",
        }
    }
}

/// Attacks every instance; instance `i` uses sub-seed `i` of `seed_value`.
pub fn run_attacks(
    model: &ClassifierModel,
    instances: &[AttackInstance],
    variant: AttackVariant,
    cfg: &AttackConfig,
    seed_value: u64,
    exec: Exec,
) -> Result<Vec<AttackResult>> {
    let indexed: Vec<(usize, &AttackInstance)> = instances.iter().enumerate().collect();
    exec.map_slice(&indexed, |(i, inst)| {
        let icfg = cfg.for_target(inst.target);
        let s = seed::derive_indexed(seed_value, "attack", *i as u64);
        match variant {
            AttackVariant::Ita => run_ita_with(model, &inst.cloud, &icfg, &Objective::Plain, s),
            AttackVariant::ItaTransformed(t) => run_ita_with(model, &inst.cloud, &icfg, &Objective::Transformed(t), s),
            AttackVariant::Fgsm { iterations } => {
                fgsm_baseline_with(model, &inst.cloud, cfg.bound, inst.target, iterations, cfg.k_neighbors)
            }
        }
    })
    .into_iter()
    .collect()
}

/// Whether `model` assigns each adversarial cloud its target class.
pub fn transfer_hits(model: &ClassifierModel, results: &[AttackResult]) -> Vec<bool> {
    Exec::default().map_slice(results, |r| model.predict(&r.adversarial) == r.target_class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDefense {
    Srs,
    Sor,
    NoiseAlongNormal,
}

impl InputDefense {
    pub const ALL: [InputDefense; 3] = [InputDefense::Srs, InputDefense::Sor, InputDefense::NoiseAlongNormal];

    pub fn name(self) -> &'static str {
        match self {
            InputDefense::Srs => "srs",
            InputDefense::Sor => "sor",
            InputDefense::NoiseAlongNormal => "noise_normal",
        }
    }

    pub fn apply(self, cfg: &DefenseConfig, cloud: &PointCloud, seed_value: u64) -> Result<PointCloud> {
        match self {
            InputDefense::Srs => srs(cloud, cfg.srs_keep, seed_value),
            InputDefense::Sor => sor(cloud, cfg.sor_k, cfg.sor_std_mult),
            InputDefense::NoiseAlongNormal => noise_along_normal(cloud, cfg.noise_sigma_frac, cfg.noise_k, seed_value),
        }
    }
}

/// Whether each adversarial cloud still hits its target after the defense.
pub fn defended_hits(
    model: &ClassifierModel,
    results: &[AttackResult],
    defense: InputDefense,
    cfg: &DefenseConfig,
    seed_value: u64,
) -> Result<Vec<bool>> {
    let indexed: Vec<(usize, &AttackResult)> = results.iter().enumerate().collect();
    Exec::default()
        .map_slice(&indexed, |(i, r)| {
            let d = defense.apply(cfg, &r.adversarial, seed::derive_indexed(seed_value, defense.name(), *i as u64))?;
            Ok(model.predict(&d) == r.target_class)
        })
        .into_iter()
        .collect()
}

pub fn rate(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceRow {
    pub instance_id: String,
    pub source_class: usize,
    pub target_class: usize,
    pub attack: String,
    pub white_box_success: bool,
    /// One entry per victim, in `ExperimentReport::victims` order.
    pub transfer_success: Vec<bool>,
    /// One entry per defense, in `ExperimentReport::defenses` order.
    pub defense_success: Vec<bool>,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCell {
    pub row: String,
    pub column: String,
    pub success_rate: f64,
    pub n_instances: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    /// (model name, test accuracy).
    pub clean_accuracy: Vec<(String, f64)>,
    pub white_box: String,
    pub victims: Vec<String>,
    pub defenses: Vec<String>,
    pub rows: Vec<InstanceRow>,
    /// Attack x model success rates; the white-box column is the diagonal.
    pub transfer: Vec<RateCell>,
    /// Defense x attack success rates.
    pub defense: Vec<RateCell>,
    /// Mean metrics per attack.
    pub mean_metrics: Vec<(String, MetricReport)>,
}

impl ExperimentReport {
    /// Aggregate tables recomputed from the per-instance rows.
    pub fn aggregate(&self) -> (Vec<RateCell>, Vec<RateCell>, Vec<(String, MetricReport)>) {
        let mut attacks: Vec<String> = Vec::new();
        for r in &self.rows {
            if !attacks.contains(&r.attack) {
                attacks.push(r.attack.clone());
            }
        }
        let mut transfer = Vec::new();
        let mut defense = Vec::new();
        let mut means = Vec::new();
        for a in &attacks {
            let rows: Vec<&InstanceRow> = self.rows.iter().filter(|r| &r.attack == a).collect();
            let cell = |column: &str, hits: Vec<bool>| RateCell {
                row: a.clone(),
                column: column.to_string(),
                success_rate: rate(&hits),
                n_instances: hits.len(),
            };
            transfer.push(cell(&self.white_box, rows.iter().map(|r| r.white_box_success).collect()));
            for (v, name) in self.victims.iter().enumerate() {
                transfer.push(cell(name, rows.iter().map(|r| r.transfer_success[v]).collect()));
            }
            for (d, name) in self.defenses.iter().enumerate() {
                let hits: Vec<bool> = rows.iter().map(|r| r.defense_success[d]).collect();
                defense.push(RateCell {
                    row: name.clone(),
                    column: a.clone(),
                    success_rate: rate(&hits),
                    n_instances: hits.len(),
                });
            }
            let ms: Vec<MetricReport> = rows.iter().map(|r| r.metrics).collect();
            means.push((a.clone(), MetricReport::mean(&ms)));
        }
        (transfer, defense, means)
    }

    pub fn transfer_csv(&self) -> String {
        let mut s = String::from("attack_name,model,success_rate,n_instances\n");
        for c in &self.transfer {
            s += &format!("{},{},{},{}\n", c.row, c.column, fmt9(c.success_rate), c.n_instances);
        }
        s
    }

    pub fn defense_csv(&self) -> String {
        let mut s = String::from("defense_name,attack_name,success_rate,n_instances\n");
        for c in &self.defense {
            s += &format!("{},{},{},{}\n", c.row, c.column, fmt9(c.success_rate), c.n_instances);
        }
        s
    }

    pub fn instances_csv(&self) -> String {
        let mut s = String::from("instance_id,attack,source_class,target_class,white_box_success");
        for v in &self.victims {
            s += &format!(",transfer_{v}");
        }
        for d in &self.defenses {
            s += &format!(",defense_{d}");
        }
        s += ",d_norm,d_chamfer,d_hausdorff,d_plane\n";
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{}",
                r.instance_id, r.attack, r.source_class, r.target_class, r.white_box_success as u8
            );
            for h in r.transfer_success.iter().chain(&r.defense_success) {
                s += &format!(",{}", *h as u8);
            }
            let m = r.metrics.csv_row("");
            s += &m;
            s.push('\n');
        }
        s
    }

    pub fn clean_accuracy_csv(&self) -> String {
        let mut s = String::from("model,test_accuracy\n");
        for (m, a) in &self.clean_accuracy {
            s += &format!("{m},{}\n", fmt9(*a));
        }
        s
    }
}

pub fn metrics_csv(instances: &[AttackInstance], results: &[AttackResult]) -> String {
    let mut s = format!("{METRIC_CSV_HEADER}\n");
    for (inst, r) in instances.iter().zip(results) {
        s += &r.metrics.csv_row(&inst.id);
        s.push('\n');
    }
    s
}

pub fn records_jsonl(instances: &[AttackInstance], results: &[AttackResult]) -> Result<String> {
    let mut s = String::new();
    for (inst, r) in instances.iter().zip(results) {
        s += &serde_json::to_string(&r.record(&inst.id))?;
        s.push('\n');
    }
    Ok(s)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Working set for transform learning: correctly classified training clouds
/// in seeded order, each with one seeded wrong target.
pub fn working_set(model: &ClassifierModel, train: &[PointCloud], size: usize, seed_value: u64) -> Vec<AttackInstance> {
    let mut pool = select_instances(model, train, "w", 1, 0, seed_value);
    let mut rng = seed::rng(seed::derive(seed_value, "working-order"));
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    pool.truncate(size);
    pool
}

/// Runs the configured pipeline and writes every report file under
/// `cfg.output_dir`. Files of completed stages stay on disk if a later stage
/// fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let exec = Exec::default();
    let data = build_dataset(cfg)?;
    info!("dataset: {} train, {} test, {} classes", data.train.len(), data.test.len(), data.num_classes());

    let train_seed = cfg.sub_seed("models");
    let (white, _) = train_model(&cfg.models.white_box, &data, &cfg.models.train, train_seed)?;
    white
        .to_checkpoint(train_seed, serde_json::Value::Null)
        .save(&out.join("models").join(format!("{}.json", cfg.models.white_box)))?;
    let mut victims = Vec::new();
    for tag in &cfg.models.victims {
        let (m, _) = train_model(tag, &data, &cfg.models.train, train_seed)?;
        m.to_checkpoint(train_seed, serde_json::Value::Null)
            .save(&out.join("models").join(format!("{tag}.json")))?;
        victims.push((tag.clone(), m));
    }

    let mut report = ExperimentReport {
        white_box: cfg.models.white_box.clone(),
        ..ExperimentReport::default()
    };
    report.clean_accuracy.push((cfg.models.white_box.clone(), accuracy(&white, &data.test)));
    for (tag, m) in &victims {
        report.clean_accuracy.push((tag.clone(), accuracy(m, &data.test)));
    }

    if let Some(at) = &cfg.defenses.adv_train {
        let (base_tag, base) = victims
            .first()
            .map(|(t, m)| (t.clone(), m.clone()))
            .unwrap_or_else(|| (cfg.models.white_box.clone(), white.clone()));
        for (suffix, at_cfg) in [("at-vanilla", at.vanilla()), ("at-constraint", at.clone())] {
            let at_cfg = AdvTrainConfig {
                seed: cfg.sub_seed(suffix),
                ..at_cfg
            };
            let (m, _) = adversarial_train(&base, &data.train, &data.test, &at_cfg)?;
            let name = format!("{base_tag}-{suffix}");
            m.to_checkpoint(at_cfg.seed, serde_json::json!({ "defense": at_cfg }))
                .save(&out.join("models").join(format!("{name}.json")))?;
            report.clean_accuracy.push((name.clone(), accuracy(&m, &data.test)));
            victims.push((name, m));
        }
    }
    write_file(&out.join("clean_accuracy.csv"), &report.clean_accuracy_csv())?;
    report.victims = victims.iter().map(|(t, _)| t.clone()).collect();

    if !cfg.attack.enabled {
        write_file(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        return Ok(report);
    }

    let transform = if cfg.adv_learn.enabled {
        let ws = working_set(&white, &data.train, cfg.adv_learn.working_set, cfg.sub_seed("working-set"));
        let (t, _) = adversarial_learn_with(
            &white,
            &ws,
            &cfg.adv_learn.config,
            &cfg.attack.config,
            cfg.sub_seed("adv-learn"),
            exec,
        )?;
        t.to_checkpoint(cfg.sub_seed("adv-learn"))
            .save(&out.join("models").join("transform.json"))?;
        Some(t)
    } else {
        None
    };

    let instances = select_instances(
        &white,
        &data.test,
        "t",
        cfg.attack.targets_per_instance,
        cfg.attack.max_instances,
        cfg.sub_seed("instances"),
    );
    let mut variants = vec![AttackVariant::Ita];
    if let Some(t) = &transform {
        variants.push(AttackVariant::ItaTransformed(t));
    }
    if cfg.attack.fgsm {
        variants.push(AttackVariant::Fgsm {
            iterations: cfg.attack.fgsm_iterations,
        });
    }
    let input_defenses: Vec<InputDefense> = if cfg.defenses.input.is_some() {
        InputDefense::ALL.to_vec()
    } else {
        Vec::new()
    };
    report.defenses = input_defenses.iter().map(|d| d.name().to_string()).collect();

    for variant in variants {
        let name = variant.name();
        let results = run_attacks(&white, &instances, variant, &cfg.attack.config, cfg.sub_seed("attack"), exec)?;
        write_file(&out.join(format!("metrics_{name}.csv")), &metrics_csv(&instances, &results))?;
        write_file(&out.join(format!("attacks_{name}.jsonl")), &records_jsonl(&instances, &results)?)?;
        let transfer: Vec<Vec<bool>> = victims.iter().map(|(_, m)| transfer_hits(m, &results)).collect();
        let mut defended = Vec::new();
        for d in &input_defenses {
            defended.push(defended_hits(
                &white,
                &results,
                *d,
                cfg.defenses.input.as_ref().unwrap(),
                cfg.sub_seed("input-defense"),
            )?);
        }
        for (i, (inst, r)) in instances.iter().zip(&results).enumerate() {
            report.rows.push(InstanceRow {
                instance_id: inst.id.clone(),
                source_class: inst.cloud.label.unwrap_or(0),
                target_class: inst.target,
                attack: name.to_string(),
                white_box_success: r.success,
                transfer_success: transfer.iter().map(|t| t[i]).collect(),
                defense_success: defended.iter().map(|d| d[i]).collect(),
                metrics: r.metrics,
            });
        }
    }
    let (transfer, defense, means) = report.aggregate();
    report.transfer = transfer;
    report.defense = defense;
    report.mean_metrics = means;
    write_file(&out.join("instances.csv"), &report.instances_csv())?;
    write_file(&out.join("transfer.csv"), &report.transfer_csv())?;
    write_file(&out.join("defense.csv"), &report.defense_csv())?;
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
