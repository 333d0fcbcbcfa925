//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::attack::{run_ita, AttackConfig};
use crate::defense::adversarial_train;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::experiment::{
    build_dataset, defended_hits, metrics_csv, rate, records_jsonl, run_attacks, run_experiment, select_instances,
    train_model, transfer_hits, working_set, write_file, AttackVariant, ExperimentConfig, InputDefense,
};
use crate::io::{fmt9, read_cloud, write_cloud};
use crate::metrics::{full_report, METRIC_CSV_HEADER};
use crate::nn::{Checkpoint, ClassifierModel};
use crate::par::{configure_threads, Exec};
use crate::transform::{adversarial_learn_with, TransformModel};

#[derive(Debug, Parser)]
#[command(name = "pc-advkit", version, about = "Adversarial attacks and defenses for point-cloud classifiers")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (PC_ADVKIT_THREADS takes precedence).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out>/dataset.json and <out>/clouds/.
    GenData,
    /// Train a classifier on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "arch-a")]
        arch: String,
    },
    /// Attack one cloud toward a target class.
    Attack {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long)]
        bound: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Learn an adversarial transformation against a classifier.
    LearnTransform {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attack test clouds on one model and measure success on others.
    TransferEval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "victim")]
        victims: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        transform: Option<PathBuf>,
    },
    /// Evaluate input-space defenses against ITA and FGSM.
    Defend {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adversarially train a classifier (with latent constraints unless --vanilla).
    AdvTrain {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vanilla: bool,
    },
    /// Print perturbation metrics between two clouds as CSV.
    Metrics {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        adv: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Run the full configured experiment.
    Report,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::invalid(format!("missing --{name} (or job.{name} in the config)")))
}

fn load_model(path: &Path) -> Result<ClassifierModel> {
    ClassifierModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_data(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<Dataset> {
    match flag.or_else(|| cfg.job.data.clone()) {
        Some(p) => Dataset::load(&p),
        None => build_dataset(cfg),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "instance".into())
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads(cli.jobs);
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    let out = cfg.output_dir.clone();
    let exec = Exec::default();
    match cli.command {
        Command::GenData => {
            let ds = build_dataset(&cfg)?;
            ds.save(&out.join("dataset.json"))?;
            ds.export_ply(&out.join("clouds"))?;
            println!("{} train / {} test clouds in {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train { data, arch } => {
            let ds = load_data(data, &cfg)?;
            let s = cfg.sub_seed("models");
            let (m, hist) = train_model(&arch, &ds, &cfg.models.train, s)?;
            m.to_checkpoint(s, serde_json::Value::Null)
                .save(&out.join("models").join(format!("{arch}.json")))?;
            let mut csv = String::from("epoch,train_accuracy,test_accuracy\n");
            for (e, (a, b)) in hist.train_accuracy.iter().zip(&hist.test_accuracy).enumerate() {
                csv += &format!("{},{},{}\n", e + 1, fmt9(*a), fmt9(*b));
            }
            write_file(&out.join(format!("train_{arch}.csv")), &csv)?;
            println!("{arch}: test accuracy {}", fmt9(*hist.test_accuracy.last().unwrap_or(&0.0)));
        }
        Command::Attack {
            model,
            input,
            target,
            transform,
            bound,
            iterations,
        } => {
            let model = load_model(&required(model, &cfg.job.model, "model")?)?;
            let input = required(input, &cfg.job.input, "input")?;
            let cloud = read_cloud(&input)?;
            let t = transform
                .or_else(|| cfg.job.transform.clone())
                .map(|p| TransformModel::from_checkpoint(&Checkpoint::load(&p)?))
                .transpose()?;
            let target = target.or(cfg.job.target).unwrap_or(cfg.attack.config.target_class);
            let acfg = AttackConfig {
                bound: bound.unwrap_or(cfg.attack.config.bound),
                iterations: iterations.unwrap_or(cfg.attack.config.iterations),
                ..cfg.attack.config.for_target(target)
            };
            let r = run_ita(&model, &cloud, &acfg, t.as_ref(), cfg.sub_seed("attack"))?;
            let id = stem(&input);
            write_cloud(&out.join("adversarial.ply"), &r.adversarial)?;
            write_file(&out.join("attack.json"), &serde_json::to_string_pretty(&r.record(&id))?)?;
            write_file(&out.join("metrics.csv"), &format!("{METRIC_CSV_HEADER}\n{}\n", r.metrics.csv_row(&id)))?;
            println!("{id}: target {target} success {} after {} iterations", r.success, r.iterations_used);
        }
        Command::LearnTransform { model, data } => {
            let model = load_model(&required(model, &cfg.job.model, "model")?)?;
            let ds = load_data(data, &cfg)?;
            let ws = working_set(&model, &ds.train, cfg.adv_learn.working_set, cfg.sub_seed("working-set"));
            let s = cfg.sub_seed("adv-learn");
            let (t, trace) = adversarial_learn_with(&model, &ws, &cfg.adv_learn.config, &cfg.attack.config, s, exec)?;
            t.to_checkpoint(s).save(&out.join("models").join("transform.json"))?;
            let mut csv = String::from("step,transform_loss,clean_ce\n");
            for (i, (a, b)) in trace.transform_loss.iter().zip(&trace.clean_ce).enumerate() {
                csv += &format!("{i},{},{}\n", fmt9(*a), fmt9(*b));
            }
            write_file(&out.join("transform_trace.csv"), &csv)?;
            println!("transform learned on {} instances", ws.len());
        }
        Command::TransferEval {
            model,
            mut victims,
            data,
            transform,
        } => {
            let white = load_model(&required(model, &cfg.job.model, "model")?)?;
            if victims.is_empty() {
                victims = cfg.job.victims.clone();
            }
            let victim_models = victims.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let t = transform
                .or_else(|| cfg.job.transform.clone())
                .map(|p| TransformModel::from_checkpoint(&Checkpoint::load(&p)?))
                .transpose()?;
            let ds = load_data(data, &cfg)?;
            let instances = select_instances(
                &white,
                &ds.test,
                "t",
                cfg.attack.targets_per_instance,
                cfg.attack.max_instances,
                cfg.sub_seed("instances"),
            );
            let variant = match &t {
                Some(t) => AttackVariant::ItaTransformed(t),
                None => AttackVariant::Ita,
            };
            let results = run_attacks(&white, &instances, variant, &cfg.attack.config, cfg.sub_seed("attack"), exec)?;
            let mut csv = String::from("attack_name,model,success_rate,n_instances\n");
            let wb: Vec<bool> = results.iter().map(|r| r.success).collect();
            csv += &format!("{},white_box,{},{}\n", variant.name(), fmt9(rate(&wb)), wb.len());
            for (p, m) in victims.iter().zip(&victim_models) {
                let hits = transfer_hits(m, &results);
                csv += &format!("{},{},{},{}\n", variant.name(), stem(p), fmt9(rate(&hits)), hits.len());
            }
            write_file(&out.join("transfer.csv"), &csv)?;
            write_file(&out.join("metrics.csv"), &metrics_csv(&instances, &results))?;
            write_file(&out.join("attacks.jsonl"), &records_jsonl(&instances, &results)?)?;
            print!("{csv}");
        }
        Command::Defend { model, data } => {
            let white = load_model(&required(model, &cfg.job.model, "model")?)?;
            let ds = load_data(data, &cfg)?;
            let dcfg = cfg.defenses.input.clone().unwrap_or_default();
            dcfg.validate()?;
            let instances = select_instances(
                &white,
                &ds.test,
                "t",
                cfg.attack.targets_per_instance,
                cfg.attack.max_instances,
                cfg.sub_seed("instances"),
            );
            let mut csv = String::from("defense_name,attack_name,success_rate,n_instances\n");
            for variant in [
                AttackVariant::Ita,
                AttackVariant::Fgsm {
                    iterations: cfg.attack.fgsm_iterations,
                },
            ] {
                let results =
                    run_attacks(&white, &instances, variant, &cfg.attack.config, cfg.sub_seed("attack"), exec)?;
                let none: Vec<bool> = results.iter().map(|r| r.success).collect();
                csv += &format!("none,{},{},{}\n", variant.name(), fmt9(rate(&none)), none.len());
                for d in InputDefense::ALL {
                    let hits = defended_hits(&white, &results, d, &dcfg, cfg.sub_seed("input-defense"))?;
                    csv += &format!("{},{},{},{}\n", d.name(), variant.name(), fmt9(rate(&hits)), hits.len());
                }
            }
            write_file(&out.join("defense.csv"), &csv)?;
            print!("{csv}");
        }
        Command::AdvTrain { model, data, vanilla } => {
            let model_path = required(model, &cfg.job.model, "model")?;
            let base = load_model(&model_path)?;
            let ds = load_data(data, &cfg)?;
            let at = cfg.defenses.adv_train.clone().unwrap_or_default();
            let (suffix, at) = if vanilla { ("at-vanilla", at.vanilla()) } else { ("at-constraint", at) };
            let at = crate::defense::AdvTrainConfig {
                seed: cfg.sub_seed(suffix),
                ..at
            };
            let (m, hist) = adversarial_train(&base, &ds.train, &ds.test, &at)?;
            let name = format!("{}-{suffix}", stem(&model_path));
            m.to_checkpoint(at.seed, serde_json::json!({ "defense": at }))
                .save(&out.join("models").join(format!("{name}.json")))?;
            println!("{name}: test accuracy {}", fmt9(*hist.test_accuracy.last().unwrap_or(&0.0)));
        }
        Command::Metrics { clean, adv, k } => {
            let c = read_cloud(&clean)?;
            let a = read_cloud(&adv)?;
            let r = full_report(&a, &c, k)?;
            println!("{METRIC_CSV_HEADER}");
            println!("{}", r.csv_row(&stem(&adv)));
        }
        Command::Report => {
            let r = run_experiment(&cfg)?;
            info!("{} instance rows", r.rows.len());
            print!("{}", r.clean_accuracy_csv());
            print!("{}", r.transfer_csv());
            print!("{}", r.defense_csv());
        }
    }
    Ok(())
}
