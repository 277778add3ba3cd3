//! Command-line interface: data generation, training, evaluation, ablation
//! and sweep runs, and the gradient verification suite.
//!
//! Failures exit nonzero with a machine-readable `{"error": ...}` line on
//! stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ehrfuse::ablate::{run_ablation, sweep_lambda};
use ehrfuse::config::{AblationSwitches, ConfigError, OptimizerKind, TrainConfig};
use ehrfuse::data::{generate_cohort, save_cohort_jsonl};
use ehrfuse::gradsuite::full_suite;
use ehrfuse::train::{evaluate, load_checkpoint, prepare_data, train, TrainError};

#[derive(Parser)]
#[command(name = "ehrfuse", version, about = "Code-centric multimodal EHR fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML config file; overrides below are applied on top of it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    lambda_ce: Option<f64>,
    #[arg(long)]
    lambda_bi_con: Option<f64>,
    #[arg(long)]
    lambda_hrchy: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    /// Disable causal masking in the attention streams.
    #[arg(long)]
    no_causal: bool,
    #[arg(long)]
    freeze_word_embeddings: bool,
    /// Comma-separated ablation switches to enable.
    #[arg(long)]
    ablate: Option<String>,
    /// Cohort JSONL to load instead of generating data.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Ontology edge file to load instead of the built-in hierarchy.
    #[arg(long)]
    ontology: Option<PathBuf>,
}

impl Overrides {
    fn build(&self) -> Result<TrainConfig, TrainError> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load_toml(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.early_stop_patience = v;
        }
        if let Some(v) = self.patients {
            cfg.data.patients = v;
        }
        if let Some(v) = self.data_seed {
            cfg.data.data_seed = v;
        }
        if let Some(v) = self.lambda_ce {
            cfg.loss.lambda_ce = v;
        }
        if let Some(v) = self.lambda_bi_con {
            cfg.loss.lambda_bi_con = v;
        }
        if let Some(v) = self.lambda_hrchy {
            cfg.loss.lambda_hrchy = v;
        }
        if let Some(v) = self.tau {
            cfg.loss.tau = v;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer = match v.as_str() {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown optimizer {other:?} (adam | sgd)"
                    ))
                    .into())
                }
            };
        }
        if self.no_causal {
            cfg.model.causal = false;
        }
        if self.freeze_word_embeddings {
            cfg.model.freeze_word_embeddings = true;
        }
        if let Some(list) = &self.ablate {
            for name in list.split(',').filter(|s| !s.is_empty()) {
                let apply = AblationSwitches::parse_switch(name).ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "unknown ablation switch {name:?}; known: {}",
                        AblationSwitches::ALL.join(", ")
                    ))
                })?;
                apply(&mut cfg.ablation);
            }
        }
        if let Some(p) = &self.cohort {
            cfg.data.cohort_path = Some(p.clone());
        }
        if let Some(p) = &self.ontology {
            cfg.data.ontology_path = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort plus its ontology edge file into a directory.
    GenerateData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        patients: usize,
        /// Output directory (receives ontology.txt and cohort.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// TOML config supplying generator parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ontology edge file to use instead of the built-in hierarchy.
        #[arg(long)]
        ontology: Option<PathBuf>,
    },
    /// Train a model and write run artifacts.
    Train {
        /// Run directory for config snapshot, metrics, report and checkpoint.
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a data split and print the report as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: train, valid, test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the full model plus one run per ablation switch.
    Ablate {
        /// Comma-separated switches, or "all".
        #[arg(long, default_value = "all")]
        axes: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Output directory for ablation.csv / ablation.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep the hierarchy-loss weight over a grid.
    SweepLambda {
        #[arg(long, default_value = "0.01,0.1,1")]
        grid: String,
        #[arg(long, default_value = "1")]
        seeds: String,
        /// Output directory for sweep.csv / sweep.txt.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the finite-difference gradient suite and report each check.
    Gradcheck,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, TrainError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| ConfigError::Invalid(format!("bad {what} entry {s:?}")).into())
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::GenerateData { seed, patients, out, config, ontology } => {
            let overrides = Overrides { config, ontology, ..Overrides::default() };
            let mut cfg = overrides.build()?;
            cfg.data.data_seed = seed;
            cfg.data.patients = patients;
            std::fs::create_dir_all(&out)?;
            let ontology = match &cfg.data.ontology_path {
                Some(p) => ehrfuse::ontology::Ontology::parse_file(p)?,
                None => ehrfuse::data::default_ontology(),
            };
            let cohort = generate_cohort(seed, patients, &ontology, &cfg.data.gen)?;
            ontology.emit_file(&out.join("ontology.txt"))?;
            save_cohort_jsonl(&out.join("cohort.jsonl"), &cohort)?;
            println!(
                "{}",
                serde_json::json!({
                    "patients": cohort.len(),
                    "leaves": ontology.leaves(),
                    "parents": ontology.parents(),
                    "out": out,
                })
            );
            Ok(())
        }
        Command::Train { run_dir, overrides } => {
            let cfg = overrides.build()?;
            let outcome = train(&cfg, Some(&run_dir))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.report).expect("report serializes")
            );
            Ok(())
        }
        Command::Evaluate { checkpoint, split, overrides } => {
            let cfg = overrides.build()?;
            let (model, params, _) = load_checkpoint(&cfg, &checkpoint)?;
            let data = prepare_data(&cfg)?;
            let records = match split.as_str() {
                "train" => &data.train,
                "valid" => &data.valid,
                "test" => &data.test,
                other => {
                    return Err(
                        ConfigError::Invalid(format!("unknown split {other:?} (train | valid | test)"))
                            .into(),
                    )
                }
            };
            let acc = evaluate(&model, &params, records, cfg.batch_size, &cfg.ablation)?;
            println!(
                "{}",
                serde_json::json!({
                    "split": split,
                    "visits": acc.visits(),
                    "acc_at": acc.means(),
                })
            );
            Ok(())
        }
        Command::Ablate { axes, seeds, out, overrides } => {
            let cfg = overrides.build()?;
            let axes: Vec<String> = if axes == "all" {
                AblationSwitches::ALL.iter().map(|s| s.to_string()).collect()
            } else {
                parse_list(&axes, "axis")?
            };
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let table = run_ablation(&cfg, &axes, &seeds)?;
            table.write_files(&out, "ablation")?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::SweepLambda { grid, seeds, out, overrides } => {
            let cfg = overrides.build()?;
            let grid: Vec<f64> = parse_list(&grid, "grid")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let table = sweep_lambda(&cfg, &grid, &seeds)?;
            table.write_files(&out, "sweep")?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Gradcheck => {
            let mut all_passed = true;
            for entry in full_suite()? {
                let status = if entry.report.passed { "PASS" } else { "FAIL" };
                all_passed &= entry.report.passed;
                println!(
                    "{status} {name}: max rel err {err:.3e} over {n} coords ({k} kink-adjacent excluded)",
                    name = entry.name,
                    err = entry.report.max_rel_err,
                    n = entry.report.coords_checked,
                    k = entry.report.excluded_kinks,
                );
            }
            if !all_passed {
                return Err(ConfigError::Invalid("gradient suite failed".into()).into());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
        std::process::exit(1);
    }
}
