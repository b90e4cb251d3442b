use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hio::dataset::{gen_synthetic, SyntheticConfig};
use hio::features::TtestGrouping;
use hio::harness::{
    compare_variants, emit_comparison, emit_report, run_cv, summary_text, DatasetSource,
    ExperimentConfig, ModelVariant, RunReport,
};
use hio::hierarchy::{AcceptableErrorRate, GateData, ReferenceMode};

#[derive(Parser)]
#[command(
    name = "hio",
    about = "Hierarchically gated multimodal persuasiveness experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset with planted structure.
    Generate {
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        speakers: usize,
        /// Comma-separated per-modality feature widths.
        #[arg(long, default_value = "20,20,20", value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one variant with speaker-independent cross-validation.
    Train {
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Run several variants on the same dataset/folds/seed and tabulate
    /// paired differences.
    Compare {
        /// Comma-separated variants (late-fusion-baseline, stacking, hio,
        /// frozen-stacking, text-only).
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<ModelVariantArg>,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Re-emit the report bundle from a saved report.json.
    Report {
        /// Path to a previously written report.json.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone)]
struct ModelVariantArg(ModelVariant);

impl std::str::FromStr for ModelVariantArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(ModelVariantArg)
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Dataset JSONL path; omit to use a freshly generated synthetic set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Variant to train (ignored by `compare`).
    #[arg(long, default_value = "hio")]
    variant: ModelVariantArg,
    /// Acceptable error rate for the subtask gate; a number or "inf".
    #[arg(long, default_value = "1.0")]
    epsilon: AcceptableErrorRate,
    /// Gate reference: pretrained-fixed, last-accepted, or running-best.
    #[arg(long, default_value = "last-accepted")]
    reference_mode: String,
    /// Data the gate evaluates subtask losses on: validation or training.
    #[arg(long, default_value = "validation")]
    gate_data: String,
    #[arg(long, default_value_t = 1)]
    gate_interval: u32,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    epochs: u32,
    /// Mini-batch size; omit for full-batch training.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 2e-3)]
    pretrain_learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    pretrain_epochs: u32,
    /// Number of t-test-selected features.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// t-test grouping: top-vs-bottom or one-vs-rest.
    #[arg(long, default_value = "top-vs-bottom")]
    grouping: String,
    #[arg(long, default_value_t = 10)]
    n_folds: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Pretrain the intermediate networks on only this many folds.
    #[arg(long)]
    pretrain_folds: Option<usize>,
    /// Synthetic-set size when no --dataset is given.
    #[arg(long, default_value_t = 1000)]
    synthetic_samples: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ExperimentArgs {
    fn to_config(&self, variant: ModelVariant) -> Result<ExperimentConfig, String> {
        let source = match &self.dataset {
            Some(path) => DatasetSource::File(path.clone()),
            None => DatasetSource::Synthetic(SyntheticConfig {
                n_samples: self.synthetic_samples,
                seed: self.seed,
                ..SyntheticConfig::default()
            }),
        };
        let mut cfg = ExperimentConfig::new(source, variant);
        cfg.gate.epsilon = self.epsilon;
        cfg.gate.reference_mode = match self.reference_mode.as_str() {
            "pretrained-fixed" => ReferenceMode::PretrainedFixed,
            "last-accepted" => ReferenceMode::LastAccepted,
            "running-best" => ReferenceMode::RunningBest,
            other => return Err(format!("unknown reference mode {other:?}")),
        };
        cfg.gate.gate_data = match self.gate_data.as_str() {
            "validation" => GateData::Validation,
            "training" => GateData::Training,
            other => return Err(format!("unknown gate data {other:?}")),
        };
        cfg.gate.gate_interval_steps = self.gate_interval;
        cfg.train.learning_rate = self.learning_rate;
        cfg.train.epochs = self.epochs;
        cfg.train.batch_size = self.batch_size;
        cfg.pretrain.learning_rate = self.pretrain_learning_rate;
        cfg.pretrain.epochs = self.pretrain_epochs;
        cfg.feature_k = self.k;
        cfg.ttest_grouping = match self.grouping.as_str() {
            "top-vs-bottom" => TtestGrouping::TopVsBottom,
            "one-vs-rest" => TtestGrouping::OneVsRest,
            other => return Err(format!("unknown grouping {other:?}")),
        };
        cfg.n_folds = self.n_folds;
        cfg.seed = self.seed;
        cfg.n_pretrain_folds = self.pretrain_folds;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        resolve_out_dir(self.out_dir.clone())
    }
}

/// The HIO_OUT_DIR environment variable overrides the default output
/// directory when no --out-dir flag is given.
fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("HIO_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Generate {
            out,
            samples,
            speakers,
            widths,
            noise,
            seed,
        } => {
            let cfg = SyntheticConfig {
                n_samples: samples,
                n_speakers: speakers,
                modality_widths: widths,
                noise_level: noise,
                seed,
                ..SyntheticConfig::default()
            };
            let ds = gen_synthetic(&cfg).map_err(|e| e.to_string())?;
            ds.save(&out).map_err(|e| e.to_string())?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train { experiment } => {
            let cfg = experiment.to_config(experiment.variant.0)?;
            let report = run_cv(&cfg).map_err(|e| e.to_string())?;
            let out_dir = experiment.out_dir();
            emit_report(&report, &out_dir).map_err(|e| e.to_string())?;
            print!("{}", summary_text(&report));
            println!("report bundle written to {}", out_dir.display());
            Ok(())
        }
        Command::Compare {
            variants,
            experiment,
        } => {
            let cfgs: Vec<ExperimentConfig> = variants
                .iter()
                .map(|v| experiment.to_config(v.0))
                .collect::<Result<_, _>>()?;
            let cmp = compare_variants(&cfgs).map_err(|e| e.to_string())?;
            let out_dir = experiment.out_dir();
            emit_comparison(&cmp, &out_dir).map_err(|e| e.to_string())?;
            println!("variant                 mean_acc  accepts  reverts");
            for v in &cmp.variants {
                println!(
                    "{:<22}  {:>8.4}  {:>7}  {:>7}",
                    v.variant.to_string(),
                    v.mean_accuracy,
                    v.gate_accepts,
                    v.gate_reverts
                );
            }
            println!("comparison written to {}", out_dir.display());
            Ok(())
        }
        Command::Report { results, out_dir } => {
            let report = RunReport::load(&results).map_err(|e| e.to_string())?;
            let out_dir = resolve_out_dir(out_dir);
            emit_report(&report, &out_dir).map_err(|e| e.to_string())?;
            print!("{}", summary_text(&report));
            println!("report bundle written to {}", out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
