//! Command-line driver: generate data, extract labels, train, personalize,
//! evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mobile_ppg::eval::{aggregate, evaluate_trial, read_rows, write_rows, EvalProtocol, GroupField, Method, MetricsRow};
use mobile_ppg::ingest::{load_trial, Trial};
use mobile_ppg::labelgen::finger_label;
use mobile_ppg::meta::{
    finetune_baseline, meta_train, personalize, supervised_train, trial_task, windowed_samples, write_telemetry,
    LabelSource, MetaConfig, NetObjective, PipelineConfig,
};
use mobile_ppg::model::NetworkParams;
use mobile_ppg::synth::{gen_task_suite, list_trial_dirs, Condition, Domain, SuiteSpec};
use mobile_ppg::{Error, Result};
use rayon::prelude::*;

const SEED_ENV: &str = "MOBILE_PPG_SEED";

#[derive(Parser)]
#[command(name = "mobile-ppg", version, about = "Personalized contactless PPG from dual smartphone cameras")]
struct Cli {
    /// Worker threads for per-trial and per-task work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; defaults to $MOBILE_PPG_SEED, then to the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> Result<Option<u64>> {
        if self.seed.is_some() {
            return Ok(self.seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite of trials with known heart rates.
    SynthGen {
        #[arg(long)]
        subjects: usize,
        /// Comma-separated `lighting[:motion[:lux[:exercise]]]` entries.
        #[arg(long, default_value = "natural")]
        conditions: String,
        #[arg(long)]
        out: PathBuf,
        /// Population preset: base, diverse or shifted.
        #[arg(long, default_value = "base")]
        domain: String,
        /// Flicker depth range `lo,hi` overriding the preset.
        #[arg(long)]
        flicker: Option<String>,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = mobile_ppg::synth::FACE_SIZE)]
        frame_size: usize,
        #[arg(long, default_value = "S")]
        prefix: String,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Write the finger-PPG label of a trial as CSV.
    ExtractLabel {
        #[arg(long)]
        trial: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on every trial of a data directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Meta-train from a checkpoint, one task per trial.
    MetaTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Adapt a meta-trained checkpoint to one trial's first seconds.
    Personalize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trial: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-trial metrics after the method's own support-window adaptation.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mobilephys, metaphys or tscan.
        #[arg(long)]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate the checkpoint as is, without adaptation.
        #[arg(long)]
        frozen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group per-trial rows into a table; `.csv` outputs are CSV, anything
    /// else aligned text.
    Report {
        #[arg(long)]
        rows: PathBuf,
        /// Comma-separated condition fields, or `all`.
        #[arg(long, default_value = "lighting")]
        group_by: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_trials(dir: &Path) -> Result<Vec<Trial>> {
    let dirs = list_trial_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::Precondition(format!("no trials under {}", dir.display())));
    }
    dirs.par_iter().map(load_trial).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Config(format!("bad range `{s}`")))?;
    match parts.as_slice() {
        [v] => Ok((*v, *v)),
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("bad range `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::SynthGen { subjects, conditions, out, domain, flicker, duration, frame_size, prefix, seed } => {
            let mut spec = SuiteSpec::new(subjects, Condition::parse_list(&conditions)?, seed.resolve()?.unwrap_or(0));
            spec.domain = Domain::preset(&domain)?;
            if let Some(f) = flicker {
                spec.domain.flicker_amp = parse_range(&f)?;
            }
            spec.duration_s = duration;
            spec.frame_size = frame_size;
            spec.subject_prefix = prefix;
            let suite = gen_task_suite(&spec)?;
            suite.save(&out)?;
            println!("wrote {} trials to {}", suite.trials.len(), out.display());
        }
        Command::ExtractLabel { trial, out } => {
            let trial = load_trial(&trial)?;
            let (t0, t1) = trial.overlap();
            let label = finger_label(&trial, t0, t1 + 1.0)?;
            let mut buf = Vec::new();
            label.write_csv(&mut buf)?;
            write_file(&out, &buf)?;
        }
        Command::Pretrain { data, config, init, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            let seed = seed.resolve()?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let params = match init {
                Some(p) => {
                    let p = NetworkParams::load(p)?;
                    if p.config() != &cfg.model {
                        return Err(Error::Config("initial checkpoint does not match the model config".into()));
                    }
                    p
                }
                None => NetworkParams::init(cfg.model.clone(), seed.unwrap_or(cfg.pretrain.seed))?,
            };
            let trials = load_trials(&data)?;
            let samples = windowed_samples(&trials, &cfg.model, &cfg.pretrain)?;
            let obj = NetObjective { config: cfg.model.clone() };
            let theta = supervised_train(&obj, &params.to_flat(), &samples, &cfg.pretrain, |e, loss, _| {
                eprintln!("epoch {e}: loss {loss:.5}");
                Ok(())
            })?;
            NetworkParams::from_flat(cfg.model.clone(), &theta)?.save(&out)?;
        }
        Command::MetaTrain { data, config, init, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed.resolve()? {
                cfg.meta.seed = s;
            }
            let init = NetworkParams::load(&init)?;
            let model = init.config().clone();
            cfg.meta.validate(&model)?;
            let trials = load_trials(&data)?;
            let tasks = trials.par_iter().map(|t| trial_task(t, &model, &cfg.meta)).collect::<Result<Vec<_>>>()?;
            let obj = NetObjective { config: model.clone() };
            let telemetry = out.join("telemetry.csv");
            let mut csv = Vec::new();
            let theta = meta_train(&obj, &init.to_flat(), &tasks, &cfg.meta, |epoch, rows, theta| {
                write_telemetry(rows, &mut csv, epoch == 1)?;
                write_file(&telemetry, &csv)?;
                NetworkParams::from_flat(model.clone(), theta)?.save(out.join(format!("epoch_{epoch:02}")))?;
                let q = rows.iter().map(|r| r.query_loss).sum::<f64>() / rows.len() as f64;
                eprintln!("epoch {epoch}: mean adapted query loss {q:.5}");
                Ok(())
            })?;
            if cfg.meta.epochs == 0 {
                write_telemetry(&[], &mut csv, true)?;
                write_file(&telemetry, &csv)?;
            }
            NetworkParams::from_flat(model, &theta)?.save(&out)?;
        }
        Command::Personalize { ckpt, trial, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let params = NetworkParams::load(&ckpt)?;
            let trial = load_trial(&trial)?;
            personalize(&params, &trial, &cfg.meta)?.save(&out)?;
        }
        Command::Evaluate { ckpt, data, method, config, frozen, out } => {
            let cfg = load_config(config.as_deref())?;
            let method: Method = method.parse()?;
            let params = NetworkParams::load(&ckpt)?;
            let trials = load_trials(&data)?;
            let proto = EvalProtocol { skip_s: cfg.meta.support_s, ..EvalProtocol::default() };
            let rows = trials
                .par_iter()
                .map(|t| {
                    let adapted = if frozen {
                        params.clone()
                    } else {
                        adapt_for(method, &params, t, &cfg)?
                    };
                    evaluate_trial(&adapted, t, method, &proto)
                })
                .collect::<Result<Vec<MetricsRow>>>()?;
            let mut buf = Vec::new();
            write_rows(&rows, &mut buf)?;
            write_file(&out, &buf)?;
        }
        Command::Report { rows, group_by, out } => {
            let file = fs::File::open(&rows).map_err(|e| Error::Io { path: rows.clone(), source: e })?;
            let rows = read_rows(file)?;
            let report = aggregate(&rows, &GroupField::parse_list(&group_by)?);
            let text = report.to_text();
            if out.extension().is_some_and(|e| e == "csv") {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                write_file(&out, &buf)?;
            } else {
                write_file(&out, text.as_bytes())?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

/// The method's test-time adaptation on the trial's support window.
fn adapt_for(method: Method, params: &NetworkParams, trial: &Trial, cfg: &PipelineConfig) -> Result<NetworkParams> {
    match method {
        Method::Mobilephys => personalize(params, trial, &MetaConfig { adapt_label: LabelSource::Finger, ..cfg.meta.clone() }),
        Method::Metaphys => personalize(params, trial, &MetaConfig { adapt_label: LabelSource::Pos, ..cfg.meta.clone() }),
        Method::Tscan => finetune_baseline(params, trial, &cfg.finetune, cfg.meta.support_s, cfg.meta.bandpass_labels),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
