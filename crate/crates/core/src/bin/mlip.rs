use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlip_core::category_cl::{sinkhorn_assign, PrototypeBank};
use mlip_core::harness::config::TrainConfig;
use mlip_core::harness::data::{generate_dataset, DatasetSpec, DATASET_FILE};
use mlip_core::harness::gradcheck::{check_model, ModelCheckOptions, LOSS_NAMES};
use mlip_core::harness::train::{evaluate_checkpoint, train, RunFiles, METRICS_FILE};
use mlip_core::numerics::{Precision, Tensor};
use mlip_core::verify::oracle_sinkhorn_uniform;
use mlip_core::{MlipError, Result};

#[derive(Parser)]
#[command(name = "mlip", version, about = "Multi-level image-text alignment on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset. The spec file uses the config
    /// syntax; only dataset keys (and `seed`/`data_seed`) matter.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoints plus metrics.csv.
    #[command(after_help = config_help())]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        precision: Option<Precision>,
    },
    /// Evaluate a checkpoint (its config.txt must sit beside it).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every loss against every parameter.
    Gradcheck {
        /// One of L_ita, L_tl, L_cl, L_itm, L_ts (default: all).
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Sinkhorn marginal errors on a random instance.
    Sinkhorn {
        #[arg(long)]
        b: usize,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
}

fn config_help() -> String {
    format!("Config keys (key = value, # comments) and defaults:\n{}", TrainConfig::describe_defaults())
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { spec, out } => {
            let cfg = load_config(spec.as_ref())?;
            let spec: DatasetSpec = cfg.dataset_spec();
            let data = generate_dataset(&spec)?;
            std::fs::create_dir_all(&out)?;
            data.save(out.join(DATASET_FILE))?;
            println!("samples={}", data.samples.len());
            println!("path={}", out.join(DATASET_FILE).display());
            Ok(true)
        }
        Command::Train { config, out, seed, precision } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            let files = RunFiles::new(&out)?;
            let outcome = train(&cfg, Some(&files))?;
            println!("initial_loss={}", outcome.first_loss);
            println!("final_loss={}", outcome.last_loss);
            for (k, v) in outcome.final_eval.entries() {
                println!("{k}={v}");
            }
            println!("metrics={}", files.path(METRICS_FILE).display());
            Ok(true)
        }
        Command::Evaluate { checkpoint, data } => {
            let (_, m) = evaluate_checkpoint(&checkpoint, data.as_deref())?;
            for (k, v) in m.entries() {
                println!("{k}={v}");
            }
            let json = checkpoint.with_extension("eval.json");
            std::fs::write(&json, serde_json::to_string_pretty(&m).expect("plain struct"))?;
            println!("json={}", json.display());
            Ok(true)
        }
        Command::Gradcheck { module, tolerance, seeds } => {
            let only_loss = match module {
                Some(m) => Some(
                    LOSS_NAMES
                        .iter()
                        .position(|n| *n == m)
                        .ok_or_else(|| MlipError::Config(format!("unknown module {m:?}; expected one of {LOSS_NAMES:?}")))?,
                ),
                None => None,
            };
            let report = check_model(&ModelCheckOptions { seeds, tolerance, only_loss, ..Default::default() })?;
            for c in report.failures() {
                println!("FAIL seed={} loss={} tensor={} rel={:.3e} abs={:.3e}", c.seed, c.loss, c.tensor, c.max_rel_error, c.max_abs_error);
            }
            if let Some(w) = report.worst() {
                println!("worst seed={} loss={} tensor={} rel={:.3e} abs={:.3e}", w.seed, w.loss, w.tensor, w.max_rel_error, w.max_abs_error);
            }
            println!("checks={} pass={}", report.checks.len(), report.pass);
            Ok(report.pass)
        }
        Command::Sinkhorn { b, c, eps, iters, seed, dim } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Tensor::randn(vec![b, dim], 1.0, &mut rng).to_matrix();
            let bank = PrototypeBank::init(c, dim, 0.1, &mut rng);
            let code = sinkhorn_assign(&features, &bank, eps, iters)?;
            println!("row_error={:e}", code.row_error());
            println!("col_error={:e}", code.col_error());
            let mut x = features.clone();
            mlip_core::category_cl::normalize_rows(&mut x);
            let oracle = oracle_sinkhorn_uniform(&Tensor::from_matrix(&x.dot(&bank.j.t())), eps)?;
            let diff = code.u.iter().zip(oracle.plan.data()).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
            println!("oracle_max_diff={diff:e}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
