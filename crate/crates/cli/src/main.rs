use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use ctdx_core::manifest::{load_manifest, parse_timestamp};
use ctdx_core::nn::ResidualClassifier;
use ctdx_core::pipeline::{build_roi_dataset, diagnose_scan, scan_accuracy, PipelineConfig};
use ctdx_core::synth::{generate, write_dataset, SynthSpec};
use ctdx_core::training::{blockwise_sweep, finetune, format_sweep_table, write_run, BlockId};
use ctdx_core::{Demographics, Formulary, MedicationEvent, Sex};
use ctdx_ehr::{EhrService, NewPatient, Store};

mod plot;

#[derive(Parser)]
#[command(name = "pipeline", version, about = "Chest CT diagnosis, severity tracking and patient records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune one block on a manifest directory and report held-out accuracy.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory holding manifest.csv.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config.json, metrics.jsonl and model.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fc")]
        block: BlockId,
    },
    /// Fine-tune each block in turn, FC down to Conv1, and print the table.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Directory for sweep.md and sweep.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnose the scans in a manifest directory; prints one JSON result per line.
    Diagnose {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scan_dir: PathBuf,
        /// Only scans of this patient (manifest patient_id).
        #[arg(long)]
        patient: Option<String>,
        #[arg(long, env = "MODEL_PATH")]
        model: PathBuf,
    },
    /// Diagnose scans and record them in a patient's record.
    Ingest {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
        #[arg(long, env = "MODEL_PATH")]
        model: PathBuf,
        /// Record id in the store.
        #[arg(long)]
        patient: String,
        #[arg(long)]
        scan_dir: PathBuf,
        /// Manifest patient_id to take scans from; defaults to --patient.
        #[arg(long)]
        from: Option<String>,
    },
    /// Register a patient; prints the new record.
    Register {
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
        #[arg(long)]
        age: u32,
        #[arg(long, value_parser = parse_sex, default_value = "unknown")]
        sex: Sex,
        #[arg(long)]
        external_id: Option<String>,
        #[arg(long = "history")]
        prior_history: Vec<String>,
    },
    /// Add a medication event to a patient's record.
    AddMedication {
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        name: String,
        #[arg(long, value_parser = parse_time)]
        start: DateTime<Utc>,
        #[arg(long, value_parser = parse_time)]
        end: Option<DateTime<Utc>>,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Print a patient's severity timeline as JSON, optionally plotting it.
    Timeline {
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
        #[arg(long)]
        patient: String,
        /// Forecast this many days past the last observation.
        #[arg(long)]
        forecast: Option<u32>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Print the triage queue as JSON.
    Triage {
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
    },
    /// Serve the HTTP API. Requires API_TOKEN.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "STORE_DIR")]
        store_dir: PathBuf,
        /// Without a model the server runs but refuses scan uploads.
        #[arg(long, env = "MODEL_PATH")]
        model: Option<PathBuf>,
        #[arg(long, env = "API_TOKEN", hide_env_values = true)]
        token: String,
    },
    /// Write a synthetic dataset: manifest.csv, images, ground truth masks, patients.json.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        scans_per_patient: usize,
        #[arg(long, default_value_t = 4)]
        slices_per_scan: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 0.5)]
        positive_fraction: f64,
    },
}

fn parse_sex(s: &str) -> Result<Sex, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("expected female, male, other or unknown, got {s:?}"))
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    parse_timestamp(s).ok_or_else(|| format!("not an RFC 3339 timestamp or date: {s:?}"))
}

fn load_model(path: &Path) -> Result<ResidualClassifier> {
    Ok(ResidualClassifier::load(path)?)
}

fn open_service(store_dir: &Path, model: Option<&Path>, config: PipelineConfig) -> Result<EhrService> {
    let store = Store::open(store_dir).with_context(|| format!("opening store {}", store_dir.display()))?;
    let model = model.map(load_model).transpose()?;
    Ok(EhrService::new(store, model, config, Formulary::open()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let actor = "cli";
    match cli.command {
        Command::Train { config, data, out, block } => {
            let cfg = config.load()?;
            let scans = load_manifest(data.join("manifest.csv"))?;
            let roi = build_roi_dataset(&scans, &cfg)?;
            eprintln!(
                "{} scans, ROI examples: train {}, validation {}, test {}",
                scans.len(),
                roi.train.len(),
                roi.validation.len(),
                roi.test.len()
            );
            let base = ResidualClassifier::base(cfg.base_model_seed);
            let outcome = finetune(&base, block, &roi.train, &roi.validation, &cfg.training, &cfg.preprocessing)?;
            write_run(&out, &cfg, &outcome)?;
            let results = roi
                .scans
                .test
                .iter()
                .map(|&i| Ok((&scans[i], diagnose_scan(&scans[i], &outcome.model, &cfg)?)))
                .collect::<Result<Vec<_>>>()?;
            let acc = scan_accuracy(results.iter().map(|(s, r)| (*s, r)));
            println!(
                "{}",
                serde_json::json!({
                    "block": block,
                    "epochs": outcome.history.len(),
                    "best_epoch": outcome.best_epoch,
                    "test_scans": results.len(),
                    "test_scan_accuracy": acc,
                    "model": out.join("model.json"),
                })
            );
        }
        Command::Sweep { config, data, out } => {
            let cfg = config.load()?;
            let scans = load_manifest(data.join("manifest.csv"))?;
            let roi = build_roi_dataset(&scans, &cfg)?;
            let base = ResidualClassifier::base(cfg.base_model_seed);
            let rows = blockwise_sweep(&base, &roi.train, &roi.validation, &roi.test, &cfg.training, &cfg.preprocessing)?;
            let table = format_sweep_table(&rows);
            print!("{table}");
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("sweep.md"), &table)?;
                fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
            }
        }
        Command::Diagnose { config, scan_dir, patient, model } => {
            let cfg = config.load()?;
            let model = load_model(&model)?;
            let scans = load_manifest(scan_dir.join("manifest.csv"))?;
            let mut n = 0;
            for scan in scans.iter().filter(|s| patient.as_ref().is_none_or(|p| &s.patient_id == p)) {
                println!("{}", serde_json::to_string(&diagnose_scan(scan, &model, &cfg)?)?);
                n += 1;
            }
            if n == 0 {
                bail!("no matching scans in {}", scan_dir.display());
            }
        }
        Command::Ingest { config, store_dir, model, patient, scan_dir, from } => {
            let svc = open_service(&store_dir, Some(&model), config.load()?)?;
            let source = from.unwrap_or_else(|| patient.clone());
            let mut scans: Vec<_> = load_manifest(scan_dir.join("manifest.csv"))?
                .into_iter()
                .filter(|s| s.patient_id == source)
                .collect();
            if scans.is_empty() {
                bail!("no scans for patient {source} in {}", scan_dir.display());
            }
            scans.sort_by_key(|s| s.acquired_at);
            for mut scan in scans {
                scan.patient_id = patient.clone();
                let outcome = svc.ingest_and_diagnose(&patient, &scan, actor)?;
                println!("{}", serde_json::to_string(&outcome)?);
            }
        }
        Command::Register { store_dir, age, sex, external_id, prior_history } => {
            let svc = open_service(&store_dir, None, PipelineConfig::default())?;
            let rec = svc.register_patient(
                NewPatient {
                    external_id,
                    demographics: Demographics { age, sex },
                    prior_history,
                },
                actor,
            )?;
            print_json(&rec)?;
        }
        Command::AddMedication { store_dir, patient, name, start, end, note } => {
            let svc = open_service(&store_dir, None, PipelineConfig::default())?;
            let event = MedicationEvent {
                name,
                start,
                end,
                dosage_note: note,
            };
            print_json(&svc.add_medication(&patient, event, actor)?)?;
        }
        Command::Timeline { store_dir, patient, forecast, plot: plot_path } => {
            let svc = open_service(&store_dir, None, PipelineConfig::default())?;
            let view = svc.get_timeline(&patient, forecast)?;
            print_json(&view)?;
            if let Some(path) = plot_path {
                let starts: Vec<_> = view.medications.iter().map(|m| m.start).collect();
                plot::save(&view.points, &starts, &path)?;
                if let Some(f) = plot::Frame::fit(&view.points, &starts) {
                    eprintln!(
                        "wrote {}: x from {} to {}, y from 0 to {:.1}",
                        path.display(),
                        f.t0,
                        f.t1,
                        f.s_max
                    );
                }
            }
        }
        Command::Triage { store_dir } => {
            let svc = open_service(&store_dir, None, PipelineConfig::default())?;
            print_json(&svc.triage_queue())?;
        }
        Command::Serve { config, port, host, store_dir, model, token } => {
            if token.trim().is_empty() {
                bail!("API_TOKEN must not be empty");
            }
            let svc = open_service(&store_dir, model.as_deref(), config.load()?)?;
            if !svc.has_model() {
                tracing::warn!("no model loaded; scan uploads will be refused");
            }
            let app = ctdx_ehr::api::router(Arc::new(svc), &token);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::SynthData {
            out,
            patients,
            seed,
            scans_per_patient,
            slices_per_scan,
            image_size,
            positive_fraction,
        } => {
            let spec = SynthSpec {
                n_patients: patients,
                scans_per_patient,
                slices_per_scan,
                image_size,
                positive_fraction,
                seed,
                ..SynthSpec::default()
            };
            let data = generate(&spec)?;
            let manifest = write_dataset(&data, &out)?;
            eprintln!("{} scans written to {}", data.scans.len(), manifest.display());
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
