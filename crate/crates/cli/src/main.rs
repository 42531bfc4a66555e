use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use sct_core::metrics::{aggregate_report, error_map, evaluate, write_error_map_pgm, EvalOptions, MetricsRow};
use sct_core::nn::Checkpoint;
use sct_core::phantom::{load_phantom_set, write_phantom_set, PhantomSpec, TissueModel};
use sct_core::registration::{icp_register, IcpOptions};
use sct_core::train::{run_study, synthesize_volume, TrainConfig};
use sct_core::volume::{extract_point_cloud, load_volume, resample_trilinear, save_volume, CloudMode};

/// Manifest name used when the output target is a directory.
const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "sct", version, about = "Synthetic CT from multi-echo MR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded set of paired MR/CT phantoms.
    Phantom {
        /// PhantomSpec JSON; missing fields take the defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 9)]
        count: usize,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rigidly register a CT onto an MR echo; writes the CT→MR transform.
    Register {
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        mr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Also write the CT resampled onto the MR grid.
        #[arg(long)]
        resampled: Option<PathBuf>,
    },
    /// Cross-validated training, synthesis and evaluation over a phantom set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        /// TrainConfig JSON; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr_hold_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        batches_per_epoch: Option<usize>,
        #[arg(long)]
        val_slices: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        lambda_l1: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a CT from three MR echoes with a trained generator.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The three echoes, shortest echo time first.
        #[arg(long, num_args = 3, value_names = ["ECHO1", "ECHO2", "ECHO3"])]
        mr: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a synthetic CT against its real CT.
    Evaluate {
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        sct: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subject name for the row; defaults to the CT file stem.
        #[arg(long)]
        subject: Option<String>,
        /// Write sagittal error maps (sCT − CT) as PGM slices here.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Aggregate per-subject metric rows (JSON) into a table with a mean row.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
    started_unix_s: u64,
    duration_s: f64,
}

/// What a command reports back for its manifest.
struct Run {
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Where the manifest goes.
    manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numerical failures inside the pipeline, 2 for everything else
/// (unreadable or inconsistent inputs).
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .filter_map(|c| c.downcast_ref::<sct_core::Error>())
        .any(|c| c.is_numerical());
    if numerical {
        3
    } else {
        2
    }
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let name = command_name(&command);
    let done = match command {
        Command::Phantom { spec, out, count, seed } => phantom(spec, out, count, seed)?,
        Command::Register {
            ct,
            mr,
            out,
            max_iterations,
            tol,
            resampled,
        } => register(ct, mr, out, IcpOptions { max_iterations, tol }, resampled)?,
        Command::Train {
            data,
            folds,
            config,
            out,
            epochs,
            lr_hold_epochs,
            batch_size,
            batches_per_epoch,
            val_slices,
            lr0,
            lambda_l1,
            seed,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = lr_hold_epochs {
                cfg.lr_hold_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if batches_per_epoch.is_some() {
                cfg.batches_per_epoch = batches_per_epoch;
            }
            if val_slices.is_some() {
                cfg.val_slices = val_slices;
            }
            if let Some(v) = lr0 {
                cfg.lr0 = v;
            }
            if let Some(v) = lambda_l1 {
                cfg.lambda_l1 = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            train(data, folds, config, cfg, out)?
        }
        Command::Synthesize { checkpoint, mr, out } => synthesize(checkpoint, mr, out)?,
        Command::Evaluate {
            ct,
            sct,
            out,
            subject,
            error_maps,
        } => evaluate_cmd(ct, sct, out, subject, error_maps)?,
        Command::Report { rows, out } => report(rows, out)?,
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config: done.config,
        seed: done.seed,
        inputs: done.inputs,
        outputs: done.outputs,
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s,
        duration_s: started.elapsed().as_secs_f64(),
    };
    write_text(&done.manifest, &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom { .. } => "phantom",
        Command::Register { .. } => "register",
        Command::Train { .. } => "train",
        Command::Synthesize { .. } => "synthesize",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
    }
}

/// `dir/x.json` → `dir/x.run.json`; the manifest of a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.run.json"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn phantom(spec_path: Option<PathBuf>, out: PathBuf, count: usize, seed: Option<u64>) -> Result<Run> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let mut spec: PhantomSpec = match &spec_path {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let tissues = TissueModel::default();
    let manifest = write_phantom_set(&out, &spec, &tissues, count)?;
    Ok(Run {
        config: json!({ "spec": spec, "tissues": tissues, "count": count }),
        seed: Some(spec.seed),
        inputs: spec_path.into_iter().collect(),
        outputs: manifest.subjects.iter().map(|s| out.join(&s.ct)).collect(),
        manifest: out.join(DIR_MANIFEST),
    })
}

fn register(ct_path: PathBuf, mr_path: PathBuf, out: PathBuf, opts: IcpOptions, resampled: Option<PathBuf>) -> Result<Run> {
    let ct = load_volume(&ct_path)?;
    let mr = load_volume(&mr_path)?;
    let src = extract_point_cloud(&ct, CloudMode::HighCt)?;
    let dst = extract_point_cloud(&mr, CloudMode::LowMr)?;
    let result = icp_register(&src, &dst, &opts)?;
    eprintln!(
        "icp: {} iterations, rms {:.4} mm, converged {}",
        result.iterations, result.rms_residual, result.converged
    );
    write_text(&out, &(result.transform.to_json() + "\n"))?;
    let mut outputs = vec![out.clone()];
    if let Some(path) = resampled {
        let moved = resample_trilinear(&ct, &result.transform.inverse(), mr.grid());
        save_volume(&moved, &path)?;
        outputs.push(path);
    }
    Ok(Run {
        config: json!({ "icp": opts, "result": result }),
        seed: None,
        inputs: vec![ct_path, mr_path],
        outputs,
        manifest: sidecar(&out),
    })
}

fn train(data: PathBuf, folds: usize, config: Option<PathBuf>, cfg: TrainConfig, out: PathBuf) -> Result<Run> {
    let (_, subjects) = load_phantom_set(&data)?;
    let study = run_study(&subjects, folds, &cfg, Some(&out))?;
    for f in &study.folds {
        eprintln!(
            "fold {}: val L1 {:.4} -> {:.4} (epoch {:?})",
            f.fold, f.initial_val_l1, f.best_val_l1, f.best_epoch
        );
    }
    eprint!("{}", study.report.to_csv());
    let mut inputs = vec![data];
    inputs.extend(config);
    Ok(Run {
        config: json!({ "train": cfg, "folds": folds }),
        seed: Some(cfg.seed),
        inputs,
        outputs: vec![out.join("table.csv"), out.join("folds.json")],
        manifest: out.join(DIR_MANIFEST),
    })
}

fn synthesize(checkpoint: PathBuf, mr_paths: Vec<PathBuf>, out: PathBuf) -> Result<Run> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let [a, b, c] = <[PathBuf; 3]>::try_from(mr_paths.clone()).map_err(|_| anyhow::anyhow!("--mr takes three echoes"))?;
    let mr = [load_volume(&a)?, load_volume(&b)?, load_volume(&c)?];
    let sct = synthesize_volume(&ckpt, &mr)?;
    save_volume(&sct, &out)?;
    let mut inputs = vec![checkpoint];
    inputs.extend(mr_paths);
    Ok(Run {
        config: json!({ "checkpoint_meta": ckpt.meta }),
        seed: None,
        inputs,
        outputs: vec![out.clone()],
        manifest: sidecar(&out),
    })
}

fn evaluate_cmd(
    ct_path: PathBuf,
    sct_path: PathBuf,
    out: PathBuf,
    subject: Option<String>,
    error_maps: Option<PathBuf>,
) -> Result<Run> {
    let ct = load_volume(&ct_path)?;
    let sct = load_volume(&sct_path)?;
    let subject = subject.unwrap_or_else(|| {
        ct_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "subject".into())
    });
    let opts = EvalOptions::default();
    let row = evaluate(&subject, &ct, &sct, &opts)?;
    write_text(&out, &(serde_json::to_string_pretty(&row)? + "\n"))?;
    let mut outputs = vec![out.clone()];
    if let Some(dir) = &error_maps {
        outputs.extend(write_error_map_pgm(&error_map(&sct, &ct)?, dir)?);
    }
    Ok(Run {
        config: json!({ "eval": opts }),
        seed: None,
        inputs: vec![ct_path, sct_path],
        outputs,
        manifest: sidecar(&out),
    })
}

fn report(rows_dir: PathBuf, out: PathBuf) -> Result<Run> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&rows_dir)
        .with_context(|| format!("listing {}", rows_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".run.json"))
        .collect();
    paths.sort();
    let rows = paths
        .iter()
        .map(|p| {
            let row: MetricsRow = read_json(p)?;
            row.validate()?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate_report(&rows)?;
    write_text(&out, &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(Run {
        config: Value::Null,
        seed: None,
        inputs: paths,
        outputs: vec![out.clone()],
        manifest: sidecar(&out),
    })
}
