use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use mpdcnn::arch::{audit, count_parameters, published_total, AuditReport, LayerCount};
use mpdcnn::config::RunConfig;
use mpdcnn::data::split::SplitManifest;
use mpdcnn::data::synth::{generate_synthetic, SynthConfig};
use mpdcnn::data::{load_dataset, read_image, write_mask, write_sample, FileError, Sample};
use mpdcnn::eval::{check_roles, evaluate_fused, predict_fused, render_overlay, EvalReport};
use mpdcnn::gradcheck::{run_suite, DEFAULT_TRIALS};
use mpdcnn::train::{role_samples, Trainer};
use mpdcnn::{build_network, load_checkpoint, par, Arch, Error, NetworkSpec, RngState, Role};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "mpdcnn", version, about = "Pixel-wise structural damage segmentation")]
struct Cli {
    /// Worker threads (default: every core, or runtime.threads from the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network (segmenter or classifier) on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        role: Option<Role>,
        #[arg(long)]
        arch: Option<Arch>,
        /// Directory of image_<id>.png / mask_<id>.png pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse a segmenter and a classifier into a damage mask for one image.
    Infer {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the mask blended over the image.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Working resolution (default: data.size from the config).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score fused predictions against a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Only score the test ids of this split manifest.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-layer shapes and parameter totals of a checkpoint or a built-in architecture.
    Inspect {
        #[arg(long, conflicts_with_all = ["arch", "role"])]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "role")]
        arch: Option<Arch>,
        #[arg(long, requires = "arch")]
        role: Option<Role>,
    },
    /// Finite-difference check of every layer's gradients.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic image/mask pairs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = mpdcnn::data::DEFAULT_SIZE)]
        size: usize,
    },
}

/// A failure that maps to a specific exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = error
            .chain()
            .find_map(|c| c.downcast_ref::<Error>())
            .map_or(EXIT_DATA, exit_code);
        Failure { code, error }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NanLoss { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow!("{msg}"),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let threads = cli.threads;
    match cli.command {
        Command::Train {
            config,
            role,
            arch,
            data,
            out,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = role {
                cfg.model.role = r;
            }
            if let Some(a) = arch {
                cfg.model.arch = a;
            }
            if let Some(d) = data {
                cfg.data.dir = Some(d);
            }
            if let Some(s) = seed {
                cfg.runtime.seed = s;
            }
            par::configure_threads(threads.or(cfg.runtime.threads));
            train(&cfg, &out)
        }
        Command::Infer {
            segmenter,
            classifier,
            input,
            output,
            overlay,
            size,
            config,
        } => {
            par::configure_threads(threads);
            let cfg = load_config(config.as_deref())?;
            let seg = load_checkpoint(&segmenter)?;
            let cls = load_checkpoint(&classifier)?;
            check_roles(&seg, &cls)?;
            let image = read_image(&input)?;
            let size = size.unwrap_or(cfg.data.size);
            let mask = predict_fused(&seg, &cls, &image, size, &cfg.fusion)?;
            write_mask(&output, &mask)?;
            if let Some(path) = overlay {
                let img = render_overlay(&image, &mask, 0.5)?;
                img.save(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Eval {
            segmenter,
            classifier,
            data,
            report,
            split,
            config,
        } => {
            par::configure_threads(threads);
            let cfg = load_config(config.as_deref())?;
            let seg = load_checkpoint(&segmenter)?;
            let cls = load_checkpoint(&classifier)?;
            let (mut samples, skipped) = load_samples(&data, cfg.data.size)?;
            if let Some(path) = split {
                let manifest = SplitManifest::load(&path)?;
                samples.retain(|s| manifest.test.contains(&s.id));
                if samples.is_empty() {
                    return Err(mpdcnn::Error::Data(format!("no test ids of {} are in {}", path.display(), data.display())).into());
                }
            }
            let r = evaluate_fused(&seg, &cls, &samples, &cfg.fusion)?;
            info!("overall pixel accuracy {:.4} over {} samples", r.overall_accuracy, r.samples);
            let doc = EvalDocument { report: r, skipped };
            emit_json(&doc, report.as_deref())
        }
        Command::Inspect { ckpt, arch, role } => {
            let (spec, source, epoch) = match (ckpt, arch, role) {
                (Some(path), _, _) => {
                    let c = load_checkpoint(&path)?;
                    (c.network.spec().clone(), path.display().to_string(), Some(c.epoch))
                }
                (None, Some(Arch::Custom), _) => return Err(usage("custom architectures can only be inspected from a checkpoint")),
                (None, Some(a), Some(r)) => (NetworkSpec::new(a, r), format!("{a} {r}"), None),
                _ => return Err(usage("inspect needs --ckpt or both --arch and --role")),
            };
            emit_json(&inspect(&spec, source, epoch), None)
        }
        Command::Gradcheck { trials, seed } => {
            par::configure_threads(threads);
            let reports = run_suite(trials, seed)?;
            for r in &reports {
                eprintln!(
                    "{:<22} max rel error {:.3e} over {} trials  {}",
                    r.op.name(),
                    r.max_rel_error,
                    r.trials,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            emit_json(&reports, None)?;
            if reports.iter().any(|r| !r.passed) {
                return Err(Failure {
                    code: EXIT_NUMERIC,
                    error: anyhow!("gradient check exceeded tolerance"),
                });
            }
            Ok(())
        }
        Command::Synth { n, seed, out, size } => {
            par::configure_threads(threads);
            let samples = generate_synthetic(n, &SynthConfig::with_size(size), seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for s in &samples {
                write_sample(&out, s)?;
            }
            info!("wrote {n} pairs to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_samples(dir: &Path, size: usize) -> Result<(Vec<Sample>, Vec<FileError>), Failure> {
    let loaded = load_dataset(dir, size)?;
    for e in &loaded.errors {
        warn!("skipping {}: {}", e.id, e.message);
    }
    if loaded.samples.is_empty() {
        return Err(Error::Data(format!("no usable image/mask pairs in {}", dir.display())).into());
    }
    Ok((loaded.samples, loaded.errors))
}

fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> CmdResult {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> CmdResult {
    cfg.validate()?;
    let Some(dir) = cfg.data.dir.as_deref() else {
        return Err(usage("no dataset: pass --data or set data.dir in the config"));
    };
    if cfg.model.arch == Arch::Custom {
        return Err(usage("custom architectures cannot be trained from the command line"));
    }
    let (samples, _) = load_samples(dir, cfg.data.size)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = SplitManifest::load_or_create(&out.join("split.json"), &ids, cfg.data.split_seed)?;
    let pick = |wanted: &[String]| -> Vec<Sample> {
        let picked: Vec<Sample> = samples.iter().filter(|s| wanted.contains(&s.id)).cloned().collect();
        role_samples(&picked, cfg.model.role)
    };
    let (train_set, test_set) = (pick(&manifest.train), pick(&manifest.test));
    if train_set.is_empty() {
        return Err(Error::Data("the split leaves no training samples".into()).into());
    }
    emit_json(cfg, Some(&out.join("config.json")))?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.lambda = Some(cfg.lambda());
    let net = build_network(cfg.model.arch, cfg.model.role, cfg.runtime.seed)?;
    info!(
        "training {} {} ({} parameters) on {} samples, {} held out",
        cfg.model.arch,
        cfg.model.role,
        net.parameter_count(),
        train_set.len(),
        test_set.len()
    );
    let rng = RngState::new(cfg.runtime.seed).split(1);
    let mut trainer = Trainer::new(net, &train_set, train_cfg, rng)?;
    trainer.fit(&train_set, &test_set, Some(out), |_| {})?;
    info!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalDocument {
    #[serde(flatten)]
    report: EvalReport,
    skipped: Vec<FileError>,
}

#[derive(Serialize)]
struct Inspection {
    source: String,
    arch: Arch,
    role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    layers: Vec<LayerCount>,
    total: usize,
    published: Option<usize>,
    delta: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<AuditReport>,
}

fn inspect(spec: &NetworkSpec, source: String, epoch: Option<usize>) -> Inspection {
    let counts = count_parameters(spec);
    let published = published_total(spec.arch, spec.role);
    for l in &counts.layers {
        eprintln!("{:<12} {:<18} {:>10}", l.name, l.shape, l.total());
    }
    eprintln!("{:<31} {:>10}", "total", counts.total);
    if let Some(p) = published {
        eprintln!("{:<31} {:>10} (delta {:+})", "published", p, counts.total as i64 - p as i64);
    }
    Inspection {
        source,
        arch: spec.arch,
        role: spec.role,
        epoch,
        total: counts.total,
        delta: published.map(|p| counts.total as i64 - p as i64),
        published,
        layers: counts.layers,
        audit: audit(spec),
    }
}
