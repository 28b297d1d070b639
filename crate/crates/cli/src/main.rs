use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msgat::geometry::{partition_blocks, Block, PointCloud};
use msgat::io::{load_checkpoint, read_ply, read_qsteps, save_checkpoint, write_ply, write_qsteps, Checkpoint, RunConfig};
use msgat::metrics::{bd_rate, quality, rgb_to_yuv_all, RatePoint, RdCurve};
use msgat::model::{build_model, model_channels, prepare_block, Component, ModelParams, RestorationModels};
use msgat::synth::{synth_degrade, synthetic_cloud};
use msgat::training::{gradient_check, prepare_samples, train_prepared, ParamKind, TrainSample};
use msgat::{Error, Result};

#[derive(Parser)]
#[command(name = "msgat", version, about = "Graph attention restoration of compressed point cloud colors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural colored test cloud.
    Generate {
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fmt: Format,
    },
    /// Simulate codec quantization of the colors of a clean cloud.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        /// Quantization parameter; repeat to mix several.
        #[arg(long, required = true)]
        qp: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-point quantization steps, one per line.
        #[arg(long)]
        qsteps: PathBuf,
        #[command(flatten)]
        fmt: Format,
    },
    /// Split a cloud into fixed-size blocks (the last one padded).
    Partition {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2048)]
        block_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Steps sidecar of the input, split alongside it.
        #[arg(long)]
        qsteps: Option<PathBuf>,
        /// Clean cloud with the same point order, split into training targets.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        fmt: Format,
    },
    /// Train one restoration model on a directory of blocks.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Y, U or V (ignored for joint models).
        #[arg(long)]
        component: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// QP recorded in the checkpoint.
        #[arg(long)]
        qp: Option<u32>,
        /// CSV of the mean loss per epoch.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Restore the colors of a decoded cloud.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        qsteps: PathBuf,
        #[arg(long, requires_all = ["ckpt_u", "ckpt_v"], conflicts_with = "ckpt_joint")]
        ckpt_y: Option<PathBuf>,
        #[arg(long)]
        ckpt_u: Option<PathBuf>,
        #[arg(long)]
        ckpt_v: Option<PathBuf>,
        #[arg(long)]
        ckpt_joint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fmt: Format,
    },
    /// Append Y/U/V and YUV PSNR of a test cloud against its reference to a CSV.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Size of the attribute bitstream in bits, for the bpp column.
        #[arg(long)]
        bits: Option<u64>,
    },
    /// Bjontegaard delta rate of a test curve against an anchor, in percent.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Quality column: y, u, v or yuv.
        #[arg(long, default_value = "yuv")]
        metric: String,
    },
    /// Compare analytic and finite-difference gradients on a synthetic block.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fail when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
    /// Print the default run configuration.
    DefaultConfig,
}

#[derive(Args, Clone, Copy)]
struct Format {
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { points, seed, out, fmt } => write_ply(&synthetic_cloud(points, seed), out, !fmt.ascii),
        Command::Synth {
            input,
            qp,
            seed,
            out,
            qsteps,
            fmt,
        } => {
            let clean = read_ply(input)?;
            let degraded = synth_degrade(&clean, &qp, seed)?;
            write_ply(&degraded.rgb_cloud(), out, !fmt.ascii)?;
            write_qsteps(degraded.cloud.qsteps.as_deref().unwrap_or_default(), qsteps)
        }
        Command::Partition {
            input,
            block_size,
            out_dir,
            qsteps,
            reference,
            fmt,
        } => partition(&input, block_size, &out_dir, qsteps.as_deref(), reference.as_deref(), !fmt.ascii),
        Command::Train {
            config,
            component,
            data_dir,
            out,
            epochs,
            lr,
            seed,
            qp,
            loss_log,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(c) = component {
                cfg.train.component = Component::parse(&c)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(d) = data_dir {
                cfg.paths.data_dir = Some(d);
            }
            if let Some(o) = out {
                cfg.paths.checkpoint = Some(o);
            }
            if let Some(l) = loss_log {
                cfg.paths.loss_log = Some(l);
            }
            cfg.validate()?;
            train(&cfg, qp)
        }
        Command::Infer {
            input,
            qsteps,
            ckpt_y,
            ckpt_u,
            ckpt_v,
            ckpt_joint,
            out,
            fmt,
        } => {
            let cloud = read_ply(input)?;
            let q = read_qsteps(qsteps, Some(cloud.len()))?;
            let models = match (ckpt_y, ckpt_u, ckpt_v, ckpt_joint) {
                (Some(y), Some(u), Some(v), None) => {
                    let load = |p: &Path, c: Component| -> Result<ModelParams> {
                        let ck = load_checkpoint(p)?;
                        ck.expect_component(c)?;
                        Ok(ck.model)
                    };
                    RestorationModels::PerComponent([
                        load(&y, Component::Y)?,
                        load(&u, Component::U)?,
                        load(&v, Component::V)?,
                    ])
                }
                (None, None, None, Some(j)) => {
                    let ck = load_checkpoint(&j)?;
                    if ck.component.is_some() {
                        return Err(Error::Checkpoint(format!(
                            "component mismatch: {} is not a joint model",
                            j.display()
                        )));
                    }
                    RestorationModels::Joint(ck.model)
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "give --ckpt-y, --ckpt-u and --ckpt-v, or --ckpt-joint".into(),
                    ))
                }
            };
            let restored = msgat::model::restore_cloud(&cloud, &q, &models)?;
            write_ply(&restored, out, !fmt.ascii)
        }
        Command::Metrics {
            reference,
            test,
            out,
            bits,
        } => metrics(&reference, &test, &out, bits),
        Command::Bdrate { anchor, test, metric } => {
            let a = read_curve(&anchor, &metric)?;
            let t = read_curve(&test, &metric)?;
            println!("{:.4}", bd_rate(&a, &t)?);
            Ok(())
        }
        Command::Gradcheck { config, threshold } => gradcheck(&load_config(config.as_deref())?, threshold),
        Command::DefaultConfig => {
            println!("{}", RunConfig::default_json());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn block_name(i: usize) -> String {
    format!("block_{i:05}")
}

fn partition(
    input: &Path,
    block_size: usize,
    out_dir: &Path,
    qsteps: Option<&Path>,
    reference: Option<&Path>,
    binary: bool,
) -> Result<()> {
    let mut cloud = read_ply(input)?;
    if let Some(q) = qsteps {
        cloud.qsteps = Some(read_qsteps(q, Some(cloud.len()))?);
    }
    let reference = reference.map(read_ply).transpose()?;
    if let Some(r) = &reference {
        if r.coords != cloud.coords {
            return Err(Error::InvalidArgument(
                "reference cloud geometry differs from the input".into(),
            ));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let blocks = partition_blocks(&cloud, block_size)?;
    let ref_blocks = reference.map(|r| partition_blocks(&r, block_size)).transpose()?;
    for (i, b) in blocks.iter().enumerate() {
        let stem = out_dir.join(block_name(i));
        write_ply(&b.cloud, stem.with_extension("ply"), binary)?;
        if let Some(q) = &b.cloud.qsteps {
            write_qsteps(q, stem.with_extension("q.txt"))?;
        }
        if let Some(rb) = &ref_blocks {
            write_ply(&rb[i].cloud, stem.with_extension("ref.ply"), binary)?;
        }
    }
    eprintln!("wrote {} blocks to {}", blocks.len(), out_dir.display());
    Ok(())
}

/// Loads `block_*.ply` with their `.q.txt` steps and `.ref.ply` targets.
fn load_training_dir(dir: &Path) -> Result<Vec<TrainSample>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("block_") && name.ends_with(".ply") && !name.ends_with(".ref.ply")
        })
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!("no block_*.ply files in {}", dir.display())));
    }
    stems
        .iter()
        .map(|stem| {
            let degraded = read_ply(stem.with_extension("ply"))?;
            let n = degraded.len();
            let q = read_qsteps(stem.with_extension("q.txt"), Some(n))?;
            let reference = read_ply(stem.with_extension("ref.ply"))?;
            if reference.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{}: reference has {} points, block has {n}",
                    stem.display(),
                    reference.len()
                )));
            }
            let cloud = PointCloud::new(degraded.coords, rgb_to_yuv_all(&degraded.attrs)?, Some(q))?;
            Ok(TrainSample {
                block: Block {
                    cloud,
                    source_range: 0..n,
                    pad_count: 0,
                },
                target: rgb_to_yuv_all(&reference.attrs)?,
            })
        })
        .collect()
}

fn train(cfg: &RunConfig, qp: Option<u32>) -> Result<()> {
    let dir = cfg
        .paths
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("no data directory (--data-dir or paths.data_dir)".into()))?;
    let out = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no output checkpoint (--out or paths.checkpoint)".into()))?;
    let samples = load_training_dir(dir)?;
    let prepared = prepare_samples::<f32>(&samples, &cfg.model, cfg.train.component)?;
    let model: ModelParams = build_model(&cfg.model)?;
    eprintln!(
        "training {} ({} parameters) on {} blocks",
        if cfg.model.joint { "joint model".to_string() } else { format!("component {}", cfg.train.component) },
        model.param_count(),
        samples.len()
    );
    let outcome = train_prepared(&prepared, model, &cfg.train, |epoch, loss| {
        eprintln!("epoch {:>4}  mean loss {loss:.6}", epoch + 1);
    })?;
    if let Some(log) = &cfg.paths.loss_log {
        let mut text = String::from("epoch,mean_loss\n");
        for (i, l) in outcome.history.iter().enumerate() {
            text.push_str(&format!("{},{l}\n", i + 1));
        }
        fs::write(log, text).map_err(|e| Error::io(log, e))?;
    }
    let qp = qp.or(match cfg.train.qp_set.as_slice() {
        [single] => Some(*single),
        _ => None,
    });
    let checkpoint = Checkpoint {
        model: outcome.model,
        component: (!cfg.model.joint).then_some(cfg.train.component),
        qp,
    };
    save_checkpoint(&checkpoint, out)
}

const METRICS_HEADER: &str = "test,points,bits,bpp,y_psnr,u_psnr,v_psnr,yuv_psnr";

fn metrics(reference: &Path, test: &Path, out: &Path, bits: Option<u64>) -> Result<()> {
    let r = read_ply(reference)?;
    let t = read_ply(test)?;
    if r.len() != t.len() {
        return Err(Error::Shape(format!(
            "reference has {} points, test has {}",
            r.len(),
            t.len()
        )));
    }
    let q = quality(&rgb_to_yuv_all(&r.attrs)?, &rgb_to_yuv_all(&t.attrs)?)?;
    let (bits_s, bpp_s) = match bits {
        Some(b) => (b.to_string(), format!("{}", b as f64 / r.len() as f64)),
        None => (String::new(), String::new()),
    };
    let row = format!(
        "{},{},{bits_s},{bpp_s},{:.6},{:.6},{:.6},{:.6}\n",
        test.display().to_string().replace(',', "_"),
        r.len(),
        q.y,
        q.u,
        q.v,
        q.yuv
    );
    let mut text = match fs::read_to_string(out) {
        Ok(existing) if existing.lines().next() == Some(METRICS_HEADER) => existing,
        Ok(_) => {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not a metrics table",
                out.display()
            )))
        }
        Err(_) => format!("{METRICS_HEADER}\n"),
    };
    text.push_str(&row);
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("Y {:.4} dB  U {:.4} dB  V {:.4} dB  YUV {:.4} dB", q.y, q.u, q.v, q.yuv);
    Ok(())
}

/// Reads (bpp, PSNR) pairs from a metrics table. A two-column
/// `rate,psnr` file is accepted as well.
fn read_curve(path: &Path, metric: &str) -> Result<RdCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let quality_name = format!("{}_psnr", metric.to_ascii_lowercase());
    let (rate_col, psnr_col) = match (col("bpp"), col(&quality_name), col("rate"), col("psnr")) {
        (Some(r), Some(p), _, _) => (r, p),
        (_, _, Some(r), Some(p)) => (r, p),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: needs `bpp` and `{quality_name}` columns (or `rate` and `psnr`)",
                path.display()
            )))
        }
    };
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64> {
            cells
                .get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("{}: row {} has no value in column {c}", path.display(), i + 2)))
        };
        points.push(RatePoint {
            rate: get(rate_col)?,
            psnr: get(psnr_col)?,
        });
    }
    RdCurve::new(points)
}

fn gradcheck(cfg: &RunConfig, threshold: f64) -> Result<()> {
    let gc = &cfg.gradcheck;
    let mut model: ModelParams<f64> = build_model(&cfg.model)?;
    model.randomize_output_layer(gc.seed.wrapping_add(1));
    let clean = synthetic_cloud(cfg.model.block_size, gc.seed);
    let degraded = synth_degrade(&clean, &[gc.qp], gc.seed)?;
    let n = degraded.cloud.len();
    let block = Block {
        cloud: degraded.cloud,
        source_range: 0..n,
        pad_count: 0,
    };
    let channels = model_channels(&cfg.model, Some(cfg.train.component))?;
    let sample = prepare_block::<f64>(&block, &channels, &cfg.model)?.with_target(&degraded.target, &channels)?;
    let report = gradient_check(&model, &sample, gc.step, gc.per_kind, gc.seed)?;
    for kind in [ParamKind::Conv, ParamKind::Attention, ParamKind::Bottleneck, ParamKind::Head] {
        println!(
            "{:<10} {:>3} probes  max relative error {:.3e}",
            format!("{kind:?}").to_lowercase(),
            report.count(kind),
            report.max_for(kind)
        );
    }
    println!("overall max relative error {:.3e}", report.max_rel_error);
    if report.max_rel_error > threshold {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed: {:.3e} exceeds {threshold:.1e}",
            report.max_rel_error
        )));
    }
    Ok(())
}
