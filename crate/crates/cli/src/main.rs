//! `aurel`: data generation, graph building, two-stage training, evaluation,
//! inference and attention export.
//!
//! Exit codes: 0 success, 2 usage, configuration or format errors, 3 I/O
//! failures, 4 numerical failures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aurel_core::config::{Config, Preset};
use aurel_core::data::{read_frame_table, write_frame_table, Dataset, LabelTable, SyntheticSpec, Video};
use aurel_core::error::{Error, Result};
use aurel_core::io::{encode_pgm, load_tensor};
use aurel_core::metrics::evaluate_probs;
use aurel_core::model::AuModel;
use aurel_core::tensor::Tensor;
use aurel_core::train::{predict_dataset, train_attention_stage, train_relation_stage, StepLog};
use aurel_core::RelationGraph;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "aurel", version, about = "Facial action unit detection with attention and AU relation graphs")]
struct Cli {
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    /// Seed overriding the one in the spec or configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Attention,
    Relation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a generator spec.
    GenData {
        /// Generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the AU relation graph from a labels file.
    BuildGraph {
        /// Labels CSV (`video_id,frame_idx,au_1,...`).
        #[arg(long)]
        labels: PathBuf,
        /// Correlation threshold for an edge.
        #[arg(long, default_value_t = 0.15, allow_negative_numbers = true)]
        tau: f64,
        /// Output graph JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Configuration JSON overlaid on the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base preset: toy or paper.
        #[arg(long, default_value = "toy")]
        preset: String,
        /// Extra `key=value` overrides; values are parsed as JSON when possible.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Relation graph JSON; required for the relation stage.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Starting checkpoint: the stage-1 model for the relation stage,
        /// or a checkpoint to resume the attention stage from.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write per-AU and average metrics for a checkpoint or a predictions file.
    Eval {
        /// Checkpoint to evaluate on the dataset.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        ckpt: Option<PathBuf>,
        /// Probabilities CSV to score instead of running a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Dataset directory supplying frames and ground truth.
        #[arg(long, required_unless_present = "labels")]
        data: Option<PathBuf>,
        /// Ground-truth labels CSV, when no dataset directory is given.
        #[arg(long, conflicts_with = "ckpt")]
        labels: Option<PathBuf>,
        /// Relation graph replacing the one stored in the checkpoint.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Output metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame AU probabilities for one frame tensor.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// T×3×L×L frame tensor (STNT).
        #[arg(long)]
        frames: PathBuf,
        /// Output probabilities CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one PGM attention heatmap per frame and AU.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        /// T×3×L×L frame tensor (STNT).
        #[arg(long)]
        frames: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Log {
    json: bool,
}

impl Log {
    fn emit(&self, level: &str, msg: &str, fields: Value) {
        if self.json {
            let mut rec = json!({ "level": level, "msg": msg });
            if let (Value::Object(r), Value::Object(f)) = (&mut rec, fields) {
                r.extend(f);
            }
            eprintln!("{rec}");
        } else if level == "info" {
            eprintln!("{msg}");
        } else {
            eprintln!("{level}: {msg}");
        }
    }

    fn info(&self, msg: &str, fields: Value) {
        self.emit("info", msg, fields);
    }

    fn warn(&self, msg: &str) {
        self.emit("warning", msg, json!({}));
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numerical(_) | Error::InternalInvariant(_) => 4,
        _ => 2,
    }
}

fn parse_override(item: &str) -> Result<(String, Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Preset, then config file, then `--set` pairs, then `--seed`. `aus` comes
/// from the dataset unless set explicitly.
fn resolve_config(
    preset: &str,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    aus: usize,
) -> Result<Config> {
    let base: Preset = preset.parse()?;
    let mut map = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Error::Config(format!("{}: configuration must be a JSON object", p.display()))),
                Err(e) => return Err(Error::Config(format!("{}: {e}", p.display()))),
            }
        }
        None => serde_json::Map::new(),
    };
    for item in overrides {
        let (k, v) = parse_override(item)?;
        map.insert(k, v);
    }
    if let Some(s) = seed {
        map.insert("seed".into(), json!(s));
    }
    map.entry("aus").or_insert(json!(aus));
    Config::from_json_value(base, &Value::Object(map))
}

fn log_epochs(log: &Log, steps: &[StepLog], epoch_losses: &[f64]) {
    for (epoch, loss) in epoch_losses.iter().enumerate() {
        let stage = steps.first().map(|s| s.stage.to_string()).unwrap_or_default();
        let lr = steps.iter().find(|s| s.epoch == epoch).map_or(0.0, |s| s.lr);
        log.info(
            &format!("{stage} epoch {epoch}: loss {loss:.6}, lr {lr}"),
            json!({ "stage": stage, "epoch": epoch, "loss": loss, "lr": lr }),
        );
    }
}

fn frames_video(path: &Path) -> Result<Video<f64>> {
    let frames: Tensor<f64> = load_tensor(path)?;
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::Data(format!("{}: expected a T×3×L×L tensor, found {s:?}", path.display())));
    }
    let id = path.file_stem().map_or("video".into(), |s| s.to_string_lossy().into_owned());
    Ok(Video {
        id,
        labels: Tensor::zeros(&[s[0], 1]),
        frames,
    })
}

fn probs_table(ids: Vec<String>, idx: Vec<usize>, probs: &Tensor<f64>, path: &Path) -> Result<()> {
    write_frame_table(path, &ids, &idx, probs, |v| v.to_string())
}

/// Predictions aligned to the ground-truth rows by `(video_id, frame_idx)`.
fn aligned_predictions(pred_path: &Path, truth: &LabelTable<f64>) -> Result<Tensor<f64>> {
    let (ids, idx, probs) = read_frame_table(pred_path, |s| s.parse::<f64>().ok().filter(|v| (0.0..=1.0).contains(v)))?;
    let m = probs.shape()[1];
    if m != truth.m() {
        return Err(Error::Data(format!("predictions have {m} AUs, labels have {}", truth.m())));
    }
    let rows: HashMap<(&str, usize), usize> = ids.iter().zip(&idx).enumerate().map(|(r, (v, &f))| ((v.as_str(), f), r)).collect();
    let mut data = Vec::with_capacity(truth.labels.len());
    for (v, &f) in truth.video_ids.iter().zip(&truth.frame_idx) {
        let r = rows
            .get(&(v.as_str(), f))
            .ok_or_else(|| Error::Data(format!("no prediction for video {v} frame {f}")))?;
        data.extend_from_slice(&probs.data()[r * m..(r + 1) * m]);
    }
    Tensor::new(truth.labels.shape(), data)
}

fn run(cli: Cli, log: &Log) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let mut s = SyntheticSpec::load(&spec).map_err(|e| match e {
                Error::Io { context, source } => Error::Config(format!("{context}: {source}")),
                e => e,
            })?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let ds = aurel_core::data::generate_to_dir(&s, &out)?;
            log.info(
                &format!("wrote {} videos, {} frames to {}", ds.videos.len(), ds.num_frames(), out.display()),
                json!({ "videos": ds.videos.len(), "frames": ds.num_frames() }),
            );
        }
        Command::BuildGraph { labels, tau, out } => {
            let table = LabelTable::<f64>::read(&labels)?;
            if !(-1.0..=1.0).contains(&tau) {
                log.warn(&format!("tau {tau} lies outside [-1, 1]; the edge set is empty or complete"));
            }
            let g = RelationGraph::from_labels(&table.labels, tau)?;
            g.save(&out)?;
            log.info(
                &format!("graph over {} AUs, gravity center AU {}", g.m, g.gravity + 1),
                json!({ "m": g.m, "gravity": g.gravity + 1 }),
            );
        }
        Command::Train {
            stage,
            data,
            config,
            preset,
            overrides,
            graph,
            from_checkpoint,
            out,
            log: log_path,
        } => {
            if matches!(stage, StageArg::Relation) && graph.is_none() {
                return Err(Error::Config("the relation stage requires --graph".into()));
            }
            if matches!(stage, StageArg::Relation) && from_checkpoint.is_none() {
                return Err(Error::Config("the relation stage requires --from-checkpoint with a stage-1 model".into()));
            }
            let ds = Dataset::<f64>::load(&data)?;
            let cfg = resolve_config(&preset, config.as_deref(), &overrides, cli.seed, ds.m)?;
            for w in cfg.warnings() {
                log.warn(&w);
            }
            let init = from_checkpoint.as_deref().map(AuModel::<f64>::load).transpose()?;
            let (model, report) = match stage {
                StageArg::Attention => train_attention_stage(&ds, &cfg, init)?,
                StageArg::Relation => {
                    let g = RelationGraph::load(graph.as_deref().expect("checked above"))?;
                    train_relation_stage(&ds, init.expect("checked above"), &g, &cfg)?
                }
            };
            log_epochs(log, &report.steps, &report.epoch_losses);
            model.save(&out)?;
            let log_path = log_path.unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", out.display())));
            report.save(&log_path)?;
            log.info(&format!("wrote {}", out.display()), json!({ "checkpoint": out, "log": log_path }));
        }
        Command::Eval {
            ckpt,
            predictions,
            data,
            labels,
            graph,
            out,
        } => {
            let (probs, truth) = match (ckpt, predictions) {
                (Some(ckpt), _) => {
                    let mut model = AuModel::<f64>::load(&ckpt)?;
                    let ds = Dataset::<f64>::load(data.as_deref().expect("clap requires --data"))?;
                    if ds.m != model.num_aus() {
                        return Err(Error::Config(format!("dataset has {} AUs, checkpoint has {}", ds.m, model.num_aus())));
                    }
                    if let Some(g) = graph {
                        let g = RelationGraph::<f64>::load(&g)?;
                        if model.relation.is_some() {
                            model.set_graph(&g)?;
                        } else if g.m != model.num_aus() {
                            return Err(Error::Config(format!("graph has {} AUs, checkpoint has {}", g.m, model.num_aus())));
                        }
                    }
                    predict_dataset(&model, &ds)?
                }
                (None, Some(pred)) => {
                    let truth = match (labels, data) {
                        (Some(l), _) => LabelTable::<f64>::read(&l)?,
                        (None, Some(d)) => LabelTable::<f64>::read(&d.join("labels.csv"))?,
                        (None, None) => unreachable!("clap requires --data or --labels"),
                    };
                    (aligned_predictions(&pred, &truth)?, truth.labels)
                }
                (None, None) => unreachable!("clap requires --ckpt or --predictions"),
            };
            let rep = evaluate_probs(&probs, &truth)?;
            rep.save(&out)?;
            log.info(
                &format!("Avg F1 {:.4}, accuracy {:.4}", rep.avg.f1, rep.avg.accuracy),
                json!({ "f1": rep.avg.f1, "accuracy": rep.avg.accuracy }),
            );
        }
        Command::Infer { ckpt, frames, out } => {
            let model = AuModel::<f64>::load(&ckpt)?;
            let video = frames_video(&frames)?;
            let probs = model.predict_video(&video)?;
            let t = video.len();
            probs_table(vec![video.id.clone(); t], (0..t).collect(), &probs, &out)?;
            log.info(&format!("wrote {t} rows to {}", out.display()), json!({ "frames": t }));
        }
        Command::ExportAttention { ckpt, frames, out } => {
            let model = AuModel::<f64>::load(&ckpt)?;
            let video = frames_video(&frames)?;
            let maps = model.attention_outputs(&model.center_crops(&video)?)?.maps;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                context: format!("creating {}", out.display()),
                source: e,
            })?;
            let mut count = 0;
            for (i, row) in maps.iter().enumerate() {
                for (j, map) in row.iter().enumerate() {
                    let path = out.join(format!("frame_{i:04}_au_{}.pgm", j + 1));
                    std::fs::write(&path, encode_pgm(map)?).map_err(|e| Error::Io {
                        context: format!("writing {}", path.display()),
                        source: e,
                    })?;
                    count += 1;
                }
            }
            log.info(&format!("wrote {count} heatmaps to {}", out.display()), json!({ "files": count }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = Log { json: cli.json_logs };
    match run(cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.emit("error", &e.to_string(), json!({ "exit_code": exit_code(&e) }));
            ExitCode::from(exit_code(&e))
        }
    }
}
