//! Two-stage training.
//!
//! Each epoch cuts every video into non-overlapping windows of `seq_len`
//! frames starting at a random phase, shuffles the windows and walks them in
//! mini-batches. All randomness comes from one xoshiro256++ stream seeded
//! through splitmix64, consumed in a fixed order. The batch loss is the mean
//! of the per-window losses; gradients are accumulated frame by frame (or
//! window by window) in a fixed order before each update.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::data::{center_offset, crop_frame, Dataset};
use crate::error::{Error, Result};
use crate::graph::RelationGraph;
use crate::loss::{attention_loss_sum, au_detection_loss, class_weights, occurrence_rates};
use crate::model::{is_attention_param, is_relation_param, AuModel};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offset between the initialization and training streams of one seed.
const TRAIN_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Attention,
    Relation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Attention => "attention",
            Stage::Relation => "relation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    /// CSV `stage,epoch,step,lr,loss`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,epoch,step,lr,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{},{}\n", r.stage, r.epoch, r.step, r.lr, r.loss));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    video: usize,
    start: usize,
    len: usize,
}

fn epoch_windows<T: Scalar>(ds: &Dataset<T>, t: usize, rng: &mut impl Rng) -> Vec<Window> {
    let mut out = Vec::new();
    for (v, video) in ds.videos.iter().enumerate() {
        let n = video.len();
        if n <= t {
            out.push(Window { video: v, start: 0, len: n });
            continue;
        }
        let count = n / t;
        let offset = rng.random_range(0..=n - count * t);
        out.extend((0..count).map(|k| Window {
            video: v,
            start: offset + k * t,
            len: t,
        }));
    }
    out.shuffle(rng);
    out
}

fn check_dataset<T: Scalar>(ds: &Dataset<T>, cfg: &Config) -> Result<()> {
    if ds.videos.is_empty() || ds.num_frames() == 0 {
        return Err(Error::Data("dataset has no frames".into()));
    }
    if ds.m != cfg.aus {
        return Err(Error::Config(format!("dataset has {} AUs, configuration expects {}", ds.m, cfg.aus)));
    }
    if let Some(v) = ds.videos.iter().find(|v| v.image_size() < cfg.crop_size) {
        return Err(Error::Data(format!(
            "video {} frames are smaller than the {} crop",
            v.id, cfg.crop_size
        )));
    }
    Ok(())
}

/// Loss weights from the configuration or from training occurrence rates.
pub fn loss_weights<T: Scalar>(ds: &Dataset<T>, cfg: &Config) -> Result<Tensor<T>> {
    match &cfg.class_weights {
        Some(w) => Tensor::new(&[w.len()], w.iter().map(|&v| T::lit(v)).collect()),
        None => class_weights(&occurrence_rates(&ds.all_labels())?),
    }
}

fn zero_grads<T: Scalar>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
}

fn accumulate<T: Scalar>(acc: &mut [Tensor<T>], grads: Vec<Tensor<T>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.accumulate(&g);
    }
}

fn finite_loss<T: Scalar>(v: T, stage: Stage, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v.as_f64())
    } else {
        Err(Error::Numerical(format!("{stage} loss became {v} at step {step}")))
    }
}

struct Crop {
    y0: usize,
    x0: usize,
    mirror: bool,
}

fn draw_crop(side: usize, cfg: &Config, rng: &mut impl Rng) -> Crop {
    let l = cfg.crop_size;
    let (y0, x0) = if cfg.random_crop {
        (rng.random_range(0..=side - l), rng.random_range(0..=side - l))
    } else {
        (center_offset(side, l), center_offset(side, l))
    };
    let mirror = cfg.mirror && rng.random::<bool>();
    Crop { y0, x0, mirror }
}

fn window_frames<T: Scalar>(ds: &Dataset<T>, w: Window, crop: &Crop, l: usize) -> Vec<Tensor<T>> {
    let video = &ds.videos[w.video];
    let side = video.image_size();
    let per = 3 * side * side;
    (w.start..w.start + w.len)
        .map(|i| {
            crop_frame(
                &video.frames.data()[i * per..(i + 1) * per],
                side,
                l,
                crop.y0,
                crop.x0,
                crop.mirror,
            )
        })
        .collect()
}

fn window_labels<T: Scalar>(ds: &Dataset<T>, w: Window) -> Result<Tensor<T>> {
    ds.videos[w.video].labels.slice(0, w.start..w.start + w.len)
}

/// Trains the backbone and attention branches on `L^a`. Starts from `init`
/// when given, otherwise from a fresh seeded initialization.
pub fn train_attention_stage<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &Config,
    init: Option<AuModel<T>>,
) -> Result<(AuModel<T>, TrainReport)> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    let mut model = match init {
        Some(m) => m,
        None => AuModel::new(cfg, ds.m, &mut Xoshiro256PlusPlus::seed_from_u64(cfg.seed))?,
    };
    if model.num_aus() != ds.m || model.crop_size != cfg.crop_size {
        return Err(Error::Config("initial checkpoint does not match the configuration".into()));
    }
    let w = loss_weights(ds, cfg)?;
    let lambda = T::lit(cfg.lambda_r);
    let trainable: Vec<bool> = model.store.iter().map(|(n, _)| is_attention_param(n)).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut opt = Sgd::new(T::lit(cfg.momentum), T::lit(cfg.weight_decay), T::one());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.attention_epochs {
        let lr = cfg.attention_schedule.lr_at(epoch)?;
        opt.lr = T::lit(lr);
        let windows = epoch_windows(ds, cfg.seq_len, &mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in windows.chunks(cfg.batch_size) {
            let mut grads = zero_grads(&model.store);
            let mut batch_loss = T::zero();
            for &win in batch {
                let crop = draw_crop(ds.videos[win.video].image_size(), cfg, &mut rng);
                let frames = window_frames(ds, win, &crop, cfg.crop_size);
                let labels = window_labels(ds, win)?;
                let scale = T::one() / T::from_usize(win.len * batch.len()).unwrap();
                for (i, frame) in frames.into_iter().enumerate() {
                    let mut tape = Tape::new();
                    let p = model.store.bind(&mut tape, is_attention_param);
                    let x = tape.constant(frame);
                    let outs = model.attention.frame_forward(&mut tape, &p, x)?;
                    let probs: Vec<_> = outs.iter().map(|o| o.prob).collect();
                    let row = tape.concat(&probs, 1)?;
                    let maps = vec![outs.iter().map(|o| o.map).collect::<Vec<_>>()];
                    for &mv in &maps[0] {
                        let v = tape.value(mv);
                        if !v.data().iter().all(|&a| a > T::zero() && a < T::one()) {
                            return Err(Error::Numerical(format!("attention map left (0, 1) in epoch {epoch}")));
                        }
                    }
                    let frame_labels = labels.slice(0, i..i + 1)?;
                    let loss = attention_loss_sum(&mut tape, row, &maps, &frame_labels, &w, lambda)?;
                    let loss = tape.scalar_mul(loss, scale)?;
                    batch_loss += tape.value(loss).item()?;
                    let mut g = tape.backward(loss)?;
                    accumulate(&mut grads, p.gradients(&mut g));
                }
            }
            let step = opt.step;
            let loss = finite_loss(batch_loss, Stage::Attention, step)?;
            opt.step(&mut model.store, &grads, &trainable)?;
            report.steps.push(StepLog {
                stage: Stage::Attention,
                epoch,
                step,
                lr,
                loss,
            });
            epoch_loss += loss;
            steps += 1;
        }
        report.epoch_losses.push(epoch_loss / steps as f64);
    }
    Ok((model, report))
}

/// Per-video T×m×8c features of the attention network on center crops.
pub fn cache_features<T: Scalar>(model: &AuModel<T>, ds: &Dataset<T>) -> Result<Vec<Tensor<T>>> {
    ds.videos
        .iter()
        .map(|v| Ok(model.attention_outputs(&model.center_crops(v)?)?.features))
        .collect()
}

/// C×len×m graph input for frames `start..start+len` of a T×m×C feature.
pub fn relation_window<T: Scalar>(features: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [_, m, c] = features.shape()[..] else {
        return Err(Error::shape("features must be T×m×C"));
    };
    let f = features.data();
    Ok(Tensor::from_fn(&[c, len, m], |idx| {
        let (ch, rest) = (idx / (len * m), idx % (len * m));
        let (i, j) = (rest / m, rest % m);
        f[((start + i) * m + j) * c + ch]
    }))
}

/// Adds and trains the graph network on `L^u`. With `freeze_backbone` the
/// attention-stage tensors stay bitwise unchanged and features are computed
/// once on center crops.
pub fn train_relation_stage<T: Scalar>(
    ds: &Dataset<T>,
    stage1: AuModel<T>,
    graph: &RelationGraph<T>,
    cfg: &Config,
) -> Result<(AuModel<T>, TrainReport)> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    if graph.m != cfg.aus {
        return Err(Error::Config(format!("graph has {} AUs, configuration expects {}", graph.m, cfg.aus)));
    }
    let mut model = stage1;
    if model.crop_size != cfg.crop_size || model.num_aus() != cfg.aus {
        return Err(Error::Config("stage-1 checkpoint does not match the configuration".into()));
    }
    if model.relation.is_none() {
        let mut init = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
        model.add_relation(cfg, graph, &mut init)?;
    } else {
        model.set_graph(graph)?;
    }
    let net = model.relation.clone().expect("graph network present");
    let parts = model.parts()?;
    let w = loss_weights(ds, cfg)?;
    let unfrozen = |n: &str| is_relation_param(n) || (is_attention_param(n) && !n.contains(".fc."));
    let trainable: Vec<bool> = model
        .store
        .iter()
        .map(|(n, _)| if cfg.freeze_backbone { is_relation_param(n) } else { unfrozen(n) })
        .collect();
    let cached = if cfg.freeze_backbone { Some(cache_features(&model, ds)?) } else { None };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ TRAIN_STREAM ^ 1);
    let mut opt = Sgd::new(T::lit(cfg.momentum), T::lit(cfg.weight_decay), T::one());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.relation_epochs {
        let lr = cfg.relation_schedule.lr_at(epoch)?;
        opt.lr = T::lit(lr);
        let windows = epoch_windows(ds, cfg.seq_len, &mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in windows.chunks(cfg.batch_size) {
            let mut grads = zero_grads(&model.store);
            let mut batch_loss = T::zero();
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            for &win in batch {
                let labels = window_labels(ds, win)?;
                let mut tape = Tape::new();
                let (p, f0) = match &cached {
                    Some(feats) => {
                        let p = model.store.bind(&mut tape, is_relation_param);
                        let f0 = tape.constant(relation_window(&feats[win.video], win.start, win.len)?);
                        (p, f0)
                    }
                    None => {
                        let crop = draw_crop(ds.videos[win.video].image_size(), cfg, &mut rng);
                        let p = model.store.bind(&mut tape, unfrozen);
                        let frames: Vec<_> = window_frames(ds, win, &crop, cfg.crop_size)
                            .into_iter()
                            .map(|f| tape.constant(f))
                            .collect();
                        let vars = model.attention.sequence_forward(&mut tape, &p, &frames)?;
                        let f0 = vars.relation_input(&mut tape)?;
                        (p, f0)
                    }
                };
                let pv = net.bind_parts(&mut tape, &parts)?;
                let probs = net.forward(&mut tape, &p, &pv, f0)?;
                let loss = au_detection_loss(&mut tape, probs, &labels, &w)?;
                let loss = tape.scalar_mul(loss, scale)?;
                batch_loss += tape.value(loss).item()?;
                let mut g = tape.backward(loss)?;
                accumulate(&mut grads, p.gradients(&mut g));
            }
            let step = opt.step;
            let loss = finite_loss(batch_loss, Stage::Relation, step)?;
            opt.step(&mut model.store, &grads, &trainable)?;
            report.steps.push(StepLog {
                stage: Stage::Relation,
                epoch,
                step,
                lr,
                loss,
            });
            epoch_loss += loss;
            steps += 1;
        }
        report.epoch_losses.push(epoch_loss / steps as f64);
    }
    Ok((model, report))
}

/// Stacked probabilities and labels over every video, center crops.
pub fn predict_dataset<T: Scalar>(model: &AuModel<T>, ds: &Dataset<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let probs: Vec<Tensor<T>> = ds.videos.iter().map(|v| model.predict_video(v)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = probs.iter().collect();
    Ok((Tensor::concat(&refs, 0)?, ds.all_labels()))
}
