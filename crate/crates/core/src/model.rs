//! The full detector: attention network, optional graph network and the
//! checkpointed metadata that ties them together.
//!
//! Besides network weights a checkpoint stores `meta.crop_size`,
//! `meta.temporal_padding` and, once the graph network exists,
//! `graph.parts` (3×m×m). None of these are trainable.

use std::path::Path;

use rand::Rng;

use crate::autodiff::Tape;
use crate::backbone::{AttentionNet, AttentionStageOutput};
use crate::config::Config;
use crate::data::{center_offset, crop_frame, Video};
use crate::error::{Error, Result};
use crate::graph::RelationGraph;
use crate::io;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::stgcn::{RelationNet, TemporalPadding};
use crate::tensor::Tensor;

pub const META_CROP: &str = "meta.crop_size";
pub const META_PADDING: &str = "meta.temporal_padding";
pub const GRAPH_PARTS: &str = "graph.parts";

/// Whether a parameter name belongs to the attention stage.
pub fn is_attention_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("branch.")
}

/// Whether a parameter name belongs to the graph network or its heads.
pub fn is_relation_param(name: &str) -> bool {
    name.starts_with("gst.") || name.starts_with("head.")
}

#[derive(Clone, Debug)]
pub struct AuModel<T> {
    pub store: ParamStore<T>,
    pub attention: AttentionNet,
    pub relation: Option<RelationNet>,
    pub crop_size: usize,
}

fn stacked_parts<T: Scalar>(parts: &[Tensor<T>; 3]) -> Result<Tensor<T>> {
    let m = parts[0].shape()[0];
    let flat: Vec<Tensor<T>> = parts.iter().map(|p| p.reshape(&[1, m, m])).collect::<Result<_>>()?;
    Tensor::concat(&[&flat[0], &flat[1], &flat[2]], 0)
}

impl<T: Scalar> AuModel<T> {
    /// Fresh attention-stage model.
    pub fn new(cfg: &Config, m: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        store.insert(META_CROP, Tensor::scalar(T::from_usize(cfg.crop_size).unwrap()))?;
        let attention = AttentionNet::create(&mut store, rng, cfg.channels, m)?;
        Ok(AuModel {
            store,
            attention,
            relation: None,
            crop_size: cfg.crop_size,
        })
    }

    pub fn num_aus(&self) -> usize {
        self.attention.num_aus()
    }

    /// Adds a freshly initialized graph network for `graph`.
    pub fn add_relation(&mut self, cfg: &Config, graph: &RelationGraph<T>, rng: &mut impl Rng) -> Result<()> {
        if self.relation.is_some() {
            return Err(Error::Config("model already has a graph network".into()));
        }
        if graph.m != self.num_aus() {
            return Err(Error::Config(format!(
                "graph has {} AUs, model has {}",
                graph.m,
                self.num_aus()
            )));
        }
        self.store.insert(META_PADDING, Tensor::scalar(T::from_u8(cfg.temporal_padding.code()).unwrap()))?;
        self.store.insert(GRAPH_PARTS, stacked_parts(&graph.parts)?)?;
        let net = RelationNet::create(
            &mut self.store,
            rng,
            self.attention.feature_len(),
            graph.m,
            cfg.t_k,
            cfg.stgcn_layers,
            cfg.temporal_padding,
        )?;
        self.relation = Some(net);
        Ok(())
    }

    /// Rebuilds a model from checkpoint contents.
    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        let crop = store.require_shape(META_CROP, &[1])?;
        let crop_size = store.get(crop).item()?.to_usize().filter(|&c| c > 0).ok_or_else(|| {
            Error::Config("checkpoint crop size is not a positive integer".into())
        })?;
        let attention = AttentionNet::lookup(&store)?;
        let relation = match store.id(GRAPH_PARTS) {
            None => None,
            Some(_) => {
                let m = attention.num_aus();
                store.require_shape(GRAPH_PARTS, &[3, m, m])?;
                let pad = store.require_shape(META_PADDING, &[1])?;
                let code = store.get(pad).item()?.to_u8().ok_or_else(|| Error::Config("bad padding code".into()))?;
                let padding = TemporalPadding::from_code(code)?;
                let mut depth = 0;
                while store.id(&format!("gst.{}.part1.edge_weight", depth + 1)).is_some() {
                    depth += 1;
                }
                Some(RelationNet::lookup(&store, attention.feature_len(), m, depth, padding)?)
            }
        };
        Ok(AuModel {
            store,
            attention,
            relation,
            crop_size,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(io::load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, &self.store)
    }

    /// The three partition matrices stored with the graph network.
    pub fn parts(&self) -> Result<[Tensor<T>; 3]> {
        let id = self.store.require(GRAPH_PARTS)?;
        let all = self.store.get(id);
        let m = self.num_aus();
        let part = |q: usize| all.slice(0, q..q + 1)?.reshape(&[m, m]);
        Ok([part(0)?, part(1)?, part(2)?])
    }

    /// Replaces the stored partition with that of `graph`.
    pub fn set_graph(&mut self, graph: &RelationGraph<T>) -> Result<()> {
        if graph.m != self.num_aus() {
            return Err(Error::Config(format!(
                "graph has {} AUs, checkpoint has {}",
                graph.m,
                self.num_aus()
            )));
        }
        let id = self.store.require(GRAPH_PARTS)?;
        *self.store.get_mut(id) = stacked_parts(&graph.parts)?;
        Ok(())
    }

    /// Center crops of every frame of a video.
    pub fn center_crops(&self, video: &Video<T>) -> Result<Vec<Tensor<T>>> {
        let side = video.image_size();
        let l = self.crop_size;
        if side < l {
            return Err(Error::Data(format!("video {} frames are {side}×{side}, smaller than the {l}×{l} crop", video.id)));
        }
        let o = center_offset(side, l);
        let per = 3 * side * side;
        Ok((0..video.len())
            .map(|i| crop_frame(&video.frames.data()[i * per..(i + 1) * per], side, l, o, o, false))
            .collect())
    }

    /// Attention-stage outputs of each frame, one tape per frame.
    pub fn attention_outputs(&self, frames: &[Tensor<T>]) -> Result<AttentionStageOutput<T>> {
        if frames.is_empty() {
            return Err(Error::shape("no frames"));
        }
        let mut maps = Vec::with_capacity(frames.len());
        let mut feats = Vec::new();
        let mut probs = Vec::new();
        for f in frames {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, |_| false);
            let x = tape.constant(f.clone());
            let outs = self.attention.frame_forward(&mut tape, &p, x)?;
            maps.push(outs.iter().map(|o| tape.value(o.map).clone()).collect());
            for o in &outs {
                feats.extend_from_slice(tape.value(o.feature).data());
                probs.push(tape.value(o.prob).item()?);
            }
        }
        let (t, m) = (frames.len(), self.num_aus());
        let out = AttentionStageOutput {
            maps,
            features: Tensor::new(&[t, m, self.attention.feature_len()], feats)?,
            probs: Tensor::new(&[t, m], probs)?,
        };
        out.check_ranges()?;
        Ok(out)
    }

    /// T×m probabilities of the graph network on a C×T×m feature.
    pub fn relation_probs(&self, f0: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self
            .relation
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no graph network".into()))?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let parts = net.bind_parts(&mut tape, &self.parts()?)?;
        let x = tape.constant(f0.clone());
        let probs = net.forward(&mut tape, &p, &parts, x)?;
        Ok(tape.value(probs).clone())
    }

    /// Per-frame probabilities for cropped frames: the graph network's when
    /// present, the attention heads' otherwise.
    pub fn predict_frames(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        let out = self.attention_outputs(frames)?;
        match self.relation {
            Some(_) => self.relation_probs(&out.relation_input()),
            None => Ok(out.probs),
        }
    }

    pub fn predict_video(&self, video: &Video<T>) -> Result<Tensor<T>> {
        self.predict_frames(&self.center_crops(video)?)
    }
}
