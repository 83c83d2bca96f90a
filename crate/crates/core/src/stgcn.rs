//! Stacked spatio-temporal graph convolution over AU features.
//!
//! Features are laid out C×T×M (channels, frames, nodes). Each layer computes
//! `F_out = Φ2(Σ_q Ȧ_q Φ1_q(F_in)) + F_in` with `Ȧ_q = tanh(W_q) ⊙ Ã_q`,
//! where the node product acts on the last axis of every (channel, frame)
//! row and Φ2 convolves along frames.
//!
//! Parameter names (layers, parts and heads are 1-based):
//! `gst.<l>.part<q>.edge_weight`, `gst.<l>.part<q>.phi1.{weight,bias}`,
//! `gst.<l>.temporal.{weight,bias}`, `head.<j>.{weight,bias}`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::ConvParams;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERS: usize = 8;

/// How the temporal convolution extends a sequence beyond its ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPadding {
    /// Repeat the first and last frames.
    #[default]
    Replicate,
    Zero,
}

impl TemporalPadding {
    pub fn code(self) -> u8 {
        match self {
            TemporalPadding::Replicate => 0,
            TemporalPadding::Zero => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TemporalPadding::Replicate),
            1 => Ok(TemporalPadding::Zero),
            c => Err(Error::Config(format!("unknown temporal padding code {c}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StgcnLayerParams {
    pub edge_weight: [ParamId; 3],
    pub phi1: [ConvParams; 3],
    pub phi2: ConvParams,
    pub t_k: usize,
}

/// `tanh(W_q) ⊙ Ã_q`.
pub fn adaptive_edges<T: Scalar>(tape: &mut Tape<T>, part: Var, weight: Var) -> Result<Var> {
    if tape.value(part).shape() != tape.value(weight).shape() {
        return Err(Error::shape(format!(
            "edge weights {:?} do not match partition {:?}",
            tape.value(weight).shape(),
            tape.value(part).shape()
        )));
    }
    let t = tape.tanh(weight)?;
    tape.mul(t, part)
}

fn check_t_k(t_k: usize) -> Result<()> {
    if t_k % 2 == 0 {
        return Err(Error::Config(format!("temporal kernel size must be odd, got {t_k}")));
    }
    Ok(())
}

impl StgcnLayerParams {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        layer: usize,
        channels: usize,
        m: usize,
        t_k: usize,
    ) -> Result<Self> {
        check_t_k(t_k)?;
        let prefix = format!("gst.{}", layer + 1);
        let mut edge_weight = Vec::with_capacity(3);
        let mut phi1 = Vec::with_capacity(3);
        for q in 1..=3 {
            edge_weight.push(store.insert(format!("{prefix}.part{q}.edge_weight"), Tensor::ones(&[m, m]))?);
            phi1.push(ConvParams::create(
                store,
                rng,
                &format!("{prefix}.part{q}.phi1"),
                &[channels, channels, 1, 1],
                &[channels],
                channels,
            )?);
        }
        let phi2 = ConvParams {
            weight: store.insert(format!("{prefix}.temporal.weight"), Tensor::zeros(&[channels, channels, t_k, 1]))?,
            bias: store.insert(format!("{prefix}.temporal.bias"), Tensor::zeros(&[channels]))?,
        };
        Ok(StgcnLayerParams {
            edge_weight: [edge_weight[0], edge_weight[1], edge_weight[2]],
            phi1: [phi1[0], phi1[1], phi1[2]],
            phi2,
            t_k,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, layer: usize, channels: usize, m: usize) -> Result<Self> {
        let prefix = format!("gst.{}", layer + 1);
        let mut edge_weight = Vec::with_capacity(3);
        let mut phi1 = Vec::with_capacity(3);
        for q in 1..=3 {
            edge_weight.push(store.require_shape(&format!("{prefix}.part{q}.edge_weight"), &[m, m])?);
            phi1.push(ConvParams {
                weight: store.require_shape(&format!("{prefix}.part{q}.phi1.weight"), &[channels, channels, 1, 1])?,
                bias: store.require_shape(&format!("{prefix}.part{q}.phi1.bias"), &[channels])?,
            });
        }
        let weight = store.require(&format!("{prefix}.temporal.weight"))?;
        let [co, ci, t_k, 1] = store.get(weight).shape()[..] else {
            return Err(Error::Config(format!("`{prefix}.temporal.weight` is not a t_k×1 kernel bank")));
        };
        if co != channels || ci != channels {
            return Err(Error::Config(format!("`{prefix}.temporal.weight` has the wrong channel count")));
        }
        check_t_k(t_k)?;
        let phi2 = ConvParams {
            weight,
            bias: store.require_shape(&format!("{prefix}.temporal.bias"), &[channels])?,
        };
        Ok(StgcnLayerParams {
            edge_weight: [edge_weight[0], edge_weight[1], edge_weight[2]],
            phi1: [phi1[0], phi1[1], phi1[2]],
            phi2,
            t_k,
        })
    }

    /// One layer on a C×T×M feature. `parts` are the three partition
    /// matrices recorded on the same tape.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        parts: &[Var; 3],
        input: Var,
        padding: TemporalPadding,
    ) -> Result<Var> {
        let (c, t, m) = tape.value(input).as_chw()?;
        let mut acc: Option<Var> = None;
        for q in 0..3 {
            let edges = adaptive_edges(tape, parts[q], p[self.edge_weight[q]])?;
            let y = tape.conv2d(input, p[self.phi1[q].weight], p[self.phi1[q].bias], (1, 1), (0, 0))?;
            let rows = tape.reshape(y, &[c * t, m])?;
            let et = tape.transpose(edges)?;
            let z = tape.matmul(rows, et)?;
            acc = Some(match acc {
                None => z,
                Some(a) => tape.add(a, z)?,
            });
        }
        let spatial = tape.reshape(acc.expect("three parts"), &[c, t, m])?;
        let half = (self.t_k - 1) / 2;
        let temporal = match padding {
            TemporalPadding::Replicate => {
                let padded = tape.pad_replicate(spatial, 1, half, half)?;
                tape.conv2d(padded, p[self.phi2.weight], p[self.phi2.bias], (1, 1), (0, 0))?
            }
            TemporalPadding::Zero => tape.conv2d(spatial, p[self.phi2.weight], p[self.phi2.bias], (1, 1), (half, 0))?,
        };
        tape.add(temporal, input)
    }
}

/// The graph network plus per-AU heads.
#[derive(Clone, Debug)]
pub struct RelationNet {
    pub layers: Vec<StgcnLayerParams>,
    pub heads: Vec<ConvParams>,
    pub channels: usize,
    pub m: usize,
    pub padding: TemporalPadding,
}

impl RelationNet {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        channels: usize,
        m: usize,
        t_k: usize,
        depth: usize,
        padding: TemporalPadding,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("graph network needs at least one layer".into()));
        }
        let layers = (0..depth)
            .map(|l| StgcnLayerParams::create(store, rng, l, channels, m, t_k))
            .collect::<Result<_>>()?;
        let heads = (0..m)
            .map(|j| ConvParams::create(store, rng, &format!("head.{}", j + 1), &[1, channels], &[1], channels))
            .collect::<Result<_>>()?;
        Ok(RelationNet {
            layers,
            heads,
            channels,
            m,
            padding,
        })
    }

    /// Rebuilds the layout from stored names; `depth` must match the number
    /// of stored layers.
    pub fn lookup<T: Scalar>(
        store: &ParamStore<T>,
        channels: usize,
        m: usize,
        depth: usize,
        padding: TemporalPadding,
    ) -> Result<Self> {
        let mut stored = 0;
        while store.id(&format!("gst.{}.part1.edge_weight", stored + 1)).is_some() {
            stored += 1;
        }
        if stored != depth {
            return Err(Error::Config(format!("checkpoint holds {stored} graph layers, configuration expects {depth}")));
        }
        let layers = (0..depth)
            .map(|l| StgcnLayerParams::lookup(store, l, channels, m))
            .collect::<Result<_>>()?;
        let heads = (0..m)
            .map(|j| ConvParams::lookup(store, &format!("head.{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        for (j, h) in heads.iter().enumerate() {
            if store.get(h.weight).shape() != [1, channels] {
                return Err(Error::Config(format!("`head.{}.weight` must be 1×{channels}", j + 1)));
            }
        }
        Ok(RelationNet {
            layers,
            heads,
            channels,
            m,
            padding,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Records the partition matrices as constants.
    pub fn bind_parts<T: Scalar>(&self, tape: &mut Tape<T>, parts: &[Tensor<T>; 3]) -> Result<[Var; 3]> {
        for part in parts {
            if part.shape() != [self.m, self.m] {
                return Err(Error::Config(format!(
                    "graph partition {:?} does not match {} AUs",
                    part.shape(),
                    self.m
                )));
            }
        }
        Ok([
            tape.constant(parts[0].clone()),
            tape.constant(parts[1].clone()),
            tape.constant(parts[2].clone()),
        ])
    }

    /// Applies every layer to a C×T×M feature.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, parts: &[Var; 3], f0: Var) -> Result<Var> {
        let (c, _, m) = tape.value(f0).as_chw()?;
        if c != self.channels || m != self.m {
            return Err(Error::shape(format!(
                "graph input has {c} channels and {m} nodes, expected {} and {}",
                self.channels, self.m
            )));
        }
        let mut f = f0;
        for layer in &self.layers {
            f = layer.forward(tape, p, parts, f, self.padding)?;
        }
        Ok(f)
    }

    /// Per-AU heads on a C×T×M feature: T×M logits.
    pub fn head_logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        let (c, t, _) = tape.value(f).as_chw()?;
        let mut cols = Vec::with_capacity(self.m);
        for (j, head) in self.heads.iter().enumerate() {
            let node = tape.slice(f, 2, j..j + 1)?;
            let node = tape.reshape(node, &[c, t])?;
            let rows = tape.transpose(node)?;
            cols.push(tape.linear(rows, p[head.weight], p[head.bias])?);
        }
        tape.concat(&cols, 1)
    }

    /// T×M probabilities.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, parts: &[Var; 3], f0: Var) -> Result<Var> {
        let f = self.features(tape, p, parts, f0)?;
        let logits = self.head_logits(tape, p, f)?;
        tape.sigmoid(logits)
    }
}
