//! Per-frame feature extractor: two multi-scale region layers and one
//! attention branch per action unit.
//!
//! A region layer applies a full-map 3×3 convolution, then three patch-wise
//! convolution stages over 8×8, 4×4 and 2×2 grids, each stage consuming the
//! previous one. The three stage outputs are concatenated along channels and
//! fused back to the layer width by a 1×1 convolution. Each region layer is
//! followed by 2×2 max pooling, so a 3×l×l frame becomes an 8c×(l/4)×(l/4)
//! map.
//!
//! Parameter names (AU branches are 1-based):
//! `backbone.r{1,2}.{input,stage1,stage2,stage3,fusion}.{weight,bias}`,
//! `branch.<j>.{att,feat,fc}.{weight,bias}`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Patch grids of the three hierarchical stages.
pub const STAGE_GRIDS: [usize; 3] = [8, 4, 2];

/// Frame sizes must be a multiple of this: the second region layer runs at
/// l/2 and needs an 8×8 grid.
pub const FRAME_ALIGN: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub(crate) fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        weight_shape: &[usize],
        bias_shape: &[usize],
        fan_in: usize,
    ) -> Result<Self> {
        let weight = store.insert(format!("{prefix}.weight"), fan_in_uniform(rng, weight_shape, fan_in))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(bias_shape))?;
        Ok(ConvParams { weight, bias })
    }

    pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(ConvParams {
            weight: store.require(&format!("{prefix}.weight"))?,
            bias: store.require(&format!("{prefix}.bias"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RegionLayerParams {
    pub input_conv: ConvParams,
    pub stage_convs: [ConvParams; 3],
    pub fusion_conv: ConvParams,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Intermediate values of one region layer.
#[derive(Clone, Debug)]
pub struct RegionStages {
    pub input: Var,
    pub stages: [Var; 3],
    pub output: Var,
}

impl RegionLayerParams {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let input_conv =
            ConvParams::create(store, rng, &format!("{prefix}.input"), &[cout, cin, 3, 3], &[cout], cin * 9)?;
        let mut stages = Vec::with_capacity(3);
        for (s, &g) in STAGE_GRIDS.iter().enumerate() {
            stages.push(ConvParams::create(
                store,
                rng,
                &format!("{prefix}.stage{}", s + 1),
                &[g * g, cout, cout, 3, 3],
                &[g * g, cout],
                cout * 9,
            )?);
        }
        let fusion_conv = ConvParams::create(
            store,
            rng,
            &format!("{prefix}.fusion"),
            &[cout, 3 * cout, 1, 1],
            &[cout],
            3 * cout,
        )?;
        Ok(RegionLayerParams {
            input_conv,
            stage_convs: [stages[0], stages[1], stages[2]],
            fusion_conv,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let input_conv = ConvParams::lookup(store, &format!("{prefix}.input"))?;
        let [cout, cin, 3, 3] = store.get(input_conv.weight).shape()[..] else {
            return Err(Error::Config(format!("`{prefix}.input.weight` is not a 3×3 kernel bank")));
        };
        let mut stages = Vec::with_capacity(3);
        for (s, &g) in STAGE_GRIDS.iter().enumerate() {
            let name = format!("{prefix}.stage{}", s + 1);
            stages.push(ConvParams {
                weight: store.require_shape(&format!("{name}.weight"), &[g * g, cout, cout, 3, 3])?,
                bias: store.require_shape(&format!("{name}.bias"), &[g * g, cout])?,
            });
        }
        let fusion_conv = ConvParams {
            weight: store.require_shape(&format!("{prefix}.fusion.weight"), &[cout, 3 * cout, 1, 1])?,
            bias: store.require_shape(&format!("{prefix}.fusion.bias"), &[cout])?,
        };
        store.require_shape(&format!("{prefix}.input.bias"), &[cout])?;
        Ok(RegionLayerParams {
            input_conv,
            stage_convs: [stages[0], stages[1], stages[2]],
            fusion_conv,
            in_channels: cin,
            out_channels: cout,
        })
    }

    /// Forward pass returning every intermediate stage.
    pub fn forward_stages<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var) -> Result<RegionStages> {
        let (_, h, w) = tape.value(input).as_chw()?;
        let largest = STAGE_GRIDS[0];
        if h != w || h % largest != 0 {
            return Err(Error::shape(format!(
                "region layer input {h}×{w} must be square and divisible by {largest}"
            )));
        }
        let x0 = tape.conv2d(input, p[self.input_conv.weight], p[self.input_conv.bias], (1, 1), (1, 1))?;
        let mut prev = x0;
        let mut stages = [x0; 3];
        for (s, (&g, conv)) in STAGE_GRIDS.iter().zip(&self.stage_convs).enumerate() {
            prev = tape.grid_conv2d(prev, p[conv.weight], p[conv.bias], g, (1, 1))?;
            stages[s] = prev;
        }
        let cat = tape.concat(&stages, 0)?;
        let output = tape.conv2d(cat, p[self.fusion_conv.weight], p[self.fusion_conv.bias], (1, 1), (0, 0))?;
        Ok(RegionStages {
            input: x0,
            stages,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, input: Var) -> Result<Var> {
        Ok(self.forward_stages(tape, p, input)?.output)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionBranchParams {
    /// One output channel.
    pub att_conv: ConvParams,
    pub feat_conv: ConvParams,
    pub head_fc: ConvParams,
}

/// Values produced by one attention branch for one frame.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// (l/4)×(l/4) attention map.
    pub map: Var,
    /// AU feature of length 8c.
    pub feature: Var,
    /// 1×1 probability.
    pub prob: Var,
}

impl AttentionBranchParams {
    pub fn create<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, j: usize, ch: usize) -> Result<Self> {
        let prefix = format!("branch.{}", j + 1);
        Ok(AttentionBranchParams {
            att_conv: ConvParams::create(store, rng, &format!("{prefix}.att"), &[1, ch, 3, 3], &[1], ch * 9)?,
            feat_conv: ConvParams::create(store, rng, &format!("{prefix}.feat"), &[ch, ch, 3, 3], &[ch], ch * 9)?,
            head_fc: ConvParams::create(store, rng, &format!("{prefix}.fc"), &[1, ch], &[1], ch)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, j: usize, ch: usize) -> Result<Self> {
        let prefix = format!("branch.{}", j + 1);
        let shaped = |name: &str, w: &[usize], b: &[usize]| -> Result<ConvParams> {
            Ok(ConvParams {
                weight: store.require_shape(&format!("{prefix}.{name}.weight"), w)?,
                bias: store.require_shape(&format!("{prefix}.{name}.bias"), b)?,
            })
        };
        Ok(AttentionBranchParams {
            att_conv: shaped("att", &[1, ch, 3, 3], &[1])?,
            feat_conv: shaped("feat", &[ch, ch, 3, 3], &[ch])?,
            head_fc: shaped("fc", &[1, ch], &[1])?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, feat: Var) -> Result<BranchOutput> {
        let (_, h, w) = tape.value(feat).as_chw()?;
        let logits = tape.conv2d(feat, p[self.att_conv.weight], p[self.att_conv.bias], (1, 1), (1, 1))?;
        let att = tape.sigmoid(logits)?;
        let map = tape.reshape(att, &[h, w])?;
        let weighted = tape.broadcast_mul_channelwise(map, feat)?;
        let conv = tape.conv2d(weighted, p[self.feat_conv.weight], p[self.feat_conv.bias], (1, 1), (1, 1))?;
        let feature = tape.global_avg_pool(conv)?;
        let ch = tape.value(feature).len();
        let row = tape.reshape(feature, &[1, ch])?;
        let logit = tape.linear(row, p[self.head_fc.weight], p[self.head_fc.bias])?;
        let prob = tape.sigmoid(logit)?;
        Ok(BranchOutput { map, feature, prob })
    }
}

/// Backbone plus the per-AU attention branches.
#[derive(Clone, Debug)]
pub struct AttentionNet {
    pub layers: [RegionLayerParams; 2],
    pub branches: Vec<AttentionBranchParams>,
    /// Channel base `c`.
    pub channels: usize,
}

/// Per-frame, per-AU outputs of the attention stage as tape values.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    /// `maps[i][j]`: attention map of AU `j` in frame `i`.
    pub maps: Vec<Vec<Var>>,
    /// `features[i][j]`: AU feature of length 8c.
    pub features: Vec<Vec<Var>>,
    /// n×m initial probabilities.
    pub probs: Var,
}

/// Concrete attention-stage outputs for a run of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStageOutput<T> {
    /// `maps[i][j]`, each (l/4)×(l/4) with entries in (0, 1).
    pub maps: Vec<Vec<Tensor<T>>>,
    /// t×m×8c.
    pub features: Tensor<T>,
    /// t×m.
    pub probs: Tensor<T>,
}

impl AttentionNet {
    pub fn create<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize, aus: usize) -> Result<Self> {
        if channels == 0 || aus == 0 {
            return Err(Error::Config("channel base and AU count must be positive".into()));
        }
        let r1 = RegionLayerParams::create(store, rng, "backbone.r1", 3, 4 * channels)?;
        let r2 = RegionLayerParams::create(store, rng, "backbone.r2", 4 * channels, 8 * channels)?;
        let branches = (0..aus)
            .map(|j| AttentionBranchParams::create(store, rng, j, 8 * channels))
            .collect::<Result<_>>()?;
        Ok(AttentionNet {
            layers: [r1, r2],
            branches,
            channels,
        })
    }

    /// Rebuilds the network layout from stored parameter names and shapes.
    pub fn lookup<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let r1 = RegionLayerParams::lookup(store, "backbone.r1")?;
        let r2 = RegionLayerParams::lookup(store, "backbone.r2")?;
        if r1.in_channels != 3 || r1.out_channels % 4 != 0 || r2.in_channels != r1.out_channels || r2.out_channels != 2 * r1.out_channels {
            return Err(Error::Config(format!(
                "backbone channel plan {}→{}→{} is not 3→4c→8c",
                r1.in_channels, r1.out_channels, r2.out_channels
            )));
        }
        let ch = r2.out_channels;
        let mut branches = Vec::new();
        while store.id(&format!("branch.{}.att.weight", branches.len() + 1)).is_some() {
            branches.push(AttentionBranchParams::lookup(store, branches.len(), ch)?);
        }
        if branches.is_empty() {
            return Err(Error::Config("checkpoint has no attention branches".into()));
        }
        Ok(AttentionNet {
            channels: r1.out_channels / 4,
            layers: [r1, r2],
            branches,
        })
    }

    pub fn num_aus(&self) -> usize {
        self.branches.len()
    }

    pub fn feature_len(&self) -> usize {
        8 * self.channels
    }

    /// 3×l×l frame → 8c×(l/4)×(l/4).
    pub fn backbone_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, frame: Var) -> Result<Var> {
        let (ch, h, w) = tape.value(frame).as_chw()?;
        if ch != 3 || h != w || h % FRAME_ALIGN != 0 {
            return Err(Error::shape(format!(
                "frame must be 3×l×l with l divisible by {FRAME_ALIGN}, got {ch}×{h}×{w}"
            )));
        }
        let x = self.layers[0].forward(tape, p, frame)?;
        let x = tape.maxpool2d(x)?;
        let x = self.layers[1].forward(tape, p, x)?;
        tape.maxpool2d(x)
    }

    pub fn frame_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, frame: Var) -> Result<Vec<BranchOutput>> {
        let feat = self.backbone_forward(tape, p, frame)?;
        self.branches.iter().map(|b| b.forward(tape, p, feat)).collect()
    }

    /// Runs every frame and gathers the n×m probability matrix.
    pub fn sequence_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, frames: &[Var]) -> Result<AttentionVars> {
        if frames.is_empty() {
            return Err(Error::shape("sequence has no frames"));
        }
        let mut maps = Vec::with_capacity(frames.len());
        let mut features = Vec::with_capacity(frames.len());
        let mut rows = Vec::with_capacity(frames.len());
        for &f in frames {
            let outs = self.frame_forward(tape, p, f)?;
            let probs: Vec<Var> = outs.iter().map(|o| o.prob).collect();
            rows.push(tape.concat(&probs, 1)?);
            maps.push(outs.iter().map(|o| o.map).collect());
            features.push(outs.iter().map(|o| o.feature).collect());
        }
        let probs = tape.concat(&rows, 0)?;
        Ok(AttentionVars { maps, features, probs })
    }
}

impl AttentionVars {
    /// Reads the recorded values and checks the attention range invariant.
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Result<AttentionStageOutput<T>> {
        let maps: Vec<Vec<Tensor<T>>> = self
            .maps
            .iter()
            .map(|row| row.iter().map(|&v| tape.value(v).clone()).collect())
            .collect();
        let t = self.features.len();
        let m = self.features[0].len();
        let flen = tape.value(self.features[0][0]).len();
        let mut data = Vec::with_capacity(t * m * flen);
        for row in &self.features {
            for &v in row {
                data.extend_from_slice(tape.value(v).data());
            }
        }
        let out = AttentionStageOutput {
            maps,
            features: Tensor::new(&[t, m, flen], data)?,
            probs: tape.value(self.probs).clone(),
        };
        out.check_ranges()?;
        Ok(out)
    }

    /// Stacks the features into the 8c×n×m relation-network input.
    pub fn relation_input<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let flen = tape.value(self.features[0][0]).len();
        let mut frames = Vec::with_capacity(self.features.len());
        for row in &self.features {
            let cols = row
                .iter()
                .map(|&f| tape.reshape(f, &[flen, 1, 1]))
                .collect::<Result<Vec<_>>>()?;
            frames.push(tape.concat(&cols, 2)?);
        }
        tape.concat(&frames, 1)
    }
}

impl<T: Scalar> AttentionStageOutput<T> {
    /// Attention maps and probabilities must lie strictly inside (0, 1).
    pub fn check_ranges(&self) -> Result<()> {
        let open = |v: &T| *v > T::zero() && *v < T::one();
        for (i, row) in self.maps.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                if !m.data().iter().all(open) {
                    return Err(Error::Numerical(format!(
                        "attention map of frame {i}, AU {} saturated outside (0, 1)",
                        j + 1
                    )));
                }
            }
        }
        if !self.probs.data().iter().all(open) {
            return Err(Error::Numerical("initial probability saturated outside (0, 1)".into()));
        }
        Ok(())
    }

    /// Stacks the features into an 8c×t×m tensor.
    pub fn relation_input(&self) -> Tensor<T> {
        let [t, m, flen] = self.features.shape()[..] else { unreachable!() };
        let f = self.features.data();
        Tensor::from_fn(&[flen, t, m], |idx| {
            let (c, rest) = (idx / (t * m), idx % (t * m));
            let (i, j) = (rest / m, rest % m);
            f[(i * m + j) * flen + c]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn toy(c: usize, m: usize) -> (ParamStore<f64>, AttentionNet) {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let net = AttentionNet::create(&mut store, &mut rng, c, m).unwrap();
        (store, net)
    }

    fn random_frame(l: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Tensor::from_fn(&[3, l, l], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn toy_backbone_shape() {
        let (store, net) = toy(2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let f = tape.constant(random_frame(32, 1));
        let y = net.backbone_forward(&mut tape, &p, f).unwrap();
        assert_eq!(tape.value(y).shape(), &[16, 8, 8]);
    }

    #[test]
    fn full_size_backbone_shape() {
        let (store, net) = toy(8, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let f = tape.constant(Tensor::zeros(&[3, 176, 176]));
        let y = net.backbone_forward(&mut tape, &p, f).unwrap();
        assert_eq!(tape.value(y).shape(), &[64, 44, 44]);
    }

    #[test]
    fn bad_frame_size_rejected() {
        let (store, net) = toy(2, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let f = tape.constant(Tensor::zeros(&[3, 24, 24]));
        assert!(matches!(net.backbone_forward(&mut tape, &p, f), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_fusion_gives_zero_output() {
        let (mut store, net) = toy(2, 1);
        let fusion = net.layers[0].fusion_conv;
        *store.get_mut(fusion.weight) = Tensor::zeros(store.get(fusion.weight).shape());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let f = tape.constant(random_frame(32, 2));
        let y = net.layers[0].forward(&mut tape, &p, f).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 32, 32]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_cell_kernels_match_full_conv_in_cell_interiors() {
        let (mut store, net) = toy(2, 1);
        let layer = &net.layers[0];
        let stage = layer.stage_convs[0];
        // copy cell 0's bank into every cell
        let w = store.get(stage.weight).clone();
        let bank = w.slice(0, 0..1).unwrap();
        let cells = STAGE_GRIDS[0] * STAGE_GRIDS[0];
        let parts: Vec<&Tensor<f64>> = std::iter::repeat_n(&bank, cells).collect();
        *store.get_mut(stage.weight) = Tensor::concat(&parts, 0).unwrap();
        let b = Tensor::from_fn(&[cells, 8], |i| (i % 8) as f64 * 0.1);
        *store.get_mut(stage.bias) = b;

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let f = tape.constant(random_frame(32, 3));
        let st = layer.forward_stages(&mut tape, &p, f).unwrap();
        let x0 = tape.value(st.input);
        let full = kernels::conv2d(
            x0,
            &bank.reshape(&[8, 8, 3, 3]).unwrap(),
            &Tensor::from_fn(&[8], |i| i as f64 * 0.1),
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let got = tape.value(st.stages[0]);
        let cell = 32 / STAGE_GRIDS[0];
        let mut boundary_differs = false;
        for ch in 0..8 {
            for y in 0..32 {
                for x in 0..32 {
                    let on_edge = [y % cell, x % cell].iter().any(|&r| r == 0 || r == cell - 1);
                    let (a, e) = (got.get(&[ch, y, x]).unwrap(), full.get(&[ch, y, x]).unwrap());
                    if on_edge {
                        boundary_differs |= (a - e).abs() > 1e-12;
                    } else {
                        assert!((a - e).abs() < 1e-12, "interior mismatch at {ch},{y},{x}");
                    }
                }
            }
        }
        assert!(boundary_differs);
    }

    #[test]
    fn stage_locality_under_single_pixel_perturbation() {
        let (store, net) = toy(2, 1);
        let layer = &net.layers[1];
        let stage = layer.stage_convs[0];
        let run = |x: &Tensor<f64>| {
            kernels::grid_conv2d(x, store.get(stage.weight), store.get(stage.bias), STAGE_GRIDS[0], (1, 1)).unwrap()
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let base = Tensor::from_fn(&[16, 16, 16], |_| rng.random_range(-1.0..1.0));
        let mut bumped = base.clone();
        let (py, px) = (5, 10);
        bumped.set(&[3, py, px], base.get(&[3, py, px]).unwrap() + 0.5).unwrap();
        let (a, b) = (run(&base), run(&bumped));
        let cell = 16 / STAGE_GRIDS[0];
        let mut changed = 0;
        for ch in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let same_cell = y / cell == py / cell && x / cell == px / cell;
                    let (va, vb) = (a.get(&[ch, y, x]).unwrap(), b.get(&[ch, y, x]).unwrap());
                    if same_cell {
                        changed += (va != vb) as usize;
                    } else {
                        assert_eq!(va.to_bits(), vb.to_bits());
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn zero_attention_conv_gives_half_map() {
        let (mut store, net) = toy(2, 2);
        let br = net.branches[1];
        *store.get_mut(br.att_conv.weight) = Tensor::zeros(&[1, 16, 3, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let f = tape.constant(random_frame(32, 5));
        let outs = net.frame_forward(&mut tape, &p, f).unwrap();
        assert!(tape.value(outs[1].map).data().iter().all(|&v| v == 0.5));
        let prob = tape.value(outs[0].prob).item().unwrap();
        assert!(prob > 0.0 && prob < 1.0);
    }

    #[test]
    fn zero_map_leaves_only_feature_bias() {
        let (store, net) = toy(2, 1);
        let br = net.branches[0];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let feat = tape.constant(Tensor::from_fn(&[16, 8, 8], |i| (i as f64).cos()));
        let map = tape.constant(Tensor::zeros(&[8, 8]));
        let weighted = tape.broadcast_mul_channelwise(map, feat).unwrap();
        let conv = tape
            .conv2d(weighted, p[br.feat_conv.weight], p[br.feat_conv.bias], (1, 1), (1, 1))
            .unwrap();
        let f0 = tape.global_avg_pool(conv).unwrap();
        assert_eq!(tape.value(f0), store.get(br.feat_conv.bias));
    }

    #[test]
    fn lookup_recovers_layout() {
        let (store, net) = toy(2, 3);
        let again = AttentionNet::lookup(&store).unwrap();
        assert_eq!(again.channels, net.channels);
        assert_eq!(again.num_aus(), 3);
    }

    #[test]
    fn sequence_outputs_have_declared_shapes() {
        let (store, net) = toy(2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let frames: Vec<Var> = (0..2).map(|s| tape.constant(random_frame(32, 10 + s))).collect();
        let vars = net.sequence_forward(&mut tape, &p, &frames).unwrap();
        let out = vars.values(&tape).unwrap();
        assert_eq!(out.features.shape(), &[2, 3, 16]);
        assert_eq!(out.probs.shape(), &[2, 3]);
        assert_eq!(out.maps[1][2].shape(), &[8, 8]);
        let f0 = vars.relation_input(&mut tape).unwrap();
        assert_eq!(tape.value(f0), &out.relation_input());
    }
}
