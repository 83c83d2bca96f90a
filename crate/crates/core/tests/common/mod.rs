//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance gate. Nothing here calls the routine it checks.
#![allow(dead_code)]

use aurel_core::autodiff::{Tape, Var};
use aurel_core::config::{Config, Preset};
use aurel_core::data::{center_offset, Dataset, SyntheticSpec};
use aurel_core::gradcheck::{grad_check_many, Probes};
use aurel_core::graph::{HopDistance, RelationGraph};
use aurel_core::loss::{attention_stage_loss, au_detection_loss};
use aurel_core::model::AuModel;
use aurel_core::params::{Bound, ParamStore};
use aurel_core::stgcn::{RelationNet, StgcnLayerParams, TemporalPadding};
use aurel_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> T64 {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn binary(rows: usize, cols: usize, p: f64, r: &mut impl Rng) -> T64 {
    Tensor::from_fn(&[rows, cols], |_| if r.random_bool(p) { 1.0 } else { 0.0 })
}

/// Label matrix with random per-column rates, some columns possibly constant.
pub fn random_labels(r: &mut impl Rng) -> T64 {
    let m = r.random_range(1..=6);
    let n = r.random_range(2..=200);
    let rates: Vec<f64> = (0..m)
        .map(|_| match r.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.05..0.95),
        })
        .collect();
    let mut data = Vec::with_capacity(n * m);
    let driver: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    for d in &driver {
        for &p in &rates {
            // Half of the entries copy a shared driver so correlations vary.
            let v = if r.random_bool(0.5) { *d } else { r.random_bool(p) };
            data.push(if p == 0.0 { 0.0 } else if p == 1.0 { 1.0 } else if v { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(&[n, m], data).unwrap()
}

// ---------------------------------------------------------------- graph ----

/// Two-pass Pearson correlation with explicit column extraction.
pub fn pcc_oracle(labels: &T64) -> Vec<Vec<f64>> {
    let (n, m) = (labels.shape()[0], labels.shape()[1]);
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| labels.data()[i * m + j]).collect() };
    let mut r = vec![vec![0.0; m]; m];
    for j in 0..m {
        for k in 0..m {
            let (x, y) = (col(j), col(k));
            let mx = x.iter().sum::<f64>() / n as f64;
            let my = y.iter().sum::<f64>() / n as f64;
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
            r[j][k] = if sxx == 0.0 || syy == 0.0 {
                0.0
            } else if j == k {
                1.0
            } else {
                sxy / (sxx * syy).sqrt()
            };
        }
    }
    r
}

pub fn adjacency_oracle(r: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let m = r.len();
    (0..m)
        .map(|j| (0..m).map(|k| if j == k || (r[j][k] >= tau && r[k][j] >= tau) { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `Ã = A·Λ` by explicit matrix multiplication with the diagonal matrix.
pub fn normalized_oracle(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.len();
    let mut lam = vec![vec![0.0; m]; m];
    for k in 0..m {
        lam[k][k] = 1.0 / a[k].iter().sum::<f64>();
    }
    let mut out = vec![vec![0.0; m]; m];
    for j in 0..m {
        for k in 0..m {
            for l in 0..m {
                out[j][k] += a[j][l] * lam[l][k];
            }
        }
    }
    out
}

pub fn gravity_oracle(a: &[Vec<f64>]) -> usize {
    let m = a.len();
    let deg: Vec<usize> = (0..m).map(|j| (0..m).filter(|&k| k != j && a[j][k] == 1.0).count()).collect();
    let best = *deg.iter().max().unwrap();
    deg.iter().position(|&d| d == best).unwrap()
}

/// All-pairs shortest hop counts by Floyd–Warshall; `None` when unreachable.
pub fn hops_oracle(a: &[Vec<f64>], gravity: usize) -> Vec<Option<usize>> {
    let m = a.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; m]; m];
    for j in 0..m {
        for k in 0..m {
            if j == k {
                d[j][k] = 0;
            } else if a[j][k] == 1.0 {
                d[j][k] = 1;
            }
        }
    }
    for l in 0..m {
        for j in 0..m {
            for k in 0..m {
                if d[j][l] + d[l][k] < d[j][k] {
                    d[j][k] = d[j][l] + d[l][k];
                }
            }
        }
    }
    (0..m).map(|k| (d[gravity][k] < inf).then_some(d[gravity][k])).collect()
}

/// Part index (0, 1, 2) of every entry: self, centripetal, centrifugal.
pub fn partition_oracle(a_norm: &[Vec<f64>], hops: &[Option<usize>]) -> [Vec<Vec<f64>>; 3] {
    let m = a_norm.len();
    let far = |h: Option<usize>| h.unwrap_or(usize::MAX);
    let mut parts = [vec![vec![0.0; m]; m], vec![vec![0.0; m]; m], vec![vec![0.0; m]; m]];
    for j in 0..m {
        for k in 0..m {
            let q = if j == k {
                0
            } else if far(hops[k]) <= far(hops[j]) {
                1
            } else {
                2
            };
            parts[q][j][k] = a_norm[j][k];
        }
    }
    parts
}

pub fn max_diff(t: &T64, oracle: &[Vec<f64>]) -> f64 {
    let m = oracle.len();
    let mut worst = 0.0f64;
    for j in 0..m {
        for k in 0..m {
            worst = worst.max((t.data()[j * m + k] - oracle[j][k]).abs());
        }
    }
    worst
}

/// Checks a graph against every brute-force oracle; returns the largest
/// numerical deviation or an error message on a discrete mismatch.
pub fn check_graph_against_oracles(labels: &T64, tau: f64) -> Result<f64, String> {
    let g = RelationGraph::from_labels(labels, tau).map_err(|e| e.to_string())?;
    let r = pcc_oracle(labels);
    let a = adjacency_oracle(&r, tau);
    let an = normalized_oracle(&a);
    let grav = gravity_oracle(&a);
    let hops = hops_oracle(&a, grav);
    let parts = partition_oracle(&an, &hops);
    let mut worst = max_diff(&g.pcc, &r);
    if max_diff(&g.adjacency, &a) != 0.0 {
        return Err("adjacency differs".into());
    }
    worst = worst.max(max_diff(&g.a_norm, &an));
    if g.gravity != grav {
        return Err(format!("gravity {} vs oracle {grav}", g.gravity));
    }
    let got: Vec<Option<usize>> = g
        .hops
        .iter()
        .map(|h| match h {
            HopDistance::Finite(d) => Some(*d),
            HopDistance::Unreachable => None,
        })
        .collect();
    if got != hops {
        return Err(format!("hops {got:?} vs oracle {hops:?}"));
    }
    for q in 0..3 {
        worst = worst.max(max_diff(&g.parts[q], &parts[q]));
    }
    Ok(worst)
}

/// Exact structural checks: parts sum to Ã, are disjoint, and Ã columns sum
/// to one under compensated summation.
pub fn check_partition_exact(g: &RelationGraph<f64>) -> Result<(), String> {
    let m = g.m;
    for i in 0..m * m {
        let vals: Vec<f64> = g.parts.iter().map(|p| p.data()[i]).collect();
        let nonzero = vals.iter().filter(|v| **v != 0.0).count();
        if nonzero > 1 {
            return Err(format!("entry {i} appears in {nonzero} parts"));
        }
        if vals.iter().sum::<f64>() != g.a_norm.data()[i] {
            return Err(format!("parts do not sum to Ã at entry {i}"));
        }
    }
    for (k, s) in g.column_sums().iter().enumerate() {
        let deg = (0..m).filter(|&j| g.adjacency.data()[j * m + k] == 1.0).count() as f64;
        // The exact column sum of deg copies of fl(1/deg).
        let exact = deg * (1.0 / deg);
        if *s != exact && (*s - 1.0).abs() > f64::EPSILON * m as f64 {
            return Err(format!("column {k} of Ã sums to {s}"));
        }
    }
    Ok(())
}

// --------------------------------------------------------------- stgcn ----

/// Explicit-loop evaluation of one graph layer on a C×T×M feature with
/// 1×1 spatial kernels and a t_k×1 temporal kernel, replicate padding.
#[allow(clippy::too_many_arguments)]
pub fn gst_layer_oracle(
    f: &T64,
    parts: &[T64; 3],
    edge_w: &[T64; 3],
    phi1_w: &[T64; 3],
    phi1_b: &[T64; 3],
    phi2_w: &T64,
    phi2_b: &T64,
    zero_pad: bool,
) -> T64 {
    let (c, t, m) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let at = |x: &T64, ch: usize, i: usize, j: usize| x.data()[(ch * t + i) * m + j];
    let mut spatial = vec![0.0; c * t * m];
    for q in 0..3 {
        // Ȧ_q as a dense matrix.
        let mut adot = vec![vec![0.0; m]; m];
        for j in 0..m {
            for k in 0..m {
                adot[j][k] = edge_w[q].data()[j * m + k].tanh() * parts[q].data()[j * m + k];
            }
        }
        for co in 0..c {
            for i in 0..t {
                // Φ1 applied per node, then Ȧ_q times the node vector.
                let y: Vec<f64> = (0..m)
                    .map(|k| phi1_b[q].data()[co] + (0..c).map(|ci| phi1_w[q].data()[co * c + ci] * at(f, ci, i, k)).sum::<f64>())
                    .collect();
                for j in 0..m {
                    spatial[(co * t + i) * m + j] += (0..m).map(|k| adot[j][k] * y[k]).sum::<f64>();
                }
            }
        }
    }
    let tk = phi2_w.shape()[2];
    let half = (tk - 1) / 2;
    let mut out = vec![0.0; c * t * m];
    for co in 0..c {
        for i in 0..t {
            for j in 0..m {
                let mut acc = phi2_b.data()[co];
                for ci in 0..c {
                    for s in 0..tk {
                        let src = i as isize + s as isize - half as isize;
                        let v = if src < 0 || src >= t as isize {
                            if zero_pad {
                                0.0
                            } else {
                                spatial[(ci * t + (src.clamp(0, t as isize - 1) as usize)) * m + j]
                            }
                        } else {
                            spatial[(ci * t + src as usize) * m + j]
                        };
                        acc += phi2_w.data()[(co * c + ci) * tk + s] * v;
                    }
                }
                out[(co * t + i) * m + j] = acc + at(f, co, i, j);
            }
        }
    }
    Tensor::new(&[c, t, m], out).unwrap()
}

/// One layer's output through the tape at the store's values.
pub fn stgcn_layer_forward(
    f: &T64,
    parts: &[T64; 3],
    store: &ParamStore<f64>,
    layer: &StgcnLayerParams,
    padding: TemporalPadding,
) -> T64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let pv = [
        tape.constant(parts[0].clone()),
        tape.constant(parts[1].clone()),
        tape.constant(parts[2].clone()),
    ];
    let x = tape.constant(f.clone());
    let y = layer.forward(&mut tape, &p, &pv, x, padding).unwrap();
    tape.value(y).clone()
}

/// The dense oracle evaluated at a layer's stored weights.
pub fn stgcn_layer_oracle(f: &T64, parts: &[T64; 3], store: &ParamStore<f64>, l: &StgcnLayerParams, zero: bool) -> T64 {
    let g = |id| store.get(id).clone();
    gst_layer_oracle(
        f,
        parts,
        &[g(l.edge_weight[0]), g(l.edge_weight[1]), g(l.edge_weight[2])],
        &[g(l.phi1[0].weight), g(l.phi1[1].weight), g(l.phi1[2].weight)],
        &[g(l.phi1[0].bias), g(l.phi1[1].bias), g(l.phi1[2].bias)],
        &g(l.phi2.weight),
        &g(l.phi2.bias),
        zero,
    )
}

/// Every graph-network parameter replaced by a random value so gradient
/// paths through W_q, Φ1 and Φ2 are all non-trivial.
pub fn randomize_relation(store: &mut ParamStore<f64>, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let scale = if name.ends_with("edge_weight") {
            1.5
        } else if name.starts_with("gst.") || name.starts_with("head.") {
            0.3
        } else {
            continue;
        };
        let t = store.get_mut(id);
        *t = uniform(t.shape(), -scale, scale, r);
    }
}

pub fn random_graph(m: usize, r: &mut impl Rng) -> RelationGraph<f64> {
    loop {
        let labels = binary(64, m, 0.5, r);
        // A planted correlation keeps some edges present.
        let mut d = labels.into_data();
        for i in 0..64 {
            if r.random_bool(0.7) {
                d[i * m + 1] = d[i * m];
            }
        }
        let labels = Tensor::new(&[64, m], d).unwrap();
        if let Ok(g) = RelationGraph::from_labels(&labels, 0.15) {
            return g;
        }
    }
}

// ------------------------------------------------------------ gradients ----

pub struct GradResult {
    pub max_rel_error: f64,
    pub probes: usize,
}

pub fn toy_config() -> Config {
    let mut cfg = Config::preset(Preset::Toy);
    cfg.crop_size = 32;
    cfg.channels = 2;
    cfg.aus = 3;
    cfg.t_k = 3;
    cfg
}

/// `L^a` on a t-frame sequence of the l=32, c=2, m=3 network, checked at
/// `per_tensor` sampled coordinates of every parameter tensor.
pub fn attention_gradient_check(seed: u64, t: usize, per_tensor: usize) -> GradResult {
    let cfg = toy_config();
    let mut r = rng(seed);
    let model = AuModel::<f64>::new(&cfg, 3, &mut r).unwrap();
    let frames: Vec<T64> = (0..t).map(|_| uniform(&[3, 32, 32], -1.0, 1.0, &mut r)).collect();
    let labels = binary(t, 3, 0.5, &mut r);
    let w = Tensor::new(&[3], vec![0.5, 0.3, 0.2]).unwrap();
    let points: Vec<T64> = model.store.iter().map(|(_, v)| v.clone()).collect();
    let net = model.attention.clone();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let xs: Vec<Var> = frames.iter().map(|x| tape.constant(x.clone())).collect();
        let out = net.sequence_forward(tape, &p, &xs)?;
        attention_stage_loss(tape, out.probs, &out.maps, &labels, &w, 1e-2)
    };
    let report = grad_check_many(f, &points, 1e-6, &Probes::Sample { per_tensor, seed }).unwrap();
    GradResult {
        max_rel_error: report.max_rel_error,
        probes: report.probes,
    }
}

/// Stage-two `L^u` through the full graph stack (m=3, t'=4, c=2, t_k=3) with
/// respect to every graph-network parameter and the input feature.
pub fn relation_gradient_check(seed: u64, depth: usize) -> GradResult {
    let (m, t, ch) = (3, 4, 16);
    let mut r = rng(seed);
    let graph = random_graph(m, &mut r);
    let mut store = ParamStore::new();
    let net = RelationNet::create(&mut store, &mut r, ch, m, 3, depth, TemporalPadding::Replicate).unwrap();
    randomize_relation(&mut store, &mut r);
    let mut points: Vec<T64> = store.iter().map(|(_, v)| v.clone()).collect();
    points.push(uniform(&[ch, t, m], -1.0, 1.0, &mut r));
    let labels = binary(t, m, 0.5, &mut r);
    let w = Tensor::new(&[3], vec![0.2, 0.5, 0.3]).unwrap();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let (f0, params) = vars.split_last().unwrap();
        let p = Bound::from_vars(params.to_vec());
        let parts = net.bind_parts(tape, &graph.parts)?;
        let probs = net.forward(tape, &p, &parts, *f0)?;
        au_detection_loss(tape, probs, &labels, &w)
    };
    let report = grad_check_many(f, &points, 1e-6, &Probes::All).unwrap();
    GradResult {
        max_rel_error: report.max_rel_error,
        probes: report.probes,
    }
}

// -------------------------------------------------------------- metrics ----

/// (precision, recall, f1, accuracy) per column by explicit confusion counts.
pub fn confusion_oracle(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Vec<[f64; 4]> {
    let m = truth[0].len();
    (0..m)
        .map(|j| {
            let mut c = [[0usize; 2]; 2];
            for (p, t) in pred.iter().zip(truth) {
                c[p[j] as usize][t[j] as usize] += 1;
            }
            let (tp, fp, fn_, tn) = (c[1][1] as f64, c[1][0] as f64, c[0][1] as f64, c[0][0] as f64);
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            [prec, rec, f1, (tp + tn) / (tp + tn + fp + fn_)]
        })
        .collect()
}

// ------------------------------------------------------------- datasets ----

/// The 4-AU overfit set: 16 videos of 32 frames at 36×36, cropped to 32.
pub fn toy_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        m: 4,
        videos: 16,
        frames: 32,
        image_size: 36,
        cooccurrence: vec![
            vec![1.0, 0.6, 0.0, 0.0],
            vec![0.6, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, -0.5],
            vec![0.0, 0.0, -0.5, 1.0],
        ],
        persistence: vec![0.9; 4],
        centers: vec![[17.5, 6.0], [17.5, 13.0], [17.5, 20.0], [17.5, 27.0]],
        radius: vec![3.0; 4],
        noise: 0.3,
        amplitude: 1.0,
        seed,
    }
}

// ------------------------------------------------------------ attention ----

/// Mean over frames and AUs of the attention summed outside the box of
/// half-width `radius` around the AU's blob, divided by the map area. Maps
/// are evaluated on center crops; cell (u, v) covers crop pixels
/// [4u, 4u + 4) × [4v, 4v + 4).
pub fn outside_attention_mass(model: &AuModel<f64>, ds: &Dataset<f64>, spec: &SyntheticSpec) -> f64 {
    let l = model.crop_size;
    let (mut total, mut count) = (0.0, 0usize);
    for video in &ds.videos {
        let off = center_offset(video.image_size(), l) as f64;
        let out = model.attention_outputs(&model.center_crops(video).unwrap()).unwrap();
        for maps in &out.maps {
            for (j, map) in maps.iter().enumerate() {
                let s = map.shape()[0];
                let [cx, cy] = spec.centers[j];
                let r = spec.radius[j];
                let centre = |u: usize| 4.0 * u as f64 + 1.5 + off;
                let mut outside = 0.0;
                for v in 0..s {
                    for u in 0..s {
                        if (centre(u) - cx).abs() > r || (centre(v) - cy).abs() > r {
                            outside += map.data()[v * s + u];
                        }
                    }
                }
                total += outside / (s * s) as f64;
                count += 1;
            }
        }
    }
    total / count as f64
}
