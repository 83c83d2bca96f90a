//! Synthetic AU sequences, the dataset directory layout and label files.
//!
//! Layout: `labels.csv` (`video_id,frame_idx,au_1,...,au_m`), one
//! `frames/<video_id>.stnt` tensor of shape T×3×L×L per video, and the
//! generating `spec.json`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::byte_offset;
use crate::io;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generator parameters.
///
/// Each AU follows a two-state chain whose flip probability is
/// `1 − persistence`. AU `j` is coupled to the earlier AU with the largest
/// `|cooccurrence[j][k]|`: when its state disagrees with the leader's target
/// (the leader's state for positive coupling, its complement for negative)
/// the flip probability rises to `min(1, b(1 + 8|c|))`, otherwise it falls to
/// `b(1 − |c|)`, where `b = 1 − persistence`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub m: usize,
    pub videos: usize,
    pub frames: usize,
    /// Side length of the square frames.
    pub image_size: usize,
    /// Target pairwise coupling, m×m, entries in [−1, 1].
    pub cooccurrence: Vec<Vec<f64>>,
    /// Per-AU probability of keeping the previous state.
    pub persistence: Vec<f64>,
    /// Per-AU blob centers as `[x, y]` pixel coordinates.
    pub centers: Vec<[f64; 2]>,
    /// Per-AU blob radius; the Gaussian profile has σ = radius/2.
    pub radius: Vec<f64>,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    pub seed: u64,
}

fn default_amplitude() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.videos == 0 || self.frames == 0 || self.image_size == 0 {
            return bad("m, videos, frames and image_size must be positive".into());
        }
        if self.cooccurrence.len() != self.m || self.cooccurrence.iter().any(|r| r.len() != self.m) {
            return bad(format!("cooccurrence must be {0}×{0}", self.m));
        }
        if self.cooccurrence.iter().flatten().any(|c| !(-1.0..=1.0).contains(c)) {
            return bad("cooccurrence entries must lie in [-1, 1]".into());
        }
        if self.persistence.len() != self.m || self.persistence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("persistence needs {} entries in [0, 1]", self.m));
        }
        if self.radius.len() != self.m || self.radius.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("radius needs {} positive entries", self.m));
        }
        let side = self.image_size as f64;
        if self.centers.len() != self.m
            || self.centers.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0 && *c <= side - 1.0))
        {
            return bad(format!("centers need {} points inside the image", self.m));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) || !self.amplitude.is_finite() {
            return bad("noise must be non-negative and amplitude finite".into());
        }
        Ok(())
    }

    /// Earlier AU with the strongest coupling, if any coupling is nonzero.
    fn leader(&self, j: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..j {
            let c = self.cooccurrence[j][k].clamp(-1.0, 1.0);
            if c != 0.0 && best.is_none_or(|(_, b)| c.abs() > b.abs()) {
                best = Some((k, c));
            }
        }
        best
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: byte_offset(&text, e.line(), e.column()),
            message: format!("{}: {e}", path.display()),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// T×m binary label sequences for every video, drawn from the chains.
pub fn sample_labels(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<Vec<bool>>> {
    let m = spec.m;
    let leaders: Vec<Option<(usize, f64)>> = (0..m).map(|j| spec.leader(j)).collect();
    let target = |states: &[bool], j: usize| -> Option<(bool, f64)> {
        leaders[j].map(|(k, c)| (if c > 0.0 { states[k] } else { !states[k] }, c.abs()))
    };
    let mut out = Vec::with_capacity(spec.videos);
    for _ in 0..spec.videos {
        let mut seq: Vec<Vec<bool>> = Vec::with_capacity(spec.frames);
        let mut state = vec![false; m];
        for j in 0..m {
            state[j] = match target(&state, j) {
                Some((tgt, c)) if rng.random::<f64>() < c => tgt,
                _ => rng.random::<f64>() < 0.5,
            };
        }
        seq.push(state.clone());
        for _ in 1..spec.frames {
            for j in 0..m {
                let b = 1.0 - spec.persistence[j];
                let flip = match target(&state, j) {
                    None => b,
                    Some((tgt, c)) if state[j] == tgt => b * (1.0 - c),
                    Some((_, c)) => (b * (1.0 + 8.0 * c)).min(1.0),
                };
                if rng.random::<f64>() < flip {
                    state[j] = !state[j];
                }
            }
            seq.push(state.clone());
        }
        out.push(seq);
    }
    out
}

/// Renders one 3×L×L frame: Gaussian noise plus one blob per active AU.
pub fn render_frame(spec: &SyntheticSpec, active: &[bool], rng: &mut impl Rng) -> Tensor<f64> {
    let l = spec.image_size;
    let noise = Normal::new(0.0, spec.noise).expect("validated noise level");
    let mut blob = vec![0.0; l * l];
    for (j, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        let [cx, cy] = spec.centers[j];
        let sigma = spec.radius[j] / 2.0;
        let denom = 2.0 * sigma * sigma;
        for y in 0..l {
            for x in 0..l {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                blob[y * l + x] += spec.amplitude * (-d2 / denom).exp();
            }
        }
    }
    Tensor::from_fn(&[3, l, l], |i| blob[i % (l * l)] + noise.sample(rng))
}

/// One video: T×3×L×L frames and T×m labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Video<T> {
    pub id: String,
    pub frames: Tensor<T>,
    pub labels: Tensor<T>,
}

impl<T: Scalar> Video<T> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub m: usize,
    pub videos: Vec<Video<T>>,
}

pub fn video_id(index: usize) -> String {
    format!("v{index:03}")
}

/// Generates the full dataset in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset<f64>> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let labels = sample_labels(spec, &mut rng);
    let (m, l) = (spec.m, spec.image_size);
    let mut videos = Vec::with_capacity(spec.videos);
    for (v, seq) in labels.iter().enumerate() {
        let mut data = Vec::with_capacity(spec.frames * 3 * l * l);
        for active in seq {
            data.extend(render_frame(spec, active, &mut rng).into_data());
        }
        let flat: Vec<f64> = seq.iter().flatten().map(|&a| a as u8 as f64).collect();
        videos.push(Video {
            id: video_id(v),
            frames: Tensor::new(&[spec.frames, 3, l, l], data)?,
            labels: Tensor::new(&[spec.frames, m], flat)?,
        });
    }
    Ok(Dataset { m, videos })
}

/// Generates and writes a dataset directory.
pub fn generate_to_dir(spec: &SyntheticSpec, dir: &Path) -> Result<Dataset<f64>> {
    let ds = generate(spec)?;
    ds.save(dir)?;
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    io::write_file(&dir.join("spec.json"), format!("{text}\n").as_bytes())?;
    Ok(ds)
}

/// Rows of a labels file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable<T> {
    pub video_ids: Vec<String>,
    pub frame_idx: Vec<usize>,
    /// n×m binary matrix.
    pub labels: Tensor<T>,
}

impl<T: Scalar> LabelTable<T> {
    pub fn m(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_frame_table(path, &self.video_ids, &self.frame_idx, &self.labels, |v| {
            format!("{}", v.as_f64() as u8)
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = read_frame_table(path, |s| match s {
            "0" => Some(T::zero()),
            "1" => Some(T::one()),
            _ => None,
        })?;
        Ok(LabelTable {
            video_ids: t.0,
            frame_idx: t.1,
            labels: t.2,
        })
    }

    /// Splits rows into per-video runs, in order of first appearance. Frame
    /// indices must run 0, 1, … within each video.
    pub fn by_video(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let m = self.m();
        let mut order: Vec<String> = Vec::new();
        let mut rows: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, id) in self.video_ids.iter().enumerate() {
            rows.entry(id.as_str())
                .or_insert_with(|| {
                    order.push(id.clone());
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let idx = &rows[id.as_str()];
                for (expect, &i) in idx.iter().enumerate() {
                    if self.frame_idx[i] != expect {
                        return Err(Error::Format {
                            offset: 0,
                            message: format!("video {id}: expected frame {expect}, found {}", self.frame_idx[i]),
                        });
                    }
                }
                let d = self.labels.data();
                let data = idx.iter().flat_map(|&i| d[i * m..(i + 1) * m].iter().copied()).collect();
                Ok((id, Tensor::new(&[idx.len(), m], data)?))
            })
            .collect()
    }
}

/// Writes `video_id,frame_idx,au_1..au_m` rows using `cell` for values.
pub fn write_frame_table<T: Scalar>(
    path: &Path,
    video_ids: &[String],
    frame_idx: &[usize],
    values: &Tensor<T>,
    cell: impl Fn(T) -> String,
) -> Result<()> {
    let (n, m) = values.as_matrix()?;
    if video_ids.len() != n || frame_idx.len() != n {
        return Err(Error::shape("row metadata does not match the value matrix"));
    }
    let io_err = |e: csv::Error| Error::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["video_id".to_string(), "frame_idx".to_string()];
    header.extend((1..=m).map(|j| format!("au_{j}")));
    w.write_record(&header).map_err(io_err)?;
    for i in 0..n {
        let mut rec = vec![video_ids[i].clone(), frame_idx[i].to_string()];
        rec.extend(values.data()[i * m..(i + 1) * m].iter().map(|&v| cell(v)));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

type FrameTable<T> = (Vec<String>, Vec<usize>, Tensor<T>);

/// Reads a `video_id,frame_idx,au_1..au_m` table; `cell` parses values.
pub fn read_frame_table<T: Scalar>(path: &Path, cell: impl Fn(&str) -> Option<T>) -> Result<FrameTable<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let fmt = |offset: u64, msg: String| Error::Format {
        offset,
        message: format!("{}: {msg}", path.display()),
    };
    let header = r.headers().map_err(|e| fmt(0, e.to_string()))?.clone();
    let mut pos = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        if pos.insert(h.trim().to_string(), i).is_some() {
            return Err(fmt(0, format!("duplicate column `{h}`")));
        }
    }
    let m = (1..).take_while(|j| pos.contains_key(&format!("au_{j}"))).count();
    let highest = header
        .iter()
        .filter_map(|h| h.trim().strip_prefix("au_").and_then(|s| s.parse::<usize>().ok()))
        .max()
        .unwrap_or(0);
    let mut required = vec!["video_id".to_string(), "frame_idx".to_string()];
    required.extend((1..=highest.max(m).max(1)).map(|j| format!("au_{j}")));
    if let Some(missing) = required.iter().find(|c| !pos.contains_key(*c)) {
        return Err(fmt(0, format!("missing column `{missing}`")));
    }
    let (vi, fi) = (pos["video_id"], pos["frame_idx"]);
    let cols: Vec<usize> = (1..=m).map(|j| pos[&format!("au_{j}")]).collect();
    let (mut ids, mut frames, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            fmt(off, e.to_string())
        })?;
        let off = rec.position().map_or(0, |p| p.byte());
        ids.push(rec[vi].trim().to_string());
        frames.push(
            rec[fi]
                .trim()
                .parse::<usize>()
                .map_err(|_| fmt(off, format!("frame_idx `{}` is not a non-negative integer", &rec[fi])))?,
        );
        for (j, &c) in cols.iter().enumerate() {
            let v = cell(rec[c].trim()).ok_or_else(|| fmt(off, format!("invalid value `{}` in au_{}", &rec[c], j + 1)))?;
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(fmt(0, "no rows".into()));
    }
    let n = ids.len();
    Ok((ids, frames, Tensor::new(&[n, m], data)?))
}

impl<T: Scalar> Dataset<T> {
    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(Video::len).sum()
    }

    /// All labels stacked into an n×m matrix, videos in order.
    pub fn all_labels(&self) -> Tensor<T> {
        let parts: Vec<&Tensor<T>> = self.videos.iter().map(|v| &v.labels).collect();
        Tensor::concat(&parts, 0).expect("videos share m")
    }

    pub fn label_table(&self) -> LabelTable<T> {
        let mut ids = Vec::new();
        let mut idx = Vec::new();
        for v in &self.videos {
            for i in 0..v.len() {
                ids.push(v.id.clone());
                idx.push(i);
            }
        }
        LabelTable {
            video_ids: ids,
            frame_idx: idx,
            labels: self.all_labels(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let frames = dir.join("frames");
        std::fs::create_dir_all(&frames).map_err(|e| Error::io(format!("creating {}", frames.display()), e))?;
        self.label_table().write(&dir.join("labels.csv"))?;
        for v in &self.videos {
            io::save_tensor(&frames.join(format!("{}.stnt", v.id)), &v.frames)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let table = LabelTable::<T>::read(&dir.join("labels.csv"))?;
        let m = table.m();
        let mut videos = Vec::new();
        for (id, labels) in table.by_video()? {
            let path = dir.join("frames").join(format!("{id}.stnt"));
            let frames: Tensor<T> = io::load_tensor(&path)?;
            let s = frames.shape();
            if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[0] != labels.shape()[0] {
                return Err(Error::Data(format!(
                    "{}: frames {:?} do not match {} labelled frames of shape 3×L×L",
                    path.display(),
                    s,
                    labels.shape()[0]
                )));
            }
            videos.push(Video { id, frames, labels });
        }
        let ds = Dataset { m, videos };
        if ds.videos.windows(2).any(|w| w[0].image_size() != w[1].image_size()) {
            return Err(Error::Data("videos have different frame sizes".into()));
        }
        Ok(ds)
    }
}

/// Extracts an `l`×`l` crop at (`y0`, `x0`) from a 3×L×L frame, optionally
/// mirrored horizontally.
pub fn crop_frame<T: Scalar>(frame: &[T], side: usize, l: usize, y0: usize, x0: usize, mirror: bool) -> Tensor<T> {
    debug_assert!(y0 + l <= side && x0 + l <= side);
    Tensor::from_fn(&[3, l, l], |i| {
        let (c, rest) = (i / (l * l), i % (l * l));
        let (y, x) = (rest / l, rest % l);
        let xs = if mirror { l - 1 - x } else { x };
        frame[c * side * side + (y0 + y) * side + x0 + xs]
    })
}

/// Offset of a centered crop.
pub fn center_offset(side: usize, l: usize) -> usize {
    (side - l) / 2
}
