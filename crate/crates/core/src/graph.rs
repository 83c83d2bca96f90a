//! AU relation graph built from label co-occurrence statistics.
//!
//! Spatial edges join AUs whose label correlation reaches the threshold.
//! Every node carries a self-connection, so each row of the adjacency has at
//! least one entry and the normalized adjacency `Ã = A·Λ` is column
//! stochastic. `Ã` is then split into root, centripetal and centrifugal parts
//! by hop distance to the gravity center.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hop distance to the gravity center. `Unreachable` orders above every
/// finite distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HopDistance {
    Finite(usize),
    Unreachable,
}

impl HopDistance {
    /// File encoding: the distance itself, or −1.
    pub fn to_i64(self) -> i64 {
        match self {
            HopDistance::Finite(d) => d as i64,
            HopDistance::Unreachable => -1,
        }
    }

    pub fn from_i64(v: i64) -> Result<Self> {
        match v {
            -1 => Ok(HopDistance::Unreachable),
            d if d >= 0 => Ok(HopDistance::Finite(d as usize)),
            d => Err(Error::Config(format!("invalid hop distance {d}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph<T> {
    pub m: usize,
    pub tau: T,
    pub pcc: Tensor<T>,
    /// Symmetric 0/1 matrix with unit diagonal.
    pub adjacency: Tensor<T>,
    /// Diagonal of Λ.
    pub lambda: Vec<T>,
    pub a_norm: Tensor<T>,
    /// Root, centripetal and centrifugal parts of `a_norm`.
    pub parts: [Tensor<T>; 3],
    /// 0-based.
    pub gravity: usize,
    pub hops: Vec<HopDistance>,
}

fn square<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    let (r, c) = a.as_matrix()?;
    if r != c {
        return Err(Error::shape(format!("expected a square matrix, got {r}×{c}")));
    }
    Ok(r)
}

/// Pearson correlation of the columns of an n×m label matrix. Columns with
/// zero variance correlate 0 with everything, themselves included.
pub fn compute_pcc<T: Scalar>(labels: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = labels.as_matrix()?;
    if n < 2 {
        return Err(Error::Domain(format!("correlation needs at least 2 rows, got {n}")));
    }
    let d = labels.data();
    let nt = T::from_usize(n).unwrap();
    let means: Vec<T> = (0..m)
        .map(|j| (0..n).fold(T::zero(), |a, i| a + d[i * m + j]) / nt)
        .collect();
    let mut cov = vec![T::zero(); m * m];
    for i in 0..n {
        let row = &d[i * m..(i + 1) * m];
        for j in 0..m {
            let dj = row[j] - means[j];
            for k in j..m {
                cov[j * m + k] += dj * (row[k] - means[k]);
            }
        }
    }
    let mut r = vec![T::zero(); m * m];
    for j in 0..m {
        for k in j..m {
            let denom = (cov[j * m + j] * cov[k * m + k]).sqrt();
            let v = if cov[j * m + j] > T::zero() && cov[k * m + k] > T::zero() {
                if j == k {
                    T::one()
                } else {
                    (cov[j * m + k] / denom).max(-T::one()).min(T::one())
                }
            } else {
                T::zero()
            };
            r[j * m + k] = v;
            r[k * m + j] = v;
        }
    }
    Tensor::new(&[m, m], r)
}

/// `A_jk = 1` iff `r_jk ≥ τ` off the diagonal; `A_jj = 1`.
pub fn build_adjacency<T: Scalar>(pcc: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    let m = square(pcc)?;
    let r = pcc.data();
    Ok(Tensor::from_fn(&[m, m], |i| {
        let (j, k) = (i / m, i % m);
        let rjk = r[j * m + k].min(r[k * m + j]);
        if j == k || rjk >= tau {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `Λ_kk = 1/Σ_j A_kj` and `Ã = A·Λ`.
pub fn normalize<T: Scalar>(adjacency: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let m = square(adjacency)?;
    let a = adjacency.data();
    let mut lambda = Vec::with_capacity(m);
    for k in 0..m {
        let deg = a[k * m..(k + 1) * m].iter().fold(T::zero(), |s, &v| s + v);
        if deg == T::zero() {
            return Err(Error::InternalInvariant(format!("node {k} has no connections")));
        }
        lambda.push(T::one() / deg);
    }
    let a_norm = Tensor::from_fn(&[m, m], |i| a[i] * lambda[i % m]);
    Ok((lambda, a_norm))
}

/// Node with the most off-diagonal neighbors; lowest index on ties.
pub fn gravity_center<T: Scalar>(adjacency: &Tensor<T>) -> Result<usize> {
    let m = square(adjacency)?;
    let a = adjacency.data();
    let degree = |j: usize| (0..m).filter(|&k| k != j && a[j * m + k] != T::zero()).count();
    let mut best = 0;
    for j in 1..m {
        if degree(j) > degree(best) {
            best = j;
        }
    }
    Ok(best)
}

/// Breadth-first hop counts over off-diagonal edges.
pub fn hop_distances<T: Scalar>(adjacency: &Tensor<T>, gravity: usize) -> Result<Vec<HopDistance>> {
    let m = square(adjacency)?;
    if gravity >= m {
        return Err(Error::shape(format!("gravity node {gravity} outside 0..{m}")));
    }
    let a = adjacency.data();
    let mut hops = vec![HopDistance::Unreachable; m];
    hops[gravity] = HopDistance::Finite(0);
    let mut queue = std::collections::VecDeque::from([gravity]);
    while let Some(j) = queue.pop_front() {
        let HopDistance::Finite(dj) = hops[j] else { unreachable!() };
        for k in 0..m {
            if k != j && a[j * m + k] != T::zero() && hops[k] == HopDistance::Unreachable {
                hops[k] = HopDistance::Finite(dj + 1);
                queue.push_back(k);
            }
        }
    }
    Ok(hops)
}

/// Splits `a_norm` by the hop order of each entry's endpoints.
pub fn partition<T: Scalar>(a_norm: &Tensor<T>, hops: &[HopDistance]) -> Result<[Tensor<T>; 3]> {
    let m = square(a_norm)?;
    if hops.len() != m {
        return Err(Error::shape(format!("{} hop distances for {m} nodes", hops.len())));
    }
    let a = a_norm.data();
    let pick = |q: usize| {
        Tensor::from_fn(&[m, m], |i| {
            let (j, k) = (i / m, i % m);
            let class = if j == k {
                0
            } else if hops[k] <= hops[j] {
                1
            } else {
                2
            };
            if class == q {
                a[i]
            } else {
                T::zero()
            }
        })
    };
    Ok([pick(0), pick(1), pick(2)])
}

/// Neumaier-compensated sum.
fn compensated_sum<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

impl<T: Scalar> RelationGraph<T> {
    pub fn from_pcc(pcc: Tensor<T>, tau: T) -> Result<Self> {
        let adjacency = build_adjacency(&pcc, tau)?;
        Self::from_adjacency(pcc, tau, adjacency)
    }

    pub fn from_labels(labels: &Tensor<T>, tau: T) -> Result<Self> {
        Self::from_pcc(compute_pcc(labels)?, tau)
    }

    /// Derives every remaining field from a fixed adjacency.
    pub fn from_adjacency(pcc: Tensor<T>, tau: T, adjacency: Tensor<T>) -> Result<Self> {
        let m = square(&adjacency)?;
        if pcc.shape() != [m, m] {
            return Err(Error::shape("correlation and adjacency sizes differ"));
        }
        let (lambda, a_norm) = normalize(&adjacency)?;
        let gravity = gravity_center(&adjacency)?;
        let hops = hop_distances(&adjacency, gravity)?;
        let parts = partition(&a_norm, &hops)?;
        let g = RelationGraph {
            m,
            tau,
            pcc,
            adjacency,
            lambda,
            a_norm,
            parts,
            gravity,
            hops,
        };
        g.check_invariants()?;
        Ok(g)
    }

    /// Structural invariants: symmetric self-connected adjacency, exact
    /// partition, column-stochastic normalization.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.m;
        let a = self.adjacency.data();
        for j in 0..m {
            if a[j * m + j] != T::one() {
                return Err(Error::InternalInvariant(format!("node {j} lacks a self-connection")));
            }
            for k in 0..m {
                if a[j * m + k] != a[k * m + j] {
                    return Err(Error::InternalInvariant("adjacency is not symmetric".into()));
                }
            }
        }
        for i in 0..m * m {
            let sum = self.parts[0].data()[i] + self.parts[1].data()[i] + self.parts[2].data()[i];
            let nonzero = self.parts.iter().filter(|p| p.data()[i] != T::zero()).count();
            if sum != self.a_norm.data()[i] || nonzero > 1 {
                return Err(Error::InternalInvariant("partition does not split the normalized adjacency".into()));
            }
        }
        for k in 0..m {
            let col = compensated_sum((0..m).map(|j| self.a_norm.data()[j * m + k]));
            if (col - T::one()).abs() > T::epsilon() * T::from_usize(m).unwrap() {
                return Err(Error::InternalInvariant(format!("column {k} of the normalized adjacency sums to {col}")));
            }
        }
        if self.hops[self.gravity] != HopDistance::Finite(0) {
            return Err(Error::InternalInvariant("gravity center is not at hop 0".into()));
        }
        Ok(())
    }

    /// Column sums of `a_norm` under compensated summation.
    pub fn column_sums(&self) -> Vec<T> {
        let m = self.m;
        (0..m)
            .map(|k| compensated_sum((0..m).map(|j| self.a_norm.data()[j * m + k])))
            .collect()
    }

    pub fn to_file(&self) -> GraphFile {
        let rows = |t: &Tensor<T>| -> Vec<Vec<f64>> {
            t.data().chunks(self.m).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
        };
        GraphFile {
            m: self.m,
            tau: self.tau.as_f64(),
            pcc: rows(&self.pcc),
            adjacency: rows(&self.adjacency),
            lambda: self.lambda.iter().map(|v| v.as_f64()).collect(),
            a_norm: rows(&self.a_norm),
            parts: self.parts.iter().map(rows).collect(),
            gravity: self.gravity + 1,
            hops: self.hops.iter().map(|h| h.to_i64()).collect(),
        }
    }

    /// Rebuilds from the stored adjacency and checks that every stored
    /// derived field agrees.
    pub fn from_file(file: &GraphFile) -> Result<Self> {
        let m = file.m;
        let matrix = |name: &str, rows: &[Vec<f64>]| -> Result<Tensor<T>> {
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(Error::Config(format!("graph field `{name}` is not {m}×{m}")));
            }
            Tensor::new(&[m, m], rows.iter().flatten().map(|&v| T::lit(v)).collect())
        };
        if m == 0 {
            return Err(Error::Config("graph has no nodes".into()));
        }
        let pcc = matrix("pcc", &file.pcc)?;
        let adjacency = matrix("adjacency", &file.adjacency)?;
        if adjacency.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Config("graph adjacency must be 0/1".into()));
        }
        let g = Self::from_adjacency(pcc, T::lit(file.tau), adjacency)
            .map_err(|e| Error::Config(format!("inconsistent graph: {e}")))?;
        let stored = g.to_file();
        let consistent = stored.lambda == file.lambda
            && stored.a_norm == file.a_norm
            && stored.parts == file.parts
            && stored.gravity == file.gravity
            && stored.hops == file.hops;
        if !consistent {
            return Err(Error::Config("graph derived fields disagree with its adjacency".into()));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("graph serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: byte_offset(&text, e.line(), e.column()),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_file(&file)
    }
}

pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

/// JSON layout of a graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub m: usize,
    pub tau: f64,
    pub pcc: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub a_norm: Vec<Vec<f64>>,
    pub parts: Vec<Vec<Vec<f64>>>,
    /// 1-based.
    pub gravity: usize,
    /// −1 encodes an unreachable node.
    pub hops: Vec<i64>,
}
