//! Entropy of score vectors and per-head scores of attention tensors.

use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexVector;

/// `is_sink` threshold on the sink score.
pub const SINK_THRESHOLD: f64 = 0.9;

/// Natural-log entropy with `0 ln 0 = 0`.
pub fn entropy(s: &SimplexVector) -> f64 {
    entropy_of(s.as_vector().as_slice())
}

/// Entropy of raw weights; non-positive entries contribute nothing.
pub fn entropy_of(s: &[f64]) -> f64 {
    let h: f64 = s.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Attention weights indexed `[layer, head, sample, query, key]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    dims: [usize; 5],
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(dims: [usize; 5], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("tensor dims {dims:?} contain a zero")));
        }
        if data.len() != n {
            return Err(Error::InvalidInput(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("tensor has non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Keys of one `(layer, head, sample, query)` row.
    pub fn row(&self, l: usize, h: usize, s: usize, q: usize) -> &[f64] {
        let [_, nh, ns, nq, nk] = self.dims;
        let start = (((l * nh + h) * ns + s) * nq + q) * nk;
        &self.data[start..start + nk]
    }
}

/// One score per `(layer, head)`, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadScores {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<f64>,
    /// Rows left out because their total weight was zero.
    pub skipped_rows: usize,
}

impl HeadScores {
    pub fn get(&self, l: usize, h: usize) -> f64 {
        self.scores[l * self.heads + h]
    }

    pub fn is_sink(&self, l: usize, h: usize) -> bool {
        self.get(l, h) > SINK_THRESHOLD
    }
}

/// Mean over rows of `f(row) / Σ row`, per head; zero-sum rows are skipped.
fn per_head(
    t: &AttentionTensor,
    queries: Range<usize>,
    f: impl Fn(&[f64]) -> f64,
) -> (HeadScores, Vec<usize>) {
    let [nl, nh, ns, _, _] = t.dims;
    let mut scores = Vec::with_capacity(nl * nh);
    let mut counts = Vec::with_capacity(nl * nh);
    let mut skipped = 0;
    for l in 0..nl {
        for h in 0..nh {
            let (mut acc, mut n) = (0.0, 0usize);
            for s in 0..ns {
                for q in queries.clone() {
                    let row = t.row(l, h, s, q);
                    let total: f64 = row.iter().sum();
                    if total == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    acc += f(row) / total;
                    n += 1;
                }
            }
            scores.push(if n > 0 { acc / n as f64 } else { f64::NAN });
            counts.push(n);
        }
    }
    (
        HeadScores {
            layers: nl,
            heads: nh,
            scores,
            skipped_rows: skipped,
        },
        counts,
    )
}

/// Mean over samples and queries of `max_k A / Σ_k A`.
pub fn sparsity_score(t: &AttentionTensor) -> HeadScores {
    let q = t.dims[3];
    per_head(t, 0..q, |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).0
}

/// Query positions scored by default: everything except the first and the
/// last two.
pub fn default_sink_queries(q: usize) -> Range<usize> {
    1..q.saturating_sub(2)
}

/// Mean over samples and `queries` of `A[.., bos] / Σ_k A`, clipped to `[0, 1]`.
pub fn sink_score(t: &AttentionTensor, queries: Range<usize>, bos_key: usize) -> Result<HeadScores> {
    let [_, _, _, nq, nk] = t.dims;
    if bos_key >= nk {
        return Err(Error::InvalidInput(format!("bos key {bos_key} out of range for K = {nk}")));
    }
    if queries.is_empty() || queries.end > nq {
        return Err(Error::InvalidInput(format!(
            "query range {queries:?} is empty or outside [0, {nq})"
        )));
    }
    let (mut scores, _) = per_head(t, queries, |row| row[bos_key]);
    for s in &mut scores.scores {
        *s = s.clamp(0.0, 1.0);
    }
    Ok(scores)
}

/// Header of the binary tensor format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dims: [usize; 5],
    pub dtype: String,
    /// Raw little-endian values, relative to the header's directory.
    pub data: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Nested {
    Leaf(f64),
    Node(Vec<Nested>),
}

fn flatten(n: &Nested, depth: usize, dims: &mut Vec<usize>, out: &mut Vec<f64>) -> Result<()> {
    match n {
        Nested::Leaf(x) => {
            if depth != 5 {
                return Err(Error::SchemaMismatch("nested tensor must have depth 5".into()));
            }
            out.push(*x);
        }
        Nested::Node(items) => {
            if depth >= 5 {
                return Err(Error::SchemaMismatch("nested tensor deeper than 5".into()));
            }
            if dims.len() == depth {
                dims.push(items.len());
            } else if dims[depth] != items.len() {
                return Err(Error::SchemaMismatch("ragged nested tensor".into()));
            }
            for it in items {
                flatten(it, depth + 1, dims, out)?;
            }
        }
    }
    Ok(())
}

/// Loads either a `{dims, dtype, data}` header pointing at raw `f64` data or
/// a nested 5-level JSON array.
pub fn load_attention_tensor(path: impl AsRef<Path>) -> Result<AttentionTensor> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        let nested: Nested = serde_json::from_value(value)?;
        let (mut dims, mut data) = (vec![], vec![]);
        flatten(&nested, 0, &mut dims, &mut data)?;
        if dims.len() != 5 {
            return Err(Error::SchemaMismatch("nested tensor must have depth 5".into()));
        }
        return AttentionTensor::new([dims[0], dims[1], dims[2], dims[3], dims[4]], data);
    }
    let header: TensorHeader = serde_json::from_value(value)?;
    if header.dtype != "f64" {
        return Err(Error::SchemaMismatch(format!("unsupported dtype {:?}", header.dtype)));
    }
    let data_path = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let mut bytes = vec![];
    File::open(&data_path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::SchemaMismatch("binary tensor length is not a multiple of 8".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    AttentionTensor::new(header.dims, data).map_err(|e| Error::SchemaMismatch(e.to_string()))
}

/// CSV with columns `layer, head, score, is_sink`.
pub fn write_head_scores(scores: &HeadScores, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "head", "score", "is_sink"])?;
    for l in 0..scores.layers {
        for h in 0..scores.heads {
            w.write_record([
                l.to_string(),
                h.to_string(),
                crate::flow::fmt_f64(scores.get(l, h)),
                scores.is_sink(l, h).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
