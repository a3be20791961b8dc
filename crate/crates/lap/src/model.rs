//! Feature fusion and the snippet score predictor.
//!
//! The predictor is a fixed three-layer perceptron `d_f -> 512 -> 128 -> 1`
//! with rectifier activations and a logistic output clamped into
//! `[SCORE_EPS, 1 - SCORE_EPS]`, so downstream log terms are always finite.
//! Forward and backward passes are written out explicitly; the backward
//! pass is validated against central finite differences in the test suite.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::ioutil::atomic_write;

pub const HIDDEN1: usize = 512;
pub const HIDDEN2: usize = 128;

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before any use.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Add,
}

impl std::str::FromStr for FusionMode {
    type Err = LapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            other => Err(LapError::invalid(format!(
                "unknown fusion mode {other:?} (expected \"concat\" or \"add\")"
            ))),
        }
    }
}

/// How visual and semantic features combine into the predictor input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_v: usize,
    pub d_t: usize,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, d_v: usize, d_t: usize) -> Result<Self> {
        if d_v == 0 || d_t == 0 {
            return Err(LapError::invalid("feature dimensions must be positive"));
        }
        if mode == FusionMode::Add && d_v != d_t {
            return Err(LapError::invalid(format!(
                "add fusion requires d_v == d_t, got {d_v} and {d_t}"
            )));
        }
        Ok(FusionConfig { mode, d_v, d_t })
    }

    /// Fused feature dimension.
    pub fn d_f(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.d_v + self.d_t,
            FusionMode::Add => self.d_v,
        }
    }
}

/// Combine per-snippet visual and semantic rows.
pub fn fuse(visual: ndarray::ArrayView2<'_, f64>, semantic: ndarray::ArrayView2<'_, f64>, cfg: &FusionConfig) -> Result<Array2<f64>> {
    if visual.nrows() != semantic.nrows() {
        return Err(LapError::dims("fusion row counts", visual.nrows(), semantic.nrows()));
    }
    if visual.ncols() != cfg.d_v {
        return Err(LapError::dims("visual dimension d_v", cfg.d_v, visual.ncols()));
    }
    if semantic.ncols() != cfg.d_t {
        return Err(LapError::dims("semantic dimension d_t", cfg.d_t, semantic.ncols()));
    }
    match cfg.mode {
        FusionMode::Concat => Ok(concatenate(Axis(1), &[visual, semantic]).expect("dims checked")),
        FusionMode::Add => Ok(&visual + &semantic),
    }
}

/// Parameters of the three affine layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl MlpParams {
    /// Seeded initialization: weights are uniform in
    /// `+-sqrt(6 / (fan_in + fan_out))` drawn row-major from a ChaCha20
    /// stream in tensor order w1, w2, w3; biases start at zero.
    pub fn init(d_f: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut uniform_matrix = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        MlpParams {
            w1: uniform_matrix(d_f, HIDDEN1),
            b1: Array1::zeros(HIDDEN1),
            w2: uniform_matrix(HIDDEN1, HIDDEN2),
            b2: Array1::zeros(HIDDEN2),
            w3: uniform_matrix(HIDDEN2, 1),
            b3: Array1::zeros(1),
        }
    }

    pub fn zeros(d_f: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((d_f, HIDDEN1)),
            b1: Array1::zeros(HIDDEN1),
            w2: Array2::zeros((HIDDEN1, HIDDEN2)),
            b2: Array1::zeros(HIDDEN2),
            w3: Array2::zeros((HIDDEN2, 1)),
            b3: Array1::zeros(1),
        }
    }

    pub fn d_f(&self) -> usize {
        self.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.w1.ncols() == HIDDEN1
            && self.b1.len() == HIDDEN1
            && self.w2.dim() == (HIDDEN1, HIDDEN2)
            && self.b2.len() == HIDDEN2
            && self.w3.dim() == (HIDDEN2, 1)
            && self.b3.len() == 1;
        if !shapes_ok {
            return Err(LapError::invalid("MLP layer shapes do not chain"));
        }
        let finite = self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(LapError::NonFinite("MLP parameters".into()));
        }
        Ok(())
    }

    /// Tensors as flat slices, in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    pub z1: Array2<f64>,
    pub a1: Array2<f64>,
    pub z2: Array2<f64>,
    pub a2: Array2<f64>,
    /// Unclamped logistic outputs, one per row.
    pub sigma: Array1<f64>,
    /// Clamped scores in `[SCORE_EPS, 1 - SCORE_EPS]`.
    pub scores: Vec<f64>,
}

fn relu(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|x| x.max(0.0))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Full forward pass with cached activations.
pub fn forward_cached(features: &Array2<f64>, params: &MlpParams) -> Result<ForwardCache> {
    if features.ncols() != params.d_f() {
        return Err(LapError::dims("predictor input dimension", params.d_f(), features.ncols()));
    }
    if !features.iter().all(|x| x.is_finite()) {
        return Err(LapError::NonFinite("predictor input".into()));
    }
    let z1 = features.dot(&params.w1) + &params.b1;
    let a1 = relu(&z1);
    let z2 = a1.dot(&params.w2) + &params.b2;
    let a2 = relu(&z2);
    let z3 = a2.dot(&params.w3) + &params.b3;
    let sigma = z3.column(0).mapv(sigmoid);
    let scores = sigma
        .iter()
        .map(|&s| s.clamp(SCORE_EPS, 1.0 - SCORE_EPS))
        .collect();
    Ok(ForwardCache {
        z1,
        a1,
        z2,
        a2,
        sigma,
        scores,
    })
}

/// Snippet scores in `(0, 1)`, one per feature row.
pub fn forward(features: &Array2<f64>, params: &MlpParams) -> Result<Vec<f64>> {
    Ok(forward_cached(features, params)?.scores)
}

/// Gradients produced by the backward pass: one tensor per parameter plus
/// the gradient with respect to the input features.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }
}

/// Exact gradients of the forward computation given `d_loss/d_score` per
/// row. Rows where the output clamp was active receive zero gradient, as
/// does the flat side of each rectifier.
pub fn backward(
    features: &Array2<f64>,
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<Gradients> {
    let n = features.nrows();
    if upstream.len() != n {
        return Err(LapError::dims("upstream gradient length", n, upstream.len()));
    }
    if cache.z1.nrows() != n {
        return Err(LapError::dims("forward cache rows", n, cache.z1.nrows()));
    }

    // d score / d z3 = sigma * (1 - sigma) where the clamp is inactive.
    let mut dz3 = Array2::zeros((n, 1));
    for i in 0..n {
        let s = cache.sigma[i];
        let slope = if s > SCORE_EPS && s < 1.0 - SCORE_EPS {
            s * (1.0 - s)
        } else {
            0.0
        };
        dz3[[i, 0]] = upstream[i] * slope;
    }

    let dw3 = cache.a2.t().dot(&dz3);
    let db3 = dz3.sum_axis(Axis(0));
    let da2 = dz3.dot(&params.w3.t());
    let dz2 = &da2 * &cache.z2.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });

    let dw2 = cache.a1.t().dot(&dz2);
    let db2 = dz2.sum_axis(Axis(0));
    let da1 = dz2.dot(&params.w2.t());
    let dz1 = &da1 * &cache.z1.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });

    let dw1 = features.t().dot(&dz1);
    let db1 = dz1.sum_axis(Axis(0));
    let dinput = dz1.dot(&params.w1.t());

    Ok(Gradients {
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
        w3: dw3,
        b3: db3,
        input: dinput,
    })
}

/// Optional temporal smoother applied to per-video score tracks at
/// inference. Defaults to off; every headline number in the test suite is
/// defined with it off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub enabled: bool,
    pub window: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            enabled: false,
            window: 5,
        }
    }
}

/// Centered moving average with edge truncation: each output averages the
/// in-range indices of the window only.
pub fn smooth_scores(scores: &[f64], cfg: &SmootherConfig) -> Result<Vec<f64>> {
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(LapError::invalid(format!(
            "smoother window must be odd and positive, got {}",
            cfg.window
        )));
    }
    if !cfg.enabled || cfg.window == 1 {
        return Ok(scores.to_vec());
    }
    let half = cfg.window / 2;
    let n = scores.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            scores[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    Ok(out)
}

/// Everything needed to reuse a checkpoint: fusion layout, snippet count,
/// and the smoother setting it was evaluated with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionConfig,
    pub d_f: usize,
    pub hidden: [usize; 2],
    pub l: usize,
    pub smoother: SmootherConfig,
    /// Baseline ablation flag: semantic features were zeroed everywhere.
    pub visual_only: bool,
}

const CKPT_MAGIC: [u8; 4] = *b"LAPC";
const CKPT_VERSION: u32 = 1;
const CKPT_DTYPE_F64: u32 = 1;

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write a checkpoint: a binary tensor container at `path` (name table plus
/// f64 payloads) and a JSON metadata sidecar at `path.json`.
pub fn save_checkpoint(path: &Path, params: &MlpParams, meta: &CheckpointMeta) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
    let dims: [(usize, usize); 6] = [
        (params.w1.nrows(), params.w1.ncols()),
        (params.b1.len(), 1),
        (params.w2.nrows(), params.w2.ncols()),
        (params.b2.len(), 1),
        (params.w3.nrows(), params.w3.ncols()),
        (params.b3.len(), 1),
    ];
    for ((name, slice), (rows, cols)) in TENSOR_NAMES.iter().zip(params.tensors()).zip(dims) {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        buf.extend_from_slice(&CKPT_DTYPE_F64.to_le_bytes());
        for &x in slice {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &buf)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| LapError::invalid(format!("serializing checkpoint metadata: {e}")))?;
    atomic_write(&sidecar_path(path), json.as_bytes())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LapError::malformed(self.path, "truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(MlpParams, CheckpointMeta)> {
    let buf = fs::read(path).map_err(|e| LapError::io(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(LapError::malformed(path, "bad magic, expected \"LAPC\""));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(LapError::malformed(path, format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| LapError::malformed(path, "tensor name is not UTF-8"))?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let dtype = cur.u32()?;
        if dtype != CKPT_DTYPE_F64 {
            return Err(LapError::malformed(path, format!("unsupported tensor dtype {dtype}")));
        }
        let raw = cur.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, rows, cols, data));
    }
    if cur.pos != buf.len() {
        return Err(LapError::malformed(path, "trailing bytes after tensor table"));
    }

    let find = |name: &str| -> Result<(usize, usize, Vec<f64>)> {
        tensors
            .iter()
            .find(|(n, ..)| n == name)
            .map(|(_, r, c, d)| (*r, *c, d.clone()))
            .ok_or_else(|| LapError::malformed(path, format!("missing tensor {name:?}")))
    };
    let to_matrix = |path: &Path, (rows, cols, data): (usize, usize, Vec<f64>)| -> Result<Array2<f64>> {
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| LapError::malformed(path, e.to_string()))
    };
    let params = MlpParams {
        w1: to_matrix(path, find("w1")?)?,
        b1: Array1::from_vec(find("b1")?.2),
        w2: to_matrix(path, find("w2")?)?,
        b2: Array1::from_vec(find("b2")?.2),
        w3: to_matrix(path, find("w3")?)?,
        b3: Array1::from_vec(find("b3")?.2),
    };
    params.validate()?;

    let sidecar = sidecar_path(path);
    let json = fs::read_to_string(&sidecar).map_err(|e| LapError::io(&sidecar, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)
        .map_err(|e| LapError::malformed(&sidecar, format!("invalid metadata JSON: {e}")))?;
    if meta.d_f != params.d_f() {
        return Err(LapError::dims("checkpoint metadata d_f", params.d_f(), meta.d_f));
    }
    Ok((params, meta))
}
