//! Training objectives: top-k MIL, the multi-prompt triplet term, the
//! pseudo-anomaly term, and their weighted combination.
//!
//! Every loss returns its exact analytic gradient alongside the value.
//! Selection sets (top-k members, anchor/positive/negative memberships) and
//! pseudo labels are constants of the step: no gradient flows through a
//! selection or through the anomaly vector, which derives from frozen
//! semantic features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};

/// Top-k MIL configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MilConfig {
    pub k: usize,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig { k: 3 }
    }
}

/// Multi-prompt triplet configuration. `set_size` is the number of rows
/// averaged into each of the anchor/positive/negative means and defaults to
/// the dictionary capacity P.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MplConfig {
    pub margin: f64,
    pub set_size: usize,
}

impl MplConfig {
    pub fn new(margin: f64, set_size: usize) -> Self {
        MplConfig { margin, set_size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// `G_h = mean(c) + tau * std(c)` within the batch.
    Dynamic,
    /// Fixed `G_h = 0.5`.
    Static,
}

impl std::str::FromStr for ThresholdMode {
    type Err = LapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(ThresholdMode::Dynamic),
            "static" => Ok(ThresholdMode::Static),
            other => Err(LapError::invalid(format!(
                "unknown threshold mode {other:?} (expected \"dynamic\" or \"static\")"
            ))),
        }
    }
}

/// Pseudo-anomaly labeling configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PalConfig {
    pub tau: f64,
    pub mode: ThresholdMode,
}

impl Default for PalConfig {
    fn default() -> Self {
        PalConfig {
            tau: 1.0,
            mode: ThresholdMode::Dynamic,
        }
    }
}

/// Weights of the combined objective: `L = L_mil + beta*L_mpl + gamma*L_pal`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            gamma: 0.001,
        }
    }
}

/// Indices of the `k` largest values, ties broken toward smaller indices.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Indices of the `k` smallest values, ties broken toward smaller indices.
pub fn smallest_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Video-level predictions: the mean of the `k` largest snippet scores in
/// each video's contiguous length-`l` slice of `s = [s_a; s_n]`.
pub fn mil_predictions(s: &[f64], b: usize, l: usize, k: usize) -> Result<Vec<f64>> {
    if b == 0 || l == 0 {
        return Err(LapError::invalid("b and l must be positive"));
    }
    if s.len() != 2 * b * l {
        return Err(LapError::dims("score vector length", 2 * b * l, s.len()));
    }
    if k == 0 || k > l {
        return Err(LapError::invalid(format!("k = {k} must satisfy 1 <= k <= l = {l}")));
    }
    if !s.iter().all(|x| x.is_finite()) {
        return Err(LapError::NonFinite("snippet scores".into()));
    }
    let mut y_hat = Vec::with_capacity(2 * b);
    for j in 0..2 * b {
        let slice = &s[j * l..(j + 1) * l];
        let top = top_k_indices(slice, k);
        let sum: f64 = top.iter().map(|&i| slice[i]).sum();
        y_hat.push(sum / k as f64);
    }
    Ok(y_hat)
}

/// Sum of per-video binary cross entropies and its gradient with respect to
/// the predictions. Predictions must already lie strictly inside `(0, 1)`
/// (the predictor clamp guarantees this).
pub fn mil_loss(y_hat: &[f64], y: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(y_hat.len(), y.len(), "prediction/label length mismatch");
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_hat.len());
    for (&p, &t) in y_hat.iter().zip(y.iter()) {
        let t = t as f64;
        loss += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        grad.push((p - t) / (p * (1.0 - p)));
    }
    (loss, grad)
}

/// The three representative feature means and the row index sets they
/// average over.
#[derive(Debug, Clone)]
pub struct MplSets {
    /// Rows of `f_n` with the `set_size` lowest normal scores.
    pub anchor: Vec<usize>,
    /// Rows of `f_a` with the `set_size` lowest abnormal scores.
    pub positive: Vec<usize>,
    /// Rows of `f_a` with the `set_size` highest anomaly-vector entries.
    pub negative: Vec<usize>,
    pub f_anc: Array1<f64>,
    pub f_pos: Array1<f64>,
    pub f_neg: Array1<f64>,
}

fn mean_of_rows(features: ArrayView2<'_, f64>, indices: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(features.ncols());
    for &i in indices {
        acc += &features.row(i);
    }
    acc / indices.len() as f64
}

/// Build the anchor, positive, and negative sets from scores and the
/// anomaly vector. Ties break toward smaller indices.
pub fn mpl_sets(
    s_n: &[f64],
    s_a: &[f64],
    c: &[f64],
    f_n: ArrayView2<'_, f64>,
    f_a: ArrayView2<'_, f64>,
    set_size: usize,
) -> Result<MplSets> {
    let n = s_a.len();
    if s_n.len() != n || c.len() != n {
        return Err(LapError::dims("score/anomaly vector lengths", n, s_n.len().min(c.len())));
    }
    if f_n.nrows() != n || f_a.nrows() != n {
        return Err(LapError::dims("fused feature rows", n, f_n.nrows().min(f_a.nrows())));
    }
    if f_n.ncols() != f_a.ncols() {
        return Err(LapError::dims("fused feature dimension", f_n.ncols(), f_a.ncols()));
    }
    if set_size == 0 || set_size > n {
        return Err(LapError::invalid(format!(
            "set_size = {set_size} must satisfy 1 <= set_size <= N = {n}"
        )));
    }
    let anchor = smallest_k_indices(s_n, set_size);
    let positive = smallest_k_indices(s_a, set_size);
    let negative = top_k_indices(c, set_size);
    let f_anc = mean_of_rows(f_n, &anchor);
    let f_pos = mean_of_rows(f_a, &positive);
    let f_neg = mean_of_rows(f_a, &negative);
    Ok(MplSets {
        anchor,
        positive,
        negative,
        f_anc,
        f_pos,
        f_neg,
    })
}

/// Gradients of the triplet hinge with respect to the three means.
#[derive(Debug, Clone)]
pub struct MplGrads {
    pub d_anc: Array1<f64>,
    pub d_pos: Array1<f64>,
    pub d_neg: Array1<f64>,
}

/// Squared-distance triplet hinge:
/// `max(|f_anc - f_pos|^2 - |f_anc - f_neg|^2 + margin, 0)`.
///
/// The subgradient is zero when the hinge is inactive, including exactly at
/// the hinge point.
pub fn mpl_loss(
    f_anc: ArrayView1<'_, f64>,
    f_pos: ArrayView1<'_, f64>,
    f_neg: ArrayView1<'_, f64>,
    margin: f64,
) -> Result<(f64, MplGrads)> {
    if f_anc.len() != f_pos.len() || f_anc.len() != f_neg.len() {
        return Err(LapError::dims("triplet mean dimensions", f_anc.len(), f_pos.len().min(f_neg.len())));
    }
    let ap = &f_anc - &f_pos;
    let an = &f_anc - &f_neg;
    let d_ap = ap.dot(&ap);
    let d_an = an.dot(&an);
    let arg = d_ap - d_an + margin;
    if arg > 0.0 {
        Ok((
            arg,
            MplGrads {
                d_anc: 2.0 * (&ap - &an),
                d_pos: -2.0 * &ap,
                d_neg: 2.0 * an,
            },
        ))
    } else {
        let zeros = || Array1::zeros(f_anc.len());
        Ok((
            0.0,
            MplGrads {
                d_anc: zeros(),
                d_pos: zeros(),
                d_neg: zeros(),
            },
        ))
    }
}

/// Pseudo labels from the batch-dynamic threshold
/// `G_h = mean(c) + tau * std(c)` (population standard deviation), flagging
/// entries strictly above it. Returns the labels and the threshold.
pub fn pal_labels(c: &[f64], tau: f64) -> Result<(Vec<u8>, f64)> {
    if c.len() < 2 {
        return Err(LapError::invalid(format!(
            "dynamic threshold needs at least 2 snippets, got {}",
            c.len()
        )));
    }
    if !c.iter().all(|x| x.is_finite()) {
        return Err(LapError::NonFinite("anomaly vector".into()));
    }
    let n = c.len() as f64;
    // A constant vector has zero standard deviation exactly; computing it in
    // floating point can put the threshold a hair below the common value and
    // flag everything, so handle that case directly.
    let all_equal = c.windows(2).all(|w| w[0] == w[1]);
    if all_equal {
        return Ok((vec![0; c.len()], c[0]));
    }
    let mean = c.iter().sum::<f64>() / n;
    let var = c.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let threshold = mean + tau * var.sqrt();
    let labels = c.iter().map(|&x| (x > threshold) as u8).collect();
    Ok((labels, threshold))
}

/// Pseudo labels under either thresholding mode.
pub fn pal_labels_with_mode(c: &[f64], cfg: &PalConfig) -> Result<(Vec<u8>, f64)> {
    match cfg.mode {
        ThresholdMode::Dynamic => pal_labels(c, cfg.tau),
        ThresholdMode::Static => {
            if !c.iter().all(|x| x.is_finite()) {
                return Err(LapError::NonFinite("anomaly vector".into()));
            }
            let threshold = 0.5;
            Ok((c.iter().map(|&x| (x > threshold) as u8).collect(), threshold))
        }
    }
}

/// Per-snippet binary cross entropy of the abnormal-half scores against the
/// pseudo labels, summed over snippets, with its gradient.
pub fn pal_loss(s_a: &[f64], pseudo: &[u8]) -> Result<(f64, Vec<f64>)> {
    if s_a.len() != pseudo.len() {
        return Err(LapError::dims("pseudo label length", s_a.len(), pseudo.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s_a.len());
    for (&s, &p) in s_a.iter().zip(pseudo.iter()) {
        let p = p as f64;
        loss += -(p * s.ln() + (1.0 - p) * (1.0 - s).ln());
        grad.push((s - p) / (s * (1.0 - s)));
    }
    Ok((loss, grad))
}

/// One training batch as the combined loss sees it. Scores must already be
/// clamped into `(0, 1)`; `c` is the anomaly vector over the abnormal half.
#[derive(Debug, Clone, Copy)]
pub struct LapBatch<'a> {
    pub s_a: &'a [f64],
    pub s_n: &'a [f64],
    pub f_a: ArrayView2<'a, f64>,
    pub f_n: ArrayView2<'a, f64>,
    pub c: &'a [f64],
    pub b: usize,
    pub l: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LapLossConfig {
    pub mil: MilConfig,
    pub mpl: MplConfig,
    pub pal: PalConfig,
    pub weights: LossWeights,
}

/// Value and gradients of the combined objective. Gradient fields are of
/// the weighted total: MIL and PAL flow into the score vectors, the triplet
/// term flows into the fused features.
#[derive(Debug, Clone)]
pub struct LapLossOutput {
    pub total: f64,
    pub l_mil: f64,
    pub l_mpl: f64,
    pub l_pal: f64,
    pub d_s_a: Vec<f64>,
    pub d_s_n: Vec<f64>,
    pub d_f_a: Array2<f64>,
    pub d_f_n: Array2<f64>,
    pub y_hat: Vec<f64>,
    pub pseudo: Vec<u8>,
    pub threshold: f64,
}

pub fn lap_loss(batch: &LapBatch<'_>, cfg: &LapLossConfig) -> Result<LapLossOutput> {
    let n = batch.b * batch.l;
    if batch.s_a.len() != n || batch.s_n.len() != n {
        return Err(LapError::dims("score vector length", n, batch.s_a.len().min(batch.s_n.len())));
    }
    if batch.c.len() != n {
        return Err(LapError::dims("anomaly vector length", n, batch.c.len()));
    }

    // MIL over the concatenated scores; abnormal videos come first.
    let mut s = Vec::with_capacity(2 * n);
    s.extend_from_slice(batch.s_a);
    s.extend_from_slice(batch.s_n);
    let y_hat = mil_predictions(&s, batch.b, batch.l, cfg.mil.k)?;
    let mut y = vec![1u8; batch.b];
    y.extend(std::iter::repeat(0u8).take(batch.b));
    let (l_mil, d_y_hat) = mil_loss(&y_hat, &y);

    let mut d_s_a = vec![0.0; n];
    let mut d_s_n = vec![0.0; n];
    for j in 0..2 * batch.b {
        let slice = &s[j * batch.l..(j + 1) * batch.l];
        let share = d_y_hat[j] / cfg.mil.k as f64;
        for i in top_k_indices(slice, cfg.mil.k) {
            let offset = j * batch.l + i;
            if offset < n {
                d_s_a[offset] += share;
            } else {
                d_s_n[offset - n] += share;
            }
        }
    }

    // Triplet term over fused features; set memberships are constants.
    let sets = mpl_sets(batch.s_n, batch.s_a, batch.c, batch.f_n, batch.f_a, cfg.mpl.set_size)?;
    let (l_mpl, mpl_grads) = mpl_loss(
        sets.f_anc.view(),
        sets.f_pos.view(),
        sets.f_neg.view(),
        cfg.mpl.margin,
    )?;
    let beta = cfg.weights.beta;
    let gamma = cfg.weights.gamma;
    let mut d_f_a = Array2::zeros(batch.f_a.dim());
    let mut d_f_n = Array2::zeros(batch.f_n.dim());
    let scale = beta / cfg.mpl.set_size as f64;
    for &i in &sets.anchor {
        d_f_n.row_mut(i).scaled_add(scale, &mpl_grads.d_anc);
    }
    for &i in &sets.positive {
        d_f_a.row_mut(i).scaled_add(scale, &mpl_grads.d_pos);
    }
    for &i in &sets.negative {
        d_f_a.row_mut(i).scaled_add(scale, &mpl_grads.d_neg);
    }

    // Pseudo-anomaly term on the abnormal half; labels are constants.
    let (pseudo, threshold) = pal_labels_with_mode(batch.c, &cfg.pal)?;
    let (l_pal, d_pal) = pal_loss(batch.s_a, &pseudo)?;
    for (d, g) in d_s_a.iter_mut().zip(d_pal.iter()) {
        *d += gamma * g;
    }

    let total = l_mil + beta * l_mpl + gamma * l_pal;
    Ok(LapLossOutput {
        total,
        l_mil,
        l_mpl,
        l_pal,
        d_s_a,
        d_s_n,
        d_f_a,
        d_f_n,
        y_hat,
        pseudo,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn mil_prediction_hand_example() {
        // b=1: abnormal slice [0.1, 0.9, 0.8, 0.2], normal slice constant.
        let s = vec![0.1, 0.9, 0.8, 0.2, 0.5, 0.5, 0.5, 0.5];
        let y_hat = mil_predictions(&s, 1, 4, 2).unwrap();
        assert!((y_hat[0] - 0.85).abs() < 1e-12);
        assert!((y_hat[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mil_prediction_degenerate_k_equals_l() {
        let s = vec![0.2, 0.4, 0.6, 0.8];
        let y_hat = mil_predictions(&s, 1, 2, 2).unwrap();
        assert!((y_hat[0] - 0.3).abs() < 1e-12);
        assert!((y_hat[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mil_prediction_rejects_bad_k_and_length() {
        assert!(mil_predictions(&[0.5; 8], 1, 4, 5).is_err());
        assert!(mil_predictions(&[0.5; 7], 1, 4, 2).is_err());
    }

    #[test]
    fn mil_loss_closed_forms() {
        let (loss, grad) = mil_loss(&[0.5], &[1]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] - (-2.0)).abs() < 1e-12);

        // Hand BCE: -(ln 0.9) - (ln 0.8) = 0.10536 + 0.22314.
        let (loss, _) = mil_loss(&[0.9, 0.2], &[1, 0]);
        assert!((loss - 0.32850406697203605).abs() < 1e-6);
    }

    #[test]
    fn mil_loss_near_zero_at_clamp_perfect_predictions() {
        let eps = crate::model::SCORE_EPS;
        let (loss, _) = mil_loss(&[1.0 - eps, eps], &[1, 0]);
        assert!(loss.abs() < 1e-6);
        assert!(loss >= 0.0);
    }

    #[test]
    fn mpl_sets_degenerate_and_forced_orderings() {
        let n = 4;
        let f_n = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let f_a = Array2::from_shape_fn((n, 3), |(i, j)| 100.0 + (i * 3 + j) as f64);
        let s_n = vec![0.4, 0.1, 0.3, 0.2];
        let s_a = vec![0.1, 0.2, 0.3, 0.4];
        let c = vec![0.9, 0.2, 0.8, 0.1];

        // set_size = N: anchor mean is the mean of all rows.
        let sets = mpl_sets(&s_n, &s_a, &c, f_n.view(), f_a.view(), n).unwrap();
        let expect = f_n.mean_axis(ndarray::Axis(0)).unwrap();
        assert_eq!(sets.f_anc, expect);

        // Strictly increasing abnormal scores: positive = first P rows.
        let sets = mpl_sets(&s_n, &s_a, &c, f_n.view(), f_a.view(), 2).unwrap();
        assert_eq!(sets.positive, vec![0, 1]);
        assert_eq!(sets.negative, vec![0, 2]);
        assert_eq!(sets.anchor, vec![1, 3]);
    }

    /// Independent selection oracle: repeatedly scan for the extreme value,
    /// preferring smaller indices, without sorting.
    fn scan_select(values: &[f64], k: usize, largest: bool) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < k {
            let mut best: Option<usize> = None;
            for i in 0..values.len() {
                if chosen.contains(&i) {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let better = if largest {
                            values[i] > values[b]
                        } else {
                            values[i] < values[b]
                        };
                        Some(if better { i } else { b })
                    }
                };
            }
            chosen.push(best.unwrap());
        }
        chosen
    }

    #[test]
    fn mpl_sets_match_scan_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = 8;
            let p = 3;
            let s_n: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s_a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let f = Array2::from_shape_fn((n, 4), |(i, j)| (i + j) as f64);
            let sets = mpl_sets(&s_n, &s_a, &c, f.view(), f.view(), p).unwrap();
            assert_eq!(sets.anchor, scan_select(&s_n, p, false));
            assert_eq!(sets.positive, scan_select(&s_a, p, false));
            assert_eq!(sets.negative, scan_select(&c, p, true));
        }
    }

    #[test]
    fn mpl_sets_rejects_oversized_set() {
        let f = Array2::zeros((2, 2));
        assert!(mpl_sets(&[0.1, 0.2], &[0.1, 0.2], &[0.1, 0.2], f.view(), f.view(), 3).is_err());
    }

    #[test]
    fn mpl_loss_hand_examples() {
        // Satisfied margin.
        let anc = array![0.0, 0.0];
        let neg = array![2.0f64.sqrt(), 0.0];
        let (loss, grads) = mpl_loss(anc.view(), anc.view(), neg.view(), 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.d_anc.iter().all(|&x| x == 0.0));

        // Collapsed features: loss equals the margin.
        let x = array![0.3, -0.7];
        let (loss, _) = mpl_loss(x.view(), x.view(), x.view(), 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);

        // Scalar cases: anc=0, pos=1, neg=3 -> 0; neg=1.2 -> 0.56.
        let anc = array![0.0];
        let pos = array![1.0];
        let (loss, _) = mpl_loss(anc.view(), pos.view(), array![3.0].view(), 1.0).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, _) = mpl_loss(anc.view(), pos.view(), array![1.2].view(), 1.0).unwrap();
        assert!((loss - 0.56).abs() < 1e-12);
    }

    #[test]
    fn mpl_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dim = 4;
            let point: Vec<f64> = (0..3 * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let eval = |x: &[f64]| {
                let anc = Array1::from_vec(x[..dim].to_vec());
                let pos = Array1::from_vec(x[dim..2 * dim].to_vec());
                let neg = Array1::from_vec(x[2 * dim..].to_vec());
                mpl_loss(anc.view(), pos.view(), neg.view(), 1.0).unwrap().0
            };
            // Skip points too close to the hinge.
            let anc = Array1::from_vec(point[..dim].to_vec());
            let pos = Array1::from_vec(point[dim..2 * dim].to_vec());
            let neg = Array1::from_vec(point[2 * dim..].to_vec());
            let ap = (&anc - &pos).dot(&(&anc - &pos));
            let an = (&anc - &neg).dot(&(&anc - &neg));
            if (ap - an + 1.0).abs() < 1e-3 {
                continue;
            }
            let (_, grads) = mpl_loss(anc.view(), pos.view(), neg.view(), 1.0).unwrap();
            let analytic: Vec<f64> = grads
                .d_anc
                .iter()
                .chain(grads.d_pos.iter())
                .chain(grads.d_neg.iter())
                .copied()
                .collect();
            let report =
                crate::optim::grad_check(&mut |x: &[f64]| eval(x), &point, &analytic, 1e-4, None)
                    .unwrap();
            assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn pal_labels_constant_vector_flags_nothing() {
        let c = vec![0.3; 7];
        let (p, threshold) = pal_labels(&c, 1.0).unwrap();
        assert!(p.iter().all(|&x| x == 0));
        assert_eq!(threshold, 0.3);
    }

    #[test]
    fn pal_labels_hand_example() {
        // c = [0,0,0,1], tau=1: mean 0.25, population std sqrt(0.1875).
        let (p, threshold) = pal_labels(&[0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        let expect = 0.25 + 0.1875f64.sqrt();
        assert!((threshold - expect).abs() < 1e-12);
        assert!((threshold - 0.6830127018922193).abs() < 1e-12);
        assert_eq!(p, vec![0, 0, 0, 1]);
    }

    #[test]
    fn pal_labels_rejects_tiny_input() {
        assert!(pal_labels(&[0.5], 1.0).is_err());
    }

    #[test]
    fn pal_static_mode_uses_fixed_half() {
        let cfg = PalConfig {
            tau: 1.0,
            mode: ThresholdMode::Static,
        };
        let (p, threshold) = pal_labels_with_mode(&[0.2, 0.6, 0.5], &cfg).unwrap();
        assert_eq!(threshold, 0.5);
        assert_eq!(p, vec![0, 1, 0]);
    }

    #[test]
    fn pal_loss_closed_forms() {
        let eps = crate::model::SCORE_EPS;
        let (loss, _) = pal_loss(&[eps, eps], &[0, 0]).unwrap();
        assert!(loss.abs() < 1e-6);

        let (loss, _) = pal_loss(&[0.5], &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Hand BCE: -(ln 0.8) - (ln 0.7) = 0.22314 + 0.35667.
        let (loss, _) = pal_loss(&[0.8, 0.3], &[1, 0]).unwrap();
        assert!((loss - 0.5798184952529422).abs() < 1e-6);
    }

    #[test]
    fn pal_loss_rejects_length_mismatch() {
        assert!(pal_loss(&[0.5, 0.5], &[1]).is_err());
    }

    fn random_batch(
        rng: &mut ChaCha20Rng,
        b: usize,
        l: usize,
        d_f: usize,
    ) -> (Vec<f64>, Vec<f64>, Array2<f64>, Array2<f64>, Vec<f64>) {
        let n = b * l;
        let s_a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let s_n: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let f_a = Array2::from_shape_fn((n, d_f), |_| rng.random::<f64>() - 0.5);
        let f_n = Array2::from_shape_fn((n, d_f), |_| rng.random::<f64>() - 0.5);
        let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        (s_a, s_n, f_a, f_n, c)
    }

    #[test]
    fn lap_loss_with_zero_weights_is_bitwise_mil() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (s_a, s_n, f_a, f_n, c) = random_batch(&mut rng, 2, 4, 3);
        let cfg = LapLossConfig {
            mil: MilConfig { k: 2 },
            mpl: MplConfig::new(1.0, 3),
            pal: PalConfig::default(),
            weights: LossWeights { beta: 0.0, gamma: 0.0 },
        };
        let batch = LapBatch {
            s_a: &s_a,
            s_n: &s_n,
            f_a: f_a.view(),
            f_n: f_n.view(),
            c: &c,
            b: 2,
            l: 4,
        };
        let out = lap_loss(&batch, &cfg).unwrap();
        assert_eq!(out.total.to_bits(), out.l_mil.to_bits());
        assert!(out.d_f_a.iter().all(|&x| x == 0.0));
        assert!(out.d_f_n.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lap_loss_default_weights_combine_components() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (s_a, s_n, f_a, f_n, c) = random_batch(&mut rng, 2, 4, 3);
        let cfg = LapLossConfig {
            mil: MilConfig { k: 2 },
            mpl: MplConfig::new(1.0, 3),
            pal: PalConfig::default(),
            weights: LossWeights::default(),
        };
        let batch = LapBatch {
            s_a: &s_a,
            s_n: &s_n,
            f_a: f_a.view(),
            f_n: f_n.view(),
            c: &c,
            b: 2,
            l: 4,
        };
        let out = lap_loss(&batch, &cfg).unwrap();
        let expect = out.l_mil + 0.1 * out.l_mpl + 0.001 * out.l_pal;
        assert_eq!(out.total.to_bits(), expect.to_bits());
        assert!(out.l_mil >= 0.0 && out.l_mpl >= 0.0 && out.l_pal >= 0.0);
    }

    proptest! {
        /// Permuting scores within one video slice leaves predictions
        /// unchanged; permuting whole videos permutes predictions.
        #[test]
        fn mil_permutation_behavior(seed in 0u64..300) {
            let b = 2usize;
            let l = 5usize;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..2 * b * l).map(|_| rng.random::<f64>()).collect();
            let y = mil_predictions(&s, b, l, 3).unwrap();

            // Rotate within the first slice.
            let mut s2 = s.clone();
            s2[..l].rotate_left(2);
            let y2 = mil_predictions(&s2, b, l, 3).unwrap();
            for (a, b) in y.iter().zip(y2.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            // Swap whole videos 0 and 1.
            let mut s3 = s.clone();
            for i in 0..l {
                s3.swap(i, l + i);
            }
            let y3 = mil_predictions(&s3, b, l, 3).unwrap();
            prop_assert!((y3[0] - y[1]).abs() < 1e-12);
            prop_assert!((y3[1] - y[0]).abs() < 1e-12);
        }

        /// mil_loss is nonnegative.
        #[test]
        fn mil_loss_nonnegative(p0 in 1e-6f64..0.999999, p1 in 1e-6f64..0.999999) {
            let (loss, _) = mil_loss(&[p0, p1], &[1, 0]);
            prop_assert!(loss >= 0.0);
        }

        /// Triplet loss stays within [0, |f_anc - f_pos|^2 + margin].
        #[test]
        fn mpl_loss_bounds(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let dim = 3;
            let anc = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0);
            let pos = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0);
            let neg = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0);
            let margin = 1.0;
            let (loss, _) = mpl_loss(anc.view(), pos.view(), neg.view(), margin).unwrap();
            let ap = (&anc - &pos).dot(&(&anc - &pos));
            prop_assert!(loss >= 0.0);
            prop_assert!(loss <= ap + margin + 1e-12);
        }

        /// Shifting c by a constant or scaling it by a positive factor
        /// leaves the pseudo labels unchanged.
        #[test]
        fn pal_labels_shift_scale_invariant(shift in -5.0f64..5.0, scale in 0.1f64..10.0, seed in 0u64..300) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let (p, _) = pal_labels(&c, 1.0).unwrap();
            let shifted: Vec<f64> = c.iter().map(|&x| x + shift).collect();
            let (p_shift, _) = pal_labels(&shifted, 1.0).unwrap();
            prop_assert_eq!(&p, &p_shift);
            let scaled: Vec<f64> = c.iter().map(|&x| x * scale).collect();
            let (p_scale, _) = pal_labels(&scaled, 1.0).unwrap();
            prop_assert_eq!(&p, &p_scale);
        }
    }
}
