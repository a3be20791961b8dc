//! Adam with L2 weight decay, the paired-bag training loop, and the
//! finite-difference gradient checker used as the correctness oracle for
//! every analytic gradient in the crate.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::features::{GroundTruth, VideoFeatures};
use crate::losses::{lap_loss, LapBatch, LapLossConfig};
use crate::metrics::{evaluate_videos, EvalReport, InferenceConfig};
use crate::model::{
    backward, forward_cached, fuse, ForwardCache, FusionConfig, FusionMode, Gradients, MlpParams,
    SmootherConfig, HIDDEN1, HIDDEN2,
};
use crate::prompts::{evidence, PromptDictionary};

/// Adam hyperparameters. Weight decay enters as a classic L2 term added to
/// the gradient before the moment updates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.005,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient rejects the whole
/// step: parameters, moments, and the step counter are left untouched.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    {
        let param_tensors = params.tensors();
        let grad_tensors = grads.tensors();
        for (i, (p, g)) in param_tensors.iter().zip(grad_tensors.iter()).enumerate() {
            if p.len() != g.len() || state.m[i].len() != p.len() {
                return Err(LapError::dims("gradient tensor size", p.len(), g.len()));
            }
        }
        if grad_tensors.iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(LapError::NonFinite("gradient; step rejected".into()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grad_tensors = grads.tensors();
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g_tensor = grad_tensors[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, value) in p.iter_mut().enumerate() {
            let g = g_tensor[j] + cfg.weight_decay * *value;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *value -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`, if any coordinate was checked.
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates excluded by the coordinate guard.
    pub skipped: usize,
    /// False when the point guard rejected the probe point (a kink or
    /// selection tie lies within reach); no comparison was made.
    pub reliable: bool,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare an analytic gradient against central finite differences at the
/// listed coordinates. `coord_safe` may veto coordinates whose perturbation
/// could cross a kink; vetoed coordinates are counted in `skipped`.
pub fn grad_check_coords(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
    coord_safe: Option<&dyn Fn(usize) -> bool>,
) -> Result<GradCheckReport> {
    if analytic.len() != point.len() {
        return Err(LapError::dims("analytic gradient length", point.len(), analytic.len()));
    }
    let mut buffer = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: None,
        checked: 0,
        skipped: 0,
        reliable: true,
    };
    for &i in coords {
        if let Some(guard) = coord_safe {
            if !guard(i) {
                report.skipped += 1;
                continue;
            }
        }
        buffer[i] = point[i] + h;
        let up = f(&buffer);
        buffer[i] = point[i] - h;
        let down = f(&buffer);
        buffer[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(LapError::NonFinite(format!(
                "function evaluation while probing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Check every coordinate. `point_guard` returning false marks the probe
/// point itself unreliable (e.g. a kink sits at or near it) and skips the
/// comparison entirely.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    point_guard: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<GradCheckReport> {
    if let Some(guard) = point_guard {
        if !guard(point) {
            return Ok(GradCheckReport {
                max_rel_err: 0.0,
                worst_coord: None,
                checked: 0,
                skipped: point.len(),
                reliable: false,
            });
        }
    }
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, analytic, h, &coords, None)
}

/// Flatten parameters in tensor order (w1, b1, w2, b2, w3, b3).
pub fn pack_params(params: &MlpParams) -> Vec<f64> {
    params.tensors().concat()
}

/// Flatten parameter gradients in the same order as [`pack_params`].
pub fn pack_param_grads(grads: &Gradients) -> Vec<f64> {
    grads.tensors().concat()
}

/// Rebuild parameters from a flat vector produced by [`pack_params`].
pub fn unpack_params(flat: &[f64], d_f: usize) -> Result<MlpParams> {
    let sizes = [
        d_f * HIDDEN1,
        HIDDEN1,
        HIDDEN1 * HIDDEN2,
        HIDDEN2,
        HIDDEN2,
        1,
    ];
    let total: usize = sizes.iter().sum();
    if flat.len() != total {
        return Err(LapError::dims("packed parameter length", total, flat.len()));
    }
    let mut offset = 0;
    let mut take = |len: usize| {
        let out = flat[offset..offset + len].to_vec();
        offset += len;
        out
    };
    Ok(MlpParams {
        w1: Array2::from_shape_vec((d_f, HIDDEN1), take(sizes[0])).unwrap(),
        b1: Array1::from_vec(take(sizes[1])),
        w2: Array2::from_shape_vec((HIDDEN1, HIDDEN2), take(sizes[2])).unwrap(),
        b2: Array1::from_vec(take(sizes[3])),
        w3: Array2::from_shape_vec((HIDDEN2, 1), take(sizes[4])).unwrap(),
        b3: Array1::from_vec(take(sizes[5])),
    })
}

/// Coordinate guard for finite-differencing the MLP parameters: vetoes any
/// coordinate whose `h`-perturbation could flip a rectifier within the
/// cached forward pass. Works on packed-coordinate indices.
///
/// The returned closure is conservative (Lipschitz reach bounds with a 4x
/// margin); everything it admits differentiates cleanly at `h`.
pub fn mlp_coord_guard<'a>(
    features: &'a Array2<f64>,
    params: &'a MlpParams,
    cache: &'a ForwardCache,
    h: f64,
) -> impl Fn(usize) -> bool + 'a {
    let d_f = params.d_f();
    let margin = 4.0 * h;
    let w1_end = d_f * HIDDEN1;
    let b1_end = w1_end + HIDDEN1;
    let w2_end = b1_end + HIDDEN1 * HIDDEN2;
    let b2_end = w2_end + HIDDEN2;
    let n = features.nrows();

    move |coord: usize| {
        // reach(i) bounds |delta z1[i, k]| for the perturbed column k.
        let z1_safe = |k: usize, reach: &dyn Fn(usize) -> f64| -> bool {
            for i in 0..n {
                let r = reach(i);
                if cache.z1[[i, k]].abs() <= margin * r.max(1e-12) && r > 0.0 {
                    return false;
                }
                // The a1 shift propagates into every second-layer unit.
                for m in 0..HIDDEN2 {
                    let reach2 = r * params.w2[[k, m]].abs();
                    if reach2 > 0.0 && cache.z2[[i, m]].abs() <= margin * reach2 {
                        return false;
                    }
                }
            }
            true
        };
        if coord < w1_end {
            let j = coord / HIDDEN1;
            let k = coord % HIDDEN1;
            z1_safe(k, &|i| features[[i, j]].abs())
        } else if coord < b1_end {
            let k = coord - w1_end;
            z1_safe(k, &|_| 1.0)
        } else if coord < w2_end {
            let flat = coord - b1_end;
            let j = flat / HIDDEN2;
            let k = flat % HIDDEN2;
            (0..n).all(|i| {
                let r = cache.a1[[i, j]].abs();
                r == 0.0 || cache.z2[[i, k]].abs() > margin * r
            })
        } else if coord < b2_end {
            let k = coord - w2_end;
            (0..n).all(|i| cache.z2[[i, k]].abs() > margin)
        } else {
            // w3 and b3 have no rectifier downstream.
            true
        }
    }
}

/// Point guard for the MLP: the logistic outputs must sit well inside the
/// clamp bounds so no perturbation can reach them.
pub fn mlp_point_guard(cache: &ForwardCache) -> bool {
    cache.sigma.iter().all(|&s| s > 1e-3 && s < 1.0 - 1e-3)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Videos per bag half.
    pub b: usize,
    /// Snippets per video after resampling.
    pub l: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub loss: LapLossConfig,
    pub adam: AdamConfig,
    /// Evaluate on the test split every this many epochs (the final epoch
    /// is always evaluated).
    pub eval_cadence: usize,
    pub smoother: SmootherConfig,
    /// Zero semantic features everywhere (ablation baseline).
    pub visual_only: bool,
}

/// One log line: per-epoch mean losses plus the evaluation report when the
/// epoch was evaluated.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Global optimizer steps completed at the end of this epoch.
    pub step: u64,
    pub l_mil: f64,
    pub l_mpl: f64,
    pub l_pal: f64,
    pub l_lap: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    pub final_params: MlpParams,
    /// Parameters at the epoch with the highest test `auc_all`; equal to
    /// `final_params` when no evaluation produced one.
    pub best_params: MlpParams,
    pub best_epoch: usize,
    pub best_auc: Option<f64>,
    pub fusion: FusionConfig,
}

struct PreparedVideo {
    fused: Array2<f64>,
    /// Anomaly vector rows for this video (parameter-free, so computed
    /// once).
    c: Vec<f64>,
}

/// Train the predictor on paired abnormal/normal bags.
///
/// Bag composition per epoch: both class lists are reshuffled from the
/// seeded stream and consumed in chunks of `b` without replacement;
/// leftover videos smaller than one chunk are skipped that epoch.
pub fn train(
    train_videos: &[VideoFeatures],
    test_videos: Option<(&[VideoFeatures], &GroundTruth)>,
    dict: &PromptDictionary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.b == 0 || cfg.l == 0 || cfg.epochs == 0 {
        return Err(LapError::invalid("b, l, and epochs must be positive"));
    }
    if cfg.eval_cadence == 0 {
        return Err(LapError::invalid("eval_cadence must be positive"));
    }
    if cfg.loss.mil.k > cfg.l {
        return Err(LapError::invalid(format!(
            "k = {} must not exceed l = {}",
            cfg.loss.mil.k, cfg.l
        )));
    }
    if train_videos.is_empty() {
        return Err(LapError::invalid("training split is empty"));
    }
    let d_v = train_videos[0].d_v();
    let d_t = train_videos[0].d_t();
    if dict.d_t() != d_t {
        return Err(LapError::dims("dictionary d_t vs semantic features", d_t, dict.d_t()));
    }
    let n = cfg.b * cfg.l;
    if cfg.loss.mpl.set_size == 0 || cfg.loss.mpl.set_size > n {
        return Err(LapError::invalid(format!(
            "set_size = {} must satisfy 1 <= set_size <= b*l = {n}",
            cfg.loss.mpl.set_size
        )));
    }

    let fusion = FusionConfig::new(cfg.fusion_mode, d_v, d_t)?;
    let inference = InferenceConfig {
        fusion,
        l: cfg.l,
        smoother: cfg.smoother,
        visual_only: cfg.visual_only,
    };

    // Resample, optionally blank the semantic modality, fuse, and compute
    // the per-snippet anomaly vector once per video.
    let mut abnormal: Vec<PreparedVideo> = Vec::new();
    let mut normal: Vec<PreparedVideo> = Vec::new();
    for video in train_videos {
        let resampled = crate::features::resample_to_l(video, cfg.l)?;
        let semantic = if cfg.visual_only {
            Array2::zeros(resampled.semantic.dim())
        } else {
            resampled.semantic.clone()
        };
        let fused = fuse(resampled.visual.view(), semantic.view(), &fusion)?;
        let ev = evidence(semantic.view(), dict)?;
        let prepared = PreparedVideo { fused, c: ev.c };
        if video.label == 1 {
            abnormal.push(prepared);
        } else {
            normal.push(prepared);
        }
    }
    if abnormal.is_empty() || normal.is_empty() {
        return Err(LapError::invalid(
            "training split must contain both abnormal and normal videos",
        ));
    }
    let steps_per_epoch = abnormal.len().min(normal.len()) / cfg.b;
    if steps_per_epoch == 0 {
        return Err(LapError::invalid(format!(
            "batch size b = {} exceeds the smaller class ({} abnormal, {} normal)",
            cfg.b,
            abnormal.len(),
            normal.len()
        )));
    }

    let mut params = MlpParams::init(fusion.d_f(), cfg.seed);
    let mut adam = AdamState::new(&params);
    // Separate stream from the init draw.
    let mut sampler = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut global_step = 0u64;
    let d_f = fusion.d_f();

    for epoch in 1..=cfg.epochs {
        let mut abn_order: Vec<usize> = (0..abnormal.len()).collect();
        let mut nrm_order: Vec<usize> = (0..normal.len()).collect();
        abn_order.shuffle(&mut sampler);
        nrm_order.shuffle(&mut sampler);

        let mut sums = [0.0f64; 4];
        for step in 0..steps_per_epoch {
            let abn_chunk = &abn_order[step * cfg.b..(step + 1) * cfg.b];
            let nrm_chunk = &nrm_order[step * cfg.b..(step + 1) * cfg.b];

            let mut f_all = Array2::zeros((2 * n, d_f));
            let mut c = Vec::with_capacity(n);
            for (slot, &vi) in abn_chunk.iter().enumerate() {
                f_all
                    .slice_mut(ndarray::s![slot * cfg.l..(slot + 1) * cfg.l, ..])
                    .assign(&abnormal[vi].fused);
                c.extend_from_slice(&abnormal[vi].c);
            }
            for (slot, &vi) in nrm_chunk.iter().enumerate() {
                let lo = n + slot * cfg.l;
                f_all
                    .slice_mut(ndarray::s![lo..lo + cfg.l, ..])
                    .assign(&normal[vi].fused);
            }

            let cache = forward_cached(&f_all, &params)?;
            let (s_a, s_n) = cache.scores.split_at(n);
            let batch = LapBatch {
                s_a,
                s_n,
                f_a: f_all.slice(ndarray::s![..n, ..]),
                f_n: f_all.slice(ndarray::s![n.., ..]),
                c: &c,
                b: cfg.b,
                l: cfg.l,
            };
            let loss = lap_loss(&batch, &cfg.loss)?;

            let mut upstream = loss.d_s_a.clone();
            upstream.extend_from_slice(&loss.d_s_n);
            let grads = backward(&f_all, &params, &cache, &upstream)?;
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;

            global_step += 1;
            sums[0] += loss.l_mil;
            sums[1] += loss.l_mpl;
            sums[2] += loss.l_pal;
            sums[3] += loss.total;
        }

        let steps_f = steps_per_epoch as f64;
        let eval = match (&test_videos, epoch % cfg.eval_cadence == 0 || epoch == cfg.epochs) {
            (Some((videos, gt)), true) => {
                let report = evaluate_videos(videos, &params, &inference, gt)?;
                if let Some(auc) = report.auc_all {
                    let improves = best.as_ref().map(|(b, _, _)| auc > *b).unwrap_or(true);
                    if improves {
                        best = Some((auc, epoch, params.clone()));
                    }
                }
                Some(report)
            }
            _ => None,
        };
        log.push(EpochRow {
            epoch,
            step: global_step,
            l_mil: sums[0] / steps_f,
            l_mpl: sums[1] / steps_f,
            l_pal: sums[2] / steps_f,
            l_lap: sums[3] / steps_f,
            eval,
        });
    }

    let (best_auc, best_epoch, best_params) = match best {
        Some((auc, epoch, p)) => (Some(auc), epoch, p),
        None => (None, cfg.epochs, params.clone()),
    };
    Ok(TrainOutcome {
        log,
        final_params: params,
        best_params,
        best_epoch,
        best_auc,
        fusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn tiny_grads(params: &MlpParams) -> Gradients {
        Gradients {
            w1: Array2::zeros(params.w1.dim()),
            b1: Array1::zeros(params.b1.len()),
            w2: Array2::zeros(params.w2.dim()),
            b2: Array1::zeros(params.b2.len()),
            w3: Array2::zeros(params.w3.dim()),
            b3: Array1::zeros(params.b3.len()),
            input: Array2::zeros((1, params.d_f())),
        }
    }

    #[test]
    fn adam_zero_grads_zero_decay_is_fixed_point() {
        let mut params = MlpParams::init(3, 7);
        let snapshot = params.clone();
        let grads = tiny_grads(&params);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_eq!(params, snapshot);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // Unit gradient on b3 only, parameter at zero: the first update is
        // -lr / (1 + eps) exactly (bias corrections cancel).
        let mut params = MlpParams::zeros(2);
        let mut grads = tiny_grads(&params);
        grads.b3[0] = 1.0;
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let expect = -cfg.lr / (1.0 + cfg.eps);
        assert!((params.b3[0] - expect).abs() < 1e-15);
        assert!(params.w1.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_grads_without_side_effects() {
        let mut params = MlpParams::init(2, 1);
        let snapshot = params.clone();
        let mut grads = tiny_grads(&params);
        grads.w2[[0, 0]] = f64::NAN;
        let mut state = AdamState::new(&params);
        let before_step = state.step;
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
        assert_eq!(params, snapshot);
        assert_eq!(state.step, before_step);
        assert!(state.m.iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = MlpParams::init(2, 5);
            let mut state = AdamState::new(&params);
            for i in 0..5 {
                let mut grads = tiny_grads(&params);
                grads.b3[0] = (i as f64 + 1.0) * 0.3;
                grads.b2.fill(0.01 * i as f64);
                adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_linear_function_is_machine_precision() {
        let weights = [2.0, -3.0, 0.5];
        let mut f = |x: &[f64]| x.iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>();
        let point = [0.3, -0.7, 1.1];
        let report = grad_check(&mut f, &point, &weights, 1e-4, None).unwrap();
        assert!(report.reliable);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_kink_at_probe_point() {
        let mut f = |x: &[f64]| x[0].abs();
        // Subgradient 0 reported at the kink; the guard must flag it.
        let guard = |x: &[f64]| x[0].abs() > 1e-6;
        let report = grad_check(&mut f, &[0.0], &[0.0], 1e-4, Some(&guard)).unwrap();
        assert!(!report.reliable);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let report = grad_check(&mut f, &[1.0], &[3.0], 1e-4, None).unwrap();
        assert!(report.max_rel_err > 0.3);
        assert_eq!(report.worst_coord, Some(0));
    }

    /// Module invariant: every parameter tensor of the MLP passes the
    /// finite-difference check at 1e-4.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        use rand::Rng;
        let d_f = 6;
        let rows = 3;
        let h = 1e-4;
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        let mut points_checked = 0;
        let mut seed = 0u64;
        while points_checked < 5 {
            seed += 1;
            let params = MlpParams::init(d_f, 90 + seed);
            let features =
                Array2::from_shape_fn((rows, d_f), |_| rng.random::<f64>() * 2.0 - 1.0);
            let upstream: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let cache = forward_cached(&features, &params).unwrap();
            if !mlp_point_guard(&cache) {
                continue;
            }
            let grads = backward(&features, &params, &cache, &upstream).unwrap();
            let analytic = pack_param_grads(&grads);
            let point = pack_params(&params);

            let mut f = |flat: &[f64]| {
                let p = unpack_params(flat, d_f).unwrap();
                let s = forward(&features, &p).unwrap();
                s.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
            };

            // All of b1, b2, w3, b3 plus a deterministic stride through w1, w2.
            let w1_len = d_f * HIDDEN1;
            let b1_end = w1_len + HIDDEN1;
            let w2_end = b1_end + HIDDEN1 * HIDDEN2;
            let mut coords: Vec<usize> = (0..w1_len).step_by(37).collect();
            coords.extend(w1_len..b1_end);
            coords.extend((b1_end..w2_end).step_by(211));
            coords.extend(w2_end..point.len());

            let guard = mlp_coord_guard(&features, &params, &cache, h);
            let report =
                grad_check_coords(&mut f, &point, &analytic, h, &coords, Some(&guard)).unwrap();
            assert!(report.checked > 400, "only {} coords admitted", report.checked);
            assert!(
                report.max_rel_err <= 1e-4,
                "seed {seed}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst_coord
            );
            points_checked += 1;
        }
    }

    /// Input gradients get the same treatment as parameter gradients.
    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        use rand::Rng;
        let d_f = 5;
        let rows = 2;
        let h = 1e-4;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let params = MlpParams::init(d_f, 13);
        let features = Array2::from_shape_fn((rows, d_f), |_| rng.random::<f64>() * 2.0 - 1.0);
        let upstream: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() - 0.5).collect();
        let cache = forward_cached(&features, &params).unwrap();
        assert!(mlp_point_guard(&cache));
        let grads = backward(&features, &params, &cache, &upstream).unwrap();
        let analytic: Vec<f64> = grads.input.iter().copied().collect();
        let point: Vec<f64> = features.iter().copied().collect();
        let mut f = |flat: &[f64]| {
            let feats = Array2::from_shape_vec((rows, d_f), flat.to_vec()).unwrap();
            let s = forward(&feats, &params).unwrap();
            s.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };

        // Perturbing input (i, j) shifts every z1[i, k] by h*w1[j, k] and
        // reaches z2[i, m] through all of them; veto coordinates whose
        // margin is too small.
        let mut reach2 = Array2::zeros((d_f, HIDDEN2));
        for j in 0..d_f {
            for m in 0..HIDDEN2 {
                reach2[[j, m]] = (0..HIDDEN1)
                    .map(|k| params.w1[[j, k]].abs() * params.w2[[k, m]].abs())
                    .sum();
            }
        }
        let margin = 4.0 * h;
        let guard = |coord: usize| {
            let i = coord / d_f;
            let j = coord % d_f;
            let z1_ok = (0..HIDDEN1).all(|k| {
                let r = params.w1[[j, k]].abs();
                r == 0.0 || cache.z1[[i, k]].abs() > margin * r
            });
            z1_ok
                && (0..HIDDEN2).all(|m| {
                    let r = reach2[[j, m]];
                    r == 0.0 || cache.z2[[i, m]].abs() > margin * r
                })
        };
        let coords: Vec<usize> = (0..point.len()).collect();
        let report = grad_check_coords(&mut f, &point, &analytic, h, &coords, Some(&guard)).unwrap();
        assert!(report.checked >= 4, "only {} coords admitted", report.checked);
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }
}
