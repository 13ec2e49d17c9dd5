//! MixMatch-style semi-supervised retraining of a single probe.
//!
//! Probes only ever see frozen features, so augmentation is additive Gaussian
//! noise scaled by each feature dimension's spread. A training step:
//!
//! 1. augments the labeled batch once (targets are the retained one-hot labels),
//! 2. guesses labels for an equally sized unlabeled batch by averaging the
//!    probe over several augmentations and sharpening,
//! 3. mixes the concatenated batch with a shuffled copy of itself,
//! 4. descends `L_labeled + w(t) * lambda_u * L_unlabeled`, where the labeled
//!    term is soft cross-entropy and the unlabeled term is the squared error
//!    between predicted and guessed probabilities, and `w(t)` ramps linearly
//!    from 0 to 1.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SeplError};
use crate::feature_bank::FeatureBank;
use crate::noise_split::SplitAssignment;
use crate::probes::{
    apply_step, one_hot, probe_forward, soft_ce, softmax_affine, LossGrad, ProbeModel, TrainConfig,
    STREAM_SHUFFLE,
};
use crate::rng;

const STREAM_UNLABELED: u64 = 0x554e_4c42;
const STREAM_AUGMENT: u64 = 0x4155_474d;
const STREAM_MIXUP: u64 = 0x4d49_5855;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixMatchConfig {
    pub sharpen_temp: f64,
    pub n_augment: usize,
    /// Multiplies the per-dimension feature standard deviation.
    pub aug_sigma_scale: f64,
    pub mixup_alpha: f64,
    /// Set to false to skip the mixup stage entirely.
    pub mixup: bool,
    pub lambda_u: f64,
    pub rampup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        MixMatchConfig {
            sharpen_temp: 0.5,
            n_augment: 2,
            aug_sigma_scale: 0.1,
            mixup_alpha: 0.75,
            mixup: true,
            lambda_u: 10.0,
            rampup_fraction: 0.3,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl MixMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpen_temp > 0.0) {
            return Err(invalid!("sharpen_temp must be > 0"));
        }
        if self.n_augment < 1 {
            return Err(invalid!("n_augment must be >= 1"));
        }
        if !(self.aug_sigma_scale >= 0.0) {
            return Err(invalid!("aug_sigma_scale must be >= 0"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(invalid!("mixup_alpha must be > 0"));
        }
        if !(self.lambda_u >= 0.0) {
            return Err(invalid!("lambda_u must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.rampup_fraction) {
            return Err(invalid!("rampup_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be > 0"));
        }
        Ok(())
    }

    /// Supervised hyperparameters matching this schedule.
    pub fn as_train_config(&self, standardize: bool) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            standardize,
        }
    }
}

/// Adds `N(0, (scale * sigma_d)^2)` noise to every feature.
pub fn feature_augment<R: Rng>(
    features: ArrayView2<'_, f64>,
    sigma: ArrayView1<'_, f64>,
    scale: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = features.to_owned();
    if scale == 0.0 {
        return out;
    }
    for mut row in out.outer_iter_mut() {
        for (v, &sd) in row.iter_mut().zip(sigma.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *v += scale * sd * z;
        }
    }
    out
}

/// Temperature sharpening `p^(1/T) / sum p^(1/T)`.
pub fn sharpen(p: ArrayView1<'_, f64>, temp: f64) -> Array1<f64> {
    let max = p.fold(0.0f64, |a, &v| a.max(v));
    if max <= 0.0 {
        return Array1::from_elem(p.len(), 1.0 / p.len() as f64);
    }
    let q = p.mapv(|v| (v / max).powf(1.0 / temp));
    let s = q.sum();
    q / s
}

/// Averages predictions over `n_augment` augmentations, then sharpens.
pub fn guess_labels<R: Rng>(
    model: &ProbeModel,
    unlabeled_features: ArrayView2<'_, f64>,
    sigma: ArrayView1<'_, f64>,
    cfg: &MixMatchConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    guess_with_inputs(model, unlabeled_features, sigma, cfg, rng).map(|(g, _)| g)
}

/// Label guesses plus the first augmentation, which is what enters the batch.
fn guess_with_inputs<R: Rng>(
    model: &ProbeModel,
    x: ArrayView2<'_, f64>,
    sigma: ArrayView1<'_, f64>,
    cfg: &MixMatchConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut mean = Array2::<f64>::zeros((x.nrows(), model.n_classes()));
    let mut first = None;
    for _ in 0..cfg.n_augment {
        let aug = feature_augment(x, sigma, cfg.aug_sigma_scale, rng);
        mean += &probe_forward(model, aug.view())?;
        first.get_or_insert(aug);
    }
    mean /= cfg.n_augment as f64;
    for mut row in mean.outer_iter_mut() {
        let q = sharpen(row.view(), cfg.sharpen_temp);
        row.assign(&q);
    }
    Ok((mean, first.expect("n_augment >= 1")))
}

/// Convex combination with weight `lambda` on the first point.
pub fn mix_with(
    lambda: f64,
    xa: ArrayView1<'_, f64>,
    ya: ArrayView1<'_, f64>,
    xb: ArrayView1<'_, f64>,
    yb: ArrayView1<'_, f64>,
) -> (Array1<f64>, Array1<f64>) {
    (&xa * lambda + &xb * (1.0 - lambda), &ya * lambda + &yb * (1.0 - lambda))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` folded to `max(lambda, 1 - lambda)`,
/// so the result stays closer to the first point.
pub fn mixup_pair<R: Rng>(
    xa: ArrayView1<'_, f64>,
    ya: ArrayView1<'_, f64>,
    xb: ArrayView1<'_, f64>,
    yb: ArrayView1<'_, f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let lambda = draw_lambda(alpha, rng)?;
    Ok(mix_with(lambda, xa, ya, xb, yb))
}

fn draw_lambda<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid!("mixup alpha {alpha}: {e}"))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// Mean squared error between predicted and target probabilities, averaged
/// over all entries, with its gradient.
pub(crate) fn brier(w: &Array2<f64>, b: &Array1<f64>, x: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> LossGrad {
    let p = softmax_affine(w, b, x);
    let denom = (p.len()) as f64;
    let diff = &p - &q;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / denom;
    let mut g = diff * (2.0 / denom);
    for (mut grow, prow) in g.outer_iter_mut().zip(p.outer_iter()) {
        let dot: f64 = grow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
        grow.zip_mut_with(&prow, |gk, &pk| *gk = pk * (*gk - dot));
    }
    LossGrad { loss, grad_w: x.t().dot(&g), grad_b: g.sum_axis(Axis(0)) }
}

/// Per-dimension population standard deviation.
pub fn column_std(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.std_axis(Axis(0), 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub tap_index: usize,
    pub epoch: usize,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub unlabeled_weight: f64,
}

pub fn semisup_train_probe(
    model: &ProbeModel,
    bank: &FeatureBank,
    split: &SplitAssignment,
    cfg: &MixMatchConfig,
) -> Result<ProbeModel> {
    semisup_train_probe_with_history(model, bank, split, cfg).map(|(m, _)| m)
}

/// Retrains `model` (warm start) on the labeled/unlabeled split of `bank`.
/// Labeled samples keep the bank's labels.
pub fn semisup_train_probe_with_history(
    model: &ProbeModel,
    bank: &FeatureBank,
    split: &SplitAssignment,
    cfg: &MixMatchConfig,
) -> Result<(ProbeModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let n = bank.n_samples();
    if split.n_samples() != n {
        return Err(invalid!("split covers {} samples, bank has {n}", split.n_samples()));
    }
    if split.labeled_is_empty() {
        return Err(invalid!("empty labeled set: nothing to supervise on"));
    }
    let labels = bank.labels.as_ref().ok_or_else(|| invalid!("bank has no labels"))?;
    let raw = bank.tap_features(model.tap_index)?;
    if raw.ncols() != model.dim() || model.n_classes() != bank.n_classes() {
        return Err(invalid!("probe shape does not match tap point {}", model.tap_index));
    }
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }

    let c = bank.n_classes();
    let sigma = column_std(raw.view());
    let labeled = &split.labeled_indices;
    let unlabeled = &split.unlabeled_indices;
    let batch = cfg.batch_size.min(labeled.len());
    let steps_per_epoch = labeled.len().div_ceil(batch);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;

    let mut shuffle_rng = rng::stream(cfg.seed, STREAM_SHUFFLE, 0);
    let mut unl_rng = rng::stream(cfg.seed, STREAM_UNLABELED, 0);
    let mut aug_rng = rng::stream(cfg.seed, STREAM_AUGMENT, 0);
    let mut mix_rng = rng::stream(cfg.seed, STREAM_MIXUP, 0);

    let mut positions: Vec<usize> = (0..labeled.len()).collect();
    let mut unl_order: Vec<usize> = unlabeled.clone();
    let mut unl_cursor = unl_order.len();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        positions.shuffle(&mut shuffle_rng);
        let (mut sum_x, mut sum_u, mut weight) = (0.0, 0.0, 0.0);
        for (bi, chunk) in positions.chunks(batch).enumerate() {
            let idx: Vec<usize> = chunk.iter().map(|&p| labeled[p]).collect();
            let bl = idx.len();
            let xl = feature_augment(raw.select(Axis(0), &idx).view(), sigma.view(), cfg.aug_sigma_scale, &mut aug_rng);
            let tl = one_hot(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), c);

            weight = if cfg.rampup_fraction > 0.0 {
                (step as f64 / (cfg.rampup_fraction * total_steps)).min(1.0)
            } else {
                1.0
            };
            let use_unlabeled = !unl_order.is_empty() && cfg.lambda_u * weight > 0.0;

            let (mut xs, mut ts) = (xl, tl);
            if use_unlabeled {
                let mut uidx = Vec::with_capacity(bl);
                while uidx.len() < bl {
                    if unl_cursor == unl_order.len() {
                        unl_order.shuffle(&mut unl_rng);
                        unl_cursor = 0;
                    }
                    uidx.push(unl_order[unl_cursor]);
                    unl_cursor += 1;
                }
                let xu_raw = raw.select(Axis(0), &uidx);
                let (qu, xu) = guess_with_inputs(&model, xu_raw.view(), sigma.view(), cfg, &mut aug_rng)?;
                xs = concatenate![Axis(0), xs, xu];
                ts = concatenate![Axis(0), ts, qu];
            }
            if cfg.mixup {
                let m = xs.nrows();
                let mut partner: Vec<usize> = (0..m).collect();
                partner.shuffle(&mut mix_rng);
                let mut mx = Array2::zeros(xs.raw_dim());
                let mut mt = Array2::zeros(ts.raw_dim());
                for i in 0..m {
                    let lambda = draw_lambda(cfg.mixup_alpha, &mut mix_rng)?;
                    let p = partner[i];
                    let (x, t) = mix_with(lambda, xs.row(i), ts.row(i), xs.row(p), ts.row(p));
                    mx.row_mut(i).assign(&x);
                    mt.row_mut(i).assign(&t);
                }
                xs = mx;
                ts = mt;
            }
            debug_assert!(ts.outer_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));

            let x = model.prepare(xs.view())?;
            let mut lg = soft_ce(
                &model.weights,
                &model.bias,
                x.slice(s![..bl, ..]),
                ts.slice(s![..bl, ..]),
                cfg.weight_decay,
            );
            sum_x += lg.loss;
            if use_unlabeled {
                let coef = cfg.lambda_u * weight;
                let lu = brier(&model.weights, &model.bias, x.slice(s![bl.., ..]), ts.slice(s![bl.., ..]));
                if !lu.loss.is_finite() {
                    return Err(SeplError::Numerical(format!(
                        "non-finite unlabeled loss on tap {} at epoch {epoch}, batch {bi}",
                        model.tap_index
                    )));
                }
                sum_u += lu.loss;
                lg.loss += coef * lu.loss;
                lg.grad_w.scaled_add(coef, &lu.grad_w);
                lg.grad_b.scaled_add(coef, &lu.grad_b);
            }
            apply_step(&mut model, &lg, cfg.learning_rate, epoch, bi)?;
            step += 1;
        }
        history.push(EpochLog {
            tap_index: model.tap_index,
            epoch,
            loss_labeled: sum_x / steps_per_epoch as f64,
            loss_unlabeled: sum_u / steps_per_epoch as f64,
            unlabeled_weight: weight,
        });
    }
    model.validate()?;
    Ok((model, history))
}
