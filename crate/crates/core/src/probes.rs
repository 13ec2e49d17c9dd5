//! Linear probing classifiers (affine map + softmax) and their supervised trainer.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AnnotationTensor;
use crate::error::{invalid, Result, SeplError};
use crate::feature_bank::{read_json_header, FeatureBank};
use crate::rng;

/// Clamp added inside the cross-entropy logarithm.
pub const EPS_LOG: f64 = 1e-12;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546;

/// Per-dimension affine normalisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.axis_iter(Axis(0)) {
            var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
        }
        let scale = var.mapv(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        });
        Standardizer { mean: mean.to_vec(), scale: scale.to_vec() }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mean = ArrayView1::from(&self.mean);
        let scale = ArrayView1::from(&self.scale);
        (&x - &mean) / &scale
    }
}

/// Affine + softmax head reading one tap point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProbeRepr", try_from = "ProbeRepr")]
pub struct ProbeModel {
    /// `dim x C`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub tap_index: usize,
    /// Applied to raw features before the affine map.
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct ProbeRepr {
    tap_index: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    #[serde(default)]
    standardizer: Option<Standardizer>,
}

impl From<ProbeModel> for ProbeRepr {
    fn from(m: ProbeModel) -> Self {
        ProbeRepr {
            tap_index: m.tap_index,
            weights: m.weights.outer_iter().map(|r| r.to_vec()).collect(),
            bias: m.bias.to_vec(),
            standardizer: m.standardizer,
        }
    }
}

impl TryFrom<ProbeRepr> for ProbeModel {
    type Error = SeplError;

    fn try_from(r: ProbeRepr) -> Result<Self> {
        let dim = r.weights.len();
        let c = r.bias.len();
        if r.weights.iter().any(|row| row.len() != c) {
            return Err(invalid!("probe weights rows must all have {c} columns"));
        }
        let flat: Vec<f64> = r.weights.into_iter().flatten().collect();
        let model = ProbeModel {
            weights: Array2::from_shape_vec((dim, c), flat).expect("shape checked"),
            bias: Array1::from(r.bias),
            tap_index: r.tap_index,
            standardizer: r.standardizer,
        };
        model.validate()?;
        Ok(model)
    }
}

impl ProbeModel {
    pub fn zeros(tap_index: usize, dim: usize, n_classes: usize) -> Self {
        ProbeModel {
            weights: Array2::zeros((dim, n_classes)),
            bias: Array1::zeros(n_classes),
            tap_index,
            standardizer: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.n_classes() {
            return Err(invalid!("bias has {} entries for {} classes", self.bias.len(), self.n_classes()));
        }
        if self.weights.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(SeplError::Numerical(format!(
                "probe on tap {} has non-finite parameters",
                self.tap_index
            )));
        }
        if let Some(st) = &self.standardizer {
            if st.mean.len() != self.dim() || st.scale.len() != self.dim() {
                return Err(invalid!("standardizer dimension does not match probe dim {}", self.dim()));
            }
        }
        Ok(())
    }

    /// Applies the model's standardizer, if any.
    pub(crate) fn prepare(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(invalid!(
                "dimension mismatch: probe expects {} features, got {}",
                self.dim(),
                x.ncols()
            ));
        }
        Ok(match &self.standardizer {
            Some(st) => st.apply(x),
            None => x.to_owned(),
        })
    }
}

/// Row-wise softmax of `x W + b` for already-prepared features.
pub(crate) fn softmax_affine(w: &Array2<f64>, b: &Array1<f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = x.dot(w) + b;
    for mut row in z.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

pub fn probe_forward(model: &ProbeModel, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let x = model.prepare(features)?;
    Ok(softmax_affine(&model.weights, &model.bias, x.view()))
}

pub(crate) struct LossGrad {
    pub loss: f64,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

/// Soft-target cross-entropy and its exact gradient on prepared features.
pub(crate) fn soft_ce(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    weight_decay: f64,
) -> LossGrad {
    let n = x.nrows() as f64;
    let p = softmax_affine(w, b, x);
    let mut loss = 0.0;
    // d/dz_k of -sum_c t_c ln(p_c + eps) = p_k * sum_c r_c - r_k, r_c = t_c p_c / (p_c + eps)
    let mut g = Array2::<f64>::zeros(p.raw_dim());
    for ((prow, trow), mut grow) in p.outer_iter().zip(targets.outer_iter()).zip(g.outer_iter_mut()) {
        let mut rsum = 0.0;
        for ((&pc, &tc), gc) in prow.iter().zip(trow.iter()).zip(grow.iter_mut()) {
            loss -= tc * (pc + EPS_LOG).ln();
            let r = tc * pc / (pc + EPS_LOG);
            *gc = -r;
            rsum += r;
        }
        for (gc, &pc) in grow.iter_mut().zip(prow.iter()) {
            *gc += pc * rsum;
        }
    }
    loss /= n;
    g /= n;
    loss += 0.5 * weight_decay * w.iter().map(|v| v * v).sum::<f64>();
    let grad_w = x.t().dot(&g) + &(w * weight_decay);
    let grad_b = g.sum_axis(Axis(0));
    LossGrad { loss, grad_w, grad_b }
}

/// Mean soft-target cross-entropy (with L2 penalty `weight_decay/2 * |W|^2`)
/// and its analytic gradient with respect to the weights and bias.
pub fn ce_loss_and_grad(
    model: &ProbeModel,
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    weight_decay: f64,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let x = model.prepare(features)?;
    check_targets(targets, x.nrows(), model.n_classes())?;
    let lg = soft_ce(&model.weights, &model.bias, x.view(), targets, weight_decay);
    Ok((lg.loss, lg.grad_w, lg.grad_b))
}

pub(crate) fn check_targets(targets: ArrayView2<'_, f64>, n: usize, c: usize) -> Result<()> {
    if targets.nrows() != n || targets.ncols() != c {
        return Err(invalid!(
            "dimension mismatch: targets are {}x{}, expected {}x{}",
            targets.nrows(),
            targets.ncols(),
            n,
            c
        ));
    }
    for (i, row) in targets.outer_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid!("target row {i} is not a probability vector (sums to {s})"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Values larger than the training set fall back to full-batch steps.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 128,
            weight_decay: 1e-4,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid!("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// One gradient-descent step; errors if the loss is non-finite.
pub(crate) fn apply_step(model: &mut ProbeModel, lg: &LossGrad, lr: f64, epoch: usize, batch: usize) -> Result<()> {
    if !lg.loss.is_finite() {
        return Err(SeplError::Numerical(format!(
            "non-finite loss on tap {} at epoch {epoch}, batch {batch}",
            model.tap_index
        )));
    }
    model.weights.scaled_add(-lr, &lg.grad_w);
    model.bias.scaled_add(-lr, &lg.grad_b);
    Ok(())
}

/// Minibatch gradient descent on prepared features. Returns the mean batch
/// loss of every epoch.
pub(crate) fn sgd_fit<R: Rng>(
    model: &mut ProbeModel,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    let batch = cfg.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0;
        for (bi, idx) in order.chunks(batch).enumerate() {
            let xb = x.select(Axis(0), idx);
            let tb = targets.select(Axis(0), idx);
            let lg = soft_ce(&model.weights, &model.bias, xb.view(), tb.view(), cfg.weight_decay);
            apply_step(model, &lg, cfg.learning_rate, epoch, bi)?;
            total += lg.loss;
            count += 1;
        }
        history.push(total / count as f64);
    }
    Ok(history)
}

/// Trains a zero-initialised probe on one tap point of `bank` against `targets`.
pub fn train_probe(
    bank: &FeatureBank,
    tap_index: usize,
    targets: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<ProbeModel> {
    train_probe_with_history(bank, tap_index, targets, cfg).map(|(m, _)| m)
}

pub fn train_probe_with_history(
    bank: &FeatureBank,
    tap_index: usize,
    targets: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, Vec<f64>)> {
    cfg.validate()?;
    let raw = bank.tap_features(tap_index)?;
    check_targets(targets, raw.nrows(), bank.n_classes())?;
    let mut model = ProbeModel::zeros(tap_index, raw.ncols(), bank.n_classes());
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if cfg.standardize {
        model.standardizer = Some(Standardizer::fit(raw.view()));
    }
    let x = model.prepare(raw.view())?;
    let mut rng = rng::stream(cfg.seed, STREAM_SHUFFLE, 0);
    let history = sgd_fit(&mut model, x.view(), targets, cfg, &mut rng)?;
    Ok((model, history))
}

/// Row-wise one-hot encoding of class labels.
pub fn one_hot(labels: &[u16], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l as usize]] = 1.0;
    }
    out
}

/// The annotator set fused by the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEnsemble {
    pub probes: Vec<ProbeModel>,
    /// Whether the backbone's own prediction joins as annotator 0.
    pub include_original: bool,
}

impl ProbeEnsemble {
    pub fn n_annotators(&self) -> usize {
        self.probes.len() + usize::from(self.include_original)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = EnsembleHeader {
            include_original: self.include_original,
            probes: self
                .probes
                .iter()
                .map(|p| ProbeHeader {
                    tap_index: p.tap_index,
                    dim: p.dim(),
                    n_classes: p.n_classes(),
                    standardized: p.standardizer.is_some(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(PROBE_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &f64| out.extend_from_slice(&v.to_le_bytes());
        for p in &self.probes {
            p.weights.iter().for_each(&mut put);
            p.bias.iter().for_each(&mut put);
            if let Some(st) = &p.standardizer {
                st.mean.iter().for_each(&mut put);
                st.scale.iter().for_each(&mut put);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PROBE_MAGIC.len() || &bytes[..PROBE_MAGIC.len()] != PROBE_MAGIC {
            return Err(SeplError::Format("bad magic: not a probe ensemble file".into()));
        }
        let (header, mut cursor) = read_json_header::<EnsembleHeader>(bytes, PROBE_MAGIC.len())?;
        let mut probes = Vec::with_capacity(header.probes.len());
        for (k, h) in header.probes.iter().enumerate() {
            let what = format!("probe {k}");
            let mut take = |count: usize| -> Result<Vec<f64>> {
                let end = cursor + count * 8;
                if end > bytes.len() {
                    return Err(SeplError::Format(format!("size mismatch in {what}")));
                }
                let v = bytes[cursor..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                cursor = end;
                Ok(v)
            };
            let w = take(h.dim * h.n_classes)?;
            let b = take(h.n_classes)?;
            let standardizer = if h.standardized {
                Some(Standardizer { mean: take(h.dim)?, scale: take(h.dim)? })
            } else {
                None
            };
            let model = ProbeModel {
                weights: Array2::from_shape_vec((h.dim, h.n_classes), w).expect("sized"),
                bias: Array1::from(b),
                tap_index: h.tap_index,
                standardizer,
            };
            model.validate()?;
            probes.push(model);
        }
        if cursor != bytes.len() {
            return Err(SeplError::Format("size mismatch: trailing bytes after probes".into()));
        }
        Ok(ProbeEnsemble { probes, include_original: header.include_original })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const PROBE_MAGIC: &[u8; 5] = b"FPRB1";

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    include_original: bool,
    probes: Vec<ProbeHeader>,
}

#[derive(Serialize, Deserialize)]
struct ProbeHeader {
    tap_index: usize,
    dim: usize,
    n_classes: usize,
    standardized: bool,
}

/// Stacks every annotator's prediction on `bank` into an `N x K x C` tensor.
/// Annotator 0 is the backbone's own prediction when included, then the
/// probes in ensemble order.
pub fn predict_all(ensemble: &ProbeEnsemble, bank: &FeatureBank) -> Result<AnnotationTensor> {
    let n = bank.n_samples();
    let c = bank.n_classes();
    let k = ensemble.n_annotators();
    if k == 0 {
        return Err(invalid!("ensemble has no annotators"));
    }
    let mut values = Array3::<f64>::zeros((n, k, c));
    let mut slot = 0;
    if ensemble.include_original {
        let orig = bank
            .original_preds_f64()
            .ok_or_else(|| invalid!("include_original set but bank has no original_preds"))?;
        values.slice_mut(s![.., 0, ..]).assign(&orig);
        slot = 1;
    }
    for probe in &ensemble.probes {
        if probe.n_classes() != c {
            return Err(invalid!("probe predicts {} classes, bank has {c}", probe.n_classes()));
        }
        let x = bank.tap_features(probe.tap_index)?;
        let p = probe_forward(probe, x.view())?;
        values.slice_mut(s![.., slot, ..]).assign(&p);
        slot += 1;
    }
    AnnotationTensor::new(values)
}
