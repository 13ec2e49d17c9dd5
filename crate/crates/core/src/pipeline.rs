//! End-to-end training loop and inference.
//!
//! 1. warm-up: train one probe per selected tap on the (noisy) labels;
//! 2. fuse the ensemble's predictions on the training set;
//! 3. split by posterior entropy into labeled / unlabeled;
//! 4. retrain every probe semi-supervised on that split;
//! 5. repeat 2-4 until the split stops moving or `max_rounds` is hit;
//! 6. at inference, fuse the probes' predictions on new data.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{avg_aggregate, ds_aggregate, AnnotationTensor, DsConfig};
use crate::argmax;
use crate::error::{invalid, Result};
use crate::feature_bank::FeatureBank;
use crate::noise_split::{split_by_entropy, SplitAssignment, SplitConfig};
use crate::probes::{one_hot, predict_all, train_probe_with_history, ProbeEnsemble, TrainConfig};
use crate::rng::derive_seed;
use crate::semisup::{semisup_train_probe_with_history, EpochLog, MixMatchConfig};

const SEED_WARMUP: u64 = 0x5741_524d;
const SEED_SPLIT: u64 = 0x5350_4c54;
const SEED_SEMISUP: u64 = 0x5353_4c00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AggStrategy {
    Avg,
    #[value(name = "softds")]
    SoftDs,
    #[value(name = "hardds")]
    HardDs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Aggregator used to split the training set (`avg` or `softds`).
    pub agg_train: AggStrategy,
    pub agg_infer: AggStrategy,
    pub max_rounds: usize,
    pub split_cfg: SplitConfig,
    pub mixmatch_cfg: MixMatchConfig,
    pub train_cfg: TrainConfig,
    pub ds_cfg: DsConfig,
    /// Tap points that get a probe; `None` selects all of them.
    pub tap_selection: Option<Vec<usize>>,
    pub include_original: bool,
    /// Stop once fewer than this fraction of samples change side between rounds.
    pub stop_delta: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            agg_train: AggStrategy::SoftDs,
            agg_infer: AggStrategy::SoftDs,
            max_rounds: 3,
            split_cfg: SplitConfig::default(),
            mixmatch_cfg: MixMatchConfig::default(),
            train_cfg: TrainConfig::default(),
            ds_cfg: DsConfig::default(),
            tap_selection: None,
            include_original: false,
            stop_delta: 0.02,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agg_train == AggStrategy::HardDs {
            return Err(invalid!("agg_train must be avg or softds"));
        }
        if let Some(sel) = &self.tap_selection {
            if sel.is_empty() {
                return Err(invalid!("tap_selection must not be empty"));
            }
        }
        if !(0.0..=1.0).contains(&self.stop_delta) {
            return Err(invalid!("stop_delta must lie in [0, 1]"));
        }
        self.split_cfg.validate()?;
        self.mixmatch_cfg.validate()?;
        self.train_cfg.validate()?;
        self.ds_cfg.validate()
    }

    pub fn selected_taps(&self, n_taps: usize) -> Result<Vec<usize>> {
        let taps = match &self.tap_selection {
            Some(sel) => sel.clone(),
            None => (0..n_taps).collect(),
        };
        if let Some(&bad) = taps.iter().find(|&&t| t >= n_taps) {
            return Err(invalid!("tap {bad} selected but bank has {n_taps} tap points"));
        }
        Ok(taps)
    }

    /// Supervised settings used to warm up the probe on `tap`.
    pub fn warmup_train_config(&self, tap: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, SEED_WARMUP ^ self.train_cfg.seed, tap as u64),
            ..self.train_cfg.clone()
        }
    }

    fn split_config(&self, round: usize) -> SplitConfig {
        SplitConfig { seed: derive_seed(self.seed, SEED_SPLIT ^ self.split_cfg.seed, round as u64), ..self.split_cfg.clone() }
    }

    fn mixmatch_config(&self, round: usize, tap: usize) -> MixMatchConfig {
        let seed = derive_seed(derive_seed(self.seed, SEED_SEMISUP ^ self.mixmatch_cfg.seed, round as u64), 0, tap as u64);
        MixMatchConfig { seed, ..self.mixmatch_cfg.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Final Dawid-Skene objective when the training aggregator is softds.
    pub loglik: Option<f64>,
    pub ds_iters: Option<usize>,
    pub ds_converged: Option<bool>,
    /// Fraction of samples that changed side since the previous round.
    pub split_change: Option<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub mean_entropy: f64,
    /// Fraction of fused predictions agreeing with the given labels.
    pub label_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub round: usize,
    pub tap_names: Vec<String>,
    pub ensemble: ProbeEnsemble,
    pub split: Option<SplitAssignment>,
    /// Training-aggregator posteriors of the final ensemble on the training set.
    pub train_posteriors: Array2<f64>,
    pub history: Vec<RoundSummary>,
    pub warmup_losses: Vec<Vec<f64>>,
    pub training_log: Vec<EpochLog>,
}

/// Fused posteriors plus the Dawid-Skene fit when one was run.
pub fn aggregate(
    ann: &AnnotationTensor,
    strategy: AggStrategy,
    ds_cfg: &DsConfig,
) -> Result<(Array2<f64>, Option<crate::aggregation::AggregateResult>)> {
    match strategy {
        AggStrategy::Avg => Ok((avg_aggregate(ann), None)),
        AggStrategy::SoftDs | AggStrategy::HardDs => {
            let cfg = DsConfig { hard_inputs: strategy == AggStrategy::HardDs, ..ds_cfg.clone() };
            let r = ds_aggregate(ann, &cfg)?;
            Ok((r.posteriors.clone(), Some(r)))
        }
    }
}

pub fn run_pipeline(train_bank: &FeatureBank, cfg: &PipelineConfig) -> Result<PipelineState> {
    cfg.validate()?;
    let labels = train_bank.labels.as_ref().ok_or_else(|| invalid!("training bank has no labels"))?;
    if cfg.include_original && train_bank.original_preds.is_none() {
        return Err(invalid!("include_original set but training bank has no original_preds"));
    }
    let taps = cfg.selected_taps(train_bank.n_taps())?;
    let targets = one_hot(labels, train_bank.n_classes());

    let warm: Vec<_> = taps
        .par_iter()
        .map(|&t| train_probe_with_history(train_bank, t, targets.view(), &cfg.warmup_train_config(t)))
        .collect::<Result<_>>()?;
    let (probes, warmup_losses): (Vec<_>, Vec<_>) = warm.into_iter().unzip();
    let mut ensemble = ProbeEnsemble { probes, include_original: cfg.include_original };

    let mut split: Option<SplitAssignment> = None;
    let mut history = Vec::new();
    let mut training_log = Vec::new();
    let mut round = 0;

    while round < cfg.max_rounds {
        round += 1;
        let ann = predict_all(&ensemble, train_bank)?;
        let (posteriors, ds) = aggregate(&ann, cfg.agg_train, &cfg.ds_cfg)?;
        let new_split = split_by_entropy(posteriors.view(), &cfg.split_config(round))?;
        if new_split.labeled_is_empty() {
            return Err(invalid!(
                "round {round}: entropy split left no labeled samples (gamma = {})",
                cfg.split_cfg.gamma
            ));
        }
        let split_change = split.as_ref().map(|prev| prev.churn(&new_split));

        let retrained: Vec<_> = ensemble
            .probes
            .par_iter()
            .map(|p| semisup_train_probe_with_history(p, train_bank, &new_split, &cfg.mixmatch_config(round, p.tap_index)))
            .collect::<Result<_>>()?;
        let mut probes = Vec::with_capacity(retrained.len());
        for (p, log) in retrained {
            probes.push(p);
            training_log.extend(log);
        }
        ensemble.probes = probes;

        history.push(RoundSummary {
            round,
            loglik: ds.as_ref().map(|r| r.final_loglik),
            ds_iters: ds.as_ref().map(|r| r.n_iters),
            ds_converged: ds.as_ref().map(|r| r.converged),
            split_change,
            n_labeled: new_split.labeled_indices.len(),
            n_unlabeled: new_split.unlabeled_indices.len(),
            mean_entropy: new_split.entropies.iter().sum::<f64>() / new_split.n_samples() as f64,
            label_agreement: agreement(posteriors.view(), labels),
        });
        log::info!(
            "round {round}: labeled {} unlabeled {} change {:?}",
            new_split.labeled_indices.len(),
            new_split.unlabeled_indices.len(),
            split_change
        );
        split = Some(new_split);
        if split_change.is_some_and(|c| c < cfg.stop_delta) {
            break;
        }
    }

    let ann = predict_all(&ensemble, train_bank)?;
    let (train_posteriors, _) = aggregate(&ann, cfg.agg_train, &cfg.ds_cfg)?;
    Ok(PipelineState {
        round,
        tap_names: train_bank.manifest.tap_points.iter().map(|t| t.name.clone()).collect(),
        ensemble,
        split,
        train_posteriors,
        history,
        warmup_losses,
        training_log,
    })
}

fn agreement(posteriors: ArrayView2<'_, f64>, labels: &[u16]) -> f64 {
    let hits = posteriors
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(*row) == l as usize)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fuses the ensemble's predictions on `test_bank` with `cfg.agg_infer`.
/// Returns posteriors and their argmax labels.
pub fn infer(state: &PipelineState, test_bank: &FeatureBank, cfg: &PipelineConfig) -> Result<(Array2<f64>, Vec<usize>)> {
    let test_names: Vec<&str> = test_bank.manifest.tap_points.iter().map(|t| t.name.as_str()).collect();
    for probe in &state.ensemble.probes {
        let t = probe.tap_index;
        let expected = state.tap_names.get(t).map(String::as_str);
        let got = test_names.get(t).copied();
        if expected != got {
            return Err(invalid!("tap mismatch at index {t}: trained on {expected:?}, test bank has {got:?}"));
        }
        let dim = test_bank.manifest.tap_points[t].dim;
        if dim != probe.dim() {
            return Err(invalid!("tap mismatch at '{}': probe dim {}, bank dim {dim}", test_names[t], probe.dim()));
        }
    }
    let ann = predict_all(&state.ensemble, test_bank)?;
    let (posteriors, _) = aggregate(&ann, cfg.agg_infer, &cfg.ds_cfg)?;
    let labels = posteriors.outer_iter().map(argmax).collect();
    Ok((posteriors, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub accuracy: f64,
    /// Number of samples whose label was flipped.
    pub n_flipped: Option<usize>,
    /// Fraction of flipped samples predicted as their (wrong) noisy label.
    pub noise_fit_accuracy: Option<f64>,
    /// Agreement between predictions and the noisy labels over all samples.
    pub noisy_label_agreement: Option<f64>,
    pub per_domain_accuracy: BTreeMap<u16, f64>,
}

pub fn evaluate(
    posteriors: ArrayView2<'_, f64>,
    true_labels: &[u16],
    noisy_labels: Option<&[u16]>,
    flip_mask: Option<&[bool]>,
    domain_ids: Option<&[u16]>,
) -> Result<MetricsReport> {
    let n = posteriors.nrows();
    if true_labels.len() != n {
        return Err(invalid!("{} true labels for {n} posterior rows", true_labels.len()));
    }
    for (name, len) in [
        ("noisy_labels", noisy_labels.map(<[u16]>::len)),
        ("flip_mask", flip_mask.map(<[bool]>::len)),
        ("domain_ids", domain_ids.map(<[u16]>::len)),
    ] {
        if len.is_some_and(|l| l != n) {
            return Err(invalid!("{name} length does not match {n} posterior rows"));
        }
    }
    let pred: Vec<usize> = posteriors.outer_iter().map(argmax).collect();
    let correct: Vec<bool> = pred.iter().zip(true_labels).map(|(&p, &t)| p == t as usize).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;

    let noisy_label_agreement = noisy_labels.map(|noisy| {
        pred.iter().zip(noisy).filter(|(&p, &l)| p == l as usize).count() as f64 / n.max(1) as f64
    });
    let (n_flipped, noise_fit_accuracy) = match (noisy_labels, flip_mask) {
        (Some(noisy), Some(mask)) => {
            let flipped: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let fit = flipped.iter().filter(|&&i| pred[i] == noisy[i] as usize).count();
            let rate = if flipped.is_empty() { 0.0 } else { fit as f64 / flipped.len() as f64 };
            (Some(flipped.len()), Some(rate))
        }
        (None, Some(mask)) => (Some(mask.iter().filter(|&&m| m).count()), None),
        _ => (None, None),
    };

    let mut per_domain_accuracy = BTreeMap::new();
    if let Some(domains) = domain_ids {
        let mut tally: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
        for (&d, &ok) in domains.iter().zip(&correct) {
            let e = tally.entry(d).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
        per_domain_accuracy = tally.into_iter().map(|(d, (hit, tot))| (d, hit as f64 / tot as f64)).collect();
    }
    Ok(MetricsReport { n_samples: n, accuracy, n_flipped, noise_fit_accuracy, noisy_label_agreement, per_domain_accuracy })
}
