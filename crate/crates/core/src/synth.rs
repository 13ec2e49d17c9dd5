//! Synthetic benchmarks: shifted multi-domain feature banks, symmetric label
//! noise and crowdsourcing instances with known confusion matrices.

use ndarray::{Array1, Array2, Array3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{AnnotationTensor, ConfusionMatrix};
use crate::error::{invalid, Result};
use crate::feature_bank::FeatureBank;
use crate::rng;

const STREAM_PROTO: u64 = 0x5052_4f54;
const STREAM_DOMAIN: u64 = 0x444f_4d4e;
const STREAM_SAMPLE: u64 = 0x534d_504c;
const STREAM_NOISE: u64 = 0x4e4f_4953;

/// Multi-domain generator. Per tap point `t`, a sample of class `c` from
/// domain `d` is `signal_t * separation * u_{t,c} + shift * v_{t,d} + N(0, I)`
/// with `u`, `v` random unit directions. The last domain is held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub n_classes: usize,
    pub n_taps: usize,
    pub tap_dims: Vec<usize>,
    /// Class separability per tap in [0, 1], shallow to deep.
    pub tap_signal: Vec<f64>,
    /// Norm of a class prototype at full signal.
    pub class_separation: f64,
    /// Norm of each domain's mean offset.
    pub domain_shift_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_domains: 4,
            n_per_domain: 1500,
            n_classes: 7,
            n_taps: 4,
            tap_dims: vec![16, 32, 64, 64],
            tap_signal: vec![0.4, 0.6, 0.8, 1.0],
            class_separation: 6.0,
            domain_shift_scale: 7.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(invalid!("need at least one source and one target domain"));
        }
        if self.n_per_domain < 1 || self.n_classes < 2 || self.n_taps < 1 {
            return Err(invalid!("n_per_domain, n_classes >= 2 and n_taps must be positive"));
        }
        if self.tap_dims.len() != self.n_taps || self.tap_signal.len() != self.n_taps {
            return Err(invalid!("tap_dims and tap_signal must both have n_taps = {} entries", self.n_taps));
        }
        if self.tap_dims.iter().any(|&d| d == 0) {
            return Err(invalid!("tap dims must be >= 1"));
        }
        if self.tap_signal.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid!("tap_signal entries must lie in [0, 1]"));
        }
        if !(self.domain_shift_scale >= 0.0) || !(self.class_separation >= 0.0) {
            return Err(invalid!("domain_shift_scale and class_separation must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Source domains; labels are the clean labels.
    pub train: FeatureBank,
    /// Held-out target domain.
    pub test: FeatureBank,
    pub train_labels: Vec<u16>,
    pub test_labels: Vec<u16>,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

pub fn gen_domains(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let c = cfg.n_classes;
    let per = cfg.n_per_domain;

    let mut proto_rng = rng::stream(cfg.seed, STREAM_PROTO, 0);
    let prototypes: Vec<Vec<Array1<f64>>> = (0..cfg.n_taps)
        .map(|t| {
            (0..c)
                .map(|_| unit_vector(cfg.tap_dims[t], &mut proto_rng) * (cfg.class_separation * cfg.tap_signal[t]))
                .collect()
        })
        .collect();
    let mut dom_rng = rng::stream(cfg.seed, STREAM_DOMAIN, 0);
    let offsets: Vec<Vec<Array1<f64>>> = (0..cfg.n_domains)
        .map(|_| {
            (0..cfg.n_taps)
                .map(|t| unit_vector(cfg.tap_dims[t], &mut dom_rng) * cfg.domain_shift_scale)
                .collect()
        })
        .collect();

    let make = |domains: std::ops::Range<usize>| -> Result<(FeatureBank, Vec<u16>)> {
        let n = domains.len() * per;
        let mut feats: Vec<Array2<f32>> = cfg.tap_dims.iter().map(|&d| Array2::zeros((n, d))).collect();
        let mut labels = Vec::with_capacity(n);
        let mut domain_ids = Vec::with_capacity(n);
        let mut row = 0;
        for d in domains {
            let mut rng = rng::stream(cfg.seed, STREAM_SAMPLE, d as u64);
            for i in 0..per {
                let class = i % c;
                for t in 0..cfg.n_taps {
                    let base = &prototypes[t][class] + &offsets[d][t];
                    for (k, &b) in base.iter().enumerate() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        feats[t][[row, k]] = (b + z) as f32;
                    }
                }
                labels.push(class as u16);
                domain_ids.push(d as u16);
                row += 1;
            }
        }
        let names = (0..cfg.n_taps).map(|t| format!("tap{t}")).collect();
        let bank = FeatureBank::new(names, feats, c, Some(labels.clone()), None, Some(domain_ids))?;
        Ok((bank, labels))
    };

    let (train, train_labels) = make(0..cfg.n_domains - 1)?;
    let (test, test_labels) = make(cfg.n_domains - 1..cfg.n_domains)?;
    Ok(SynthData { train, test, train_labels, test_labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { rate: 0.25, seed: 0 }
    }
}

/// Flips exactly `round(rate * N)` labels, chosen without replacement, each to
/// a uniformly drawn different class. Returns the noisy labels and flip mask.
pub fn inject_noise(labels: &[u16], n_classes: usize, cfg: &NoiseConfig) -> Result<(Vec<u16>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(invalid!("noise rate must lie in [0, 1], got {}", cfg.rate));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(invalid!("label {bad} outside [0, {n_classes})"));
    }
    let n = labels.len();
    let n_flip = ((cfg.rate * n as f64 + 0.5).floor() as usize).min(n);
    if n_flip > 0 && n_classes < 2 {
        return Err(invalid!("cannot flip labels with a single class"));
    }
    let mut rng = rng::stream(cfg.seed, STREAM_NOISE, 0);
    let mut noisy = labels.to_vec();
    let mut mask = vec![false; n];
    let mut chosen = index::sample(&mut rng, n, n_flip).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let other = rng.random_range(0..n_classes - 1) as u16;
        noisy[i] = if other < labels[i] { other } else { other + 1 };
        mask[i] = true;
    }
    Ok((noisy, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrowdInstance {
    pub annotations: AnnotationTensor,
    pub true_labels: Vec<usize>,
    pub true_confusions: Vec<ConfusionMatrix>,
}

/// Conditionally independent one-hot annotators. Each annotator row keeps a
/// diagonal drawn uniformly from `diag_range` and spreads the rest evenly.
pub fn gen_crowd_instance(n: usize, c: usize, k: usize, diag_range: (f64, f64), seed: u64) -> Result<CrowdInstance> {
    let (lo, hi) = diag_range;
    if c < 2 || n < 1 || k < 1 {
        return Err(invalid!("need n >= 1, c >= 2, k >= 1"));
    }
    if !(lo > 1.0 / c as f64 && lo <= hi && hi <= 1.0) {
        return Err(invalid!("diag_range ({lo}, {hi}) must lie within (1/c, 1]"));
    }
    let mut rng = rng::stream(seed, 0x4352_4f57, 0);
    let true_confusions: Vec<ConfusionMatrix> = (0..k)
        .map(|j| {
            let mut values = Array2::zeros((c, c));
            for r in 0..c {
                let d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                for col in 0..c {
                    values[[r, col]] = if r == col { d } else { (1.0 - d) / (c - 1) as f64 };
                }
            }
            ConfusionMatrix { values, annotator_index: j }
        })
        .collect();
    let true_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut values = Array3::zeros((n, k, c));
    for (i, &y) in true_labels.iter().enumerate() {
        for (j, cm) in true_confusions.iter().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = c - 1;
            for col in 0..c {
                acc += cm.values[[y, col]];
                if u < acc {
                    pick = col;
                    break;
                }
            }
            values[[i, j, pick]] = 1.0;
        }
    }
    Ok(CrowdInstance { annotations: AnnotationTensor::new(values)?, true_labels, true_confusions })
}
