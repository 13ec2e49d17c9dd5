//! Noise-robust probe ensembles on frozen backbones.
//!
//! Linear probes are trained on the features tapped from several depths of a
//! frozen network. Their predictions are treated as independent annotators
//! and fused either by averaging or by a soft-label Dawid-Skene EM. During
//! training the fused posteriors are used to split a noisy training set by
//! entropy into a trusted labeled part and a suspect unlabeled part, and the
//! probes are retrained with a MixMatch-style semi-supervised objective.
//!
//! The crate is organised bottom-up:
//!
//! * [`feature_bank`]: the `FBNK1` container holding per-tap features.
//! * [`probes`]: affine + softmax probes and their supervised trainer.
//! * [`aggregation`]: averaging, Dawid-Skene EM and entropy.
//! * [`noise_split`]: entropy-ranked labeled/unlabeled partition.
//! * [`semisup`]: MixMatch-style retraining of a probe.
//! * [`pipeline`]: the full warm-up / split / retrain loop and inference.
//! * [`synth`]: synthetic multi-domain banks, label noise and crowd instances.

pub mod aggregation;
pub mod error;
pub mod feature_bank;
pub mod noise_split;
pub mod pipeline;
pub mod posteriors;
pub mod probes;
pub mod rng;
pub mod semisup;
pub mod synth;

pub use aggregation::{
    avg_aggregate, ds_aggregate, ds_loglikelihood, entropy_of, expected_complete_loglik,
    majority_vote, AggregateResult, AnnotationTensor, ConfusionMatrix, DsConfig,
};
pub use error::{Result, SeplError};
pub use feature_bank::{read_bank, slice_rows, write_bank, BankManifest, FeatureBank, TapPoint};
pub use noise_split::{split_by_entropy, SplitAssignment, SplitConfig};
pub use pipeline::{
    evaluate, infer, run_pipeline, AggStrategy, MetricsReport, PipelineConfig, PipelineState,
    RoundSummary,
};
pub use probes::{
    ce_loss_and_grad, predict_all, probe_forward, train_probe, ProbeEnsemble, ProbeModel,
    Standardizer, TrainConfig,
};
pub use semisup::{
    feature_augment, guess_labels, mixup_pair, semisup_train_probe, sharpen, MixMatchConfig,
};
pub use synth::{gen_crowd_instance, gen_domains, inject_noise, CrowdInstance, NoiseConfig, SynthConfig, SynthData};

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
