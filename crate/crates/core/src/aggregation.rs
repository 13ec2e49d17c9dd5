//! Fusing annotator predictions: averaging and soft-label Dawid-Skene EM.
//!
//! Each annotator `j` is modelled by a row-stochastic confusion matrix
//! `pi_j(c, c')`, the probability of emitting `c'` when the truth is `c`.
//! Soft annotations enter the likelihood as exponents, so an annotation vector
//! `a` contributes `prod_c' pi_j(c, c')^a_c'` to class `c`.
//!
//! Every EM iteration first re-estimates all confusion matrices from the
//! current posteriors, then recomputes the posteriors from the new matrices
//! (in log space). The loop stops once no confusion entry moves by more than
//! `pi_tol`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::argmax;
use crate::error::{invalid, Result, SeplError};

/// Floor applied to confusion entries before taking logarithms.
pub const EPS_PI: f64 = 1e-12;
const SLICE_SUM_TOL: f64 = 1e-5;

/// `N x K x C` soft predictions, one probability vector per (sample, annotator).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTensor {
    values: Array3<f64>,
}

impl AnnotationTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (n, k, c) = values.dim();
        if n == 0 || k == 0 || c == 0 {
            return Err(invalid!("annotation tensor must be non-empty, got {n}x{k}x{c}"));
        }
        for ((i, j, cc), &v) in values.indexed_iter() {
            if !v.is_finite() || !(-1e-12..=1.0 + 1e-9).contains(&v) {
                return Err(invalid!("annotation [{i},{j},{cc}] = {v} is not a probability"));
            }
        }
        for i in 0..n {
            for j in 0..k {
                let sum = values.slice(s![i, j, ..]).sum();
                if (sum - 1.0).abs() > SLICE_SUM_TOL {
                    return Err(invalid!("annotation slice [{i},{j},:] sums to {sum}"));
                }
            }
        }
        Ok(AnnotationTensor { values })
    }

    /// Stacks `K` row-stochastic `N x C` matrices.
    pub fn from_annotators(annotators: &[Array2<f64>]) -> Result<Self> {
        let first = annotators.first().ok_or_else(|| invalid!("no annotators"))?;
        let (n, c) = first.dim();
        let mut values = Array3::zeros((n, annotators.len(), c));
        for (j, a) in annotators.iter().enumerate() {
            if a.dim() != (n, c) {
                return Err(invalid!("annotator {j} is {:?}, expected {:?}", a.dim(), (n, c)));
            }
            values.slice_mut(s![.., j, ..]).assign(a);
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_annotators(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_classes(&self) -> usize {
        self.values.dim().2
    }

    /// `N x C` predictions of one annotator.
    pub fn annotator(&self, j: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![.., j, ..])
    }

    /// Replaces every annotation by the one-hot of its argmax (ties to the
    /// lowest class index).
    pub fn harden(&self) -> AnnotationTensor {
        let mut values = Array3::zeros(self.values.raw_dim());
        for i in 0..self.n_samples() {
            for j in 0..self.n_annotators() {
                let c = argmax(self.values.slice(s![i, j, ..]));
                values[[i, j, c]] = 1.0;
            }
        }
        AnnotationTensor { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub values: Array2<f64>,
    pub annotator_index: usize,
}

impl ConfusionMatrix {
    pub fn uniform(n_classes: usize, annotator_index: usize) -> Self {
        ConfusionMatrix {
            values: Array2::from_elem((n_classes, n_classes), 1.0 / n_classes as f64),
            annotator_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsConfig {
    pub maxiter: usize,
    /// Convergence threshold on the largest absolute change of any confusion entry.
    pub pi_tol: f64,
    /// HardDS: harden annotations to one-hot before running EM.
    pub hard_inputs: bool,
    /// Additive smoothing in the confusion update (`C * eps` in the denominator).
    pub epsilon_smooth: f64,
}

impl Default for DsConfig {
    fn default() -> Self {
        DsConfig { maxiter: 100, pi_tol: 1e-6, hard_inputs: false, epsilon_smooth: 1e-6 }
    }
}

impl DsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.maxiter < 1 {
            return Err(invalid!("ds maxiter must be >= 1"));
        }
        if !(self.pi_tol > 0.0) {
            return Err(invalid!("ds pi_tol must be > 0"));
        }
        if !(self.epsilon_smooth >= 0.0) {
            return Err(invalid!("ds epsilon_smooth must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    /// `N x C` estimated true-label distributions.
    pub posteriors: Array2<f64>,
    pub confusions: Vec<ConfusionMatrix>,
    pub n_iters: usize,
    pub final_loglik: f64,
    pub converged: bool,
    /// Objective after every completed iteration.
    pub loglik_trace: Vec<f64>,
}

impl AggregateResult {
    /// JSON summary; posteriors can be left out for large N.
    pub fn to_json(&self, include_posteriors: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "n_iters": self.n_iters,
            "final_loglik": self.final_loglik,
            "converged": self.converged,
            "loglik_trace": self.loglik_trace,
            "confusions": self.confusions.iter().map(|cm| serde_json::json!({
                "annotator_index": cm.annotator_index,
                "values": cm.values.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        });
        if include_posteriors {
            v["posteriors"] = serde_json::json!(self
                .posteriors
                .outer_iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>());
        }
        v
    }
}

/// Mean of the annotators' predictions for every sample.
pub fn avg_aggregate(ann: &AnnotationTensor) -> Array2<f64> {
    ann.values.mean_axis(Axis(1)).expect("K >= 1")
}

/// Majority vote over annotator argmaxes; ties go to the lowest class index.
pub fn majority_vote(ann: &AnnotationTensor) -> Vec<usize> {
    let c = ann.n_classes();
    (0..ann.n_samples())
        .map(|i| {
            let mut votes = Array1::<f64>::zeros(c);
            for j in 0..ann.n_annotators() {
                votes[argmax(ann.values.slice(s![i, j, ..]))] += 1.0;
            }
            argmax(votes.view())
        })
        .collect()
}

/// `score[i, c] = ln prior_c + sum_j sum_c' ann[i,j,c'] ln pi_j(c, c')`.
fn class_scores(ann: &AnnotationTensor, confusions: &[ConfusionMatrix], prior: ArrayView1<'_, f64>) -> Array2<f64> {
    let n = ann.n_samples();
    let mut scores = Array2::zeros((n, ann.n_classes()));
    scores += &prior.mapv(|p| p.max(EPS_PI).ln());
    for (j, cm) in confusions.iter().enumerate() {
        let log_pi = cm.values.mapv(|v| v.max(EPS_PI).ln());
        scores += &ann.annotator(j).dot(&log_pi.t());
    }
    scores
}

/// Expected complete-data log-likelihood
/// `sum_i sum_c post[i,c] (ln prior_c + sum_j sum_c' ann[i,j,c'] ln pi_j(c,c'))`.
pub fn expected_complete_loglik(
    ann: &AnnotationTensor,
    posteriors: ArrayView2<'_, f64>,
    confusions: &[ConfusionMatrix],
    prior: ArrayView1<'_, f64>,
) -> f64 {
    (&class_scores(ann, confusions, prior) * &posteriors).sum()
}

/// Objective that EM ascends: the expected complete-data log-likelihood plus
/// the entropy of the posteriors plus the log-density of the symmetric
/// Dirichlet prior implied by `smoothing`. When `posteriors` are the exact
/// E-step output for `confusions`, the first two terms equal the marginal
/// log-likelihood `sum_i ln sum_c prior_c prod_j prod_c' pi_j(c,c')^ann`.
pub fn ds_loglikelihood(
    ann: &AnnotationTensor,
    posteriors: ArrayView2<'_, f64>,
    confusions: &[ConfusionMatrix],
    prior: ArrayView1<'_, f64>,
    smoothing: f64,
) -> f64 {
    let expected = expected_complete_loglik(ann, posteriors, confusions, prior);
    let entropy: f64 = entropy_of(posteriors).sum();
    let penalty: f64 = if smoothing > 0.0 {
        smoothing * confusions.iter().flat_map(|cm| cm.values.iter()).map(|v| v.max(EPS_PI).ln()).sum::<f64>()
    } else {
        0.0
    };
    expected + entropy + penalty
}

/// Shannon entropy (natural log) of each row, with `0 ln 0 = 0`.
pub fn entropy_of(posteriors: ArrayView2<'_, f64>) -> Array1<f64> {
    posteriors
        .outer_iter()
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>().max(0.0))
        .collect()
}

fn m_step(ann: &AnnotationTensor, posteriors: &Array2<f64>, eps: f64) -> Vec<ConfusionMatrix> {
    let c = ann.n_classes();
    let mass = posteriors.sum_axis(Axis(0));
    (0..ann.n_annotators())
        .map(|j| {
            let counts = posteriors.t().dot(&ann.annotator(j));
            let mut values = Array2::zeros((c, c));
            for (cls, mut row) in values.outer_iter_mut().enumerate() {
                let denom = mass[cls] + c as f64 * eps;
                if denom > 0.0 {
                    row.assign(&counts.row(cls).mapv(|v| (v + eps) / denom));
                } else {
                    row.fill(1.0 / c as f64);
                }
                let total = row.sum();
                row /= total;
                if row.iter().any(|&v| v < EPS_PI) {
                    row.mapv_inplace(|v| v.max(EPS_PI));
                    let total = row.sum();
                    row /= total;
                }
            }
            ConfusionMatrix { values, annotator_index: j }
        })
        .collect()
}

fn e_step(ann: &AnnotationTensor, confusions: &[ConfusionMatrix], prior: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut post = class_scores(ann, confusions, prior);
    for mut row in post.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    post
}

/// Soft-label Dawid-Skene EM (HardDS when `cfg.hard_inputs`).
pub fn ds_aggregate(ann: &AnnotationTensor, cfg: &DsConfig) -> Result<AggregateResult> {
    cfg.validate()?;
    let hardened;
    let ann = if cfg.hard_inputs {
        hardened = ann.harden();
        &hardened
    } else {
        ann
    };
    let c = ann.n_classes();
    let prior = Array1::from_elem(c, 1.0 / c as f64);

    let mut posteriors = avg_aggregate(ann);
    let mut confusions: Vec<ConfusionMatrix> =
        (0..ann.n_annotators()).map(|j| ConfusionMatrix::uniform(c, j)).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut n_iters = 0;

    for iter in 0..cfg.maxiter {
        let updated = m_step(ann, &posteriors, cfg.epsilon_smooth);
        let delta = updated
            .iter()
            .zip(&confusions)
            .flat_map(|(a, b)| a.values.iter().zip(b.values.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0f64, f64::max);
        confusions = updated;
        posteriors = e_step(ann, &confusions, prior.view());
        if posteriors.iter().any(|v| !v.is_finite()) || !delta.is_finite() {
            return Err(SeplError::Numerical(format!("Dawid-Skene produced NaN at iteration {iter}")));
        }
        debug_assert!(posteriors.outer_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
        trace.push(ds_loglikelihood(ann, posteriors.view(), &confusions, prior.view(), cfg.epsilon_smooth));
        n_iters = iter + 1;
        if delta < cfg.pi_tol {
            converged = true;
            break;
        }
    }

    Ok(AggregateResult {
        posteriors,
        confusions,
        n_iters,
        final_loglik: *trace.last().expect("maxiter >= 1"),
        converged,
        loglik_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hard(labels: &[&[usize]], c: usize) -> AnnotationTensor {
        // labels[j][i]
        let n = labels[0].len();
        let mut v = Array3::zeros((n, labels.len(), c));
        for (j, ls) in labels.iter().enumerate() {
            for (i, &l) in ls.iter().enumerate() {
                v[[i, j, l]] = 1.0;
            }
        }
        AnnotationTensor::new(v).unwrap()
    }

    fn random_soft(rng: &mut ChaCha8Rng, n: usize, k: usize, c: usize) -> AnnotationTensor {
        let mut v = Array3::from_shape_fn((n, k, c), |_| rng.random::<f64>().powi(3) + 1e-3);
        for i in 0..n {
            for j in 0..k {
                let s = v.slice(s![i, j, ..]).sum();
                v.slice_mut(s![i, j, ..]).mapv_inplace(|x| x / s);
            }
        }
        AnnotationTensor::new(v).unwrap()
    }

    #[test]
    fn average_examples() {
        let ann = AnnotationTensor::from_annotators(&[array![[0.8, 0.2]], array![[0.4, 0.6]]]).unwrap();
        let p = avg_aggregate(&ann);
        assert!((p[[0, 0]] - 0.6).abs() < 1e-12 && (p[[0, 1]] - 0.4).abs() < 1e-12);

        let a = array![[0.1, 0.9], [0.7, 0.3]];
        let same = AnnotationTensor::from_annotators(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(avg_aggregate(&same).abs_diff_eq(&a, 1e-15));
        let single = AnnotationTensor::from_annotators(&[a.clone()]).unwrap();
        assert_eq!(avg_aggregate(&single), a);
    }

    #[test]
    fn rejects_invalid_tensors() {
        assert!(AnnotationTensor::from_annotators(&[array![[0.5, 0.4]]]).is_err());
        assert!(AnnotationTensor::from_annotators(&[array![[f64::NAN, 1.0]]]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h = entropy_of(array![[1.0, 0.0, 0.0]].view());
        assert_eq!(h[0], 0.0);
        let u = entropy_of(array![[0.25, 0.25, 0.25, 0.25]].view());
        assert!((u[0] - 4f64.ln()).abs() < 1e-12);
        let b = entropy_of(array![[0.8, 0.2]].view());
        let expected = -0.8 * 0.8f64.ln() - 0.2 * 0.2f64.ln();
        assert!((b[0] - expected).abs() < 1e-15);
        assert!((b[0] - 0.5004).abs() < 1e-4);
    }

    #[test]
    fn loglik_single_term() {
        let ann = hard(&[&[0]], 2);
        let cm = ConfusionMatrix { values: array![[1.0 - EPS_PI, EPS_PI], [EPS_PI, 1.0 - EPS_PI]], annotator_index: 0 };
        let prior = array![0.5, 0.5];
        let post = array![[1.0, 0.0]];
        let expected = 0.5f64.ln() + (1.0 - EPS_PI).ln();
        let v = expected_complete_loglik(&ann, post.view(), &[cm.clone()], prior.view());
        assert!((v - expected).abs() < 1e-15);
        let v = ds_loglikelihood(&ann, post.view(), &[cm], prior.view(), 0.0);
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn loglik_uniform_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, k, c) = (6usize, 3usize, 4usize);
        let ann = random_soft(&mut rng, n, k, c);
        let post = Array2::from_elem((n, c), 1.0 / c as f64);
        let cms: Vec<_> = (0..k).map(|j| ConfusionMatrix::uniform(c, j)).collect();
        let prior = Array1::from_elem(c, 1.0 / c as f64);
        let l = (1.0 / c as f64).ln();
        let v = expected_complete_loglik(&ann, post.view(), &cms, prior.view());
        assert!((v - n as f64 * (l + k as f64 * l)).abs() < 1e-12);
        // the posterior entropy (ln C per sample) cancels the prior term
        let v = ds_loglikelihood(&ann, post.view(), &cms, prior.view(), 0.0);
        assert!((v - n as f64 * k as f64 * l).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_direct_product() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let (n, k, c) = (3, 2, 3);
            let ann = random_soft(&mut rng, n, k, c);
            let mut post = Array2::from_shape_fn((n, c), |_| rng.random::<f64>() + 0.05);
            for mut r in post.outer_iter_mut() {
                let s = r.sum();
                r /= s;
            }
            let cms: Vec<_> = (0..k)
                .map(|j| {
                    let mut m = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() + 0.05);
                    for mut r in m.outer_iter_mut() {
                        let s = r.sum();
                        r /= s;
                    }
                    ConfusionMatrix { values: m, annotator_index: j }
                })
                .collect();
            let prior = Array1::from_elem(c, 1.0 / c as f64);
            let smoothing = 0.01;
            // direct product of all factors, logged once at the end
            let mut prod = 1.0f64;
            for i in 0..n {
                for cl in 0..c {
                    let mut term = prior[cl];
                    for j in 0..k {
                        for c2 in 0..c {
                            term *= cms[j].values[[cl, c2]].powf(ann.values[[i, j, c2]]);
                        }
                    }
                    prod *= (term / post[[i, cl]]).powf(post[[i, cl]]);
                }
            }
            for cm in &cms {
                for v in cm.values.iter() {
                    prod *= v.powf(smoothing);
                }
            }
            let v = ds_loglikelihood(&ann, post.view(), &cms, prior.view(), smoothing);
            assert!((v - prod.ln()).abs() < 1e-9, "seed {seed}: {v} vs {}", prod.ln());
        }
    }

    #[test]
    fn one_iteration_hand_oracle() {
        let ann = hard(&[&[0, 0, 1], &[0, 1, 1]], 2);
        let cfg = DsConfig { maxiter: 1, epsilon_smooth: 0.0, ..DsConfig::default() };
        let r = ds_aggregate(&ann, &cfg).unwrap();
        assert_eq!(r.n_iters, 1);
        let pi1 = array![[1.0, 0.0], [1.0 / 3.0, 2.0 / 3.0]];
        let pi2 = array![[2.0 / 3.0, 1.0 / 3.0], [0.0, 1.0]];
        assert!(r.confusions[0].values.abs_diff_eq(&pi1, 1e-9));
        assert!(r.confusions[1].values.abs_diff_eq(&pi2, 1e-9));
        let post = array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        assert!(r.posteriors.abs_diff_eq(&post, 1e-9));
    }

    #[test]
    fn unanimous_annotators_fixed_point() {
        let labels: &[usize] = &[0, 1, 2, 1, 0, 2, 2];
        let ann = hard(&[labels, labels, labels], 3);
        let r = ds_aggregate(&ann, &DsConfig::default()).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert!((r.posteriors[[i, l]] - 1.0).abs() < 1e-6);
        }
        for cm in &r.confusions {
            for c in 0..3 {
                assert!((cm.values[[c, c]] - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn hardening_is_identity_on_one_hot() {
        let ann = hard(&[&[0, 2, 1, 1], &[0, 2, 2, 1], &[1, 2, 1, 0]], 3);
        let soft = ds_aggregate(&ann, &DsConfig::default()).unwrap();
        let hard = ds_aggregate(&ann, &DsConfig { hard_inputs: true, ..DsConfig::default() }).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn harden_ties_to_lowest_index() {
        let ann = AnnotationTensor::from_annotators(&[array![[0.4, 0.4, 0.2]]]).unwrap();
        assert_eq!(ann.harden().values().slice(s![0, 0, ..]).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn class_with_no_mass_is_smoothed_not_an_error() {
        // class 2 never appears anywhere
        let ann = hard(&[&[0, 1, 0], &[0, 1, 1]], 3);
        let r = ds_aggregate(&ann, &DsConfig::default()).unwrap();
        for cm in &r.confusions {
            for row in cm.values.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= EPS_PI * (1.0 - 1e-9)));
            }
        }
        let r0 = ds_aggregate(&ann, &DsConfig { epsilon_smooth: 0.0, ..DsConfig::default() }).unwrap();
        assert!(r0.posteriors.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_annotator_keeps_argmax() {
        let a = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.6, 0.3, 0.1]];
        let ann = AnnotationTensor::from_annotators(&[a.clone()]).unwrap();
        let r = ds_aggregate(&ann, &DsConfig::default()).unwrap();
        for i in 0..a.nrows() {
            assert_eq!(argmax(r.posteriors.row(i)), argmax(a.row(i)));
        }
    }

    #[test]
    fn majority_vote_ties_low() {
        let ann = hard(&[&[0, 2], &[1, 2], &[1, 0]], 3);
        assert_eq!(majority_vote(&ann), vec![1, 2]);
        let tie = hard(&[&[2], &[1]], 3);
        assert_eq!(majority_vote(&tie), vec![1]);
    }

    fn arb_instance() -> impl Strategy<Value = (u64, usize, usize, usize, bool)> {
        (any::<u64>(), 2usize..=30, 1usize..=5, 2usize..=4, any::<bool>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn em_objective_non_decreasing((seed, n, k, c, make_hard) in arb_instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ann = random_soft(&mut rng, n, k, c);
            if make_hard { ann = ann.harden(); }
            let r = ds_aggregate(&ann, &DsConfig::default()).unwrap();
            for w in r.loglik_trace.windows(2) {
                prop_assert!(w[1] - w[0] >= -1e-8, "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn annotator_permutation_equivariance((seed, n, k, c, _h) in arb_instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ann = random_soft(&mut rng, n, k, c);
            let perm: Vec<usize> = (0..k).rev().collect();
            let permuted = AnnotationTensor::new(ann.values().select(Axis(1), &perm)).unwrap();
            let a = ds_aggregate(&ann, &DsConfig::default()).unwrap();
            let b = ds_aggregate(&permuted, &DsConfig::default()).unwrap();
            prop_assert!(a.posteriors.abs_diff_eq(&b.posteriors, 1e-9));
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!(b.confusions[new].values.abs_diff_eq(&a.confusions[old].values, 1e-9));
            }
        }

        #[test]
        fn class_permutation_equivariance((seed, n, k, c, _h) in arb_instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ann = random_soft(&mut rng, n, k, c);
            let perm: Vec<usize> = (0..c).map(|x| (x + 1) % c).collect();
            let relabeled = AnnotationTensor::new(ann.values().select(Axis(2), &perm)).unwrap();
            let a = ds_aggregate(&ann, &DsConfig::default()).unwrap();
            let b = ds_aggregate(&relabeled, &DsConfig::default()).unwrap();
            prop_assert!(b.posteriors.abs_diff_eq(&a.posteriors.select(Axis(1), &perm), 1e-9));
            for j in 0..k {
                let expect = a.confusions[j].values.select(Axis(0), &perm).select(Axis(1), &perm);
                prop_assert!(b.confusions[j].values.abs_diff_eq(&expect, 1e-9));
            }
        }
    }
    #[test]
    fn soft_single_annotator_keeps_symmetric_argmax() {
        let (n, c) = (140, 7);
        let v = Array3::from_shape_fn((n, 1, c), |(i, _, k)| if i % c == k { 0.94 } else { 0.01 });
        let ann = AnnotationTensor::new(v).unwrap();
        let r = ds_aggregate(&ann, &DsConfig::default()).unwrap();
        let pi = &r.confusions[0].values;
        assert!((0..c).all(|k| crate::argmax(pi.row(k)) == k));
        assert!(r.posteriors.outer_iter().enumerate().all(|(i, row)| crate::argmax(row) == i % c));
    }
}
