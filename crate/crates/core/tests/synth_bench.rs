use statrs::distribution::{ChiSquared, ContinuousCDF};

use sepl::probes::one_hot;
use sepl::{gen_domains, probe_forward, train_probe, SynthConfig, SynthData, TrainConfig};

/// Known-variance two-sample statistic summed over every class, tap and
/// dimension; chi-square with that many degrees of freedom under equal means.
fn mean_shift_statistic(data: &SynthData, cfg: &SynthConfig) -> (f64, usize) {
    let mut stat = 0.0;
    let mut df = 0;
    for t in 0..cfg.n_taps {
        let tr = data.train.tap_features(t).unwrap();
        let te = data.test.tap_features(t).unwrap();
        for c in 0..cfg.n_classes as u16 {
            let rows_tr: Vec<usize> = (0..tr.nrows()).filter(|&i| data.train_labels[i] == c).collect();
            let rows_te: Vec<usize> = (0..te.nrows()).filter(|&i| data.test_labels[i] == c).collect();
            let (n1, n2) = (rows_tr.len() as f64, rows_te.len() as f64);
            for d in 0..tr.ncols() {
                let m1 = rows_tr.iter().map(|&i| tr[[i, d]]).sum::<f64>() / n1;
                let m2 = rows_te.iter().map(|&i| te[[i, d]]).sum::<f64>() / n2;
                stat += (m1 - m2).powi(2) / (1.0 / n1 + 1.0 / n2);
                df += 1;
            }
        }
    }
    (stat, df)
}

#[test]
fn no_shift_means_pass_two_sample_test() {
    let cfg = SynthConfig { domain_shift_scale: 0.0, n_per_domain: 700, seed: 3, ..SynthConfig::default() };
    let data = gen_domains(&cfg).unwrap();
    let (stat, df) = mean_shift_statistic(&data, &cfg);
    let critical = ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "statistic {stat} over critical {critical} (df {df})");

    // the same test notices the default shift
    let shifted = SynthConfig { domain_shift_scale: 1.0, ..cfg.clone() };
    let (stat, _) = mean_shift_statistic(&gen_domains(&shifted).unwrap(), &shifted);
    assert!(stat > critical);
}

#[test]
fn no_signal_gives_chance_accuracy() {
    let cfg = SynthConfig { tap_signal: vec![0.0; 4], seed: 4, ..SynthConfig::default() };
    let data = gen_domains(&cfg).unwrap();
    let targets = one_hot(&data.train_labels, 7);
    let n = data.test_labels.len() as f64;
    let p = 1.0 / 7.0;
    let se = (p * (1.0 - p) / n).sqrt();
    for t in 0..4 {
        let model = train_probe(&data.train, t, targets.view(), &TrainConfig::default()).unwrap();
        let post = probe_forward(&model, data.test.tap_features(t).unwrap().view()).unwrap();
        let hits = post.outer_iter().zip(&data.test_labels).filter(|(r, &l)| sepl::argmax(r.view()) == l as usize).count();
        let acc = hits as f64 / n;
        assert!((acc - p).abs() < 3.0 * se, "tap {t}: accuracy {acc}");
    }
}

#[test]
fn retrained_final_probe_fits_less_noise_than_supervised() {
    let base: sepl::PipelineConfig = serde_json::from_str(include_str!("../../../configs/synth_bench.json")).unwrap();
    let (mut semi, mut sup) = (0.0, 0.0);
    for seed in 0..5 {
        let data = gen_domains(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let (noisy, mask) = sepl::inject_noise(&data.train_labels, 7, &sepl::NoiseConfig { rate: 0.25, seed }).unwrap();
        let mut train = data.train.clone();
        train.labels = Some(noisy.clone());
        let cfg = sepl::PipelineConfig { seed, ..base.clone() };
        let state = sepl::run_pipeline(&train, &cfg).unwrap();
        let x = train.tap_features(3).unwrap();
        let fit = |m: &sepl::ProbeModel| {
            let p = probe_forward(m, x.view()).unwrap();
            sepl::evaluate(p.view(), &data.train_labels, Some(&noisy), Some(&mask), None).unwrap().noise_fit_accuracy.unwrap()
        };
        let final_probe = state.ensemble.probes.iter().find(|p| p.tap_index == 3).unwrap();
        let supervised = train_probe(&train, 3, one_hot(&noisy, 7).view(), &cfg.warmup_train_config(3)).unwrap();
        semi += fit(final_probe) / 5.0;
        sup += fit(&supervised) / 5.0;
    }
    assert!(semi < sup, "semi-supervised {semi} vs supervised {sup}");
}
