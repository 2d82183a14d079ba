use avsc::audio::features::LmfbTensor;
use avsc::data::{Sample, SampleVideo};
use avsc::error::Error;
use avsc::image_ops::Image;
use avsc::models::*;
use avsc::nn::ParamStore;
use avsc::rng::rng_from;
use avsc::train::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const DIM: usize = 8;

fn tiny_fcnn() -> FcnnSpec {
    FcnnSpec::with_channels([4, 8, 16, 32])
}

fn file_spec() -> ModelSpec {
    ModelSpec::new(tiny_fcnn(), VideoSpec::FileBacked { dim: DIM })
}

fn cnn_spec() -> ModelSpec {
    ModelSpec::new(
        tiny_fcnn(),
        VideoSpec::TrainableCnn {
            dim: DIM,
            cnn: VideoCnnSpec { channels: vec![2, 3, 4], input_size: 16 },
        },
    )
}

/// Class-dependent features and embeddings: the class shifts a band of mel
/// bins and one embedding coordinate.
fn samples(per_class: usize, seed: u64) -> Vec<Sample> {
    let mut rng = rng_from(&[seed]);
    let noise = Normal::new(0.0f32, 0.3).unwrap();
    let mut out = Vec::new();
    for c in 0..N_CLASSES {
        for k in 0..per_class {
            let mut maps = vec![0.0f32; LmfbTensor::MAP_LEN * 6];
            for (i, v) in maps.iter_mut().enumerate() {
                let mel = i % 128;
                *v = noise.sample(&mut rng) + if mel / 12 == c { 1.0 } else { 0.0 };
            }
            let mut emb: Vec<f32> = (0..DIM).map(|_| noise.sample(&mut rng)).collect();
            emb[c % DIM] += 1.0;
            out.push(Sample {
                clip_id: format!("c{c}_{k}"),
                label: SceneLabel::new(c).unwrap(),
                features: LmfbTensor::from_maps(maps).unwrap(),
                video: SampleVideo::Embedding(emb),
            });
        }
    }
    out
}

fn with_frames(mut s: Vec<Sample>) -> Vec<Sample> {
    for (i, sample) in s.iter_mut().enumerate() {
        let shade = (i * 23 % 256) as u8;
        let img = Image::filled(16, 16, [shade, 255 - shade, 64]).unwrap();
        sample.video = SampleVideo::Frames(Box::new([img.clone(), img]));
    }
    s
}

fn quick_config() -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: 8, epochs: 1, seed: 3, ..TrainConfig::default() };
    cfg.adam.lr = 1e-3;
    cfg.model.fcnn = tiny_fcnn();
    cfg
}

fn trainable_values(p: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    p.entries().map(|(n, e)| (n.to_string(), e.value.data().to_vec())).collect()
}

fn all_state(p: &ParamStore<f32>) -> Vec<Vec<f32>> {
    let mut v: Vec<Vec<f32>> = trainable_values(p).into_iter().map(|(_, d)| d).collect();
    v.extend(p.buffers().map(|(_, t)| t.data().to_vec()));
    v
}

fn one_hot(c: usize) -> Vec<f64> {
    SceneLabel::new(c).unwrap().one_hot()
}

#[test]
fn fixed_ratio_mixup_of_one_hots() {
    let a = MixSample { audio: vec![2.0, -1.0], video: vec![10.0], target: one_hot(0) };
    let b = MixSample { audio: vec![4.0, 3.0], video: vec![0.0], target: one_hot(1) };
    let m = joint_mixup(&a, &b, 0.4).unwrap();
    assert_eq!(m.target[0], 0.4);
    assert_eq!(m.target[1], 0.6);
    assert!(m.target[2..].iter().all(|&v| v == 0.0));
    assert_eq!(m.target.iter().sum::<f64>(), 1.0);
    assert!((m.audio[0] - (0.4 * 2.0 + 0.6 * 4.0)).abs() < 1e-15);
    assert!((m.audio[1] - (0.4 * -1.0 + 0.6 * 3.0)).abs() < 1e-15);
    assert!((m.video[0] - 4.0).abs() < 1e-15);
}

#[test]
fn mixup_endpoints_return_an_input() {
    let a = MixSample { audio: vec![0.1, 0.7], video: vec![1.3], target: one_hot(2) };
    let b = MixSample { audio: vec![-5.0, 0.3], video: vec![0.9], target: one_hot(7) };
    assert_eq!(joint_mixup(&a, &b, 1.0).unwrap(), a);
    assert_eq!(joint_mixup(&a, &b, 0.0).unwrap(), b);
}

#[test]
fn mixup_rejects_bad_inputs() {
    let a = MixSample { audio: vec![0.0; 3], video: vec![0.0], target: one_hot(0) };
    let b = MixSample { audio: vec![0.0; 2], video: vec![0.0], target: one_hot(0) };
    assert!(matches!(joint_mixup(&a, &b, 0.5), Err(Error::Shape { .. })));
    assert!(joint_mixup(&a, &a, 1.5).is_err());
    assert!(joint_mixup(&a, &a, -0.1).is_err());
}

proptest! {
    #[test]
    fn mixup_is_symmetric(
        xs in proptest::collection::vec(-100.0f64..100.0, 6),
        ys in proptest::collection::vec(-100.0f64..100.0, 6),
        ci in 0usize..10, cj in 0usize..10,
        lambda in 0.0f64..=1.0,
    ) {
        let a = MixSample { audio: xs[..4].to_vec(), video: xs[4..].to_vec(), target: one_hot(ci) };
        let b = MixSample { audio: ys[..4].to_vec(), video: ys[4..].to_vec(), target: one_hot(cj) };
        let ab = joint_mixup(&a, &b, lambda).unwrap();
        let ba = joint_mixup(&b, &a, 1.0 - lambda).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!((ab.target.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        prop_assert!(ab.target.iter().all(|&t| (0.0..=1.0).contains(&t)));
    }

    #[test]
    fn mixed_inputs_stay_between_endpoints(
        x in -50.0f64..50.0, y in -50.0f64..50.0, lambda in 0.0f64..=1.0,
    ) {
        let a = MixSample { audio: vec![x], video: vec![], target: vec![] };
        let b = MixSample { audio: vec![y], video: vec![], target: vec![] };
        let m = joint_mixup(&a, &b, lambda).unwrap().audio[0];
        prop_assert!(m >= x.min(y) - 1e-12 && m <= x.max(y) + 1e-12);
    }
}

#[test]
fn pair_selection_rate_and_partners() {
    let cfg = MixupConfig::default();
    let mut rng = rng_from(&[11]);
    let (mut selected, mut total) = (0usize, 0usize);
    for _ in 0..2000 {
        let pairs = select_mixup_pairs(16, &cfg, &mut rng).unwrap();
        total += 16;
        selected += pairs.len();
        for p in pairs {
            assert_ne!(p.i, p.j);
            assert!(p.j < 16);
            assert_eq!(p.lambda, 0.4);
        }
    }
    let rate = selected as f64 / total as f64;
    // Binomial(32000, 0.2) has sd 0.0022.
    assert!((rate - 0.2).abs() < 0.01, "selection rate {rate}");
}

#[test]
fn pair_selection_extremes_and_beta_mode() {
    let mut rng = rng_from(&[12]);
    let none = MixupConfig { fraction: 0.0, ..MixupConfig::default() };
    assert!(select_mixup_pairs(8, &none, &mut rng).unwrap().is_empty());
    let all = MixupConfig { fraction: 1.0, ..MixupConfig::default() };
    let pairs = select_mixup_pairs(8, &all, &mut rng).unwrap();
    assert_eq!(pairs.iter().map(|p| p.i).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    assert!(select_mixup_pairs(1, &all, &mut rng).is_err());

    let beta = MixupConfig { fraction: 1.0, mode: MixupMode::BetaSampled, ..MixupConfig::default() };
    let lambdas: Vec<f64> = (0..500)
        .flat_map(|_| select_mixup_pairs(8, &beta, &mut rng).unwrap())
        .map(|p| p.lambda)
        .collect();
    assert!(lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
    let mean = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    // Beta(0.4, 0.4) is symmetric about 0.5 with variance 1/7.2.
    assert!((mean - 0.5).abs() < 0.03, "beta mean {mean}");
    let var = lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lambdas.len() as f64;
    assert!((var - 1.0 / 7.2).abs() < 0.02, "beta variance {var}");
}

#[test]
fn mixup_config_validation() {
    assert!(MixupConfig { alpha: 0.0, ..MixupConfig::default() }.validate().is_err());
    assert!(MixupConfig { alpha: 1.0, ..MixupConfig::default() }.validate().is_err());
    assert!(MixupConfig { fraction: 1.2, ..MixupConfig::default() }.validate().is_err());
    assert!(MixupConfig::default().validate().is_ok());
}

#[test]
fn train_config_toml() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.batch_size, cfg.adam.lr, cfg.adam.weight_decay), (32, 1e-5, 1e-5));
    assert_eq!((cfg.mixup.alpha, cfg.mixup.fraction), (0.4, 0.2));
    assert_eq!((cfg.augment.image.n_ops, cfg.augment.image.magnitude), (2, 14));
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    let partial = TrainConfig::from_toml("epochs = 3\n[mixup]\nfraction = 0.5\n").unwrap();
    assert_eq!((partial.epochs, partial.mixup.fraction, partial.batch_size), (3, 0.5, 32));

    let err = |text: &str| matches!(TrainConfig::from_toml(text), Err(Error::Config(_)));
    assert!(err("bogus = 1\n"));
    assert!(err("[mixup]\nalpha = 2.0\n"));
    assert!(err("batch_size = 1\n"));
    assert!(err("[adam]\nlr = -1.0\n"));
}

#[test]
fn log_header_echoes_settings() {
    let h = TrainConfig::default().log_header();
    for part in ["lr=1e-5", "wd=1e-5", "batch=32", "alpha=0.4", "mixup=20%", "N=2", "M=14"] {
        assert!(h.contains(part), "{h}");
    }
    let line = EpochLog {
        stats: EpochStats { epoch: 2, mean_loss: 0.5, train_accuracy: 0.75 },
        eval_accuracy: None,
        wall_seconds: 1.0,
    }
    .line();
    assert_eq!(line, "epoch=2 loss=0.500000 train_acc=0.7500 eval_acc=- wall_seconds=1.00");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let spec = file_spec();
    let mut cfg = quick_config();
    cfg.adam.lr = 0.0;
    cfg.adam.weight_decay = 0.0;
    let data = samples(2, 1);
    let mut params = init_model(&spec, &cfg).unwrap();
    let before = trainable_values(&params);
    let stats = train_epoch(&spec, &mut params, &data, &cfg, 0).unwrap();
    assert!(stats.mean_loss.is_finite() && stats.mean_loss > 0.0);
    assert_eq!(trainable_values(&params), before);
    let mean = params.buffer("audio.b0.l0.running_mean").unwrap();
    assert!(mean.data().iter().any(|&v| v != 0.0), "running stats should still move");
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = file_spec();
    let cfg = quick_config();
    let data = samples(2, 2);
    let run = |cfg: &TrainConfig| {
        let mut p = init_model(&spec, cfg).unwrap();
        let s = train_epoch(&spec, &mut p, &data, cfg, 0).unwrap();
        (s, all_state(&p))
    };
    let (s1, p1) = run(&cfg);
    let (s2, p2) = run(&cfg);
    assert_eq!(s1, s2);
    assert_eq!(p1, p2);
    let other = TrainConfig { seed: 4, ..cfg.clone() };
    assert_ne!(run(&other).1, p1);
}

#[test]
fn frozen_audio_extractor_is_bit_identical_after_training() {
    let spec = file_spec();
    let mut cfg = quick_config();
    cfg.freeze.audio = true;
    let data = samples(2, 3);
    let mut params = init_model(&spec, &cfg).unwrap();
    let snapshot = |p: &ParamStore<f32>| -> Vec<Vec<f32>> {
        let mut v: Vec<Vec<f32>> = p
            .entries()
            .filter(|(n, _)| n.starts_with("audio."))
            .map(|(_, e)| e.value.data().to_vec())
            .collect();
        v.extend(p.buffers().filter(|(n, _)| n.starts_with("audio.")).map(|(_, t)| t.data().to_vec()));
        v
    };
    let audio_before = snapshot(&params);
    let mlp_before = params.value("mlp.fc0.w").unwrap().clone();
    train_epoch(&spec, &mut params, &data, &cfg, 0).unwrap();
    assert_eq!(snapshot(&params), audio_before);
    assert_ne!(params.value("mlp.fc0.w").unwrap(), &mlp_before);
}

#[test]
fn trainable_video_path_trains_with_augmentation() {
    let spec = cnn_spec();
    let cfg = quick_config();
    let data = with_frames(samples(1, 4));
    let mut params = init_model(&spec, &cfg).unwrap();
    let before = params.value("video.proj.w").unwrap().clone();
    let stats = train_epoch(&spec, &mut params, &data, &cfg, 0).unwrap();
    assert!(stats.mean_loss.is_finite());
    assert_ne!(params.value("video.proj.w").unwrap(), &before);
    let report = evaluate(&spec, &params, &data).unwrap();
    assert_eq!(report.total(), data.len());
}

#[test]
fn non_finite_input_aborts_with_batch_index() {
    let spec = file_spec();
    let cfg = TrainConfig { batch_size: 32, ..quick_config() };
    let mut data = samples(1, 5);
    data[3].features.as_mut_slice()[0] = f32::NAN;
    let mut params = init_model(&spec, &cfg).unwrap();
    match train_epoch(&spec, &mut params, &data, &cfg, 0) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("batch 0"), "{msg}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}

#[test]
fn short_training_fits_separable_data() {
    let spec = file_spec();
    let mut cfg = quick_config();
    cfg.epochs = 15;
    cfg.adam.lr = 3e-3;
    let data = samples(3, 6);
    let mut params = init_model(&spec, &cfg).unwrap();
    let logs = fit(&spec, &mut params, &data, Some(&data), &cfg, |_, _| Ok(true)).unwrap();
    assert_eq!(logs.len(), 15);
    let first = logs[0].stats.mean_loss;
    let last = logs.last().unwrap().stats.mean_loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(logs.last().unwrap().eval_accuracy.unwrap() >= 0.9);
}

#[test]
fn fit_stops_when_callback_declines() {
    let spec = file_spec();
    let cfg = TrainConfig { epochs: 5, ..quick_config() };
    let data = samples(1, 7);
    let mut params = init_model(&spec, &cfg).unwrap();
    let logs = fit(&spec, &mut params, &data, None, &cfg, |l, _| Ok(l.stats.epoch < 1)).unwrap();
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.eval_accuracy.is_none()));
}

#[test]
fn eval_report_from_predictions() {
    let labels = [0, 0, 1, 1, 1, 2];
    let preds = [0, 1, 1, 1, 0, 2];
    let r = EvalReport::from_predictions(&labels, &preds).unwrap();
    assert_eq!(r.overall_accuracy, 4.0 / 6.0);
    assert_eq!(r.per_class_accuracy[0], 0.5);
    assert_eq!(r.per_class_accuracy[1], 2.0 / 3.0);
    assert_eq!(r.per_class_accuracy[2], 1.0);
    assert_eq!(r.per_class_accuracy[5], 0.0);
    assert_eq!(r.confusion[1][0], 1);
    assert_eq!(r.confusion[0][1], 1);
    assert_eq!(r.class_counts()[..3], [2, 3, 1]);
    let text = r.to_text();
    assert!(text.contains("overall"));
    assert!(text.lines().any(|l| l.starts_with("public square") && l.trim_end().ends_with('-')));
    assert!(EvalReport::from_predictions(&[], &[]).is_err());
}

#[test]
fn evaluate_is_batch_independent_and_rejects_empty() {
    let spec = file_spec();
    let cfg = quick_config();
    let data = samples(4, 8);
    let params = init_model(&spec, &cfg).unwrap();
    let full = predict(&spec, &params, &data, 40).unwrap();
    let small = predict(&spec, &params, &data, 3).unwrap();
    assert_eq!(full, small);
    assert!(evaluate(&spec, &params, &[]).is_err());
}

#[test]
fn untrained_model_is_near_chance() {
    let spec = file_spec();
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..quick_config() };
        let params = init_model(&spec, &cfg).unwrap();
        total += evaluate(&spec, &params, &samples(4, 100 + seed)).unwrap().overall_accuracy;
    }
    let mean = total / 5.0;
    assert!((mean - 0.1).abs() <= 0.05, "mean accuracy {mean}");
}

#[test]
fn argmax_ties() {
    assert_eq!(argmax(&[0.1f32, 0.3, 0.3]), 1);
    let mut rng = rng_from(&[0]);
    for _ in 0..100 {
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(0..3) as f64).collect();
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(argmax(&v), v.iter().position(|&x| x == m).unwrap());
    }
}
