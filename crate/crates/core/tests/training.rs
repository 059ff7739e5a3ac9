mod common;

use apivr::data::{generate_synthetic, Split, SyntheticConfig};
use apivr::losses::{self, Batch, LossSettings};
use apivr::model::{self, checkpoint, ParamGroup, Weighting};
use apivr::training::{
    self, discriminator_step, generator_step, grad_check_all, grad_check_batch, grad_check_with, train, BatchSampler,
    GradCheckOptions, LossKind, TrainConfig,
};
use apivr::Error;
use common::{rng, small_config, small_model, small_synthetic};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn settings() -> LossSettings {
    small_config(0).loss_settings()
}

#[test]
fn sampler_covers_a_dataset_of_exactly_n() {
    let pool: Vec<usize> = (10..20).collect();
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let mut s = BatchSampler::new(pool.clone(), labels.clone(), 10, rng(1)).unwrap();
    let first = s.next_indices().unwrap();
    let mut sorted = first.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, pool);
    assert_ne!(first, pool, "shuffled");

    let mut again = BatchSampler::new(pool, labels, 10, rng(1)).unwrap();
    assert_eq!(again.next_indices().unwrap(), first);
}

#[test]
fn sampler_is_without_replacement_within_an_epoch_and_clips_n() {
    let pool: Vec<usize> = (0..12).collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut s = BatchSampler::new(pool.clone(), labels.clone(), 4, rng(2)).unwrap();
    let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices().unwrap()).collect();
    seen.sort_unstable();
    assert_eq!(seen, pool);

    let clipped = BatchSampler::new(pool, labels, 64, rng(2)).unwrap();
    assert_eq!(clipped.batch_size(), 12);
}

#[test]
fn every_batch_has_two_labels() {
    let pool: Vec<usize> = (0..9).collect();
    let labels = vec![0, 0, 0, 0, 0, 0, 0, 1, 1];
    let mut s = BatchSampler::new(pool, labels.clone(), 3, rng(3)).unwrap();
    for _ in 0..1000 {
        let b = s.next_indices().unwrap();
        assert!(b.iter().any(|&i| labels[i] == 0) && b.iter().any(|&i| labels[i] == 1));
    }
    let mut mono = BatchSampler::new(vec![0, 1, 2], vec![4, 4, 4], 2, rng(3)).unwrap();
    assert!(matches!(mono.next_indices(), Err(Error::InsufficientDiversity { .. })));
}

#[test]
fn generator_step_leaves_the_discriminator_alone() {
    let ds = small_synthetic(1);
    let mut model = small_model(&ds, Weighting::Graph, 1);
    let batch = Batch::from_dataset(&ds, &[0, 8, 16, 3]).unwrap();
    let before = model.clone();
    let step = generator_step(&mut model, &batch, &settings(), 0.0).unwrap();
    assert_eq!(model, before);
    assert!(step.report.total.is_finite());

    generator_step(&mut model, &batch, &settings(), 1e-2).unwrap();
    assert_eq!(model.params.discriminator, before.params.discriminator);
    assert_ne!(model.params.projection, before.params.projection);
}

#[test]
fn discriminator_step_is_plain_descent_on_the_adversarial_loss() {
    let ds = small_synthetic(2);
    let mut model = small_model(&ds, Weighting::Graph, 2);
    let batch = Batch::from_dataset(&ds, &[0, 8, 16, 5]).unwrap();
    let before = model.clone();
    discriminator_step(&mut model, &batch, 0.0).unwrap();
    assert_eq!(model, before);

    let lr = 0.05;
    discriminator_step(&mut model, &batch, lr).unwrap();
    let (_, g) = losses::adversarial_loss(&batch, &before).unwrap();
    let mut expected = before.params.clone();
    expected.add_scaled(ParamGroup::Discriminator, -lr, &g);
    assert_eq!(model.params, expected);
    for group in ParamGroup::GENERATOR {
        assert_eq!(model.params.flatten(group), before.params.flatten(group));
    }
}

#[test]
fn discriminator_learns_separable_modalities() {
    let ds = small_synthetic(3);
    let mut model = small_model(&ds, Weighting::Graph, 3);
    // Push the two modalities apart in the first embedding coordinate.
    model.params.projection.video.layers[2].bias[0] = -1.5;
    model.params.projection.image.layers[2].bias[0] = 1.5;
    let indices: Vec<usize> = ds.indices(Split::Train);
    let batch = Batch::from_dataset(&ds, &indices).unwrap();
    let generator: Vec<Vec<f64>> = ParamGroup::GENERATOR.iter().map(|&g| model.params.flatten(g)).collect();
    let mut accuracy = 0.0;
    for _ in 0..400 {
        accuracy = discriminator_step(&mut model, &batch, 0.5).unwrap();
    }
    assert!(accuracy > 0.9, "{accuracy}");
    let after: Vec<Vec<f64>> = ParamGroup::GENERATOR.iter().map(|&g| model.params.flatten(g)).collect();
    assert_eq!(after, generator);
}

#[test]
fn small_generator_steps_descend() {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let config = TrainConfig::default();
    let s = config.loss_settings();
    let pool = ds.indices(Split::Train);
    let mut decreased = 0;
    for trial in 0..100u64 {
        let dims = model::ModelDims {
            video_hidden: [64, 32],
            image_hidden: [32, 24],
            r: 16,
            ..config.model_dims(&ds)
        };
        let mut model = model::init_params(&dims, Weighting::Graph, trial).unwrap();
        let mut sampler = BatchSampler::new(
            pool.clone(),
            pool.iter().map(|&i| ds.pairs[i].label).collect(),
            16,
            ChaCha8Rng::seed_from_u64(trial),
        )
        .unwrap();
        let batch = training::sample_batch(&ds, &mut sampler).unwrap();
        let before = generator_step(&mut model, &batch, &s, 1e-4).unwrap().report.total;
        let (after, _) = losses::total_loss(&batch, &model, &s).unwrap();
        if after.total < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "{decreased} of 100");
}

#[test]
fn zero_outer_iterations_return_the_initial_model() {
    let ds = small_synthetic(4);
    let config = TrainConfig {
        outer_iterations: 0,
        ..small_config(9)
    };
    let out = train(&ds, &config).unwrap();
    let init = model::init_params(&config.model_dims(&ds), Weighting::Graph, 9).unwrap();
    assert_eq!(out.model, init);
    assert!(out.log.records.is_empty());
}

#[test]
fn training_is_deterministic() {
    let ds = small_synthetic(5);
    let config = small_config(11);
    let a = train(&ds, &config).unwrap();
    let b = train(&ds, &config).unwrap();
    assert_eq!(checkpoint::to_bytes(&a.model), checkpoint::to_bytes(&b.model));
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.log.records.len(), 4);
    assert_eq!(a.seconds.len(), 4);
    let c = train(&ds, &small_config(12)).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn log_records_have_a_fixed_field_order() {
    let ds = small_synthetic(6);
    let out = train(&ds, &small_config(1)).unwrap();
    let line = out.log.to_jsonl().lines().next().unwrap().to_string();
    let order = ["\"iteration\"", "\"loss\"", "\"discriminator_accuracy\"", "\"weights\""];
    let positions: Vec<usize> = order.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    let inner = ["\"triplet\"", "\"classification\"", "\"adversarial\"", "\"total\""];
    let positions: Vec<usize> = inner.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    for r in &out.log.records {
        let l = r.loss;
        let s = small_config(1).loss_settings();
        assert!((l.total - (s.alpha * l.triplet + s.beta * l.classification - l.adversarial)).abs() <= 1e-12);
    }
}

#[test]
fn without_adversarial_term_the_discriminator_is_untouched() {
    let ds = small_synthetic(7);
    let mut config = small_config(2);
    config.ablations.wo_al = true;
    let out = train(&ds, &config).unwrap();
    let init = model::init_params(&config.model_dims(&ds), Weighting::Graph, 2).unwrap();
    assert_eq!(out.model.params.discriminator, init.params.discriminator);
    for r in &out.log.records {
        assert_eq!(r.loss.adversarial, 0.0);
        assert!(r.discriminator_accuracy.is_none());
    }
}

#[test]
fn every_ablation_trains() {
    let ds = small_synthetic(8);
    for name in apivr::losses::Ablations::NAMES {
        let mut config = small_config(3);
        config.ablations.set(name).unwrap();
        let out = train(&ds, &config).unwrap();
        assert_eq!(out.log.records.len(), 4, "{name}");
        assert_eq!(out.model.weighting, config.ablations.weighting());
    }
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let ds = small_synthetic(9);
    let too_wide = TrainConfig {
        truncation: 6,
        ..small_config(0)
    };
    let err = train(&ds, &too_wide).unwrap_err();
    assert!(matches!(err.error, Error::BadTruncation { b: 6, k: 5 }));
    assert!(err.model.is_none());

    let mut intact = too_wide.clone();
    intact.ablations.wo_gmil = true;
    assert!(train(&ds, &intact).is_ok());

    for bad in [
        TrainConfig { learning_rate: 0.0, ..small_config(0) },
        TrainConfig { generator_steps: 0, ..small_config(0) },
        TrainConfig { batch_size: 1, ..small_config(0) },
        TrainConfig { margin: f64::NAN, ..small_config(0) },
    ] {
        assert!(matches!(train(&ds, &bad).unwrap_err().error, Error::InvalidConfig(_)));
    }
}

#[test]
fn divergence_aborts_with_the_partial_log() {
    let ds = small_synthetic(10);
    let config = TrainConfig {
        learning_rate: 1e300,
        outer_iterations: 5,
        ..small_config(4)
    };
    let err = train(&ds, &config).unwrap_err();
    assert!(matches!(err.error, Error::NonFiniteLoss(_)), "{}", err.error);
    assert!(err.model.is_some());
    assert!(err.log.records.len() < 5);
}

#[test]
fn early_stop_ends_a_plateau() {
    let ds = small_synthetic(11);
    let config = TrainConfig {
        outer_iterations: 50,
        learning_rate: 1e-12,
        early_stop: Some(training::EarlyStop {
            patience: 2,
            min_delta: 1.0,
        }),
        ..small_config(5)
    };
    let out = train(&ds, &config).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.log.records.len(), 3);
}

#[test]
fn gradient_check_passes_for_every_variant() {
    let ds = small_synthetic(12);
    let batch = grad_check_batch(&ds, 6, 0).unwrap();
    assert!(batch.labels().iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
    let options = GradCheckOptions {
        coordinates: 0,
        ..GradCheckOptions::default()
    };
    let mut variants = vec![apivr::losses::Ablations::default()];
    for name in apivr::losses::Ablations::NAMES {
        let mut a = apivr::losses::Ablations::default();
        a.set(name).unwrap();
        variants.push(a);
    }
    for ablations in variants {
        let model = small_model(&ds, ablations.weighting(), 21);
        let s = LossSettings {
            ablations,
            ..settings()
        };
        let report = grad_check_all(&model, &batch, &s, &options).unwrap();
        assert_eq!(report.entries.len(), 16);
        assert!(report.passed(), "{ablations:?}: {:?}", report.failures().collect::<Vec<_>>());
        for e in &report.entries {
            let zero = e.group == ParamGroup::Discriminator && matches!(e.loss, LossKind::Triplet | LossKind::Classification);
            if zero {
                assert!(e.structural_zero && e.max_relative_error == 0.0);
            }
        }
    }
}

#[test]
fn gradient_check_detects_a_corrupted_gradient() {
    let ds = small_synthetic(13);
    let batch = grad_check_batch(&ds, 6, 0).unwrap();
    let model = small_model(&ds, Weighting::Graph, 22);
    let report = grad_check_with(&model, &batch, &settings(), &GradCheckOptions::default(), |loss, g| {
        if loss == LossKind::Triplet {
            g.attention.l2[0] += 0.5;
        }
    })
    .unwrap();
    assert!(!report.passed());
    let failures: Vec<_> = report.failures().map(|e| (e.loss, e.group)).collect();
    assert_eq!(failures, vec![(LossKind::Triplet, ParamGroup::Attention)]);
}

#[test]
fn attention_stats_count_bags_with_both_kinds() {
    let ds = small_synthetic(14);
    let model = small_model(&ds, Weighting::Uniform, 0);
    let stats = training::attention_stats(&model, &ds, Split::Test).unwrap().unwrap();
    assert_eq!(stats.bags, 12);
    assert!((stats.clean_mean - 0.2).abs() < 1e-15 && (stats.noisy_mean - 0.2).abs() < 1e-15);
    assert_eq!(stats.clean_above_noisy, 0.0);
}
