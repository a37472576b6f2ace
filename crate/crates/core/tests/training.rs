mod common;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snrlab::diffusion::{direct_loss, dm_loss, importance_weighted_loss, NoisyBatch};
use snrlab::experiments::tail_mean;
use snrlab::lora::TargetSet;
use snrlab::net::{Architecture, Cond, DenoiserParams, GradRequest, Model};
use snrlab::params::{AdamState, ParamSet};
use snrlab::samplers::{NoiseLevel, SnrSampler};
use snrlab::styledata::{default_contents, default_styles, render, Canvas, DataPoint, StyleCorpus};
use snrlab::train::{self, accumulate_step, LoraConfig, TrainConfig};

fn tiny_toy() -> Architecture {
    Architecture {
        hidden_widths: vec![64, 64],
        ..Architecture::toy(4, 6)
    }
}

#[test]
fn zero_output_net_loss_is_target_mean_square() {
    let arch = common::small_arch();
    let p = DenoiserParams::zeros(&arch).unwrap();
    let (b, c) = common::batch(&arch, 5, 1);
    let m = b.target_v.iter().map(|v| v * v).sum::<f64>() / b.target_v.len() as f64;
    let out = dm_loss(Model::base(&p), &b, &c, GradRequest::NONE).unwrap();
    assert!((out.loss - m).abs() < 1e-12 * m);

    // eps = x0 makes the zero net a perfect predictor
    let x0 = b.x0.clone();
    let levels: Vec<NoiseLevel> = b.t.iter().zip(&b.lambda).map(|(&t, &lambda)| NoiseLevel { lambda, t }).collect();
    let perfect = NoisyBatch::new(x0.clone(), x0, &levels).unwrap();
    assert_eq!(dm_loss(Model::base(&p), &perfect, &c, GradRequest::NONE).unwrap().loss, 0.0);
}

#[test]
fn importance_weighting_recovers_sampler_mass() {
    // zero net and x0 = 0: the squared error is the mean of eps^2, about 1
    let arch = Architecture {
        channels: 1,
        height: 16,
        width: 16,
        ..common::small_arch()
    };
    let p = DenoiserParams::zeros(&arch).unwrap();
    let x0 = Array1::zeros(arch.input_dim());
    let s = SnrSampler::style_friendly_default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let iw = importance_weighted_loss(Model::base(&p), x0.view(), Cond::NULL, &s, &mut rng, 20_000, -20.0, 20.0).unwrap();
    assert!((iw.mean - 1.0).abs() < 3.0 * iw.sem + 1e-3, "{iw:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let again = importance_weighted_loss(Model::base(&p), x0.view(), Cond::NULL, &s, &mut rng, 1, -20.0, 20.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(again, importance_weighted_loss(Model::base(&p), x0.view(), Cond::NULL, &s, &mut rng, 1, -20.0, 20.0).unwrap());
    assert!(importance_weighted_loss(Model::base(&p), x0.view(), Cond::NULL, &s, &mut rng, 10, 1.0, 1.0).is_err());
}

#[test]
fn direct_and_weighted_estimates_agree_on_a_small_net() {
    let p = common::params(4);
    let x0 = Array1::from_shape_fn(p.arch.input_dim(), |i| ((i * 7 % 5) as f64 - 2.0) / 2.0);
    let c = Cond::new(1, 0);
    for s in [SnrSampler::sd3_default(), SnrSampler::style_friendly_default(), SnrSampler::uniform_time()] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = direct_loss(Model::base(&p), x0.view(), c, &s, &mut rng, 20_000, -20.0, 20.0).unwrap();
        let w = importance_weighted_loss(Model::base(&p), x0.view(), c, &s, &mut rng, 20_000, -20.0, 20.0).unwrap();
        assert!(d.z_score(&w) < 3.0, "{s:?}: {d:?} vs {w:?}");
    }
}

#[test]
fn noise_distance_grows_with_t() {
    let arch = common::small_arch();
    let (b, _) = common::batch(&arch, 1, 0);
    let x0 = b.x0.row(0).to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut last = 0.0;
    for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let n = 10_000;
        let eps = snrlab::diffusion::sample_noise(&mut rng, n, 3, 4, Default::default());
        let mean: f64 = eps
            .rows()
            .into_iter()
            .map(|e| {
                let xt = snrlab::diffusion::forward_diffuse(x0.view(), e, t).unwrap();
                (&xt - &x0).mapv(|v| v * v).sum().sqrt()
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean >= last, "t={t}: {mean} < {last}");
        last = mean;
    }
}

#[test]
fn single_image_overfits() {
    // the canvas must fit through the hidden width for the net to carry the
    // noise to its output
    let canvas = Canvas { channels: 3, height: 4, width: 4 };
    let arch = Architecture {
        height: 4,
        width: 4,
        ..Architecture::toy(4, 6)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = DataPoint {
        x0: render(&default_contents()[0], &default_styles()[0], &canvas, &mut rng),
        content_id: 0,
        style_id: Some(0),
    };
    let cfg = TrainConfig {
        steps: 2000,
        lr: 1e-3,
        batch_size: 32,
        grad_accum: 1,
        p_drop: 0.0,
        ..Default::default()
    };
    let out = train::pretrain(std::slice::from_ref(&img), &arch, &cfg).unwrap();
    assert_eq!(out.trace.len(), 2000);
    let first = out.trace[..20].iter().sum::<f64>() / 20.0;
    let last = tail_mean(&out.trace, 20);
    assert!(last < 0.1 * first, "first {first}, last {last}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = StyleCorpus::pretraining(1, 2).unwrap().images;
    let cfg = TrainConfig {
        steps: 15,
        lr: 1e-3,
        batch_size: 3,
        grad_accum: 2,
        p_drop_style: 0.2,
        seed: 9,
        ..Default::default()
    };
    let a = train::pretrain(&data, &tiny_toy(), &cfg).unwrap();
    let b = train::pretrain(&data, &tiny_toy(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
    let c = train::pretrain(&data, &tiny_toy(), &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn finetuning_freezes_the_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = DenoiserParams::init(&tiny_toy(), &mut rng).unwrap();
    let snapshot = base.clone();
    let refs: Vec<DataPoint> = StyleCorpus::reference(5, 1, 0).unwrap().images;
    for targets in [TargetSet::All, TargetSet::ImageOnly, TargetSet::ConditionOnly] {
        let cfg = TrainConfig {
            steps: 20,
            lr: 1e-3,
            lora: Some(LoraConfig {
                targets,
                ..LoraConfig::with_rank(4)
            }),
            ..TrainConfig::finetune(SnrSampler::style_friendly_default())
        };
        let out = train::finetune(&base, &refs, &cfg).unwrap();
        assert!(out.params.num_parameters() > 0);
        assert_eq!(base, snapshot);
    }
}

#[test]
fn accumulation_order_is_immaterial() {
    let p = common::params(20);
    let grads: Vec<DenoiserParams> = (0..4)
        .map(|i| {
            let (b, c) = common::batch(&p.arch, 3, 30 + i);
            dm_loss(Model::base(&p), &b, &c, GradRequest::BASE).unwrap().base_grads.unwrap()
        })
        .collect();
    let run = |order: &[usize]| {
        let g: Vec<DenoiserParams> = order.iter().map(|&i| grads[i].clone()).collect();
        let mut q = p.clone();
        let mut adam = AdamState::new(&q);
        accumulate_step(&mut adam, &mut q, &g, 1e-3).unwrap();
        q
    };
    let a = run(&[0, 1, 2, 3]);
    let b = run(&[3, 1, 0, 2]);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        for (u, v) in x.data.iter().zip(y.data) {
            assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
    }
    assert_eq!(run(&[0, 1, 2, 3]), a);
}
