//! Properties of the predictive objective: drop sampling, truncation,
//! padding and the full partial-to-complete pass.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use pvvae_core::model::{PaddingConfig, PaddingStrategy};
use pvvae_core::predictive::{
    group_frames, max_droppable, pad_latents, partition_groups, sample_drop, truncate_clip, DropPlan, LatentPadding,
    PredictiveVae,
};
use pvvae_core::rng::{normal_tensor, seeded, uniform_tensor};
use pvvae_core::{LatentSequence, VaeConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn vae(strategy: PaddingStrategy) -> VaeConfig {
    VaeConfig {
        p_t: 4,
        p_s: 4,
        c_latent: 4,
        base_channels: 4,
        channel_mult: vec![1, 2],
        padding: PaddingConfig { strategy, sigma: 1.0 },
        ..VaeConfig::toy()
    }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drops_stay_within_the_ratio_bound(groups in 1usize..12, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let hi = ((groups - 1) as f64 * r).floor() as usize;
        prop_assert_eq!(max_droppable(groups, r), hi);
        for _ in 0..50 {
            let k = sample_drop(groups, r, &mut rng);
            prop_assert!(k <= hi && k < groups);
        }
    }

    #[test]
    fn plans_keep_the_first_frame(groups in 1usize..10, p_t in 1usize..5, seed in any::<u64>()) {
        let plan = DropPlan::sample(groups, 1.0, p_t, &mut seeded(seed)).unwrap();
        prop_assert!(plan.observed_latents >= 1);
        prop_assert_eq!(plan.observed_latents + plan.dropped, groups);
        prop_assert_eq!(plan.observed_frames, 1 + (plan.observed_latents - 1) * p_t);
    }

    #[test]
    fn groups_tile_the_frames(groups in 1usize..8, p_t in 1usize..6) {
        let t_plus = (groups - 1) * p_t;
        prop_assert_eq!(partition_groups(t_plus, p_t).unwrap(), groups);
        let mut next = 1;
        for g in 1..=groups {
            let r = group_frames(g, p_t);
            prop_assert_eq!(*r.start(), next);
            next = r.end() + 1;
        }
        prop_assert_eq!(next, t_plus + 2);
    }

    #[test]
    fn truncation_keeps_an_exact_prefix(groups in 1usize..5, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let p_t = 2;
        let frames = 1 + (groups - 1) * p_t;
        let k = ((groups - 1) as f64 * k_frac).floor() as usize;
        let x = uniform_tensor(&mut seeded(seed), &[1, frames, 2, 2, 1], DType::F32, &Device::Cpu).unwrap();
        let y = truncate_clip(&x, k, p_t).unwrap();
        let kept = frames - k * p_t;
        prop_assert_eq!(y.dims(), &[1, kept, 2, 2, 1]);
        prop_assert_eq!(values(&y), values(&x.narrow(1, 0, kept).unwrap()));
    }
}

#[test]
fn full_ratio_draws_are_uniform() {
    let mut rng = seeded(17);
    let mut counts = [0usize; 7];
    for _ in 0..14_000 {
        counts[sample_drop(7, 1.0, &mut rng)] += 1;
    }
    let e = 2000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(6.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "counts {counts:?}, p {p}");
}

#[test]
fn half_ratio_support_and_zero_ratio() {
    let mut rng = seeded(18);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..2000 {
        seen.insert(sample_drop(5, 0.5, &mut rng));
        assert_eq!(sample_drop(5, 0.0, &mut rng), 0);
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn too_many_drops_are_rejected() {
    assert!(DropPlan::new(3, 3, 1.0, 4).is_err());
    let x = Tensor::zeros((1, 9, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
    assert!(truncate_clip(&x, 3, 4).is_err());
    assert!(partition_groups(7, 4).is_err());
}

#[test]
fn learnable_padding_repeats_one_token() {
    let dev = Device::Cpu;
    let cfg = vae(PaddingStrategy::Learnable);
    let model = PredictiveVae::new(&cfg, (16, 16), DType::F32, &dev).unwrap();
    let token = model.padding.token.as_ref().unwrap();
    token.set(&normal_tensor(&mut seeded(1), token.dims(), DType::F32, &dev).unwrap()).unwrap();
    let z_obs = LatentSequence::new(normal_tensor(&mut seeded(2), &[2, 1, 4, 4, 4], DType::F32, &dev).unwrap()).unwrap();
    let z = pad_latents(&z_obs, 2, &model.padding, &mut seeded(3)).unwrap();
    assert_eq!(z.data.dims(), &[2, 3, 4, 4, 4]);
    assert_eq!(values(&z.data.narrow(1, 0, 1).unwrap()), values(&z_obs.data));
    let tok = values(token.as_tensor());
    for b in 0..2 {
        for f in 1..3 {
            assert_eq!(values(&z.data.narrow(0, b, 1).unwrap().narrow(1, f, 1).unwrap()), tok);
        }
    }
    let same = pad_latents(&z_obs, 0, &model.padding, &mut seeded(3)).unwrap();
    assert_eq!(values(&same.data), values(&z_obs.data));
}

#[test]
fn gaussian_padding_is_seeded_noise() {
    let dev = Device::Cpu;
    let pad = LatentPadding::gaussian(1.0);
    let z_obs = LatentSequence::new(Tensor::zeros((1, 2, 3, 3, 4), DType::F64, &dev).unwrap()).unwrap();
    let a = pad_latents(&z_obs, 40, &pad, &mut seeded(9)).unwrap();
    let b = pad_latents(&z_obs, 40, &pad, &mut seeded(9)).unwrap();
    assert_eq!(values(&a.data), values(&b.data));
    let noise = values(&a.data.narrow(1, 2, 40).unwrap());
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / noise.len() as f64;
    assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.15, "mean {mean}, var {var}");
}

#[test]
fn output_is_full_length_for_every_drop() {
    let dev = Device::Cpu;
    for strategy in [PaddingStrategy::Gaussian, PaddingStrategy::Learnable] {
        let model = PredictiveVae::new(&vae(strategy), (16, 16), DType::F32, &dev).unwrap();
        let clip = uniform_tensor(&mut seeded(4), &[2, 13, 16, 16, 3], DType::F32, &dev).unwrap();
        for k in 0..4 {
            let out = model.forward_with_drop(&clip, k, &mut seeded(5)).unwrap();
            assert_eq!(out.recon.dims(), clip.dims());
            assert_eq!(out.posterior.mean.dim(1).unwrap(), 4 - k);
            assert_eq!(out.plan.dropped, k);
        }
    }
}

#[test]
fn dropped_frames_never_reach_the_encoder() {
    let dev = Device::Cpu;
    for strategy in [PaddingStrategy::Gaussian, PaddingStrategy::Learnable] {
        let model = PredictiveVae::new(&vae(strategy), (16, 16), DType::F32, &dev).unwrap();
        let clip = uniform_tensor(&mut seeded(6), &[1, 13, 16, 16, 3], DType::F32, &dev).unwrap();
        for k in 1..4 {
            let kept = 13 - 4 * k;
            let noise = uniform_tensor(&mut seeded(7 + k as u64), &[1, 13 - kept, 16, 16, 3], DType::F32, &dev).unwrap();
            let altered = Tensor::cat(&[&clip.narrow(1, 0, kept).unwrap(), &noise], 1).unwrap();
            let a = model.forward_with_drop(&clip, k, &mut seeded(8)).unwrap();
            let b = model.forward_with_drop(&altered, k, &mut seeded(8)).unwrap();
            assert_eq!(values(&a.recon), values(&b.recon), "{strategy} k={k}");
            assert_eq!(values(&a.posterior.mean), values(&b.posterior.mean));
        }
    }
}
