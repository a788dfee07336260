//! Shape, causality, invariance and determinism contracts of the autoencoder.

use candle_core::{DType, Device, Tensor};
use pvvae_core::model::{reparameterize, LatentPosterior, LatentSequence, LOGVAR_MIN};
use pvvae_core::rng::{normal_tensor, seeded, uniform_tensor};
use pvvae_core::{build_model, VaeConfig};

fn small(base: usize) -> VaeConfig {
    VaeConfig {
        base_channels: base,
        ..VaeConfig::toy()
    }
}

fn random_clip(frames: usize, h: usize, w: usize, seed: u64, dtype: DType) -> Tensor {
    uniform_tensor(&mut seeded(seed), &[1, frames, h, w, 3], dtype, &Device::Cpu)
        .unwrap()
        .affine(2.0, -1.0)
        .unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

#[test]
fn toy_config_shapes() {
    let m = build_model(&small(8), DType::F32, &Device::Cpu).unwrap();
    let post = m.encode(&random_clip(17, 64, 64, 0, DType::F32)).unwrap();
    assert_eq!(post.mean.dims(), &[1, 5, 8, 8, 8]);
    assert_eq!(post.logvar.dims(), post.mean.dims());
    let recon = m.decode(&LatentSequence::new(post.mean.clone()).unwrap()).unwrap();
    assert_eq!(recon.dims(), &[1, 17, 64, 64, 3]);

    let img = m.encode(&random_clip(1, 64, 64, 1, DType::F32)).unwrap();
    assert_eq!(img.mean.dims(), &[1, 1, 8, 8, 8]);
    let dec = m.decode(&LatentSequence::new(img.mean).unwrap()).unwrap();
    assert_eq!(dec.dims(), &[1, 1, 64, 64, 3]);
}

#[test]
fn full_size_compression_shapes_at_batch_one() {
    // Full compression ratios with narrow widths so the test stays quick.
    let cfg = VaeConfig::full_size(4);
    let m = build_model(&cfg, DType::F32, &Device::Cpu).unwrap();
    let post = m.encode(&random_clip(17, 256, 256, 2, DType::F32)).unwrap();
    assert_eq!(post.mean.dims(), &[1, 5, 16, 16, 64]);
    let z = LatentSequence::new(post.mean).unwrap();
    assert_eq!(m.decode(&z).unwrap().dims(), &[1, 17, 256, 256, 3]);
}

#[test]
fn decoded_pixels_lie_in_unit_range() {
    let m = build_model(&small(8), DType::F32, &Device::Cpu).unwrap();
    let z = (normal_tensor(&mut seeded(3), &[2, 3, 2, 2, 8], DType::F32, &Device::Cpu).unwrap() * 50.0).unwrap();
    let x = m.decode(&LatentSequence::new(z).unwrap()).unwrap();
    let v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
    assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
}

#[test]
fn invalid_factorizations_are_rejected() {
    let bad_s = VaeConfig { p_s: 4, ..VaeConfig::toy() };
    assert!(build_model(&bad_s, DType::F32, &Device::Cpu).is_err());
    let bad_t = VaeConfig { p_t: 3, ..VaeConfig::toy() };
    assert!(build_model(&bad_t, DType::F32, &Device::Cpu).is_err());
    let m = build_model(&small(4), DType::F32, &Device::Cpu).unwrap();
    assert!(m.encode(&random_clip(16, 32, 32, 0, DType::F32)).is_err());
    assert!(m.encode(&random_clip(17, 36, 32, 0, DType::F32)).is_err());
}

/// Latent frames `1..=g` depend only on pixel frames `1..=1+(g-1)p_t`.
#[test]
fn encoder_is_causal_for_every_group() {
    let cfg = small(8);
    let m = build_model(&cfg, DType::F32, &Device::Cpu).unwrap();
    let x = random_clip(17, 32, 32, 4, DType::F32);
    let base = m.encode(&x).unwrap();
    let groups = 5;
    for g in 1..=groups {
        let keep = 1 + (g - 1) * cfg.p_t;
        if keep == 17 {
            continue;
        }
        let noise = random_clip(17 - keep, 32, 32, 100 + g as u64, DType::F32);
        let y = Tensor::cat(&[x.narrow(1, 0, keep).unwrap(), noise], 1).unwrap();
        let other = m.encode(&y).unwrap();
        for t in [&base.mean, &base.logvar].iter().zip([&other.mean, &other.logvar]) {
            let a: Vec<f32> = t.0.narrow(1, 0, g).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = t.1.narrow(1, 0, g).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()), "prefix of length {g} changed");
        }
        // The changed frames do reach the later latents.
        if g < groups {
            assert!(max_abs(&base.mean.narrow(1, g, 1).unwrap(), &other.mean.narrow(1, g, 1).unwrap()) > 0.0);
        }
    }
}

#[test]
fn constant_clip_gives_time_invariant_latents() {
    let m = build_model(&small(8), DType::F64, &Device::Cpu).unwrap();
    let frame = random_clip(1, 32, 32, 5, DType::F64);
    let x = frame.broadcast_as((1, 17, 32, 32, 3)).unwrap().contiguous().unwrap();
    let mean = m.encode(&x).unwrap().mean;
    let first = mean.narrow(1, 0, 1).unwrap();
    for t in 1..5 {
        assert!(max_abs(&mean.narrow(1, t, 1).unwrap(), &first) <= 1e-5);
    }
}

#[test]
fn builds_and_passes_are_deterministic() {
    let cfg = VaeConfig { seed: 9, ..small(8) };
    let a = build_model(&cfg, DType::F32, &Device::Cpu).unwrap();
    let b = build_model(&cfg, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
    let other = build_model(&VaeConfig { seed: 10, ..cfg.clone() }, DType::F32, &Device::Cpu).unwrap();
    assert_ne!(a.params().snapshot().unwrap(), other.params().snapshot().unwrap());

    let x = random_clip(9, 32, 32, 6, DType::F32);
    let pa = a.encode(&x).unwrap();
    let pb = b.encode(&x).unwrap();
    let za = reparameterize(&pa, &mut seeded(1)).unwrap();
    let zb = reparameterize(&pb, &mut seeded(1)).unwrap();
    let da: Vec<f32> = a.decode(&za).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let db: Vec<f32> = b.decode(&zb).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(da.iter().zip(&db).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn reparameterization_cases() {
    let dev = Device::Cpu;
    let mean = normal_tensor(&mut seeded(0), &[1, 2, 3, 3, 4], DType::F64, &dev).unwrap();
    let tight = LatentPosterior {
        mean: mean.clone(),
        logvar: Tensor::full(LOGVAR_MIN, mean.dims(), &dev).unwrap(),
    };
    let z = reparameterize(&tight, &mut seeded(1)).unwrap();
    assert!(max_abs(&z.data, &mean) < 1e-5);

    let unit = LatentPosterior {
        mean: mean.zeros_like().unwrap(),
        logvar: mean.zeros_like().unwrap(),
    };
    let z = reparameterize(&unit, &mut seeded(2)).unwrap();
    let eps = normal_tensor(&mut seeded(2), mean.dims(), DType::F64, &dev).unwrap();
    assert_eq!(max_abs(&z.data, &eps), 0.0);
}
