//! Latent diagnostics and the Frechet proxy against independent oracles.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use pvvae_core::data::FlowField;
use pvvae_core::diagnostics::{
    epe, flow_probe, ltd_from_latents, ltd_profile, pca_rgb, prediction_error, psnr, ssim, FlowProbeConfig, PSNR_CAP_DB,
};
use pvvae_core::diffusion::{frechet_distance, frechet_from_features, frechet_proxy, FRECHET_MIN_SAMPLES};
use pvvae_core::predictive::PredictiveVae;
use pvvae_core::rng::{normal_vec, seeded, uniform_tensor};
use pvvae_core::{Error, VaeConfig, VideoClip};

/// Cyclic Jacobi eigensolver for a small symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns) sorted by descending value.
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b][b].total_cmp(&m[a][a]));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (vals, vecs)
}

fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect()
}

/// 8-channel latents: three orthogonal signals of distinct variance on
/// channels 1, 4, 6, zeros elsewhere.
fn structured_latents() -> (Tensor, Vec<Vec<f64>>) {
    let mut rng = seeded(12);
    let n = 2 * 3 * 6 * 6;
    let noise = normal_vec(&mut rng, n * 3);
    let mut rows = Vec::with_capacity(n);
    for p in 0..n {
        let mut r = vec![0f64; 8];
        r[1] = 3.0 * noise[p * 3];
        r[4] = 2.0 * noise[p * 3 + 1];
        r[6] = noise[p * 3 + 2];
        rows.push(r);
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    (Tensor::from_vec(flat, (2, 3, 6, 6, 8), &Device::Cpu).unwrap(), rows)
}

#[test]
fn pca_matches_a_jacobi_oracle() {
    let (latents, rows) = structured_latents();
    let pca = pca_rgb(&latents).unwrap();
    let (vals, vecs) = jacobi_eigen(&covariance(&rows));
    for k in 0..3 {
        assert!((pca.basis.explained_variance[k] - vals[k]).abs() < 1e-8 * vals[0]);
        let dot: f64 = pca.basis.components[k].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "component {k}: |cos| = {}", dot.abs());
    }
    // The three signal channels dominate the three components.
    for (k, ch) in [1, 4, 6].into_iter().enumerate() {
        assert!(pca.basis.components[k][ch] > 0.95, "{:?}", pca.basis.components);
    }
    assert_eq!(pca.shape, vec![2, 3, 6, 6, 3]);
}

#[test]
fn pca_basis_is_orthonormal_and_ordered() {
    let latents = uniform_tensor(&mut seeded(13), &[1, 4, 5, 5, 8], DType::F64, &Device::Cpu).unwrap();
    let pca = pca_rgb(&latents).unwrap();
    let c = &pca.basis.components;
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
            assert!((d - f64::from(i == j)).abs() < 1e-8, "<c{i}, c{j}> = {d}");
        }
        let pivot = c[i].iter().copied().fold(0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0, "sign rule");
    }
    let v = pca.basis.explained_variance;
    assert!(v[0] >= v[1] && v[1] >= v[2]);
    assert!(pca.rgb.iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn pca_is_scale_invariant_and_deterministic() {
    let latents = uniform_tensor(&mut seeded(14), &[1, 3, 4, 4, 6], DType::F64, &Device::Cpu).unwrap();
    let a = pca_rgb(&latents).unwrap();
    let b = pca_rgb(&(&latents * 2.0).unwrap()).unwrap();
    let again = pca_rgb(&latents).unwrap();
    assert_eq!(a.rgb, again.rgb);
    assert!(a.rgb.iter().zip(&b.rgb).all(|(x, y)| (x - y).abs() < 1e-5));
}

#[test]
fn pca_rejects_degenerate_inputs() {
    let flat = Tensor::ones((1, 2, 3, 3, 4), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(pca_rgb(&flat), Err(Error::Degenerate(_))));
    let narrow = Tensor::zeros((4, 2), DType::F64, &Device::Cpu).unwrap();
    assert!(pca_rgb(&narrow).is_err());
}

fn tiny() -> VaeConfig {
    VaeConfig {
        p_t: 4,
        p_s: 4,
        c_latent: 4,
        base_channels: 4,
        channel_mult: vec![1, 2],
        ..VaeConfig::toy()
    }
}

fn constant_clip(frames: usize, res: usize) -> VideoClip {
    let frame: Vec<f32> = (0..res * res * 3).map(|i| ((i * 7) % 23) as f32 / 11.5 - 1.0).collect();
    VideoClip::new(frames, res, res, frame.iter().copied().cycle().take(frames * frame.len()).collect()).unwrap()
}

#[test]
fn constant_clip_has_zero_ltd() {
    let model = PredictiveVae::new(&tiny(), (16, 16), DType::F32, &Device::Cpu).unwrap();
    let p = ltd_profile(&model.vae, &[constant_clip(17, 16)], &[1, 2, 3, 4]).unwrap();
    assert!(p.mean_distance.iter().all(|&d| d <= 1e-5), "{:?}", p.mean_distance);
    assert_eq!(p.normalized_at(1), Some(1.0));
    assert!(ltd_profile(&model.vae, &[constant_clip(9, 16)], &[1, 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ltd_is_nonnegative_with_unit_first_ratio(seed in any::<u64>()) {
        let dev = Device::Cpu;
        let lat: Vec<Tensor> = (0..2)
            .map(|i| uniform_tensor(&mut seeded(seed ^ i), &[1, 5, 2, 2, 3], DType::F64, &dev).unwrap())
            .collect();
        let p = ltd_from_latents(&lat, &[1, 2, 3, 4]).unwrap();
        prop_assert!(p.mean_distance.iter().all(|&d| d >= 0.0));
        prop_assert_eq!(p.normalized[0], 1.0);
        prop_assert_eq!(p.histogram.counts.iter().sum::<usize>(), 2 * 4);
    }

    #[test]
    fn ssim_and_psnr_are_symmetric(seed in any::<u64>()) {
        let dev = Device::Cpu;
        let clip = |s: u64| {
            let t = (uniform_tensor(&mut seeded(s), &[1, 2, 12, 12, 3], DType::F32, &dev).unwrap().affine(2.0, -1.0)).unwrap();
            VideoClip::from_tensor(&t).unwrap()
        };
        let (a, b) = (clip(seed), clip(seed.wrapping_add(1)));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn contrast_inversion_gives_negative_ssim() {
    let t = (uniform_tensor(&mut seeded(20), &[1, 2, 16, 16, 3], DType::F32, &Device::Cpu).unwrap().affine(2.0, -1.0)).unwrap();
    let a = VideoClip::from_tensor(&t).unwrap();
    let b = VideoClip::from_tensor(&t.neg().unwrap()).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.0);
}

#[test]
fn prediction_error_ignores_dropped_content_and_needs_a_drop() {
    let model = PredictiveVae::new(&tiny(), (16, 16), DType::F32, &Device::Cpu).unwrap();
    let base = constant_clip(13, 16);
    let mut altered = base.clone();
    let kept = 13 - 4;
    let fl = altered.frame_len();
    for v in altered.data[kept * fl..].iter_mut() {
        *v = -*v;
    }
    assert!(matches!(prediction_error(&model, &base, 0, &mut seeded(1)), Err(Error::Input(_))));
    let a = prediction_error(&model, &base, 1, &mut seeded(1)).unwrap();
    assert!(a >= 0.0);
    // Same observed prefix; only the scored target frames differ.
    let b = prediction_error(&model, &altered, 1, &mut seeded(1)).unwrap();
    assert!(b >= 0.0 && a != b);
}

#[test]
fn epe_analytic_cases() {
    let zeros = vec![0f32; 2 * 8];
    assert_eq!(epe(&zeros, &zeros).unwrap(), 0.0);
    let truth: Vec<f32> = (0..8).flat_map(|_| [2.0, 0.0]).collect();
    assert!((epe(&zeros, &truth).unwrap() - 2.0).abs() < 1e-12);
}

fn probe_inputs(n: usize, seed: u64) -> (Vec<Tensor>, Vec<FlowField>) {
    let (p_t, p_s) = (2, 2);
    let latents = (0..n)
        .map(|i| uniform_tensor(&mut seeded(seed + i as u64), &[1, 3, 2, 2, 4], DType::F64, &Device::Cpu).unwrap())
        .collect();
    let flow = FlowField {
        steps: 2 * p_t,
        height: 2 * p_s,
        width: 2 * p_s,
        data: [1.0f32, 0.0].repeat(2 * p_t * 4 * p_s * p_s),
    };
    (latents, vec![flow; n])
}

#[test]
fn untrained_probe_predicts_zero_flow() {
    let (lat, flows) = probe_inputs(4, 30);
    let cfg = FlowProbeConfig { steps: 0, ..FlowProbeConfig::default() };
    let (_, r) = flow_probe(&lat, &flows, &lat, &flows, 2, 2, &cfg).unwrap();
    assert_eq!(r.val_epe, r.zero_flow_epe);
    assert!((r.zero_flow_epe - 1.0).abs() < 1e-12);
}

#[test]
fn trained_probe_beats_the_zero_predictor() {
    let (lat, flows) = probe_inputs(8, 40);
    let (_, r) = flow_probe(&lat, &flows, &lat[..2], &flows[..2], 2, 2, &FlowProbeConfig::default()).unwrap();
    assert_eq!((r.train_pairs, r.val_pairs), (16, 4));
    assert!(r.val_epe < 0.1 * r.zero_flow_epe, "{r:?}");
}

fn gaussian_rows(n: usize, mean: &[f64], seed: u64) -> DMatrix<f64> {
    let d = mean.len();
    let z = normal_vec(&mut seeded(seed), n * d);
    DMatrix::from_fn(n, d, |i, j| z[i * d + j] + mean[j])
}

#[test]
fn frechet_closed_form_for_shifted_gaussians() {
    let d = [1.0, -2.0, 0.5];
    let a = gaussian_rows(40_000, &[0.0; 3], 1);
    let b = gaussian_rows(40_000, &d, 2);
    let f = frechet_from_features(&a, &b).unwrap();
    let want: f64 = d.iter().map(|v| v * v).sum();
    assert!((f - want).abs() < 0.05, "{f} vs {want}");

    // Exact population form: equal covariances leave only the mean term.
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let m1 = DVector::from_vec(vec![0.0, 0.0]);
    let m2 = DVector::from_vec(vec![3.0, 4.0]);
    assert!((frechet_distance(&m1, &s, &m2, &s) - 25.0).abs() < 1e-9);
    // Diagonal covariances: sum of (sqrt(a) - sqrt(b))^2.
    let s1 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
    let s2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
    assert!((frechet_distance(&m1, &s1, &m1, &s2) - 5.0).abs() < 1e-9);
}

#[test]
fn frechet_proxy_identity_symmetry_and_sample_floor() {
    let dev = Device::Cpu;
    let clips = |seed: u64, n: usize| -> Vec<VideoClip> {
        (0..n)
            .map(|i| {
                let t = uniform_tensor(&mut seeded(seed + i as u64), &[1, 3, 8, 8, 3], DType::F32, &dev).unwrap();
                VideoClip::from_tensor(&t).unwrap()
            })
            .collect()
    };
    let a = clips(0, 80);
    let b = clips(1000, 80);
    assert!(frechet_proxy(&a, &a, 3).unwrap() < 1e-6);
    let ab = frechet_proxy(&a, &b, 3).unwrap();
    let ba = frechet_proxy(&b, &a, 3).unwrap();
    assert!(ab >= 0.0 && (ab - ba).abs() < 1e-9 * (1.0 + ab));
    let few = clips(0, FRECHET_MIN_SAMPLES - 1);
    assert!(matches!(frechet_proxy(&few, &a, 3), Err(Error::Input(_))));
}
