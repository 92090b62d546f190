use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wxadapt_core::priors::{AtmosphericLight, PriorMap};
use wxadapt_core::weathersim::{
    apply_haze, apply_rain, apply_snow, directional_autocorrelation, gen_rain_mask, gen_snow_mask, synthesize_dataset,
    transmission, DatasetManifest, MaskPattern, ResidueMask, Split, SynthConfig, Weather, WeatherParams,
};
use wxadapt_core::{DepthMap, ImageF};

fn random_image(h: usize, w: usize, seed: u64) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageF::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn uniform_depth_haze_recomputes_pointwise() {
    let j = random_image(6, 7, 1);
    let depth = DepthMap::uniform(6, 7, 2.0).unwrap();
    let a = AtmosphericLight::new([0.9, 0.85, 0.8]).unwrap();
    let (img, t) = apply_haze(&j, &depth, 0.5, a).unwrap();
    let tt = (-1.0f64).exp();
    assert!(t.values().iter().all(|&v| (v as f64 - tt).abs() < 1e-7));
    for (i, (o, jv)) in img.data().iter().zip(j.data()).enumerate() {
        let want = tt * *jv as f64 + (1.0 - tt) * a.0[i % 3] as f64;
        assert!((*o as f64 - want).abs() < 1e-6);
    }
}

fn mean_autocorr(angle: f32, length: usize, pattern_snow: bool) -> f64 {
    mean_autocorr_with(angle, length, if pattern_snow { Some(2) } else { None })
}

fn mean_autocorr_with(angle: f32, length: usize, snow_radius: Option<usize>) -> f64 {
    let mut s = 0.0;
    for seed in 0..8 {
        let m = match snow_radius {
            Some(r) => gen_snow_mask(96, 96, 0.3, r, seed).unwrap(),
            None => gen_rain_mask(96, 96, 0.3, 90.0, length, seed).unwrap(),
        };
        s += directional_autocorrelation(m.values(), 96, 96, angle, 6);
    }
    s / 8.0
}

#[test]
fn vertical_streaks_correlate_vertically() {
    let v = mean_autocorr(90.0, 15, false);
    let h = mean_autocorr(0.0, 15, false);
    assert!(v > 2.0 * h, "vertical {v} horizontal {h}");
}

#[test]
fn unit_streaks_are_isotropic_dots() {
    for angle in [0.0, 45.0, 90.0] {
        let rain = mean_autocorr_with(angle, 1, None);
        let dots = mean_autocorr_with(angle, 0, Some(0));
        assert!((rain - dots).abs() < 1e-12, "angle {angle}: {rain} vs {dots}");
        assert!(rain.abs() < 0.05, "angle {angle}: {rain}");
    }
    let m = gen_rain_mask(64, 64, 0.3, 90.0, 1, 4).unwrap();
    let s = gen_snow_mask(64, 64, 0.3, 0, 4).unwrap();
    assert_eq!(m.values(), s.values());
}

#[test]
fn snow_masks_are_isotropic() {
    let ratio = mean_autocorr(90.0, 0, true) / mean_autocorr(0.0, 0, true);
    assert!((0.8..=1.25).contains(&ratio), "ratio {ratio}");
}

#[test]
fn vanishing_noise_gives_empty_masks() {
    let m = gen_rain_mask(64, 64, 1e-4, 80.0, 10, 1).unwrap();
    assert!(m.mean() < 1e-3);
}

#[test]
fn one_snow_pixel_shifts_one_pixel() {
    let j = ImageF::filled(4, 4, [0.3; 3]);
    let mut v = vec![0.0; 16];
    v[5] = 1.0;
    let mask = ResidueMask::new(4, 4, v, 0.3, MaskPattern::Flakes { radius: 1 }).unwrap();
    let (img, r) = apply_snow(&j, &mask, 0.5).unwrap();
    for i in 0..16 {
        let want = if i == 5 { 0.8 } else { 0.3 };
        assert_eq!(img.pixel(i / 4, i % 4), [want; 3]);
    }
    assert_eq!(r.values()[5], 0.5);
}

#[test]
fn clamped_rain_keeps_the_unclamped_residue() {
    let j = ImageF::filled(2, 2, [0.95; 3]);
    let mask = ResidueMask::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], 0.3, MaskPattern::Streaks { angle: 90.0, length: 3 })
        .unwrap();
    let (img, r) = apply_rain(&j, &mask, 0.4).unwrap();
    assert_eq!(img.pixel(0, 0), [1.0; 3]);
    assert_eq!(r.values()[0], 0.4);
    let zero = ResidueMask::new(2, 2, vec![0.0; 4], 0.3, MaskPattern::Flakes { radius: 1 }).unwrap();
    assert_eq!(apply_rain(&j, &zero, 0.7).unwrap().0, j);
}

fn small(weather: Weather) -> SynthConfig {
    SynthConfig {
        weather,
        n_source: 3,
        n_target: 4,
        n_val: 2,
        ..SynthConfig::default()
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthesis_is_a_pure_function_of_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(Weather::Rain);
    synthesize_dataset(&cfg, a.path(), 5).unwrap();
    synthesize_dataset(&cfg, b.path(), 5).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    synthesize_dataset(&cfg, c.path(), 6).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn one_per_split_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_source: 1,
        n_target: 1,
        n_val: 1,
        ..SynthConfig::default()
    };
    synthesize_dataset(&cfg, dir.path(), 0).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    m.validate().unwrap();
    for s in Split::ALL {
        assert_eq!(m.split(s).unwrap().records.len(), 1);
    }
}

#[test]
fn stored_haze_priors_recompute_from_depth() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(&small(Weather::Haze), dir.path(), 3).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    for rec in &m.split(Split::TrainTarget).unwrap().records {
        let Some(WeatherParams::Haze { beta, .. }) = rec.weather else {
            panic!("haze record without parameters");
        };
        let depth = m.load_depth(rec).unwrap();
        let gt = PriorMap::load(&m.path(&rec.gt_prior)).unwrap();
        for (t, d) in gt.values().iter().zip(depth.values()) {
            assert!((t - transmission(beta, *d)).abs() <= 1e-6);
        }
    }
}

#[test]
fn stored_rain_priors_recompute_from_mask() {
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(&small(Weather::Rain), dir.path(), 3).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    for rec in &m.split(Split::TrainTarget).unwrap().records {
        let Some(WeatherParams::Rain { intensity, .. }) = rec.weather else {
            panic!("rain record without parameters");
        };
        let mask = PriorMap::load(&m.path(rec.mask.as_ref().unwrap())).unwrap();
        let gt = PriorMap::load(&m.path(&rec.gt_prior)).unwrap();
        for (r, v) in gt.values().iter().zip(mask.values()) {
            assert!((r - intensity * v).abs() <= 1e-6);
        }
    }
}

#[test]
fn out_of_range_angles_are_rejected() {
    let cfg = SynthConfig {
        weather: Weather::Rain,
        angle_min: 60.0,
        ..small(Weather::Rain)
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(synthesize_dataset(&cfg, &dir.path().join("out"), 0).is_err());
    assert!(!dir.path().join("out").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haze_is_a_convex_combination(seed in 0u64..10_000, beta in 0.0f32..3.0, d in 0.0f32..10.0, a in 0.1f32..1.0) {
        let j = random_image(4, 4, seed);
        let depth = DepthMap::uniform(4, 4, d).unwrap();
        let (img, _) = apply_haze(&j, &depth, beta, AtmosphericLight::gray(a).unwrap()).unwrap();
        for (o, jv) in img.data().iter().zip(j.data()) {
            prop_assert!(*o >= jv.min(a) - 1e-6 && *o <= jv.max(a) + 1e-6);
        }
    }

    #[test]
    fn zero_beta_and_zero_mask_are_identities(seed in 0u64..10_000, intensity in 0.01f32..1.0) {
        let j = random_image(5, 3, seed);
        let depth = DepthMap::uniform(5, 3, 4.0).unwrap();
        prop_assert_eq!(apply_haze(&j, &depth, 0.0, AtmosphericLight::gray(0.9).unwrap()).unwrap().0, j.clone());
        let zero = ResidueMask::new(5, 3, vec![0.0; 15], 0.3, MaskPattern::Flakes { radius: 2 }).unwrap();
        prop_assert_eq!(apply_snow(&j, &zero, intensity).unwrap().0, j);
    }
}
