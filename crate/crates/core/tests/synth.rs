use idnanet_core::data::*;
use idnanet_core::metrics::components;
use idnanet_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed(sigma: f32, contrast: f32, targets: (usize, usize)) -> SynthConfig {
    SynthConfig {
        count: 20,
        seed: 5,
        sigma: (sigma, sigma),
        contrast: (contrast, contrast),
        targets,
        ..SynthConfig::default()
    }
}

// lattice points strictly inside the half-peak circle of a unit Gaussian
fn half_peak_count(cy: f64, cx: f64, sigma: f64) -> usize {
    let r2 = 2.0 * sigma * sigma * 2f64.ln();
    let mut n = 0;
    for y in -4i64..=4 {
        for x in -4i64..=4 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            n += (dy * dy + dx * dx < r2) as usize;
        }
    }
    n
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig::default();
    let a = synth_samples(&cfg).unwrap();
    let b = synth_samples(&cfg).unwrap();
    assert_eq!(a.len(), 8);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask, y.mask);
    }
    let other = synth_samples(&SynthConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a[0].image, other[0].image);
}

#[test]
fn samples_satisfy_the_data_contract() {
    for background in [Background::GradientSky, Background::FilteredNoise, Background::Mixed] {
        let cfg = SynthConfig {
            background,
            ..SynthConfig::default()
        };
        for s in synth_samples(&cfg).unwrap() {
            assert_eq!(s.image.shape(), &[3, 64, 64]);
            assert_eq!(s.mask.shape(), &[1, 64, 64]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let plane = 64 * 64;
            let d = s.image.data();
            assert_eq!(&d[..plane], &d[plane..2 * plane]);
            assert_eq!(&d[..plane], &d[2 * plane..]);
        }
    }
}

#[test]
fn unit_sigma_target_area() {
    let mut max_area = 0;
    for k in 0..=20 {
        for l in 0..=20 {
            max_area = max_area.max(half_peak_count(k as f64 / 20.0, l as f64 / 20.0, 1.0));
        }
    }
    assert!(max_area <= 13);

    let cfg = fixed(1.0, 0.8, (1, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..40 {
        let (s, targets) = synth_sample_with_targets(&mut rng, &cfg, format!("{i}"));
        assert_eq!(targets.len(), 1);
        let t = targets[0];
        let area = s.gt_mask().count();
        assert!((1..=13).contains(&area), "area {area}");
        let (fy, fx) = (t.cy.floor() as f64, t.cx.floor() as f64);
        assert_eq!(area, half_peak_count(t.cy as f64 - fy, t.cx as f64 - fx, 1.0));
    }
}

#[test]
fn components_match_placed_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for cfg in [fixed(1.0, 0.8, (1, 1)), SynthConfig::default(), fixed(2.5, 0.3, (3, 3))] {
        for i in 0..30 {
            let (s, targets) = synth_sample_with_targets(&mut rng, &cfg, format!("{i}"));
            let comps = components(&s.gt_mask());
            if cfg.targets == (1, 1) {
                assert_eq!(comps.len(), 1);
            }
            assert_eq!(comps.len(), targets.len());
            for t in &targets {
                let m = 2.0 * t.sigma;
                assert!(t.cy >= m && t.cx >= m && t.cy <= 63.0 - m && t.cx <= 63.0 - m);
                let nearest = comps
                    .iter()
                    .map(|c| ((c.cy - t.cy as f64).powi(2) + (c.cx - t.cx as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest <= 0.75, "centroid off by {nearest}");
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig { count: 0, ..SynthConfig::default() },
        SynthConfig { targets: (3, 1), ..SynthConfig::default() },
        SynthConfig { sigma: (2.0, 1.0), ..SynthConfig::default() },
        SynthConfig { contrast: (0.0, 0.5), ..SynthConfig::default() },
        SynthConfig { image_size: 48, ..SynthConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(synth_samples(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn preprocess_resizes_to_the_model_input() {
    let gray: Vec<f32> = (0..300 * 400).map(|i| (i % 251) as f32 / 250.0).collect();
    let mask: Vec<f32> = (0..300 * 400).map(|i| ((i / 400) % 7 == 0) as u8 as f32).collect();
    let s = Sample::from_gray("big".into(), 300, 400, &gray, &mask);
    let r = preprocess(&s, 256).unwrap();
    assert_eq!(r.image.shape(), &[3, 256, 256]);
    assert_eq!(r.mask.shape(), &[1, 256, 256]);
    assert!(r.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let s = synth_samples(&SynthConfig::default()).unwrap().remove(0);
    let same = preprocess(&s, 64).unwrap();
    assert!(same.image.max_abs_diff(&s.image) < 1e-6);
    assert_eq!(same.mask, s.mask);
}
