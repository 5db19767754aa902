use hsam_core::data::{
    apply_warp, augment, class_frequencies, generate, noise_table, AugmentConfig, FrequencyBasis, GenerateSpec,
    NoiseConfig, Warp,
};
use hsam_core::Seed;
use proptest::prelude::*;

fn spec(seed: u64, n: usize, classes: usize, tail_ratio: f64) -> GenerateSpec {
    GenerateSpec { seed, n, height: 32, width: 32, classes, tail_ratio, split: "train".into() }
}

fn occurrences(n: usize, classes: usize, tail: f64) -> Vec<u64> {
    let ds = generate(&spec(11, n, classes, tail)).unwrap();
    class_frequencies(&ds, &NoiseConfig::default()).occurrences
}

#[test]
fn same_seed_same_bits() {
    let a = generate(&spec(4, 20, 4, 0.4)).unwrap();
    let b = generate(&spec(4, 20, 4, 0.4)).unwrap();
    assert_eq!(a, b);
    let c = generate(&spec(5, 20, 4, 0.4)).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn untailed_occurrences_pass_chi_square() {
    let occ = occurrences(1000, 4, 1.0);
    let fg = &occ[1..];
    let mean = fg.iter().sum::<u64>() as f64 / fg.len() as f64;
    let chi2: f64 = fg.iter().map(|&o| (o as f64 - mean).powi(2) / mean).sum();
    // 1% critical value with 2 degrees of freedom.
    assert!(chi2 < 9.210, "chi² = {chi2}, occurrences {occ:?}");
}

#[test]
fn halving_ratio_halves_occurrence() {
    let occ = occurrences(2000, 4, 0.5);
    let ratio = occ[3] as f64 / occ[2] as f64;
    assert!((ratio - 0.5).abs() <= 0.05, "ratio {ratio}, occurrences {occ:?}");
    assert!(occ[1] > occ[2] && occ[2] > occ[3]);
}

#[test]
fn frequencies_partition_the_pixels() {
    let ds = generate(&spec(2, 30, 5, 0.5)).unwrap();
    let stats = class_frequencies(&ds, &NoiseConfig::default());
    assert_eq!(stats.pixels.iter().sum::<u64>(), (30 * 32 * 32) as u64);
    assert_eq!(stats.occurrences[0], 30);
    let rare = stats.table.var.iter().copied().fold(0.0, f64::max);
    assert_eq!(rare, stats.table.var[(1..5).min_by_key(|&k| stats.pixels[k]).unwrap()]);
}

#[test]
fn absent_class_is_clamped_and_flagged() {
    let cfg = NoiseConfig { sigma0: 0.05, var_max: 0.75, basis: FrequencyBasis::Pixels };
    let (t, absent) = noise_table(&[900.0, 50.0, 0.0, 10.0], &cfg);
    assert_eq!(t.var[2], 0.75);
    assert_eq!(absent, vec![false, false, true, false]);
    // Median of {0, 10, 50, 900} is 30.
    assert!((t.var[1] - 0.05 * 30.0 / 50.0).abs() < 1e-15);
}

#[test]
fn zero_ranges_are_identity() {
    let ds = generate(&spec(1, 3, 4, 0.6)).unwrap();
    for s in &ds.samples {
        let out = augment(s, 32, 32, &AugmentConfig::none(), &mut Seed(0).rng());
        assert_eq!(&out, s);
        let warp = Warp { angle_deg: 0.0, scale: 1.0, displacement: Vec::new() };
        let out = apply_warp(s, 32, 32, &warp);
        assert_eq!(out.mask, s.mask);
        let same = out.image.iter().zip(&s.image).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}

#[test]
fn full_turn_is_near_identity() {
    let ds = generate(&spec(3, 4, 4, 0.8)).unwrap();
    for s in &ds.samples {
        let warp = Warp { angle_deg: 360.0, scale: 1.0, displacement: Vec::new() };
        let out = apply_warp(s, 32, 32, &warp);
        let err = out.image.iter().zip(&s.image).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{err}");
        let set = |m: &[u8]| {
            let mut v = m.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        assert_eq!(set(&out.mask), set(&s.mask));
    }
}

#[test]
fn augmentation_is_seeded() {
    let ds = generate(&spec(6, 2, 4, 0.6)).unwrap();
    let cfg = AugmentConfig::default();
    let a = augment(&ds.samples[0], 32, 32, &cfg, &mut Seed(7).rng());
    let b = augment(&ds.samples[0], 32, 32, &cfg, &mut Seed(7).rng());
    let c = augment(&ds.samples[0], 32, 32, &cfg, &mut Seed(8).rng());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmented_labels_stay_in_the_source_set(seed in 0u64..10_000) {
        let ds = generate(&spec(seed, 1, 4, 0.7)).unwrap();
        let s = &ds.samples[0];
        let out = augment(s, 32, 32, &AugmentConfig::default(), &mut Seed(seed).rng());
        prop_assert_eq!(out.mask.len(), s.mask.len());
        for l in &out.mask {
            prop_assert!(*l == 0 || s.mask.contains(l));
        }
        prop_assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generated_samples_respect_invariants(seed in 0u64..10_000, classes in 2usize..6) {
        let ds = generate(&spec(seed, 2, classes, 0.5)).unwrap();
        for s in &ds.samples {
            prop_assert_eq!(s.image.len(), 32 * 32);
            prop_assert!(s.mask.iter().all(|&l| (l as usize) < classes));
            prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
