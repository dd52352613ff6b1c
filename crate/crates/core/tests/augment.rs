use aumer_core::aucodes::AuAnnotation;
use aumer_core::augment::{
    augment_batch, hflip, lsfm_batch, lsfm_frame, photometric_flip, region_mask, AugConfig,
    AugEvent, Region,
};
use aumer_core::numerics::Tensor;
use aumer_core::rngs::{self, Rng};
use aumer_core::sampling::{KeyFrames, MeSequence};
use aumer_core::Error;
use proptest::prelude::*;
use rand::Rng as _;

fn random_seq(rng: &mut Rng, t: usize, h: usize, w: usize, c: usize, subject: &str) -> MeSequence {
    let n = t * h * w * c;
    let frames = Tensor::new(
        vec![t, h, w, c],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let onset = rng.random_range(0..t);
    MeSequence::new(
        frames,
        subject,
        rng.random_range(0..3),
        AuAnnotation::new(&[12]).unwrap(),
        KeyFrames::new(onset, onset, t - 1),
    )
    .unwrap()
}

fn batch(seed: u64, n: usize, t: usize, h: usize, w: usize, c: usize) -> Vec<MeSequence> {
    let mut rng = rngs::stream(seed, "batch", 0);
    (0..n)
        .map(|i| random_seq(&mut rng, t, h, w, c, &format!("s{i}")))
        .collect()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..4).prop_map(|(t, h, w, c)| (t, 4 * h, 4 * w, c))
}

proptest! {
    #[test]
    fn lsfm_frame_preserves_complement_and_stays_convex(
        (_, h, w, c) in dims(), region in 0usize..4, omega in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let mut rng = rngs::stream(seed, "frame", 0);
        let n = h * w * c;
        let v = Tensor::new(vec![h, w, c], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let u = Tensor::new(vec![h, w, c], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = region_mask(Region::ALL[region], h, w).unwrap();
        let out = lsfm_frame(&v, &u, &mask, omega).unwrap();
        for p in 0..h * w {
            for ch in 0..c {
                let k = p * c + ch;
                let (a, b, o) = (v.data()[k], u.data()[k], out.data()[k]);
                if mask.mask[p] == 0 {
                    prop_assert_eq!(o.to_bits(), a.to_bits());
                } else {
                    prop_assert!(o >= a.min(b) - 1e-15 && o <= a.max(b) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn lsfm_batch_is_deterministic_label_preserving_and_temporally_coherent(
        (t, h, w, c) in dims(), n in 2usize..5, seed in any::<u64>(),
    ) {
        let b = batch(seed, n, t, h, w, c);
        let cfg = AugConfig { apply_probability: 1.0, ..AugConfig::default() };
        let (o1, e1) = lsfm_batch(&b, &cfg, &mut rngs::stream(seed, "aug", 0)).unwrap();
        let (o2, e2) = lsfm_batch(&b, &cfg, &mut rngs::stream(seed, "aug", 0)).unwrap();
        prop_assert_eq!(&o1, &o2);
        prop_assert_eq!(&e1, &e2);
        prop_assert_eq!(e1.len(), n);
        for ev in &e1 {
            let AugEvent::Lsfm { sample, partner, region } = ev else { panic!("unexpected {ev:?}") };
            prop_assert_ne!(sample, partner);
            let (src, dst) = (&b[*sample], &o1[*sample]);
            prop_assert_eq!((src.emotion, &src.au_set, src.keyframes), (dst.emotion, &dst.au_set, dst.keyframes));
            // outside the mask, frame-to-frame differences are untouched
            let mask = region_mask(*region, h, w).unwrap();
            for f in 1..t {
                for p in (0..h * w).filter(|&p| mask.mask[p] == 0) {
                    for ch in 0..c {
                        let k = p * c + ch;
                        let d_src = src.frame(f)[k] - src.frame(f - 1)[k];
                        let d_dst = dst.frame(f)[k] - dst.frame(f - 1)[k];
                        prop_assert_eq!(d_src.to_bits(), d_dst.to_bits());
                    }
                }
            }
            // inside the mask, every frame is pulled toward the same partner pixel
            let partner0 = b[*partner].frame(b[*partner].keyframes.onset);
            for f in 0..t {
                for p in (0..h * w).filter(|&p| mask.mask[p] == 1) {
                    for ch in 0..c {
                        let k = p * c + ch;
                        let want = cfg.omega * src.frame(f)[k] + (1.0 - cfg.omega) * partner0[k];
                        prop_assert!((dst.frame(f)[k] - want).abs() <= 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_probability_and_unit_omega_are_identities((t, h, w, c) in dims(), seed in any::<u64>()) {
        let b = batch(seed, 3, t, h, w, c);
        let never = AugConfig { apply_probability: 0.0, ..AugConfig::default() };
        let (out, events) = augment_batch(&b, &never, &mut rngs::stream(seed, "aug", 0)).unwrap();
        prop_assert_eq!(&out, &b);
        prop_assert!(events.is_empty());
        let keep = AugConfig { apply_probability: 1.0, omega: 1.0, ..AugConfig::default() };
        let (out, _) = lsfm_batch(&b, &keep, &mut rngs::stream(seed, "aug", 0)).unwrap();
        prop_assert_eq!(&out, &b);
    }

    #[test]
    fn flip_is_an_involution_and_mirrors_regions((t, h, w, c) in dims(), seed in any::<u64>()) {
        let s = &batch(seed, 1, t, h, w, c)[0];
        let f = hflip(&s.frames);
        prop_assert_eq!(&hflip(&f), &s.frames);
        for r in Region::ALL {
            let m = region_mask(r, h, w).unwrap();
            let mm = region_mask(r.mirrored(), h, w).unwrap();
            for row in 0..h {
                for col in 0..w {
                    prop_assert_eq!(m.get(row, col), mm.get(row, w - 1 - col));
                }
            }
        }
    }
}

#[test]
fn masks_partition_the_frame() {
    for (h, w) in [(4, 4), (8, 12), (32, 32), (64, 64)] {
        let masks: Vec<_> = Region::ALL
            .iter()
            .map(|&r| region_mask(r, h, w).unwrap())
            .collect();
        for m in &masks {
            assert_eq!(m.count(), h * w / 4);
        }
        for p in 0..h * w {
            assert_eq!(masks.iter().filter(|m| m.mask[p] == 1).count(), 1);
        }
    }
}

#[test]
fn sizes_not_divisible_by_four_are_rejected() {
    assert!(matches!(
        region_mask(Region::Chin, 6, 8),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        region_mask(Region::Chin, 8, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn singleton_batch_is_skipped_and_logged() {
    let b = batch(1, 1, 2, 4, 4, 1);
    let cfg = AugConfig {
        apply_probability: 1.0,
        ..AugConfig::default()
    };
    let (out, events) = lsfm_batch(&b, &cfg, &mut rngs::stream(0, "aug", 0)).unwrap();
    assert_eq!(out, b);
    assert!(matches!(events[..], [AugEvent::LsfmSkipped { .. }]));
}

#[test]
fn photometric_output_stays_in_unit_range() {
    let b = batch(3, 4, 3, 8, 8, 2);
    let cfg = AugConfig {
        apply_probability: 1.0,
        jitter_strength: 0.5,
        ..AugConfig::default()
    };
    let mut rng = rngs::stream(3, "aug", 0);
    for s in &b {
        let (out, d) = photometric_flip(s, &cfg, &mut rng).unwrap();
        assert!(d.is_some());
        assert!(out.frames.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!((out.emotion, &out.au_set), (s.emotion, &s.au_set));
    }
}

#[test]
fn disabled_stages_leave_batch_alone() {
    let b = batch(5, 3, 2, 8, 8, 1);
    let cfg = AugConfig {
        apply_probability: 1.0,
        photometric_enabled: false,
        lsfm_enabled: false,
        ..AugConfig::default()
    };
    let (out, events) = augment_batch(&b, &cfg, &mut rngs::stream(5, "aug", 0)).unwrap();
    assert_eq!(out, b);
    assert!(events.is_empty());
}
