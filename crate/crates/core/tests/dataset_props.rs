use std::collections::HashSet;

use divid_core::dataset::*;
use divid_core::{Error, NoiseRng};
use proptest::prelude::*;

fn centroids(clip: &VideoClip) -> Vec<(f64, f64)> {
    let s = clip.frames.shape();
    let (h, w) = (s[2], s[3]);
    (0..s[0])
        .map(|i| {
            let f = clip.frame(i);
            let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let v: f64 = (0..3).map(|c| f.data()[c * h * w + y * w + x] as f64 + 1.0).sum();
                    m += v;
                    mx += v * (x as f64 + 0.5);
                    my += v * (y as f64 + 0.5);
                }
            }
            (mx / m, my / m)
        })
        .collect()
}

/// Triangle wave written through `asin(sin)`, independent of the generator's
/// modular form.
fn oracle_triangle(u: f64) -> f64 {
    (2.0 / std::f64::consts::PI) * (std::f64::consts::FRAC_PI_2 * u).sin().asin()
}

#[test]
fn hold_frames_are_pixel_identical() {
    let spec = SpriteFactorSpec::default();
    let clip = generate_sprite_clip(0, 0, &spec, 7).unwrap();
    assert_eq!(spec.motions[0], Motion::Hold);
    for i in 1..clip.num_frames() {
        assert_eq!(clip.frame(i), clip.frame(0));
    }
}

#[test]
fn h_bounce_centroid_follows_closed_form_triangle_wave() {
    let spec = SpriteFactorSpec::default();
    let motion = spec.motions.iter().position(|&m| m == Motion::HBounce).unwrap();
    let clip = generate_sprite_clip(1, motion, &spec, 3).unwrap();
    let p = Motion::HBounce.params(3);
    for (i, (cx, cy)) in centroids(&clip).into_iter().enumerate() {
        let u = i as f64 * p.rate as f64;
        let expect = spec.width as f64 / 2.0 + p.dir.0 as f64 * p.amplitude as f64 * oracle_triangle(u);
        assert!((cx - expect).abs() < 0.1, "frame {i}: centroid x {cx} vs oracle {expect}");
        assert!((cy - spec.height as f64 / 2.0).abs() < 0.1, "frame {i}: y drifted to {cy}");
    }
}

#[test]
fn generation_is_bit_identical_across_calls() {
    let spec = SpriteFactorSpec::default();
    let a = generate_sprite_clip(1, 1, &spec, 3).unwrap();
    let b = generate_sprite_clip(1, 1, &spec, 3).unwrap();
    assert_eq!(a, b);
    let bits = |c: &VideoClip| c.frames.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn centroid_trajectories_do_not_depend_on_identity() {
    let spec = SpriteFactorSpec::default();
    for motion in 0..spec.motions.len() {
        let base = centroids(&generate_sprite_clip(0, motion, &spec, 11).unwrap());
        for identity in 1..spec.identities.len() {
            let other = centroids(&generate_sprite_clip(identity, motion, &spec, 11).unwrap());
            for (a, b) in base.iter().zip(&other) {
                assert!((a.0 - b.0).abs() < 0.1 && (a.1 - b.1).abs() < 0.1, "motion {motion} id {identity}: {a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn invalid_class_index_is_a_domain_error() {
    let spec = SpriteFactorSpec::default();
    assert!(matches!(generate_sprite_clip(6, 0, &spec, 0), Err(Error::Domain(_))));
    assert!(matches!(generate_sprite_clip(0, 6, &spec, 0), Err(Error::Domain(_))));
}

#[test]
fn window_of_full_length_starts_at_zero() {
    let frames: Vec<usize> = (0..10).collect();
    let mut rng = NoiseRng::seed_from_u64(1);
    assert_eq!(sample_clip_window(&frames, 10, &mut rng).unwrap(), &frames[..]);
}

#[test]
fn window_starts_cover_the_valid_range_exactly() {
    let frames: Vec<usize> = (0..30).collect();
    let mut rng = NoiseRng::seed_from_u64(2);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let w = sample_clip_window(&frames, 10, &mut rng).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.windows(2).all(|p| p[1] == p[0] + 1), "window must be contiguous");
        seen.insert(w[0]);
    }
    assert_eq!(seen, (0..=20).collect::<HashSet<_>>());
}

#[test]
fn short_source_is_a_length_error() {
    let frames: Vec<usize> = (0..9).collect();
    let mut rng = NoiseRng::seed_from_u64(3);
    assert!(matches!(sample_clip_window(&frames, 10, &mut rng), Err(Error::Length { needed: 10, got: 9 })));
}

#[test]
fn training_split_contains_every_combination() {
    let spec = SpriteFactorSpec::default();
    let clips = generate_split(&spec, Split::Train, 36, 5).unwrap();
    let combos: HashSet<_> = clips.iter().map(|c| (c.static_label, c.dynamic_label)).collect();
    assert_eq!(combos.len(), 36);
    let ids: HashSet<_> = clips.iter().map(|c| c.clip_id.clone()).collect();
    assert_eq!(ids.len(), clips.len());
}

#[test]
fn splits_use_disjoint_seeds() {
    let spec = SpriteFactorSpec { height: 16, width: 16, sprite_size: 5.0, ..SpriteFactorSpec::default() };
    let train: HashSet<u64> = generate_split(&spec, Split::Train, 40, 0).unwrap().iter().map(|c| c.seed).collect();
    let test: HashSet<u64> = generate_split(&spec, Split::Test, 40, 0).unwrap().iter().map(|c| c.seed).collect();
    assert!(train.is_disjoint(&test));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn frames_lie_in_model_range(identity in 0usize..6, motion in 0usize..6, seed in any::<u64>()) {
        let spec = SpriteFactorSpec { height: 16, width: 16, sprite_size: 5.0, ..SpriteFactorSpec::default() };
        let clip = generate_sprite_clip(identity, motion, &spec, seed).unwrap();
        prop_assert_eq!(clip.frames.shape(), &[8, 3, 16, 16]);
        prop_assert!(clip.frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!((clip.static_label, clip.dynamic_label), (identity, motion));
    }
}
