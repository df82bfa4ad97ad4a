use divid_core::dataset::{generate_split, Split, SpriteFactorSpec, VideoClip};
use divid_core::diffusion::{DenoiserConfig, NoiseSchedule, ScheduleConfig};
use divid_core::encoder::EncoderConfig;
use divid_core::evaluation::*;
use divid_core::model::DividModel;
use divid_core::{Error, NoiseRng, ParamStore, Result, Tensor};

const NU: usize = 4;

fn spec(classes: usize) -> SpriteFactorSpec {
    let full = SpriteFactorSpec::default();
    SpriteFactorSpec {
        identities: full.identities[..classes].to_vec(),
        motions: full.motions[..classes].to_vec(),
        num_frames: NU,
        height: 16,
        width: 16,
        sprite_size: 5.0,
    }
}

fn tiny_model(seed: u64) -> (DividModel, ParamStore) {
    let enc = EncoderConfig {
        base_channels: 4,
        channel_mult: vec![1, 2],
        blocks_per_level: 1,
        embed_channels: 3,
        token_dim: 16,
        mlp_hidden: 32,
        lstm_hidden: 8,
        attn_heads: 2,
        max_frames: 8,
    };
    let den = DenoiserConfig {
        base_channels: 8,
        channel_mult: vec![1, 2],
        blocks_per_level: 1,
        attention_resolutions: vec![8],
        context_dim: 16,
        head_channels: 8,
    };
    DividModel::new(&enc, &den, [3, 16, 16], seed).unwrap()
}

fn sampler() -> NoiseSchedule {
    ScheduleConfig { sample_steps: 3, ..ScheduleConfig::default() }.build_sampler().unwrap()
}

fn small_judge_config() -> JudgeConfig {
    JudgeConfig { channels: 8, feature_dim: 32, motion_hidden: 32, steps: 400, batch_size: 16, ..JudgeConfig::default() }
}

/// Judge fit on `clips` itself; the tests below only rely on it being
/// perfect on exactly these clips, which is asserted.
fn perfect_judge(clips: &[VideoClip], classes: usize) -> JudgeClassifier {
    let judge = train_judge(clips, clips, classes, classes, &small_judge_config()).unwrap();
    assert_eq!(judge.accuracy(clips).unwrap(), (100.0, 100.0), "judge must be perfect on its own clips");
    judge
}

/// Returns a real clip carrying the requested (identity, motion) labels.
struct OracleDecoder;

impl SwapDecoder for OracleDecoder {
    fn decode(&self, clips: &[VideoClip], requests: &[(usize, usize)], _: u64) -> Result<Vec<Tensor>> {
        Ok(requests
            .iter()
            .map(|&(si, di)| {
                let want = (clips[si].static_label, clips[di].dynamic_label);
                clips.iter().find(|c| (c.static_label, c.dynamic_label) == want).expect("combo present").frames.clone()
            })
            .collect())
    }
}

/// Returns an arbitrary clip of the set for every request.
struct ScrambleDecoder;

impl SwapDecoder for ScrambleDecoder {
    fn decode(&self, clips: &[VideoClip], requests: &[(usize, usize)], seed: u64) -> Result<Vec<Tensor>> {
        Ok(requests.iter().map(|&(a, b)| clips[(a * 7 + b * 3 + seed as usize) % clips.len()].frames.clone()).collect())
    }
}

#[test]
fn oracle_decoder_with_perfect_judge_scores_full_marks() {
    let clips = generate_split(&spec(3), Split::Test, 18, 0).unwrap();
    let judge = perfect_judge(&clips, 3);
    let pairs = select_pairs(&clips, usize::MAX, 0);
    let report = eval_swap(&OracleDecoder, &judge, &clips, &pairs, 0).unwrap();
    assert_eq!((report.static_only_acc, report.dynamic_only_acc, report.joint_acc), (100.0, 100.0, 100.0));
    assert_eq!(report.records.len(), 2 * pairs.len());

    for seed in 0..4 {
        let r = eval_swap(&ScrambleDecoder, &judge, &clips, &pairs, seed).unwrap();
        assert!(r.joint_acc <= r.static_only_acc.min(r.dynamic_only_acc));
    }
}

#[test]
fn judge_is_frozen_and_reproducible() {
    let clips = generate_split(&spec(3), Split::Test, 18, 1).unwrap();
    let cfg = JudgeConfig { steps: 30, ..small_judge_config() };
    let judge = train_judge(&clips, &clips, 3, 3, &cfg).unwrap();
    let again = train_judge(&clips, &clips, 3, 3, &cfg).unwrap();
    assert_eq!(judge.params(), again.params());

    let before = judge.params().clone();
    let (model, store) = tiny_model(0);
    let sched = sampler();
    let swapper = ModelSwapper { model: &model, store: &store, schedule: &sched, batch: 4 };
    let pairs = select_pairs(&clips, 3, 0);
    eval_swap(&swapper, &judge, &clips, &pairs, 0).unwrap();
    assert_eq!(judge.params(), &before);
}

#[test]
fn swap_report_ignores_pair_order_and_batching() {
    let clips = generate_split(&spec(3), Split::Test, 18, 2).unwrap();
    let judge = train_judge(&clips, &clips, 3, 3, &JudgeConfig { steps: 30, ..small_judge_config() }).unwrap();
    let (model, store) = tiny_model(1);
    let sched = sampler();
    let pairs = select_pairs(&clips, 4, 5);
    let flipped: Vec<(usize, usize)> = pairs.iter().rev().map(|&(a, b)| (b, a)).collect();
    let a = eval_swap(&ModelSwapper { model: &model, store: &store, schedule: &sched, batch: 8 }, &judge, &clips, &pairs, 3)
        .unwrap();
    let b = eval_swap(&ModelSwapper { model: &model, store: &store, schedule: &sched, batch: 3 }, &judge, &clips, &flipped, 3)
        .unwrap();
    assert_eq!(a, b);
    assert!(a.joint_acc <= a.static_only_acc.min(a.dynamic_only_acc));
}

#[test]
fn swap_evaluation_needs_pairs() {
    let clips = generate_split(&spec(3), Split::Test, 18, 3).unwrap();
    let judge = JudgeClassifier::new(&small_judge_config(), [3, 16, 16], 3, 3).unwrap();
    assert!(matches!(eval_swap(&OracleDecoder, &judge, &clips, &[], 0), Err(Error::Domain(_))));
}

#[test]
fn judge_needs_two_classes_per_head() {
    let clips: Vec<VideoClip> =
        generate_split(&spec(3), Split::Test, 18, 4).unwrap().into_iter().filter(|c| c.static_label == 0).collect();
    assert!(matches!(train_judge(&clips, &clips, 3, 3, &small_judge_config()), Err(Error::Domain(_))));
}

#[test]
fn swap_decode_contracts() {
    let (model, store) = tiny_model(2);
    let sched = sampler();
    let clips = generate_split(&spec(3), Split::Test, 2, 5).unwrap();
    let (a, b) = (&clips[0].frames, &clips[1].frames);
    let out = swap_decode(&model, &store, a, b, &sched, &mut NoiseRng::seed_from_u64(1)).unwrap();
    assert_eq!(out.shape(), a.shape());
    assert!(out.all_finite());
    let again = swap_decode(&model, &store, a, b, &sched, &mut NoiseRng::seed_from_u64(1)).unwrap();
    assert_eq!(out, again);

    let short = a.narrow_leading(0, 3);
    assert!(matches!(swap_decode(&model, &store, &short, b, &sched, &mut NoiseRng::seed_from_u64(1)), Err(Error::Length { .. })));
    let flat = a.clone().reshape(vec![NU * 3, 16, 16]);
    assert!(matches!(swap_decode(&model, &store, &flat, b, &sched, &mut NoiseRng::seed_from_u64(1)), Err(Error::Shape(_))));
}

#[test]
fn self_swap_equals_reconstruction() {
    let (model, store) = tiny_model(3);
    let sched = sampler();
    let clip = &generate_split(&spec(3), Split::Test, 1, 6).unwrap()[0].frames;
    let swapped = swap_decode(&model, &store, clip, clip, &sched, &mut NoiseRng::seed_from_u64(9)).unwrap();
    let batch = divid_core::model::stack_clips(&[clip]).unwrap();
    let recon = model.reconstruct(&store, &batch, &sched, &mut NoiseRng::seed_from_u64(9)).unwrap();
    assert!(swapped.max_abs_diff(&recon.reshape(clip.shape().to_vec())) < 1e-5);
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

#[test]
fn codes_containing_the_label_are_fully_leaky() {
    let train_y: Vec<usize> = (0..120).map(|i| i % 6).collect();
    let test_y: Vec<usize> = (0..60).map(|i| (i * 5) % 6).collect();
    let cfg = ProbeConfig { steps: 300, ..ProbeConfig::default() };
    let acc = probe_accuracy(&one_hot(&train_y, 6), &train_y, &one_hot(&test_y, 6), &test_y, 6, &cfg).unwrap();
    assert_eq!(acc, 100.0);
}

#[test]
fn degenerate_probe_labels_are_rejected() {
    let y = vec![2usize; 10];
    assert!(matches!(train_probe(&one_hot(&y, 6), &y, 6, &ProbeConfig::default()), Err(Error::Domain(_))));
    let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
    assert!(matches!(train_probe(&one_hot(&y, 2), &y, 1, &ProbeConfig::default()), Err(Error::Domain(_))));
}

#[test]
fn random_encoder_static_code_sits_at_shuffled_chance() {
    let (model, store) = tiny_model(4);
    let s = spec(6);
    let train = generate_split(&s, Split::Train, 144, 7).unwrap();
    let test = generate_split(&s, Split::Test, 72, 7).unwrap();
    let (s_tr, _) = probe_codes(&model, &store, &train).unwrap();
    let (s_te, _) = probe_codes(&model, &store, &test).unwrap();
    let y_tr: Vec<usize> = train.iter().map(|c| c.dynamic_label).collect();
    let y_te: Vec<usize> = test.iter().map(|c| c.dynamic_label).collect();
    let cfg = ProbeConfig { steps: 300, ..ProbeConfig::default() };
    let acc = probe_accuracy(&s_tr, &y_tr, &s_te, &y_te, 6, &cfg).unwrap();
    let chance = shuffled_probe_accuracy(&s_tr, &y_tr, &s_te, &y_te, 6, &cfg).unwrap();
    let p = chance.clamp(1.0, 99.0) / 100.0;
    let se = 100.0 * (p * (1.0 - p) / y_te.len() as f64).sqrt();
    assert!((acc - chance).abs() <= 3.0 * se, "probe {acc} vs shuffled {chance} (3 SE = {})", 3.0 * se);
}

#[test]
fn leakage_report_averages_its_two_probes() {
    let (model, store) = tiny_model(5);
    let s = spec(3);
    let train = generate_split(&s, Split::Train, 36, 8).unwrap();
    let test = generate_split(&s, Split::Test, 18, 8).unwrap();
    let cfg = ProbeConfig { steps: 50, ..ProbeConfig::default() };
    let r = eval_leakage(&model, &store, &train, &test, 3, 3, &cfg).unwrap();
    assert_eq!(r.average_leakage, (r.acc_s_to_d + r.acc_d_to_s) / 2.0);
    assert_eq!((r.num_train, r.num_test), (36, 18));
    assert!(matches!(eval_leakage(&model, &store, &[], &test, 3, 3, &cfg), Err(Error::Domain(_))));
}
