//! Swap-based disentanglement scoring and cross-leakage probes.
//!
//! The judge is a small two-headed video classifier trained once on real
//! clips and then frozen. Probes are two-layer MLPs fit on frozen codes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::VideoClip;
use crate::diffusion::{sample_batch_per_clip, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{stack_clips, DividModel};
use crate::nn::{Conv2d, Linear, Lstm, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, NoiseRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub channels: usize,
    pub feature_dim: usize,
    pub motion_hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Std of Gaussian pixel noise added to training inputs.
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { channels: 16, feature_dim: 64, motion_hidden: 64, steps: 1500, batch_size: 16, lr: 1e-3, noise_std: 0.1, seed: 0 }
    }
}

/// Architecture plus metadata needed to rebuild a judge from its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeMeta {
    pub config: JudgeConfig,
    pub frame_shape: [usize; 3],
    pub num_identities: usize,
    pub num_motions: usize,
    pub identity_acc: f64,
    pub motion_acc: f64,
}

/// Frozen two-headed classifier. Identity is read from the temporal mean of
/// per-frame features, motion from a recurrence over feature differences.
#[derive(Clone, Debug)]
pub struct JudgeClassifier {
    pub meta: JudgeMeta,
    store: ParamStore,
    convs: [Conv2d; 3],
    proj: Linear,
    identity_head: Linear,
    motion_rnn: Lstm,
    motion_head: Linear,
}

impl JudgeClassifier {
    /// Randomly initialized judge; accuracies start at zero.
    pub fn new(config: &JudgeConfig, frame_shape: [usize; 3], num_identities: usize, num_motions: usize) -> Result<Self> {
        let [c, h, w] = frame_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(alloc::format!("judge needs H, W divisible by 4, got {h}x{w}")));
        }
        if num_identities < 2 || num_motions < 2 {
            return Err(Error::Domain("judge needs at least two classes per head".into()));
        }
        if [config.channels, config.feature_dim, config.motion_hidden, config.batch_size].contains(&0) {
            return Err(Error::Domain("judge sizes must be positive".into()));
        }
        let mut rng = NoiseRng::seed_from_u64(derive_seed(&[config.seed, 11]));
        let mut store = ParamStore::new();
        let ch = config.channels;
        let convs = [
            Conv2d::new(&mut store, "judge.conv0", c, ch, 3, 1, &mut rng),
            Conv2d::new(&mut store, "judge.conv1", ch, 2 * ch, 3, 2, &mut rng),
            Conv2d::new(&mut store, "judge.conv2", 2 * ch, 2 * ch, 3, 2, &mut rng),
        ];
        let flat = 2 * ch * (h / 4) * (w / 4);
        let proj = Linear::new(&mut store, "judge.proj", flat, config.feature_dim, &mut rng);
        let identity_head = Linear::new(&mut store, "judge.identity", config.feature_dim, num_identities, &mut rng);
        let motion_rnn = Lstm::new(&mut store, "judge.motion_rnn", config.feature_dim, config.motion_hidden, &mut rng);
        let motion_head = Linear::new(&mut store, "judge.motion", config.motion_hidden, num_motions, &mut rng);
        let meta = JudgeMeta {
            config: config.clone(),
            frame_shape,
            num_identities,
            num_motions,
            identity_acc: 0.0,
            motion_acc: 0.0,
        };
        Ok(Self { meta, store, convs, proj, identity_head, motion_rnn, motion_head })
    }

    /// Rebuilds a judge from saved metadata and parameters.
    pub fn from_parts(meta: JudgeMeta, store: ParamStore) -> Result<Self> {
        let mut judge = Self::new(&meta.config, meta.frame_shape, meta.num_identities, meta.num_motions)?;
        if store.len() != judge.store.len() {
            return Err(Error::Length { needed: judge.store.len(), got: store.len() });
        }
        for ((_, a), (_, b)) in judge.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(alloc::format!("judge parameter {} does not match {}", a.name, b.name)));
            }
        }
        judge.store = store;
        judge.meta = meta;
        Ok(judge)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, g: &mut Graph<'_>, clips: Var) -> (Var, Var) {
        let shape = g.shape(clips).to_vec();
        let (b, nu) = (shape[0], shape[1]);
        let mut x = g.reshape(clips, &[b * nu, shape[2], shape[3], shape[4]]);
        for conv in &self.convs {
            x = conv.forward(g, x);
            x = g.relu(x);
        }
        let flat: usize = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[b, nu, flat]);
        let f = self.proj.forward(g, x);
        let f = g.relu(f);
        let pooled = g.mean_axis(f, 1);
        let pooled = g.reshape(pooled, &[b, self.meta.config.feature_dim]);
        let id_logits = self.identity_head.forward(g, pooled);
        let later = g.slice(f, 1, 1, nu - 1);
        let earlier = g.slice(f, 1, 0, nu - 1);
        let diffs = g.sub(later, earlier);
        let h = self.motion_rnn.forward(g, diffs, false);
        let last = g.slice(h, 1, nu - 2, 1);
        let last = g.reshape(last, &[b, self.meta.config.motion_hidden]);
        let motion_logits = self.motion_head.forward(g, last);
        (id_logits, motion_logits)
    }

    fn check_clips(&self, clips: &Tensor) -> Result<()> {
        let s = clips.shape();
        if s.len() != 5 || s[2..] != self.meta.frame_shape || s[1] < 2 {
            return Err(Error::Shape(alloc::format!(
                "judge expects (B, nu >= 2, {:?}), got {s:?}",
                self.meta.frame_shape
            )));
        }
        Ok(())
    }

    /// Predicted (identity, motion) per clip of `clips` (B, ν, C, H, W).
    pub fn predict(&self, clips: &Tensor) -> Result<Vec<(usize, usize)>> {
        self.check_clips(clips)?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(clips.clone());
        let (id, mo) = self.forward(&mut g, x);
        Ok(argmax_rows(g.value(id)).into_iter().zip(argmax_rows(g.value(mo))).collect())
    }

    /// Per-head accuracies in percent over labeled clips.
    pub fn accuracy(&self, clips: &[VideoClip]) -> Result<(f64, f64)> {
        if clips.is_empty() {
            return Err(Error::Domain("no clips to score".into()));
        }
        let (mut id_hits, mut mo_hits) = (0usize, 0usize);
        for chunk in clips.chunks(32) {
            let batch = stack_clips(&chunk.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
            for (clip, (pi, pm)) in chunk.iter().zip(self.predict(&batch)?) {
                id_hits += usize::from(pi == clip.static_label);
                mo_hits += usize::from(pm == clip.dynamic_label);
            }
        }
        let n = clips.len() as f64;
        Ok((100.0 * id_hits as f64 / n, 100.0 * mo_hits as f64 / n))
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
        })
        .collect()
}

fn distinct(labels: impl Iterator<Item = usize>) -> usize {
    let mut seen: Vec<usize> = labels.collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Trains a judge on `train` and records its accuracy on `heldout`.
pub fn train_judge(
    train: &[VideoClip],
    heldout: &[VideoClip],
    num_identities: usize,
    num_motions: usize,
    config: &JudgeConfig,
) -> Result<JudgeClassifier> {
    let first = train.first().ok_or_else(|| Error::Domain("judge training set is empty".into()))?;
    if distinct(train.iter().map(|c| c.static_label)) < 2 || distinct(train.iter().map(|c| c.dynamic_label)) < 2 {
        return Err(Error::Domain("judge training set needs at least two classes of each label".into()));
    }
    if let Some(c) = train.iter().find(|c| c.static_label >= num_identities || c.dynamic_label >= num_motions) {
        return Err(Error::Domain(alloc::format!("clip {} has labels out of range", c.clip_id)));
    }
    let fs = first.frames.shape();
    let mut judge = JudgeClassifier::new(config, [fs[1], fs[2], fs[3]], num_identities, num_motions)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &judge.store);
    let mut rng = NoiseRng::seed_from_u64(derive_seed(&[config.seed, 12]));
    for _ in 0..config.steps {
        let picks: Vec<&VideoClip> =
            (0..config.batch_size).map(|_| &train[rng.uniform_inclusive(0, train.len() - 1)]).collect();
        let mut batch = stack_clips(&picks.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
        if config.noise_std > 0.0 {
            let noise = rng.normal_tensor(batch.shape());
            batch.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += config.noise_std * n);
        }
        let ids: Vec<usize> = picks.iter().map(|c| c.static_label).collect();
        let motions: Vec<usize> = picks.iter().map(|c| c.dynamic_label).collect();
        let grads = {
            let mut g = Graph::new(&judge.store);
            let x = g.constant(batch);
            let (id, mo) = judge.forward(&mut g, x);
            let l_id = g.cross_entropy(id, &ids);
            let l_mo = g.cross_entropy(mo, &motions);
            let loss = g.add(l_id, l_mo);
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("judge loss".into()));
            }
            g.backward(loss).param_grads(&g)
        };
        adam.update(&mut judge.store, &grads)?;
    }
    if !heldout.is_empty() {
        let (ia, ma) = judge.accuracy(heldout)?;
        judge.meta.identity_acc = ia;
        judge.meta.motion_acc = ma;
    }
    Ok(judge)
}

/// Decodes the target's dynamic tokens with the source's static token:
/// source appearance, target motion.
pub fn swap_decode(
    model: &DividModel,
    store: &ParamStore,
    src: &Tensor,
    tgt: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Tensor> {
    if src.rank() != 4 || tgt.rank() != 4 {
        return Err(Error::Shape(alloc::format!("clips must be (nu, C, H, W), got {:?} and {:?}", src.shape(), tgt.shape())));
    }
    if src.shape()[0] != tgt.shape()[0] {
        return Err(Error::Length { needed: tgt.shape()[0], got: src.shape()[0] });
    }
    let clips = stack_clips(&[src, tgt])?;
    let (s, d) = model.encode_batch(store, &clips)?;
    let s_src = s.narrow_leading(0, 1);
    let d_tgt = d.narrow_leading(1, 1);
    let out = sample_batch_per_clip(&model.denoiser, store, &s_src, &d_tgt, model.frame_shape(), schedule, core::slice::from_mut(rng))?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(shape))
}

/// Index pairs `(i, j)`, `i < j`, whose clips differ in both labels, reduced
/// to at most `cap` by seeded subsampling. Output is sorted.
pub fn select_pairs(clips: &[VideoClip], cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            if clips[i].static_label != clips[j].static_label && clips[i].dynamic_label != clips[j].dynamic_label {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() > cap {
        let mut rng = NoiseRng::seed_from_u64(derive_seed(&[seed, 13]));
        for k in 0..cap {
            let pick = rng.uniform_inclusive(k, pairs.len() - 1);
            pairs.swap(k, pick);
        }
        pairs.truncate(cap);
        pairs.sort_unstable();
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub static_source: String,
    pub dynamic_source: String,
    pub target_identity: usize,
    pub target_motion: usize,
    pub predicted_identity: usize,
    pub predicted_motion: usize,
}

impl SwapRecord {
    pub fn identity_hit(&self) -> bool {
        self.predicted_identity == self.target_identity
    }

    pub fn motion_hit(&self) -> bool {
        self.predicted_motion == self.target_motion
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub static_only_acc: f64,
    pub dynamic_only_acc: f64,
    pub joint_acc: f64,
    pub num_pairs: usize,
    pub records: Vec<SwapRecord>,
}

impl SwapReport {
    /// Accuracies from per-swap records, which are sorted for order independence.
    pub fn from_records(num_pairs: usize, mut records: Vec<SwapRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Domain("no swap records".into()));
        }
        records.sort_by(|a, b| (&a.static_source, &a.dynamic_source).cmp(&(&b.static_source, &b.dynamic_source)));
        let n = records.len() as f64;
        let pct = |f: &dyn Fn(&SwapRecord) -> bool| 100.0 * records.iter().filter(|r| f(r)).count() as f64 / n;
        Ok(Self {
            static_only_acc: pct(&|r| r.identity_hit()),
            dynamic_only_acc: pct(&|r| r.motion_hit()),
            joint_acc: pct(&|r| r.identity_hit() && r.motion_hit()),
            num_pairs,
            records,
        })
    }
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed for the swap taking its static token from `static_id` and its dynamic
/// tokens from `dynamic_id`; independent of pair order and batching.
pub fn swap_seed(seed: u64, static_id: &str, dynamic_id: &str) -> u64 {
    derive_seed(&[seed, id_hash(static_id), id_hash(dynamic_id)])
}

/// Anything that turns (static source, dynamic source) requests into clips.
pub trait SwapDecoder {
    /// Returns one clip (ν, C, H, W) per `(static_index, dynamic_index)` request.
    fn decode(&self, clips: &[VideoClip], requests: &[(usize, usize)], seed: u64) -> Result<Vec<Tensor>>;
}

/// The trained model as a swap decoder, processing `batch` swaps per sampler call.
pub struct ModelSwapper<'a> {
    pub model: &'a DividModel,
    pub store: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
    pub batch: usize,
}

impl SwapDecoder for ModelSwapper<'_> {
    fn decode(&self, clips: &[VideoClip], requests: &[(usize, usize)], seed: u64) -> Result<Vec<Tensor>> {
        let mut used: Vec<usize> = requests.iter().flat_map(|&(a, b)| [a, b]).collect();
        used.sort_unstable();
        used.dedup();
        let mut tokens: Vec<Option<(Tensor, Tensor)>> = vec![None; clips.len()];
        for chunk in used.chunks(self.batch.max(1)) {
            let batch = stack_clips(&chunk.iter().map(|&i| &clips[i].frames).collect::<Vec<_>>())?;
            let (s, d) = self.model.encode_batch(self.store, &batch)?;
            for (k, &i) in chunk.iter().enumerate() {
                tokens[i] = Some((s.narrow_leading(k, 1), d.narrow_leading(k, 1)));
            }
        }
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.batch.max(1)) {
            let (mut s_parts, mut d_parts, mut rngs) = (Vec::new(), Vec::new(), Vec::new());
            for &(si, di) in chunk {
                let (s, _) = tokens[si].as_ref().expect("encoded");
                let (_, d) = tokens[di].as_ref().expect("encoded");
                s_parts.push(s.clone().reshape(vec![s.numel()]));
                d_parts.push(d.clone().reshape(d.shape()[1..].to_vec()));
                rngs.push(NoiseRng::seed_from_u64(swap_seed(seed, &clips[si].clip_id, &clips[di].clip_id)));
            }
            let frames = sample_batch_per_clip(
                &self.model.denoiser,
                self.store,
                &Tensor::stack(&s_parts),
                &Tensor::stack(&d_parts),
                self.model.frame_shape(),
                self.schedule,
                &mut rngs,
            )?;
            out.extend((0..chunk.len()).map(|k| {
                let one = frames.narrow_leading(k, 1);
                let shape = one.shape()[1..].to_vec();
                one.reshape(shape)
            }));
        }
        Ok(out)
    }
}

/// Scores both swap directions of every pair with the frozen judge.
pub fn eval_swap(
    decoder: &dyn SwapDecoder,
    judge: &JudgeClassifier,
    clips: &[VideoClip],
    pairs: &[(usize, usize)],
    seed: u64,
) -> Result<SwapReport> {
    if pairs.is_empty() {
        return Err(Error::Domain("swap evaluation needs at least one pair".into()));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= clips.len() || b >= clips.len()) {
        return Err(Error::Domain(alloc::format!("pair ({a}, {b}) out of range for {} clips", clips.len())));
    }
    let requests: Vec<(usize, usize)> = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let outputs = decoder.decode(clips, &requests, seed)?;
    if outputs.len() != requests.len() {
        return Err(Error::Length { needed: requests.len(), got: outputs.len() });
    }
    let mut records = Vec::with_capacity(requests.len());
    for (chunk_req, chunk_out) in requests.chunks(32).zip(outputs.chunks(32)) {
        let batch = stack_clips(&chunk_out.iter().collect::<Vec<_>>())?;
        for (&(si, di), (pi, pm)) in chunk_req.iter().zip(judge.predict(&batch)?) {
            records.push(SwapRecord {
                static_source: clips[si].clip_id.clone(),
                dynamic_source: clips[di].clip_id.clone(),
                target_identity: clips[si].static_label,
                target_motion: clips[di].dynamic_label,
                predicted_identity: pi,
                predicted_motion: pm,
            });
        }
    }
    SwapReport::from_records(pairs.len(), records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 256, steps: 1000, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

/// Two-layer MLP classifier over standardized feature vectors.
#[derive(Clone, Debug)]
pub struct Probe {
    store: ParamStore,
    mlp: Mlp,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Probe {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let f = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.rank() != 2 || x.shape()[1] != self.mean.len() {
            return Err(Error::Shape(alloc::format!("probe expects (N, {}), got {:?}", self.mean.len(), x.shape())));
        }
        let mut g = Graph::inference(&self.store);
        let v = g.constant(self.standardize(x));
        let logits = self.mlp.forward(&mut g, v);
        Ok(argmax_rows(g.value(logits)))
    }

    /// Accuracy in percent.
    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != y.len() || y.is_empty() {
            return Err(Error::Length { needed: pred.len(), got: y.len() });
        }
        Ok(100.0 * pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
    }
}

/// Fits a probe on codes `x` (N, F) with labels in `0..classes`.
pub fn train_probe(x: &Tensor, y: &[usize], classes: usize, config: &ProbeConfig) -> Result<Probe> {
    if x.rank() != 2 || x.shape()[0] != y.len() || y.is_empty() {
        return Err(Error::Shape(alloc::format!("probe data {:?} with {} labels", x.shape(), y.len())));
    }
    if classes < 2 || distinct(y.iter().copied()) < 2 {
        return Err(Error::Domain("probe labels are degenerate (fewer than two classes)".into()));
    }
    if let Some(bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(alloc::format!("probe label {bad} outside 0..{classes}")));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; f];
    let mut var = vec![0.0f64; f];
    for row in x.data().chunks(f) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += f64::from(*v) / n as f64);
    }
    for row in x.data().chunks(f) {
        row.iter().zip(&mean).zip(&mut var).for_each(|((v, m), s)| *s += (f64::from(*v) - m).powi(2) / n as f64);
    }
    let mut rng = NoiseRng::seed_from_u64(derive_seed(&[config.seed, 14]));
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "probe", &[f, config.hidden, classes], &mut rng);
    let mut probe = Probe {
        store,
        mlp,
        mean: mean.iter().map(|&m| m as f32).collect(),
        inv_std: var.iter().map(|&v| (1.0 / libm::sqrt(v + 1e-8)) as f32).collect(),
    };
    let xs = probe.standardize(x);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &probe.store);
    let bs = config.batch_size.clamp(1, n);
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.uniform_inclusive(0, n - 1)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let grads = {
            let mut g = Graph::new(&probe.store);
            let all = g.constant(xs.clone());
            let rows = g.gather_rows(all, &idx);
            let logits = probe.mlp.forward(&mut g, rows);
            let loss = g.cross_entropy(logits, &labels);
            g.backward(loss).param_grads(&g)
        };
        adam.update(&mut probe.store, &grads)?;
    }
    Ok(probe)
}

/// Held-out accuracy of a probe trained on `(train_x, train_y)`.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    train_probe(train_x, train_y, classes, config)?.accuracy(test_x, test_y)
}

/// Same probe fit on a seeded permutation of the training labels; the
/// resulting held-out accuracy is the harness's chance level.
pub fn shuffled_probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    let mut y = train_y.to_vec();
    let mut rng = NoiseRng::seed_from_u64(derive_seed(&[config.seed, 15]));
    for k in (1..y.len()).rev() {
        y.swap(k, rng.uniform_inclusive(0, k));
    }
    probe_accuracy(train_x, &y, test_x, test_y, classes, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Motion label predicted from the static token.
    pub acc_s_to_d: f64,
    /// Identity label predicted from the frame-mean of the dynamic tokens.
    pub acc_d_to_s: f64,
    pub average_leakage: f64,
    pub chance_s_to_d: f64,
    pub chance_d_to_s: f64,
    pub num_train: usize,
    pub num_test: usize,
}

impl LeakageReport {
    pub fn new(acc_s_to_d: f64, acc_d_to_s: f64, chance_s_to_d: f64, chance_d_to_s: f64, num_train: usize, num_test: usize) -> Self {
        Self {
            acc_s_to_d,
            acc_d_to_s,
            average_leakage: (acc_s_to_d + acc_d_to_s) / 2.0,
            chance_s_to_d,
            chance_d_to_s,
            num_train,
            num_test,
        }
    }
}

/// Static codes (N, token) and frame-averaged dynamic codes (N, token).
pub fn probe_codes(model: &DividModel, store: &ParamStore, clips: &[VideoClip]) -> Result<(Tensor, Tensor)> {
    let td = model.token_dim();
    let (mut s_all, mut d_all) = (Vec::new(), Vec::new());
    for chunk in clips.chunks(16) {
        let batch = stack_clips(&chunk.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
        let (s, d) = model.encode_batch(store, &batch)?;
        s_all.extend_from_slice(s.data());
        let nu = d.shape()[1];
        for clip in d.data().chunks(nu * td) {
            let mut mean = vec![0.0f32; td];
            for tok in clip.chunks(td) {
                mean.iter_mut().zip(tok).for_each(|(m, v)| *m += v / nu as f32);
            }
            d_all.extend(mean);
        }
    }
    Ok((Tensor::new(vec![clips.len(), td], s_all), Tensor::new(vec![clips.len(), td], d_all)))
}

/// Cross-leakage of a frozen encoder: probes fit on `train` codes, scored on `test`.
pub fn eval_leakage(
    model: &DividModel,
    store: &ParamStore,
    train: &[VideoClip],
    test: &[VideoClip],
    num_identities: usize,
    num_motions: usize,
    config: &ProbeConfig,
) -> Result<LeakageReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Domain("leakage evaluation needs train and test clips".into()));
    }
    let (s_tr, d_tr) = probe_codes(model, store, train)?;
    let (s_te, d_te) = probe_codes(model, store, test)?;
    let motion = |c: &[VideoClip]| c.iter().map(|c| c.dynamic_label).collect::<Vec<_>>();
    let identity = |c: &[VideoClip]| c.iter().map(|c| c.static_label).collect::<Vec<_>>();
    let (m_tr, m_te, i_tr, i_te) = (motion(train), motion(test), identity(train), identity(test));
    let s_to_d = probe_accuracy(&s_tr, &m_tr, &s_te, &m_te, num_motions, config)?;
    let d_to_s = probe_accuracy(&d_tr, &i_tr, &d_te, &i_te, num_identities, config)?;
    let chance_sd = shuffled_probe_accuracy(&s_tr, &m_tr, &s_te, &m_te, num_motions, config)?;
    let chance_ds = shuffled_probe_accuracy(&d_tr, &i_tr, &d_te, &i_te, num_identities, config)?;
    Ok(LeakageReport::new(s_to_d, d_to_s, chance_sd, chance_ds, train.len(), test.len()))
}
