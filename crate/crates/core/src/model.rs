//! Encoder plus denoiser sharing one parameter store.

use alloc::vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::diffusion::{sample_batch, DenoiserConfig, NoiseSchedule, UNet};
use crate::encoder::{EncoderConfig, SequenceEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{derive_seed, NoiseRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DividModel {
    pub encoder: SequenceEncoder,
    pub denoiser: UNet,
}

impl DividModel {
    /// Builds both networks. Encoder and denoiser draw their initial weights
    /// from separate streams of `seed`, so an encoder built with the same seed
    /// is identical whatever the denoiser config.
    pub fn new(
        encoder: &EncoderConfig,
        denoiser: &DenoiserConfig,
        frame_shape: [usize; 3],
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
        let enc = SequenceEncoder::new(&mut store, encoder, frame_shape, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2]));
        let den = UNet::new(&mut store, denoiser, frame_shape, encoder.token_dim, &mut rng)?;
        Ok((Self { encoder: enc, denoiser: den }, store))
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        self.encoder.frame_shape
    }

    pub fn token_dim(&self) -> usize {
        self.encoder.config.token_dim
    }

    /// Inference encoding of clips (B, ν, C, H, W) to s (B, token) and d (B, ν, token).
    pub fn encode_batch(&self, store: &ParamStore, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        if clips.rank() != 5 {
            return Err(Error::Shape(alloc::format!("clips must be (B, nu, C, H, W), got {:?}", clips.shape())));
        }
        self.encoder.check_frames(clips.shape())?;
        let mut g = Graph::inference(store);
        let x = g.constant(clips.clone());
        let (s, d) = self.encoder.encode(&mut g, x);
        Ok((g.value(s).clone(), g.value(d).clone()))
    }

    /// Decodes clips from tokens with the ancestral sampler.
    pub fn decode_batch(
        &self,
        store: &ParamStore,
        s: &Tensor,
        d: &Tensor,
        schedule: &NoiseSchedule,
        rng: &mut NoiseRng,
    ) -> Result<Tensor> {
        sample_batch(&self.denoiser, store, s, d, self.frame_shape(), schedule, rng)
    }

    /// Encodes then decodes `clips` (B, ν, C, H, W) without swapping.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        clips: &Tensor,
        schedule: &NoiseSchedule,
        rng: &mut NoiseRng,
    ) -> Result<Tensor> {
        let (s, d) = self.encode_batch(store, clips)?;
        self.decode_batch(store, &s, &d, schedule, rng)
    }
}

/// Stacks equally shaped (ν, C, H, W) clips into (B, ν, C, H, W).
pub fn stack_clips(clips: &[&Tensor]) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| Error::Domain("no clips to stack".into()))?;
    if let Some(bad) = clips.iter().find(|c| c.shape() != first.shape()) {
        return Err(Error::Shape(alloc::format!("clip {:?} vs {:?}", bad.shape(), first.shape())));
    }
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(first.shape());
    let mut data = alloc::vec::Vec::with_capacity(clips.len() * first.numel());
    clips.iter().for_each(|c| data.extend_from_slice(c.data()));
    Ok(Tensor::new(shape, data))
}
