use rand::Rng;

use super::{sub, Linear};
use crate::autograd::{Graph, Var};
use crate::math;
use crate::params::ParamStore;

/// Scaled dot-product attention. `q` (B, L, D), `k`/`v` (B, S, D); heads split D.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let (b, l, d) = (qs[0], qs[1], qs[2]);
    let s = ks[1];
    assert!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let split = |g: &mut Graph<'_>, x: Var, len: usize| {
        if heads == 1 {
            return x;
        }
        let x = g.reshape(x, &[b, len, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * heads, len, dh])
    };
    let (qh, kh, vh) = (split(g, q, l), split(g, k, s), split(g, v, s));
    let scores = g.bmm(qh, kh, true);
    let scores = g.scale(scores, 1.0 / math::sqrt(dh as f32));
    let p = g.softmax(scores);
    let out = g.bmm(p, vh, false);
    if heads == 1 {
        return out;
    }
    let out = g.reshape(out, &[b, heads, l, dh]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    g.reshape(out, &[b, l, d])
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::no_bias(store, &sub(name, "q"), dim, dim, rng),
            k: Linear::no_bias(store, &sub(name, "k"), context_dim, dim, rng),
            v: Linear::no_bias(store, &sub(name, "v"), context_dim, dim, rng),
            out: Linear::new(store, &sub(name, "out"), dim, dim, rng),
            heads,
        }
    }

    /// `x` (B, L, dim) attends over `context` (B, S, context_dim).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, context: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = attention(g, q, k, v, self.heads);
        self.out.forward(g, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multi_head_equals_per_head_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, l, s, d, h) = (2, 3, 4, 6, 3);
        let mk = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q, k, v) = (mk(b * l * d, &mut rng), mk(b * s * d, &mut rng), mk(b * s * d, &mut rng));
        let mut g = Graph::detached();
        let qv = g.constant(Tensor::new(vec![b, l, d], q.clone()));
        let kv = g.constant(Tensor::new(vec![b, s, d], k.clone()));
        let vv = g.constant(Tensor::new(vec![b, s, d], v.clone()));
        let out = attention(&mut g, qv, kv, vv, h);
        let got = g.value(out).data().to_vec();
        let dh = d / h;
        for bi in 0..b {
            for hi in 0..h {
                for li in 0..l {
                    let mut w: Vec<f32> = (0..s)
                        .map(|si| {
                            (0..dh)
                                .map(|j| q[(bi * l + li) * d + hi * dh + j] * k[(bi * s + si) * d + hi * dh + j])
                                .sum::<f32>()
                                / math::sqrt(dh as f32)
                        })
                        .collect();
                    let m = w.iter().cloned().fold(f32::MIN, f32::max);
                    w.iter_mut().for_each(|x| *x = math::exp(*x - m));
                    let z: f32 = w.iter().sum();
                    for j in 0..dh {
                        let want: f32 = (0..s).map(|si| w[si] / z * v[(bi * s + si) * d + hi * dh + j]).sum();
                        let g = got[(bi * l + li) * d + hi * dh + j];
                        assert!((g - want).abs() < 1e-5, "{g} vs {want}");
                    }
                }
            }
        }
    }
}
