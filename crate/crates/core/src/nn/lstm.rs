use alloc::vec::Vec;

use rand::Rng;

use super::{sub, Linear};
use crate::autograd::{Graph, Var};
use crate::params::ParamStore;

/// Single-direction LSTM over (B, T, F) sequences with gate order `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        // Same scale as the usual U(-1/sqrt(H), 1/sqrt(H)) recurrent init.
        let input = Linear::new(store, &sub(name, "ih"), in_dim, 4 * hidden, rng);
        let recurrent = Linear::no_bias(store, &sub(name, "hh"), hidden, 4 * hidden, rng);
        Self { input, recurrent, hidden }
    }

    /// Returns hidden states (B, T, H), in input order even when `reverse`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, reverse: bool) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "lstm input must be (B, T, F)");
        let (b, t, h) = (shape[0], shape[1], self.hidden);
        let projected = self.input.forward(g, x);
        let mut hs: Vec<Option<Var>> = alloc::vec![None; t];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xt = g.slice(projected, 1, step, 1);
            let mut gates = g.reshape(xt, &[b, 4 * h]);
            if let Some((hp, _)) = state {
                let rec = self.recurrent.forward(g, hp);
                gates = g.add(gates, rec);
            }
            let i = g.slice(gates, 1, 0, h);
            let f = g.slice(gates, 1, h, h);
            let gg = g.slice(gates, 1, 2 * h, h);
            let o = g.slice(gates, 1, 3 * h, h);
            let i = g.sigmoid(i);
            let gg = g.tanh(gg);
            let o = g.sigmoid(o);
            let mut c = g.mul(i, gg);
            if let Some((_, cp)) = state {
                let f = g.sigmoid(f);
                let keep = g.mul(f, cp);
                c = g.add(c, keep);
            }
            let tc = g.tanh(c);
            let hn = g.mul(o, tc);
            state = Some((hn, c));
            hs[step] = Some(g.reshape(hn, &[b, 1, h]));
        }
        let parts: Vec<Var> = hs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat(&parts, 1)
    }
}

/// Forward and backward LSTMs with outputs concatenated to (B, T, 2H).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Lstm::new(store, &sub(name, "fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &sub(name, "bwd"), in_dim, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.fwd.forward(g, x, false);
        let b = self.bwd.forward(g, x, true);
        g.concat(&[f, b], 2)
    }
}
