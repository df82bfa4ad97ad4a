extern crate std;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Central-difference check of d(sum(out * r))/d(inputs) against the tape.
fn check(inputs: &[Tensor], build: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        rand_tensor(g.shape(out), &mut rng)
    };
    let objective = |g: &mut Graph<'_>, vars: &[Var]| {
        let out = build(g, vars);
        let r = g.constant(probe.clone());
        let prod = g.mul(out, r);
        g.sum(prod)
    };
    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = objective(&mut g, &vars);
    let grads = g.backward(loss);

    let eps = 1e-2f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input received no gradient").to_vec();
        for j in 0..input.numel() {
            let eval = |delta: f32| {
                let mut perturbed: Vec<Tensor> = inputs.to_vec();
                perturbed[k].data_mut()[j] += delta;
                let mut g = Graph::detached();
                let vs: Vec<Var> = perturbed.into_iter().map(|t| g.constant(t)).collect();
                let l = objective(&mut g, &vs);
                g.value(l).item() as f64
            };
            let numeric = ((eval(eps) - eval(-eps)) / (2.0 * eps as f64)) as f32;
            let a = analytic[j];
            let tol = 2e-2 * a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rt(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let a = rt(&[2, 3, 4], 1);
    let b = rt(&[2, 3, 4], 2);
    let s = rt(&[3, 4], 3);
    check(&[a.clone(), b.clone()], |g, v| {
        let x = g.add(v[0], v[1]);
        let y = g.mul(x, v[1]);
        g.sub(y, v[0])
    });
    check(&[a.clone(), s.clone()], |g, v| g.add_bcast(v[0], v[1]));
    check(&[a.clone(), s], |g, v| g.mul_bcast(v[0], v[1]));
    check(&[a], |g, v| g.scale(v[0], -1.7));
}

#[test]
fn unary_gradients() {
    // keep away from relu's kink
    let mut a = rt(&[3, 5], 4);
    a.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.2
        }
    });
    for kind in [Unary::Relu, Unary::Silu, Unary::Sigmoid, Unary::Tanh, Unary::Gelu, Unary::Square] {
        check(&[a.clone()], move |g, v| g.unary(v[0], kind));
    }
}

#[test]
fn reduction_gradients() {
    let a = rt(&[2, 3, 4], 5);
    let b = rt(&[2, 3, 4], 6);
    check(&[a.clone()], |g, v| g.sum(v[0]));
    check(&[a.clone()], |g, v| g.mean(v[0]));
    check(&[a.clone(), b], |g, v| g.l1_loss(v[0], v[1]));
    check(&[a.clone()], |g, v| g.mean_axis(v[0], 1));
    check(&[a], |g, v| g.mean_axis(v[0], 2));
}

#[test]
fn layout_gradients() {
    let a = rt(&[2, 3, 4], 7);
    let b = rt(&[2, 2, 4], 8);
    check(&[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1));
    check(&[a.clone()], |g, v| g.slice(v[0], 2, 1, 2));
    check(&[a], |g, v| g.gather_rows(v[0], &[1, 0, 1]));
}

#[test]
fn permute_matches_manual_transpose() {
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let p = kernels::permute(&t, &[1, 0]);
    assert_eq!(p.shape(), [3, 2]);
    assert_eq!(p.data(), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}

#[test]
fn matmul_gradients() {
    let x = rt(&[2, 3, 5], 9);
    let w = rt(&[4, 5], 10);
    let b = rt(&[4], 11);
    check(&[x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(&[x.clone(), w], |g, v| g.linear(v[0], v[1], None));
    let y = rt(&[2, 5, 3], 12);
    let z = rt(&[2, 4, 5], 13);
    check(&[x.clone(), y], |g, v| g.bmm(v[0], v[1], false));
    check(&[x, z], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn conv_gradients() {
    let x = rt(&[2, 3, 5, 5], 14);
    let w = rt(&[4, 3, 3, 3], 15);
    let b = rt(&[4], 16);
    check(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    check(&[x.clone(), w.clone(), b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    let w1 = rt(&[2, 3, 1, 1], 17);
    check(&[x.clone(), w1], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
    check(&[x], |g, v| g.upsample2x(v[0]));
}

#[test]
fn conv_matches_direct_convolution() {
    let x = rt(&[1, 2, 4, 4], 18);
    let w = rt(&[3, 2, 3, 3], 19);
    let mut g = Graph::detached();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 1, 1);
    let out = g.value(y);
    for co in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0f32;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += x.data()[(ci * 4 + iy as usize) * 4 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                let got = out.data()[(co * 4 + oy) * 4 + ox];
                assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
            }
        }
    }
}

#[test]
fn norm_and_softmax_gradients() {
    let x = rt(&[2, 4, 3, 3], 20);
    let ga = rt(&[4], 21);
    let be = rt(&[4], 22);
    check(&[x, ga, be], |g, v| g.group_norm(v[0], v[1], v[2], 2));
    let y = rt(&[3, 6], 23);
    let ga = rt(&[6], 24);
    let be = rt(&[6], 25);
    check(&[y.clone(), ga, be], |g, v| g.layer_norm(v[0], v[1], v[2]));
    check(&[y.clone()], |g, v| g.softmax(v[0]));
    check(&[y.clone()], |g, v| g.l2_normalize_rows(v[0]));
    check(&[y], |g, v| g.cross_entropy(v[0], &[0, 5, 2]));
}

#[test]
fn scale_shift_gradients() {
    let x = rt(&[2, 3, 2, 2], 26);
    let sc = rt(&[2, 3], 27);
    let sh = rt(&[2, 3], 28);
    check(&[x, sc, sh], |g, v| g.scale_shift(v[0], v[1], v[2]));
}

#[test]
fn params_collect_gradients_and_freeze() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]));
    let u = store.add("u", Tensor::new(vec![2], vec![3.0, 4.0]));
    let mut g = Graph::new(&store);
    g.freeze(u);
    let (wv, uv) = (g.param(w), g.param(u));
    let p = g.mul(wv, uv);
    let l = g.sum(p);
    let grads = g.backward(l).param_grads(&g);
    assert_eq!(grads[w.index()].as_ref().unwrap().data(), [3.0, 4.0]);
    assert!(grads[u.index()].is_none());
}

#[test]
fn inference_graph_tracks_nothing() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![1], vec![2.0]));
    let mut g = Graph::inference(&store);
    let wv = g.param(w);
    let y = g.square(wv);
    assert!(!g.requires_grad(y));
    assert_eq!(g.value(y).item(), 4.0);
}
