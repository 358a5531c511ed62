//! Finite-difference gradient checking shared by the integration targets.

#![allow(dead_code)]

use ictlab::autodiff::{Graph, ParamStore, Tensor, Var};
use ictlab::lm::{LanguageModel, LmConfig};
use ictlab::rng::{self, StreamRng};
use rand::Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-5;
pub const SEEDS: u64 = 50;

/// `‖a − n‖ / (‖a‖ + ‖n‖)` per parameter tensor.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

pub fn numeric_grad(params: &ParamStore, name: &str, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let len = params.get(name).unwrap().len();
    let mut p = params.clone();
    (0..len)
        .map(|i| {
            let x0 = p.get(name).unwrap().data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = x0 + EPS;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[i] = x0 - EPS;
            let down = f(&p);
            p.get_mut(name).unwrap().data_mut()[i] = x0;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

/// Builds `build(graph, params)`, reduces it with a fixed random weighting and
/// compares the reverse sweep with finite differences for every parameter.
pub fn check<B>(label: &str, seed: u64, params: &ParamStore, build: B) -> f64
where
    B: Fn(&mut Graph, &ParamStore) -> Var,
{
    let weights = {
        let mut g = Graph::new();
        let out = build(&mut g, params);
        let mut r = rng::stream(seed, "weights", 0);
        let shape = g.value(out).shape().to_vec();
        let n = g.value(out).len();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let loss = |g: &mut Graph, p: &ParamStore| {
        let out = build(g, p);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };
    let mut g = Graph::new();
    let l = loss(&mut g, params);
    let grads = g.backward(l, params).unwrap();
    let f = |p: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, p);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for name in params.names() {
        let n = numeric_grad(params, name, &f);
        let e = rel_err(grads.get(name).unwrap().data(), &n);
        assert!(e < TOL, "{label} seed {seed} param {name}: relative error {e:e}");
        worst = worst.max(e);
    }
    worst
}

fn rand_tensor(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn store(r: &mut StreamRng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, shape) in shapes {
        p.insert(*name, rand_tensor(r, shape));
    }
    p
}

fn p(g: &mut Graph, ps: &ParamStore, name: &str) -> Var {
    g.param(ps, name).unwrap()
}

pub fn check_ops(seed: u64) {
    let mut r = rng::stream(seed, "gradcheck", 0);
    let (n, k, m) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));

    let ps = store(&mut r, &[("a", &[n, k]), ("b", &[k, m])]);
    check("matmul", seed, &ps, |g, ps| {
        let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
        g.matmul(a, b).unwrap()
    });

    let ps = store(&mut r, &[("a", &[n, k]), ("b", &[m, k])]);
    check("matmul_nt", seed, &ps, |g, ps| {
        let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
        g.matmul_nt(a, b).unwrap()
    });

    let ps = store(&mut r, &[("a", &[n, m]), ("b", &[n, m])]);
    check("add", seed, &ps, |g, ps| {
        let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
        g.add(a, b).unwrap()
    });
    check("mul", seed, &ps, |g, ps| {
        let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
        g.mul(a, b).unwrap()
    });
    // Shared operand: both gradient paths must accumulate.
    check("mul-self", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.mul(a, a).unwrap()
    });

    let ps = store(&mut r, &[("a", &[n, m]), ("bias", &[m])]);
    check("add_row", seed, &ps, |g, ps| {
        let (a, b) = (p(g, ps, "a"), p(g, ps, "bias"));
        g.add_row(a, b).unwrap()
    });

    let ps = store(&mut r, &[("a", &[n, m])]);
    let factor = r.gen_range(-2.0..2.0);
    check("scale", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.scale(a, factor)
    });
    check("tanh", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.tanh(a)
    });
    check("gelu", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.gelu(a)
    });
    check("softmax", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.softmax(a)
    });
    check("sum", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.sum(a)
    });
    let drop_seed = r.gen::<u64>();
    check("dropout", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        let mut dr = rng::stream(drop_seed, "dropout", 0);
        g.dropout(a, 0.3, &mut dr)
    });

    let ps = store(&mut r, &[("a", &[n, n])]);
    check("causal_softmax", seed, &ps, |g, ps| {
        let a = p(g, ps, "a");
        g.causal_softmax(a).unwrap()
    });

    let cols = r.gen_range(2..6);
    // Rows whose spread is near the step size make the central difference
    // itself inaccurate; redraw them.
    let ps = loop {
        let ps = store(&mut r, &[("x", &[n, cols]), ("gain", &[cols]), ("bias", &[cols])]);
        let spread_ok = ps.get("x").unwrap().data().chunks(cols).all(|row| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64).sqrt() > 0.05
        });
        if spread_ok {
            break ps;
        }
    };
    check("layer_norm", seed, &ps, |g, ps| {
        let (x, gain, bias) = (p(g, ps, "x"), p(g, ps, "gain"), p(g, ps, "bias"));
        g.layer_norm(x, gain, bias).unwrap()
    });

    let vocab = r.gen_range(2..7);
    let ids: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..vocab)).collect();
    let ps = store(&mut r, &[("table", &[vocab, m])]);
    check("embed", seed, &ps, |g, ps| {
        let t = p(g, ps, "table");
        g.embed(t, &ids).unwrap()
    });

    let rows: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..n)).collect();
    let ps = store(&mut r, &[("x", &[n, cols])]);
    check("select_rows", seed, &ps, |g, ps| {
        let x = p(g, ps, "x");
        g.select_rows(x, &rows).unwrap()
    });
    let start = r.gen_range(0..cols - 1);
    let len = r.gen_range(1..=cols - start);
    check("cols", seed, &ps, |g, ps| {
        let x = p(g, ps, "x");
        g.cols(x, start, len).unwrap()
    });

    let ps = store(&mut r, &[("a", &[n, k]), ("b", &[n, m]), ("c", &[n, 1])]);
    check("concat_cols", seed, &ps, |g, ps| {
        let parts = [p(g, ps, "a"), p(g, ps, "b"), p(g, ps, "c")];
        g.concat_cols(&parts).unwrap()
    });

    let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..m.max(2))).collect();
    let ps = store(&mut r, &[("logits", &[n, m.max(2)])]);
    check("cross_entropy", seed, &ps, |g, ps| {
        let l = p(g, ps, "logits");
        g.cross_entropy(l, &targets).unwrap()
    });
}

pub fn lm_config(seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_context: 12,
        dropout: if seed % 2 == 0 { 0.0 } else { 0.2 },
        init_std: 0.3,
    }
}

pub fn check_lm_loss(seed: u64) -> f64 {
    let cfg = lm_config(seed);
    let model = LanguageModel::init(cfg.clone(), seed).unwrap();
    let mut r = rng::stream(seed, "lm-tokens", 0);
    let len = r.gen_range(1..8);
    let prompt: Vec<u32> = (0..len).map(|_| r.gen_range(0..11)).collect();
    let answer: Vec<u32> = (0..r.gen_range(1..3)).map(|_| r.gen_range(0..11)).collect();

    let drop_rng = rng::stream(seed, "lm-dropout", 0);
    let (_, grads) = model.loss_and_grad(&prompt, &answer, Some(&mut drop_rng.clone())).unwrap();
    let f = |p: &ParamStore| {
        let m = LanguageModel::from_params(cfg.clone(), p.clone()).unwrap();
        let mut g = Graph::new();
        let l = m.answer_loss(&mut g, &prompt, &answer, Some(&mut drop_rng.clone())).unwrap();
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for name in model.params.names() {
        let n = numeric_grad(&model.params, name, &f);
        let e = rel_err(grads.get(name).unwrap().data(), &n);
        assert!(e < TOL, "lm loss seed {seed} param {name}: relative error {e:e}");
        worst = worst.max(e);
    }
    worst
}

