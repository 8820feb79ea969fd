//! Central finite-difference checks of the analytic gradients.
//!
//! Each check builds a small random instance, reduces the op's output to a
//! scalar with fixed random weights and compares the tape gradient of every
//! input against `(f(x + h) - f(x - h)) / 2h`. The error is norm-wise:
//! `|analytic - numeric| / max(|analytic|, |numeric|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, Tape, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::keyframe::local_difference;
use crate::mask::{sparse_loss, token_fuse};
use crate::model::{ForwardOptions, Model, ModelConfig, Predictor};
use crate::nn::{Gru, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over all inputs of `f` at `inputs`.
///
/// `f` maps leaf variables to an output of any shape; the output is reduced
/// with fixed random weights drawn from `rng`.
pub fn check_inputs(
    inputs: &[Tensor],
    rng: &mut impl Rng,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let n: usize = probe.iter().product();
    let weights = Tensor::new(probe, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let eval = |xs: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok((tape.value(loss).item(), tape, vars, loss))
    };

    let (_, tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[i]);
        let mut numeric = vec![0.0; x.numel()];
        let mut xs = inputs.to_vec();
        for (k, g) in numeric.iter_mut().enumerate() {
            let orig = x.data()[k];
            xs[i].data_mut()[k] = orig + STEP;
            let up = eval(&xs)?.0;
            xs[i].data_mut()[k] = orig - STEP;
            let down = eval(&xs)?.0;
            xs[i].data_mut()[k] = orig;
            *g = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Worst relative error over the listed parameters of a closure that builds
/// a scalar loss from a store.
pub fn check_params(
    store: &ParamStore,
    params: &[ParamId],
    f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &id in params {
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let mut numeric = vec![0.0; analytic.numel()];
        for (k, g) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            let mut at = |v: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = v;
                let mut t = Tape::new();
                let l = f(&mut t, &work)?;
                Ok(t.value(l).item())
            };
            let up = at(orig + STEP)?;
            let down = at(orig - STEP)?;
            work.get_mut(id).data_mut()[k] = orig;
            *g = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub passed: bool,
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Uniform values with magnitude in `[0.1, 1]`, keeping kinks out of reach.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|v| if v < 0.0 { v * 0.9 - 0.1 } else { v * 0.9 + 0.1 })
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|v| v.abs() + 0.2)
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn unary(
    name: &'static str,
    op: fn(&mut Tape, Var) -> Var,
    domain: fn(&mut ChaCha8Rng, &[usize]) -> Tensor,
) -> (&'static str, Case) {
    (
        name,
        Box::new(move |rng| {
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..5));
            let x = domain(rng, &[a, b]);
            check_inputs(&[x], rng, &|t, v| Ok(op(t, v[0])))
        }),
    )
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5))
}

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = vec![
        (
            "add",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let (x, y) = (randn(rng, &[a, b]), randn(rng, &[a, b]));
                check_inputs(&[x, y], rng, &|t, v| t.add(v[0], v[1]))
            }),
        ),
        (
            "sub",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let (x, y) = (randn(rng, &[a, b]), randn(rng, &[a, b]));
                check_inputs(&[x, y], rng, &|t, v| t.sub(v[0], v[1]))
            }),
        ),
        (
            "mul",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let (x, y) = (randn(rng, &[a, b]), randn(rng, &[a, b]));
                check_inputs(&[x, y], rng, &|t, v| t.mul(v[0], v[1]))
            }),
        ),
        (
            "add_bias",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, y) = (randn(rng, &[a, b, c]), randn(rng, &[c]));
                check_inputs(&[x, y], rng, &|t, v| t.add_bias(v[0], v[1]))
            }),
        ),
        (
            "mul_last",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, y) = (randn(rng, &[a, b, c]), randn(rng, &[c]));
                check_inputs(&[x, y], rng, &|t, v| t.mul_last(v[0], v[1]))
            }),
        ),
        (
            "scale_rows",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, w) = (randn(rng, &[a, b, c]), randn(rng, &[a, b]));
                check_inputs(&[x, w], rng, &|t, v| t.scale_rows(v[0], v[1]))
            }),
        ),
        (
            "matmul",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, w) = (randn(rng, &[a, b]), randn(rng, &[b, c]));
                check_inputs(&[x, w], rng, &|t, v| t.matmul(v[0], v[1]))
            }),
        ),
        (
            "batch_matmul",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let k = rng.random_range(1..4);
                let trans = rng.random_bool(0.5);
                let x = randn(rng, &[a, b, k]);
                let y = if trans {
                    randn(rng, &[a, c, k])
                } else {
                    randn(rng, &[a, k, c])
                };
                check_inputs(&[x, y], rng, &move |t, v| t.batch_matmul(v[0], v[1], trans))
            }),
        ),
        (
            "softmax",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = randn(rng, &[a, b + 1]).map(|v| 3.0 * v);
                check_inputs(&[x], rng, &|t, v| Ok(t.softmax_last(v[0])))
            }),
        ),
        (
            "sum_last",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let x = randn(rng, &[a, b, c]);
                check_inputs(&[x], rng, &|t, v| Ok(t.sum_last(v[0])))
            }),
        ),
        (
            "mean",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = randn(rng, &[a, b]);
                check_inputs(&[x], rng, &|t, v| Ok(t.mean(v[0])))
            }),
        ),
        (
            "concat",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, y) = (randn(rng, &[a, b]), randn(rng, &[a, c]));
                check_inputs(&[x, y], rng, &|t, v| t.concat_last(v[0], v[1]))
            }),
        ),
        (
            "slice",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = randn(rng, &[a, b + 2]);
                let start = rng.random_range(0..2);
                check_inputs(&[x], rng, &move |t, v| t.slice_last(v[0], start, b))
            }),
        ),
        (
            "select_axis1",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let x = randn(rng, &[a, b, c]);
                let i = rng.random_range(0..b);
                check_inputs(&[x], rng, &move |t, v| t.select_axis1(v[0], i))
            }),
        ),
        (
            "heads",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let h = rng.random_range(1..3);
                let x = randn(rng, &[a, b, 2 * h]);
                check_inputs(&[x], rng, &move |t, v| {
                    let s = t.split_heads(v[0], h)?;
                    let s = t.tanh(s);
                    t.merge_heads(s, h)
                })
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng| {
                let (a, _, _) = dims(rng);
                let k = rng.random_range(2..5);
                let x = randn(rng, &[a, k]).map(|v| 2.0 * v);
                let labels: Vec<usize> = (0..a).map(|_| rng.random_range(0..k)).collect();
                check_inputs(&[x], rng, &move |t, v| t.cross_entropy(v[0], &labels))
            }),
        ),
        (
            "cosine",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, m) = (away_from_zero(rng, &[a, b, c + 1]), away_from_zero(rng, &[c + 1]));
                check_inputs(&[x, m], rng, &|t, v| t.cosine_last(v[0], v[1]))
            }),
        ),
        (
            "weighted_tokens",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (w, x) = (randn(rng, &[a, b]), randn(rng, &[a, b, c]));
                check_inputs(&[w, x], rng, &|t, v| t.weighted_tokens(v[0], v[1]))
            }),
        ),
        (
            "l2_norm",
            Box::new(|rng| {
                let (a, b, _) = dims(rng);
                let x = away_from_zero(rng, &[a, b]);
                check_inputs(&[x], rng, &|t, v| Ok(t.l2_norm_last(v[0])))
            }),
        ),
        (
            "sparse_loss",
            Box::new(|rng| {
                let (_, _, c) = dims(rng);
                let s = randn(rng, &[c]);
                check_inputs(&[s], rng, &|t, v| Ok(sparse_loss(t, v[0])))
            }),
        ),
        (
            "token_fuse",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let (x, m) = (away_from_zero(rng, &[a, b, c + 1]), away_from_zero(rng, &[c + 1]));
                check_inputs(&[x, m], rng, &|t, v| token_fuse(t, v[0], v[1]))
            }),
        ),
        (
            "attention",
            Box::new(|rng| {
                let heads = rng.random_range(1..3);
                let d = 2 * heads;
                let (b, tq) = (rng.random_range(1..3), rng.random_range(1..4));
                let project = rng.random_bool(0.5);
                let mut store = ParamStore::new();
                let mha = MultiHeadAttention::new(&mut store, rng, "a", d, heads, project)?;
                let (q, kv) = (randn(rng, &[b, tq, d]), randn(rng, &[b, tq + 1, d]));
                let inputs = check_inputs(&[q.clone(), kv.clone()], rng, &|t, v| {
                    mha.forward(t, &store, v[0], v[1], v[1])
                })?;
                let w = randn(rng, &[b, tq, d]);
                let ids: Vec<ParamId> = store.ids().collect();
                let params = check_params(&store, &ids, &|t, s| {
                    let (qv, kvv, wv) = (t.leaf(q.clone()), t.leaf(kv.clone()), t.leaf(w.clone()));
                    let out = mha.forward(t, s, qv, kvv, kvv)?;
                    let p = t.mul(out, wv)?;
                    Ok(t.sum(p))
                })?;
                Ok(inputs.max(params))
            }),
        ),
        (
            "gru",
            Box::new(|rng| {
                let (b, steps) = (rng.random_range(1..3), rng.random_range(1..4));
                let (d, h) = (rng.random_range(1..4), rng.random_range(1..4));
                let mut store = ParamStore::new();
                let gru = Gru::new(&mut store, rng, "g", d, h)?;
                for id in store.ids().collect::<Vec<_>>() {
                    let shape = store.get(id).shape().to_vec();
                    store.set(id, randn(rng, &shape))?;
                }
                let x = randn(rng, &[b, steps, d]);
                let inputs = check_inputs(std::slice::from_ref(&x), rng, &|t, v| gru.encode(t, &store, v[0]))?;
                let w = randn(rng, &[b, h]);
                let ids: Vec<ParamId> = store.ids().collect();
                let params = check_params(&store, &ids, &|t, s| {
                    let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
                    let out = gru.encode(t, s, xv)?;
                    let p = t.mul(out, wv)?;
                    Ok(t.sum(p))
                })?;
                Ok(inputs.max(params))
            }),
        ),
        (
            "mlp",
            Box::new(|rng| {
                let (a, b, c) = dims(rng);
                let mut store = ParamStore::new();
                let mlp = Mlp::new(&mut store, rng, "m", &[c, b + 1, 2])?;
                let x = away_from_zero(rng, &[a, c]);
                check_inputs(&[x], rng, &|t, v| mlp.forward(t, &store, v[0]))
            }),
        ),
    ];
    v.push(unary("relu", |t, x| t.relu(x), away_from_zero));
    v.push(unary("tanh", |t, x| t.tanh(x), randn));
    v.push(unary("sigmoid", |t, x| t.sigmoid(x), randn));
    v.push(unary("exp", |t, x| t.exp(x), randn));
    v.push(unary("ln", |t, x| t.ln(x), positive));
    v.push((
        "scale",
        Box::new(|rng| {
            let (a, b, _) = dims(rng);
            let c = rng.random_range(-3.0..3.0);
            check_inputs(&[randn(rng, &[a, b])], rng, &move |t, v| Ok(t.scale(v[0], c)))
        }),
    ));
    v.push((
        "add_scalar",
        Box::new(|rng| {
            let (a, b, _) = dims(rng);
            let c = rng.random_range(-3.0..3.0);
            check_inputs(&[randn(rng, &[a, b])], rng, &move |t, v| Ok(t.add_scalar(v[0], c)))
        }),
    ));
    v.push((
        "global_difference",
        Box::new(|rng| {
            let mut store = ParamStore::new();
            let head = crate::keyframe::KeyframeHead::new(&mut store, rng, "k", 4, 2, 1)?;
            let len = rng.random_range(1..4);
            let frames = randn(rng, &[1, len, 4]);
            check_inputs(&[frames], rng, &|t, v| head.global_difference(t, &store, v[0]))
        }),
    ));
    v.push((
        "local_difference_linear",
        Box::new(|rng| {
            // The operator is linear, so its action on a basis reproduces it.
            let (a, b, c) = dims(rng);
            let k = rng.random_range(1..3);
            let x = randn(rng, &[a, b, c]);
            let y = randn(rng, &[a, b, c]);
            let sum = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
            )?;
            let (lx, ly, ls) = (
                local_difference(&x, k)?,
                local_difference(&y, k)?,
                local_difference(&sum, k)?,
            );
            let joined: Vec<f64> = lx.data().iter().zip(ly.data()).map(|(p, q)| p + q).collect();
            Ok(relative_error(&joined, ls.data()))
        }),
    ));
    v
}

fn model_case(predictor: Predictor) -> Case {
    Box::new(move |rng| {
        let config = ModelConfig {
            text_dim: 4,
            video_dim: 4,
            text_tokens: 2,
            video_frames: 3,
            heads: 2,
            seed: rng.random(),
            ..ModelConfig::default()
        };
        let model = Model::new(config.clone())?;
        let b = rng.random_range(1..4);
        let batch = Batch {
            ids: (0..b).map(|i| i.to_string()).collect(),
            domains: vec!["d".into(); b],
            labels: (0..b).map(|_| rng.random_range(0..3)).collect(),
            text: randn(rng, &[b, 2, 4]),
            video: randn(rng, &[b, 3, 4]),
        };
        // Mask thresholds and keyframe decisions are piecewise constant, so
        // they are excluded; every smooth parameter is checked.
        let ids: Vec<ParamId> = model
            .store
            .ids()
            .filter(|&id| {
                let n = model.store.name(id);
                !n.contains(".mask.") && !n.starts_with("keyframe.") && !n.starts_with("recon.")
            })
            .collect();
        let eval_rng = ChaCha8Rng::seed_from_u64(0);
        let loss = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let m = Model {
                config: model.config.clone(),
                store: s.clone(),
                parts: model.parts.clone(),
            };
            let fwd = m.forward(t, &batch, &ForwardOptions::eval(predictor), &mut eval_rng.clone())?;
            t.cross_entropy(fwd.logits, &batch.labels)
        };
        check_params(&model.store, &ids, &loss)
    })
}

/// Runs every check `trials` times and reports the worst error per check.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = cases();
    all.push(("forward_text", model_case(Predictor::Text)));
    all.push(("forward_fusion", model_case(Predictor::Fusion)));
    let mut out = Vec::new();
    for (i, (name, case)) in all.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckResult {
            name: name.to_string(),
            trials,
            max_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(out)
}
