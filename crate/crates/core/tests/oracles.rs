//! Independent reference computations for the numerical building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqmask::autodiff::{Tape, Var};
use seqmask::gradcheck::{check_inputs, check_params};
use seqmask::keyframe::{local_difference, recon_loss, sample_decision, SampleMode};
use seqmask::mask::{apply_mask, sparse_loss, surrogate_step_grad, unit_step};
use seqmask::nn::{Gru, MultiHeadAttention, ParamStore};
use seqmask::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(t: &mut Tape, out: Var, w: &Tensor) -> Var {
    let w = t.leaf(w.clone());
    let p = t.mul(out, w).unwrap();
    t.sum(p)
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 2, true).unwrap();
    let x = rand_tensor(&mut rng, &[1, 3, 4]);
    let err = check_inputs(std::slice::from_ref(&x), &mut rng, &|t, v| {
        attn.forward(t, &store, v[0], v[0], v[0])
    })
    .unwrap();
    assert!(err < 1e-6, "input error {err}");
    let w = rand_tensor(&mut rng, &[1, 3, 4]);
    let ids: Vec<_> = store.ids().collect();
    let err = check_params(&store, &ids, &|t, s| {
        let xv = t.leaf(x.clone());
        let out = attn.forward(t, s, xv, xv, xv)?;
        Ok(weighted_sum(t, out, &w))
    })
    .unwrap();
    assert!(err < 1e-6, "parameter error {err}");
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, &mut rng, "g", 2, 3).unwrap();
    let seq = rand_tensor(&mut rng, &[1, 3, 2]);
    let err = check_inputs(std::slice::from_ref(&seq), &mut rng, &|t, v| {
        gru.encode(t, &store, v[0])
    })
    .unwrap();
    assert!(err < 1e-5, "input error {err}");
    let w = rand_tensor(&mut rng, &[1, 3]);
    let ids: Vec<_> = store.ids().collect();
    let err = check_params(&store, &ids, &|t, s| {
        let xv = t.leaf(seq.clone());
        let h = gru.encode(t, s, xv)?;
        Ok(weighted_sum(t, h, &w))
    })
    .unwrap();
    assert!(err < 1e-5, "parameter error {err}");
}

#[test]
fn matmul_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[3, 2]);
    let err = check_inputs(&[a, b], &mut rng, &|t, v| t.matmul(v[0], v[1])).unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Scalar GRU step written out by hand, gate order reset, update, candidate.
fn scalar_gru(x: &[f64], wi: [f64; 3], wh: [f64; 3], bi: [f64; 3], bh: [f64; 3]) -> f64 {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = 0.0;
    for &xt in x {
        let r = sig(xt * wi[0] + bi[0] + h * wh[0] + bh[0]);
        let z = sig(xt * wi[1] + bi[1] + h * wh[1] + bh[1]);
        let n = (xt * wi[2] + bi[2] + r * (h * wh[2] + bh[2])).tanh();
        h = (1.0 - z) * n + z * h;
    }
    h
}

#[test]
fn reconstruction_loss_matches_scalar_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, &mut rng, "g", 1, 1).unwrap();
    let (wi, wh, bi, bh) = (
        [0.7, -0.4, 1.1],
        [0.3, 0.9, -0.6],
        [0.05, -0.2, 0.1],
        [-0.1, 0.15, 0.25],
    );
    store
        .set(gru.w_input, Tensor::new(vec![1, 3], wi.to_vec()).unwrap())
        .unwrap();
    store
        .set(gru.w_hidden, Tensor::new(vec![1, 3], wh.to_vec()).unwrap())
        .unwrap();
    store.set(gru.b_input, Tensor::vector(bi.to_vec())).unwrap();
    store.set(gru.b_hidden, Tensor::vector(bh.to_vec())).unwrap();

    let original = [0.8, -1.3];
    let kept = [0.8, 0.0];
    let mut tape = Tape::new();
    let o = tape.leaf(Tensor::new(vec![1, 2, 1], original.to_vec()).unwrap());
    let k = tape.leaf(Tensor::new(vec![1, 2, 1], kept.to_vec()).unwrap());
    let loss = recon_loss(&mut tape, &store, &gru, k, o).unwrap();
    let expected = (scalar_gru(&kept, wi, wh, bi, bh) - scalar_gru(&original, wi, wh, bi, bh)).abs();
    assert!((tape.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
#[allow(clippy::needless_range_loop)]
fn mask_gradient_matches_hand_chain_rule() {
    let r = [0.5, -0.2, 0.31, -0.9, 0.0];
    let s = [0.3, 0.3, 0.3, 0.2, 0.1];
    let x = [[2.0, 3.0, -1.0, 0.5, 4.0], [-1.5, 0.25, 2.0, 1.0, -2.0]];
    let w = [[0.3, -0.7, 1.1, 0.2, -0.4], [0.9, 0.1, -0.5, 0.6, 0.8]];

    let mut tape = Tape::new();
    let rv = tape.leaf(Tensor::vector(r.to_vec()));
    let sv = tape.leaf(Tensor::vector(s.to_vec()));
    let xv = tape.leaf(Tensor::from_rows(&x.map(|row| row.to_vec())).unwrap());
    let m = tape.threshold_mask(rv, sv).unwrap();
    let xc = apply_mask(&mut tape, xv, m).unwrap();
    let wv = tape.leaf(Tensor::from_rows(&w.map(|row| row.to_vec())).unwrap());
    let prod = tape.mul(xc, wv).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();

    for j in 0..r.len() {
        let t = r[j].abs() - s[j];
        let p = unit_step(t);
        let sign = if r[j] > 0.0 {
            1.0
        } else if r[j] < 0.0 {
            -1.0
        } else {
            0.0
        };
        let dl_dm: f64 = (0..2).map(|i| w[i][j] * x[i][j]).sum();
        let dm_dr = p + r[j] * sign * surrogate_step_grad(t);
        let dm_ds = -r[j] * surrogate_step_grad(t);
        assert!((g.get(rv).unwrap().data()[j] - dl_dm * dm_dr).abs() < 1e-12);
        assert!((g.get(sv).unwrap().data()[j] - dl_dm * dm_ds).abs() < 1e-12);
        for i in 0..2 {
            let dx = g.get(xv).unwrap().data()[i * 5 + j];
            assert!((dx - w[i][j] * r[j] * p).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_logits_plus_unit_weight_sparsity_is_four() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap());
    let ce = tape.cross_entropy(logits, &[0]).unwrap();
    let s = tape.leaf(Tensor::zeros(&[4]));
    let sp = sparse_loss(&mut tape, s);
    let total = tape.add(ce, sp).unwrap();
    assert!((tape.value(total).item() - 4.0).abs() < 1e-12);
}

#[test]
fn gumbel_keep_frequency_matches_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let probs = Tensor::new(vec![n, 2], [0.7, 0.3].repeat(n)).unwrap();
    let d = sample_decision(&probs, SampleMode::Train, 1.0, &mut rng).unwrap();
    let freq = d.iter().sum::<f64>() / n as f64;
    assert!((0.28..=0.32).contains(&freq), "{freq}");
}

#[test]
fn local_difference_hand_values() {
    let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    let l = local_difference(&x, 1).unwrap();
    assert!((l.data()[1] - 0.5).abs() < 1e-15);
    let single = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
    let l = local_difference(&single, 2).unwrap();
    assert!((l.data()[0] - 1.25).abs() < 1e-15);
}

#[test]
fn softmax_closed_form() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap());
    let p = tape.softmax_last(x);
    let v = tape.value(p).data();
    assert!((v[0] - 0.75).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
}
