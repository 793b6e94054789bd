use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `build` w.r.t. every element of every input.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a}, numeric {numeric}");
        }
    }
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let w = Tensor::new(tape.shape(x), (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let sg = t.sigmoid(m);
        let th = t.tanh(sg);
        let e = t.exp(th);
        let sp = t.softplus(e);
        let om = t.one_minus(sp);
        let sc = t.scale(om, 1.7);
        weighted_sum(t, sc)
    });
    // relu away from the kink
    let a = Tensor::new(&[4], vec![0.5, -0.4, 0.9, -1.2]).unwrap();
    check(vec![a], |t, v| {
        let r = t.relu(v[0]);
        weighted_sum(t, r)
    });
}

#[test]
fn linear_and_trailing_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let b = random(&[5], &mut rng);
    let pos = random(&[3, 5], &mut rng);
    check(vec![x, w, b, pos], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        let y = t.add_trailing(y, v[3]).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn batched_matmul_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 2], &mut rng);
    let bt = random(&[2, 5, 4], &mut rng);
    check(vec![a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1], false).unwrap();
        weighted_sum(t, y)
    });
    check(vec![a, bt], |t, v| {
        let y = t.matmul(v[0], v[1], true).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn conv1d_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 9], &mut rng);
    let w = random(&[3, 2, 4], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x, w, b], |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 2, 2).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn conv1d_matches_direct_sum() {
    let x = Tensor::new(&[1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let w = Tensor::new(&[1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap();
    let b = Tensor::new(&[1], vec![0.5]).unwrap();
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x), t.constant(w), t.constant(b));
    let y = t.conv1d(x, w, b, 2, 1).unwrap();
    // padded input [0,1,2,3,4,5,0]; windows at 0,2,4
    assert_eq!(t.value(y).data(), &[0.5 - 2.0, 0.5 + 2.0 - 4.0, 0.5 + 4.0 - 0.0]);
}

#[test]
fn batch_norm_train_and_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 2, 4], &mut rng);
    let g = random(&[2], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch).unwrap();
        weighted_sum(t, y)
    });
    check(vec![x, g, b], |t, v| {
        let mean = [0.1, -0.2];
        let var = [0.5, 2.0];
        let (y, _) = t
            .batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Fixed { mean: &mean, var: &var })
            .unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn layer_norm_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 4], &mut rng);
    let g = random(&[4], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let s = t.softmax(y);
        weighted_sum(t, s)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 4], &mut rng);
    check(vec![x.clone()], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]).unwrap();
        let r = t.reshape(p, &[4, 6]).unwrap();
        weighted_sum(t, r)
    });
    check(vec![x.clone()], |t, v| {
        let m = t.mean_axis(v[0], 1).unwrap();
        weighted_sum(t, m)
    });
    check(vec![x.clone()], |t, v| {
        let s = t.select(v[0], 2, 3).unwrap();
        let n = t.narrow(v[0], 2, 1, 2).unwrap();
        let a = weighted_sum(t, s);
        let b = weighted_sum(t, n);
        let ab = t.add(a, b).unwrap();
        t.mean(ab)
    });
}

#[test]
fn masked_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&[4, 3], &mut rng);
    check(vec![logits.clone()], |t, v| {
        t.cross_entropy(v[0], &[Some(2), None, Some(0), Some(1)]).unwrap()
    });
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let ce = tape.cross_entropy(l, &[None, Some(1), None, None]).unwrap();
    let g = tape.backward(ce).unwrap();
    let g = g.get(l).unwrap().data();
    for row in [0, 2, 3] {
        assert!(g[row * 3..row * 3 + 3].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cross_entropy_without_targets_is_zero() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[2, 3]));
    let ce = tape.cross_entropy(l, &[None, None]).unwrap();
    assert_eq!(tape.value(ce).item(), 0.0);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(3.0));
    let p = tape.mul(a, c).unwrap();
    let d = tape.detach(p);
    let q = tape.mul(d, a).unwrap();
    let g = tape.backward(q).unwrap();
    assert!(g.get(c).is_none());
    // only the direct path through `a` in q = detach(a·c)·a counts
    assert_eq!(g.get(a).unwrap().item(), 6.0);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a, false).is_err());
    assert!(tape.select(a, 1, 3).is_err());
    assert!(tape.permute(a, &[0, 0]).is_err());
}
