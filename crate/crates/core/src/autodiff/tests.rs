use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Compares analytic gradients of `f` against central differences for every
/// coordinate of every input.
fn grad_check<F>(inputs: Vec<ArrayD<f64>>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |inputs: &[ArrayD<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(Rc::new(x.clone()))).collect();
        f(&tape, &vars).scalar()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(Rc::new(x.clone()))).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].as_slice_mut().unwrap()[j] += h;
            let mut minus = inputs.clone();
            minus[i].as_slice_mut().unwrap()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} coord {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn weights(shape: &[usize], seed: u64) -> ArrayD<f64> {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random linear functional of `y`, so every output coordinate is exercised.
fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    y.mul(tape.constant(weights(&y.shape(), seed))).sum()
}

#[test]
fn matmul_and_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    grad_check(
        vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)],
        |t, v| probe(t, v[0].matmul(v[1]).add_bias(v[2]), 9),
    );
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    grad_check(
        vec![random(&[3, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)],
        |t, v| probe(t, v[0].layer_norm(v[1], v[2], 1e-5), 3),
    );
}

#[test]
fn pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    grad_check(vec![random(&[4, 3], &mut rng)], |t, v| {
        probe(t, v[0].gelu().add(v[0].sigmoid()).scale(0.7), 4)
    });
    grad_check(vec![random(&[4, 3], &mut rng)], |t, v| probe(t, v[0].relu(), 5));
}

#[test]
fn attention_gradients_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = KeyMask {
        batch: 2,
        len: 3,
        valid: vec![true, true, false, true, true, true],
    };
    grad_check(
        vec![
            random(&[2, 4, 4], &mut rng),
            random(&[2, 3, 4], &mut rng),
            random(&[2, 3, 4], &mut rng),
        ],
        move |t, v| {
            let (out, _) = Var::attention(v[0], v[1], v[2], 2, Some(&mask));
            probe(t, out, 6)
        },
    );
}

#[test]
fn token_and_channel_plumbing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    grad_check(
        vec![random(&[2, 3, 2], &mut rng), random(&[3, 2], &mut rng)],
        |t, v| {
            let b = v[1].broadcast_batch(2);
            let joined = Var::concat_tokens(&[v[0], b]);
            let sliced = joined.slice_tokens(2, 3);
            let chans = Var::concat_channels(&[sliced, sliced.scale(2.0)]);
            probe(t, chans.reshape(&[2, 12]), 7)
        },
    );
}

#[test]
fn embedding_gradients_accumulate_repeated_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    grad_check(vec![random(&[4, 3], &mut rng)], |t, v| {
        probe(t, v[0].embedding(&[1, 3, 1, 0], &[2, 2]), 8)
    });
}

#[test]
fn spatial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    grad_check(
        vec![random(&[2, 3, 2, 2], &mut rng), random(&[18, 3], &mut rng)],
        |t, v| probe(t, v[0].upsample2x().conv3x3(v[1]), 10),
    );
}

#[test]
fn batch_norm_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![random(&[2, 2, 2, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    grad_check(inputs.clone(), |t, v| {
        probe(t, v[0].batch_norm(v[1], v[2], NormMode::Batch, None, 1e-5).0, 11)
    });
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
    grad_check(inputs, move |t, v| {
        let (y, _) = v[0].batch_norm(v[1], v[2], NormMode::Running, Some((&rm, &rv)), 1e-5);
        probe(t, y, 12)
    });
}

#[test]
fn dot_map_and_sample_scaling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    grad_check(
        vec![random(&[2, 2, 3, 4], &mut rng), random(&[2, 4], &mut rng)],
        |t, v| probe(t, v[0].dot_map(v[1]).scale_samples(&[0.5, 2.0]), 13),
    );
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.random_range(0.05..0.95));
    let target = Rc::new(ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| {
        if rng.random_bool(0.4) {
            1.0
        } else {
            0.0
        }
    }));
    let t2 = target.clone();
    grad_check(vec![m.clone()], move |_, v| v[0].bce(target.clone(), 1e-6));
    grad_check(vec![m], move |_, v| v[0].dice(t2.clone(), 1.0));
}

#[test]
fn unused_leaves_get_zero_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.param(Rc::new(ArrayD::ones(IxDyn(&[2]))));
    let b = tape.param(Rc::new(ArrayD::ones(IxDyn(&[3]))));
    let loss = a.sum();
    let grads = tape.backward(loss);
    assert_eq!(grads.get(b), ArrayD::<f64>::zeros(IxDyn(&[3])));
    assert_eq!(grads.get(a), ArrayD::<f64>::ones(IxDyn(&[2])));
}

#[test]
fn bilinear_plan_is_partition_of_unity() {
    for n in 1..6 {
        for (i0, i1, w0, w1) in bilinear_plan(n) {
            assert!(i0 < n && i1 < n);
            assert!((w0 + w1 - 1.0).abs() < 1e-12 && w0 >= 0.0 && w1 >= 0.0);
        }
    }
}
