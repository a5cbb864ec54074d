//! Central-difference checks of every tape operation against its backward pass.

use kgs_core::autodiff::{Tape, Var};
use kgs_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    random(rng, shape).map(|x| if x >= 0.0 { x + gap } else { x - gap })
}

/// Scalar probe `Σ f(inputs) ⊙ R` for a fixed random `R`.
fn probe(inputs: &[Tensor], weight_seed: u64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let r = random(&mut ChaCha8Rng::seed_from_u64(weight_seed), &shape);
    let r = tape.constant(r);
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    let grads = tape.gradients(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

fn assert_gradients(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let h = 1e-6;
    let (_, analytic) = probe(&inputs, 99, &f);
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[e] = input.data()[e] + h;
            let plus = probe(&shifted, 99, &f).0;
            shifted[k].data_mut()[e] = input.data()[e] - h;
            let minus = probe(&shifted, 99, &f).0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[e];
            assert!(
                (a - numeric).abs() <= 1e-7 + 1e-6 * numeric.abs(),
                "input {k} entry {e}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    assert_gradients(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    assert_gradients(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    assert_gradients(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    assert_gradients(vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    assert_gradients(vec![a.clone()], |t, v| t.add_scalar(v[0], 0.75));
    assert_gradients(vec![a.clone()], |t, v| t.sigmoid(v[0]));
    assert_gradients(vec![a.clone()], |t, v| t.tanh(v[0]));
    assert_gradients(vec![away_from_zero(&mut rng, &[3, 4], 0.01)], |t, v| t.relu(v[0]));
    let s = random(&mut rng, &[1]);
    assert_gradients(vec![a, s], |t, v| t.mul_scalar(v[0], v[1]).unwrap());
}

#[test]
fn matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(&mut rng, &[3, 5]), random(&mut rng, &[5, 2]));
    assert_gradients(vec![a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
    let x = random(&mut rng, &[2, 3, 4]);
    let bias = random(&mut rng, &[3]);
    assert_gradients(vec![x.clone(), bias.clone()], |t, v| t.add_bias(v[0], v[1], 1).unwrap());
    assert_gradients(vec![x, bias], |t, v| t.mul_bias(v[0], v[1], 1).unwrap());
}

#[test]
fn conv2d_strided_and_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 2, 5, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    assert_gradients(vec![x.clone(), w.clone()], |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap());
    assert_gradients(vec![x, w], |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap());
}

#[test]
fn temporal_conv_dilations_and_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 9, 4]);
    let w = random(&mut rng, &[2, 3, 3]);
    for (dilation, stride) in [(1, 1), (2, 1), (3, 2), (1, 2)] {
        assert_gradients(vec![x.clone(), w.clone()], move |t, v| t.temporal_conv(v[0], v[1], dilation, stride).unwrap());
    }
}

#[test]
fn graph_aggregation_shared_and_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 4, 5]);
    assert_gradients(vec![x.clone(), random(&mut rng, &[5, 5])], |t, v| t.graph_agg(v[0], v[1]).unwrap());
    assert_gradients(vec![x, random(&mut rng, &[2, 5, 5])], |t, v| t.graph_agg(v[0], v[1]).unwrap());
}

#[test]
fn batch_norm_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 2, 4, 3]);
    assert_gradients(vec![x], |t, v| t.batch_norm(v[0]).unwrap().0);
}

#[test]
fn reductions_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 5]);
    assert_gradients(vec![x.clone()], |t, v| t.mean_trailing(v[0], 1).unwrap());
    assert_gradients(vec![x.clone()], |t, v| t.reshape(v[0], &[6, 5]).unwrap());
    assert_gradients(vec![x.clone()], |t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    assert_gradients(vec![x.clone()], |t, v| t.broadcast_last(v[0], 3));
    assert_gradients(vec![x.clone()], |t, v| t.adaptive_avg_pool_last(v[0], 2).unwrap());
    assert_gradients(vec![x.clone()], |t, v| t.sum(v[0]));
    assert_gradients(vec![x.clone()], |t, v| t.mean(v[0]));
    assert_gradients(vec![x.clone()], |t, v| t.softmax(v[0]));
    let y = random(&mut rng, &[2, 1, 5]);
    assert_gradients(vec![x, y], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
}

#[test]
fn cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[4, 3]);
    assert_gradients(vec![logits], |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let logits = [0.3, -1.2, 2.0, 0.5, 0.5, -0.5];
    let labels = [2, 0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], logits.to_vec()).unwrap());
    let loss = tape.softmax_cross_entropy(x, &labels).unwrap();
    let oracle: f64 = logits
        .chunks(3)
        .zip(labels)
        .map(|(row, y)| {
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / 2.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-14);
}
