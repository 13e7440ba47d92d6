//! Analytic gradients against central finite differences, plus the
//! independent oracles for matmul, softmax, layernorm, gelu and attention.

use dsit_tensor::{Result, Tape, Tensor, Var, LAYERNORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares backward() against central differences for every input entry.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars).unwrap().item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
    let err = check(&inputs, |_, v| v[0].matmul(v[1])?.gelu()?.sum());
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[3, 5]), random(&mut rng, &[3, 5])];
    let err = check(&inputs, |_, v| v[0].softmax()?.mul(v[1])?.sum());
    assert!(err < TOL, "{err}");
    let err = check(&inputs, |_, v| v[0].log_softmax()?.mul(v[1])?.sum());
    assert!(err < TOL, "{err}");
}

#[test]
fn layernorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&mut rng, &[4, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[4, 6]),
    ];
    let err = check(&inputs, |_, v| {
        v[0].layernorm(v[1], v[2], LAYERNORM_EPS)?.mul(v[3])?.sum()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&mut rng, &[5, 3])];
    let err = check(&inputs, |_, v| v[0].cross_entropy(&[0, 2, 1, 1, 0]));
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&mut rng, &[4, 3]), random(&mut rng, &[3])];
    let err = check(&inputs, |_, v| {
        let h = v[0].add_broadcast(v[1])?.gelu()?;
        let p = h.softmax()?.mean_rows()?;
        let scaled = h.scale(0.3)?.add(v[0])?.mean()?;
        p.log()?.mul(p)?.sum()?.add(scaled)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[5, 2]),
        random(&mut rng, &[3, 2]),
    ];
    let err = check(&inputs, |tape, v| tape.attention(v[0], v[1], v[2], 4)?.mul(v[3])?.sum());
    assert!(err < TOL, "{err}");
}

#[test]
fn multi_head_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // batch 2, 3 tokens, 2 heads of width 2
    let inputs = [
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[6, 4]),
    ];
    let err = check(&inputs, |tape, v| {
        tape.multi_head_attention(v[0], v[1], v[2], 2, 2)?.mul(v[3])?.sum()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn token_assembly_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[2, 3]),
    ];
    let err = check(&inputs, |tape, v| {
        let tokens = tape.assemble_tokens(&[v[0], v[1]], v[2], 2)?;
        let tokens = tokens.reshape(vec![2, 4, 3])?.add_broadcast(v[3])?.reshape(vec![8, 3])?;
        tokens.select_token(2, 1)?.mul(v[4])?.sum()?.add(tokens.select_token(2, 3)?.gelu()?.sum()?)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn composite_graph_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[4, 4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4, 3]),
    ];
    let err = check(&inputs, |tape, v| {
        let h = v[0].layernorm(v[2], v[3], LAYERNORM_EPS)?;
        let q = h.matmul(v[1])?;
        let a = tape.multi_head_attention(q, h, h, 2, 2)?;
        let x = a.add(v[0])?.matmul(v[4])?;
        x.cross_entropy(&[0, 1, 2, 0, 1, 2])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[8, 8]);
    let w = random(&mut rng, &[8, 8]);
    let run = || {
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x, true), tape.leaf(&w, true));
        let h = xv.matmul(wv).unwrap();
        let a = tape.multi_head_attention(h, h, xv, 2, 4).unwrap();
        let loss = a.gelu().unwrap().cross_entropy(&[1, 2, 3, 4, 5, 6, 7, 0]).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(xv).unwrap().to_vec(), g.get(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn softmax_matches_extended_precision() {
    // exp(i) / (e + e^2 + e^3) evaluated with 50 significant digits.
    let expected = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_64,
        0.665_240_955_774_821_9,
    ];
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = x.softmax().unwrap().data();
    for (a, b) in y.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[2, 3]);
    let labels = [2, 0];
    let mut direct = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let r = logits.row(b);
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        direct -= (r[l].exp() / z).ln();
    }
    direct /= 2.0;
    let tape = Tape::new();
    let got = tape.constant(&logits).cross_entropy(&labels).unwrap().item().unwrap();
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn layernorm_matches_statistics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[4]);
    let mean = x.data().iter().sum::<f64>() / 4.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    let tape = Tape::new();
    let ones = tape.constant(&Tensor::full(vec![4], 1.0));
    let zeros = tape.constant(&Tensor::zeros(vec![4]));
    let y = tape.constant(&x).layernorm(ones, zeros, LAYERNORM_EPS).unwrap().data();
    for (yi, xi) in y.iter().zip(x.data()) {
        let expect = (xi - mean) / (var + LAYERNORM_EPS).sqrt();
        assert!((yi - expect).abs() < 1e-10);
    }
}

#[test]
fn gelu_matches_formula_at_one() {
    let expect = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
    let tape = Tape::new();
    let y = tape.constant(&Tensor::scalar(1.0).unwrap()).gelu().unwrap().item().unwrap();
    assert!((y - expect).abs() < 1e-12);
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (q, k, v) = (random(&mut rng, &[4, 3]), random(&mut rng, &[4, 3]), random(&mut rng, &[4, 2]));
    let tape = Tape::new();
    let out = tape
        .attention(tape.constant(&q), tape.constant(&k), tape.constant(&v), 3)
        .unwrap()
        .data();
    for i in 0..4 {
        let scores: Vec<f64> = (0..4)
            .map(|j| (0..3).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / 3f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..2 {
            let expect: f64 = (0..4).map(|j| scores[j].exp() / z * v.row(j)[c]).sum();
            assert!((out[i * 2 + c] - expect).abs() < 1e-12);
        }
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let tape = Tape::new();
        let c = tape.constant(&a).matmul(tape.constant(&b)).unwrap().data();
        for (x, y) in c.iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
        let tape = Tape::new();
        let y = tape.constant(&Tensor::new(vec![rows, cols], x).unwrap()).softmax().unwrap().data();
        for r in y.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn random_composite_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&mut rng, &[4, 3]), random(&mut rng, &[3, 3]), random(&mut rng, &[3])];
        let err = check(&inputs, |_, v| {
            v[0].matmul(v[1])?.add_broadcast(v[2])?.gelu()?.log_softmax()?.mean()
        });
        prop_assert!(err < TOL, "{}", err);
    }
}
