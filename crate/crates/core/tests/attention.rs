mod common;

use common::{encoder_cfg, permutation_gap, random, rng};
use proptest::prelude::*;
use vtff::autograd::{Graph, Mode};
use vtff::encoder::{Encoder, SelfAttention};
use vtff::nn::Module;
use vtff::Tensor;

/// Scalar-loop multi-head attention: `concat_j softmax(Q_j K_jᵀ/√d) V_j · W^O + b^O`.
fn brute_force_mhsa(attn: &SelfAttention<f64>, z: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (t, c) = (z.shape()[0], z.shape()[1]);
    let h = attn.n_heads;
    let d = c / h;
    let linear = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w.shape()[1])
                    .map(|o| b.data()[o] + (0..row.len()).map(|i| row[i] * w.at(&[i, o])).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let rows: Vec<Vec<f64>> = (0..t).map(|i| z.data()[i * c..(i + 1) * c].to_vec()).collect();
    let bias = |l: &vtff::nn::Linear<f64>| l.bias.as_ref().unwrap().value.clone();
    let q = linear(&attn.q.weight.value, &bias(&attn.q), &rows);
    let k = linear(&attn.k.weight.value, &bias(&attn.k), &rows);
    let v = linear(&attn.v.weight.value, &bias(&attn.v), &rows);
    let mut concat = vec![vec![0.0; c]; t];
    for j in 0..h {
        for a in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|b| (0..d).map(|e| q[a][j * d + e] * k[b][j * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for e in 0..d {
                concat[a][j * d + e] = (0..t).map(|b| exps[b] / total * v[b][j * d + e]).sum();
            }
        }
    }
    linear(&attn.o.weight.value, &bias(&attn.o), &concat)
}

#[test]
fn mhsa_matches_scalar_oracle() {
    for seed in 0..5 {
        let r = &mut rng(seed);
        let mut attn = SelfAttention::<f64>::new("a", 4, 2, r);
        attn.visit_mut(&mut |p| {
            if p.name.ends_with("bias") {
                p.value = random(p.value.shape(), -0.5, 0.5, &mut rng(seed + 7));
            }
        });
        let z = random(&[3, 4], -2.0, 2.0, r);
        let g = Graph::new(Mode::Eval);
        let (out, _) = attn.forward(&g, g.constant(z.clone())).unwrap();
        let want = brute_force_mhsa(&attn, &z);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((out.value().at(&[i, j]) - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = encoder_cfg();
    for seed in 0..5 {
        let r = &mut rng(seed);
        let enc = Encoder::<f32>::new("encoder", &cfg, r).unwrap();
        let z = random(&[3, 10, 16], -3.0, 3.0, r).cast::<f32>();
        let g = Graph::new(Mode::Eval);
        let (_, maps) = enc.encode(&g, g.constant(z)).unwrap();
        assert_eq!(maps.len() * 2, 4);
        for m in maps {
            for row in m.value().data().chunks(10) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_positional_embeddings_give_permutation_equivariance() {
    let gap = permutation_gap(10);
    assert!(gap <= 1e-5, "gap {gap:e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let n = v.len();
        let g = Graph::new(Mode::Eval);
        let p = g.constant(Tensor::new([1, n], v.clone()).unwrap()).softmax(1).unwrap().value();
        prop_assert!(p.data().iter().all(|&x| x > 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = g.constant(Tensor::new([1, n], shifted).unwrap()).softmax(1).unwrap().value();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(v in proptest::collection::vec(-100.0f64..100.0, 2..16)) {
        let c = v.len();
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.5);
        let g = Graph::new(Mode::Eval);
        let y = g
            .constant(Tensor::new([1, c], v).unwrap())
            .layer_norm(g.constant(Tensor::ones([c])), g.constant(Tensor::zeros([c])), 1e-5)
            .unwrap()
            .value();
        let mean = y.data().iter().sum::<f64>() / c as f64;
        let var = y.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }
}
