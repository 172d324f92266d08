//! Finite-difference gradient oracles and desk-scale fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtff::autograd::{Graph, Mode, Var};
use vtff::backbone::BackboneConfig;
use vtff::encoder::{Encoder, EncoderConfig, Tokenizer};
use vtff::nn::{Module, Param};
use vtff::{ModelConfig, Tensor, Vtff};

pub const EPS: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every element of
/// `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], which: usize, eps: f64) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = xs[which].data()[i];
            xs[which].data_mut()[i] = orig + eps;
            let up = f(&xs);
            xs[which].data_mut()[i] = orig - eps;
            let down = f(&xs);
            xs[which].data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Worst relative error over all inputs between reverse-mode gradients of
/// `build` (which maps input vars to a scalar loss) and central differences.
pub fn check_inputs<F>(build: F, inputs: &[Tensor<f64>], mode: Mode) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::new(mode);
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        build(&g, &vars).value().item()
    };
    let g = Graph::new(mode);
    let vars: Vec<_> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).unwrap();
    (0..inputs.len())
        .map(|i| {
            let analytic = grads
                .wrt(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            let numeric = numeric_grad(&eval, inputs, i, EPS);
            rel_err(analytic.data(), &numeric)
        })
        .fold(0.0, f64::max)
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights, so every output
/// element contributes a distinct cotangent.
pub fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = random(&y.shape(), -1.0, 1.0, &mut rng(seed ^ 0xABCD));
    y.mul(y.graph().constant(w)).unwrap().sum().unwrap()
}

/// A (parameter name, flat index) pair to probe.
pub type Probe = (String, usize);

/// Picks `count` random trainable scalars of `model`.
pub fn sample_params(model: &impl Module<f64>, count: usize, seed: u64) -> Vec<Probe> {
    let mut all = Vec::new();
    model.visit(&mut |p| {
        if p.trainable {
            all.push((p.name.clone(), p.value.numel()));
        }
    });
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let (name, n) = &all[r.random_range(0..all.len())];
            (name.clone(), r.random_range(0..*n))
        })
        .collect()
}

fn nudge(model: &mut impl Module<f64>, probe: &Probe, delta: f64) {
    model.visit_mut(&mut |p| {
        if p.name == probe.0 {
            p.value.data_mut()[probe.1] += delta;
        }
    });
}

/// Relative error of the stacked parameter gradients at `probes`, train
/// mode.
pub fn check_params<M: Module<f64>>(
    model: &mut M,
    probes: &[Probe],
    loss_of: &dyn for<'g> Fn(&M, &'g Graph<f64>) -> Var<'g, f64>,
) -> f64 {
    check_params_mode(model, probes, Mode::Train, loss_of)
}

/// 32×32 input, R = 8, C_f = 16, r = 2, N_l = 2, N_h = 2, C_p = 16.
pub fn desk_model_config(n_classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone: BackboneConfig {
            stage_channels: vec![4, 8, 16],
            stage_strides: vec![2, 2, 2],
            blocks_per_stage: 1,
        },
        encoder: EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            mlp_hidden: 32,
            n_classes,
        },
        reduction_ratio: 2,
        ..ModelConfig::default()
    }
}

/// Cross-entropy of `model` on raw-intensity inputs.
pub fn pipeline_loss<'g>(model: &Vtff<f64>, g: &'g Graph<f64>, rgb: &Tensor<f64>, lbp: &Tensor<f64>, labels: &[usize]) -> Var<'g, f64> {
    let (out, _) = model.forward(g, g.constant(rgb.clone()), g.constant(lbp.clone())).unwrap();
    out.logits.cross_entropy(labels).unwrap()
}

/// End-to-end parameter-gradient error of the full pipeline on `size×size`
/// inputs, probing `count` random parameters.
pub fn full_pipeline_error(cfg: &ModelConfig, batch: usize, count: usize, seed: u64) -> f64 {
    let mut model = Vtff::<f64>::new(cfg, seed).unwrap();
    let s = cfg.image_size;
    let mut r = rng(seed + 100);
    let rgb = random(&[batch, s, s, 3], 0.0, 255.0, &mut r);
    let lbp = random(&[batch, s, s, 3], 0.0, 255.0, &mut r);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.n_classes()).collect();
    let probes = sample_params(&model, count, seed);
    check_params(&mut model, &probes, &|m, g| pipeline_loss(m, g, &rgb, &lbp, &labels))
}

/// Values bounded away from zero, so ReLU kinks stay outside the
/// difference stencil.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, 0.1, 2.0, rng).map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    // deterministic pseudo-sign from the mantissa
    (v.to_bits() >> 20) & 1 == 0
}

pub type PrimitiveCheck = fn(u64) -> f64;

pub fn grad_matmul(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let (a, b) = (random(&[3, 4], -1.0, 1.0, r), random(&[4, 2], -1.0, 1.0, r));
    check_inputs(|_, v| probe(v[0].matmul(v[1]).unwrap(), seed), &[a, b], Mode::Eval)
}

pub fn grad_batched_matmul(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let (a, b, c) = (
        random(&[2, 3, 4], -1.0, 1.0, r),
        random(&[2, 4, 2], -1.0, 1.0, r),
        random(&[2, 5, 4], -1.0, 1.0, r),
    );
    check_inputs(
        |_, v| {
            let x = probe(v[0].matmul(v[1]).unwrap(), seed);
            x.add(probe(v[0].matmul_t(v[2]).unwrap(), seed + 1)).unwrap()
        },
        &[a, b, c],
        Mode::Eval,
    )
}

pub fn grad_conv2d(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let (x, k) = (random(&[5, 5, 2], -1.0, 1.0, r), random(&[3, 3, 2, 3], -1.0, 1.0, r));
    let plain = check_inputs(|_, v| probe(v[0].conv2d(v[1], 1, 0).unwrap(), seed), &[x, k], Mode::Eval);
    let (x, k) = (random(&[2, 5, 6, 2], -1.0, 1.0, r), random(&[3, 3, 2, 3], -1.0, 1.0, r));
    let strided = check_inputs(|_, v| probe(v[0].conv2d(v[1], 2, 1).unwrap(), seed), &[x, k], Mode::Eval);
    plain.max(strided)
}

pub fn grad_activations(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let mut x = away_from_zero(&[9], r);
    for (i, v) in [-1.0, 0.5, 2.0].into_iter().enumerate() {
        x.data_mut()[i] = v;
    }
    let relu = check_inputs(|_, v| probe(v[0].relu().unwrap(), seed), &[x.clone()], Mode::Eval);
    let sig = check_inputs(|_, v| probe(v[0].sigmoid().unwrap(), seed), &[x.clone()], Mode::Eval);
    let gelu = check_inputs(|_, v| probe(v[0].gelu().unwrap(), seed), &[x], Mode::Eval);
    relu.max(sig).max(gelu)
}

pub fn grad_softmax(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let x = random(&[3, 4], -2.0, 2.0, r);
    let a0 = check_inputs(|_, v| probe(v[0].softmax(0).unwrap(), seed), std::slice::from_ref(&x), Mode::Eval);
    let a1 = check_inputs(|_, v| probe(v[0].softmax(1).unwrap(), seed), &[x], Mode::Eval);
    let fixed = Tensor::from_f64([3], &[0.3, -0.2, 1.1]);
    let j = check_inputs(|_, v| probe(v[0].softmax(0).unwrap(), seed), &[fixed], Mode::Eval);
    a0.max(a1).max(j)
}

pub fn grad_layer_norm(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let x = random(&[4, 8], -2.0, 2.0, r);
    let gamma = random(&[8], 0.5, 1.5, r);
    let beta = random(&[8], -0.5, 0.5, r);
    check_inputs(|_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), seed), &[x, gamma, beta], Mode::Eval)
}

pub fn grad_batch_norm(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let x = random(&[2, 3, 3, 4], -2.0, 2.0, r);
    let gamma = random(&[4], 0.5, 1.5, r);
    let beta = random(&[4], -0.5, 0.5, r);
    let mean = random(&[4], -0.5, 0.5, r);
    let var = random(&[4], 0.5, 2.0, r);
    let mut worst = 0.0f64;
    for batch_stats in [true, false] {
        let (m, s) = (mean.clone(), var.clone());
        let e = check_inputs(
            move |_, v| {
                let (y, _) = v[0].batch_norm(v[1], v[2], (&m, &s), 1e-5, batch_stats).unwrap();
                probe(y, seed)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            Mode::Eval,
        );
        worst = worst.max(e);
    }
    worst
}

pub fn grad_pool(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let x = random(&[2, 3, 3, 4], -2.0, 2.0, r);
    let p = check_inputs(|_, v| probe(v[0].mean_axes(&[1, 2]).unwrap(), seed), std::slice::from_ref(&x), Mode::Eval);
    let m = check_inputs(|_, v| v[0].mean().unwrap(), &[x], Mode::Eval);
    p.max(m)
}

pub fn grad_cross_entropy(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let x = random(&[3, 5], -3.0, 3.0, r);
    check_inputs(|_, v| v[0].cross_entropy(&[4, 0, 2]).unwrap(), &[x], Mode::Eval)
}

pub fn grad_elementwise(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let a = random(&[2, 3, 4], -2.0, 2.0, r);
    let b = random(&[4], -2.0, 2.0, r);
    let c = random(&[3, 1], -2.0, 2.0, r);
    check_inputs(
        |_, v| {
            let y = v[0].add(v[1]).unwrap().mul(v[2]).unwrap().sub(v[1]).unwrap();
            let y = y.scale(0.7).unwrap().offset(0.2).unwrap().rsub(1.5).unwrap();
            probe(y, seed)
        },
        &[a, b, c],
        Mode::Eval,
    )
}

pub fn grad_shape_ops(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let a = random(&[2, 3, 4], -2.0, 2.0, r);
    let b = random(&[2, 1, 4], -2.0, 2.0, r);
    check_inputs(
        |_, v| {
            let joined = vtff::autograd::Var::concat(&[v[1], v[0]], 1).unwrap();
            let y = joined.permute(&[2, 0, 1]).unwrap().reshape(&[8, 4]).unwrap();
            let y = y.narrow(0, 2, 5).unwrap().narrow(1, 1, 3).unwrap();
            probe(y, seed)
        },
        &[a, b],
        Mode::Eval,
    )
}

pub const PRIMITIVES: &[(&str, PrimitiveCheck)] = &[
    ("matmul", grad_matmul),
    ("batched matmul", grad_batched_matmul),
    ("conv2d", grad_conv2d),
    ("relu/sigmoid/gelu", grad_activations),
    ("softmax", grad_softmax),
    ("layer_norm", grad_layer_norm),
    ("batch_norm", grad_batch_norm),
    ("average pool", grad_pool),
    ("cross_entropy", grad_cross_entropy),
    ("broadcast arithmetic", grad_elementwise),
    ("reshape/permute/concat/narrow", grad_shape_ops),
];

/// ASF on 2×2×8 maps with r = 2: inputs and every ASF scalar, eval mode
/// on one sample and train mode on a batch of two.
pub fn grad_asf(seed: u64) -> f64 {
    use vtff::asf::{Asf, Eq6Mode};
    let mut worst = 0.0f64;
    for (mode, shape) in [(Mode::Eval, vec![2, 2, 8]), (Mode::Train, vec![2, 2, 2, 8])] {
        let r = &mut rng(seed);
        let mut asf = Asf::<f64>::new("asf", 8, 2, Eq6Mode::Literal, r).unwrap();
        let (xl, xr) = (random(&shape, -2.0, 2.0, r), random(&shape, -2.0, 2.0, r));
        let asf_ref = &asf;
        let e = check_inputs(
            |g, v| asf_ref.forward(g, v[0], v[1]).unwrap().mean().unwrap(),
            &[xl.clone(), xr.clone()],
            mode,
        );
        worst = worst.max(e);
        let mut probes = Vec::new();
        asf.visit(&mut |p| {
            if p.trainable {
                probes.extend((0..p.value.numel()).map(|i| (p.name.clone(), i)));
            }
        });
        let e = if mode == Mode::Train {
            check_params(&mut asf, &probes, &|m, g| {
                m.forward(g, g.constant(xl.clone()), g.constant(xr.clone())).unwrap().mean().unwrap()
            })
        } else {
            check_params_mode(&mut asf, &probes, Mode::Eval, &|m, g| {
                m.forward(g, g.constant(xl.clone()), g.constant(xr.clone())).unwrap().mean().unwrap()
            })
        };
        worst = worst.max(e);
    }
    worst
}

/// [`check_params`] in an explicit mode.
pub fn check_params_mode<M: Module<f64>>(
    model: &mut M,
    probes: &[Probe],
    mode: Mode,
    loss_of: &dyn for<'g> Fn(&M, &'g Graph<f64>) -> Var<'g, f64>,
) -> f64 {
    let g = Graph::new(mode);
    let loss = loss_of(model, &g);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = probes
        .iter()
        .map(|(name, i)| grads.param(name).map_or(0.0, |t| t.data()[*i]))
        .collect();
    let numeric: Vec<f64> = probes
        .iter()
        .map(|probe| {
            let mut at = |delta: f64| {
                nudge(model, probe, delta);
                let g = Graph::new(mode);
                let v = loss_of(model, &g).value().item();
                nudge(model, probe, -delta);
                v
            };
            (at(EPS) - at(-EPS)) / (2.0 * EPS)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// One encoder layer at T = 3, C_p = 8, N_h = 2: input and all weights.
pub fn grad_encoder_layer(seed: u64) -> f64 {
    use vtff::encoder::EncoderLayer;
    let cfg = EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        mlp_hidden: 16,
        n_classes: 2,
    };
    let r = &mut rng(seed);
    let mut layer = EncoderLayer::<f64>::new("layer", &cfg, r);
    // non-trivial norm affine parameters and biases
    let mut jitter = rng(seed + 1);
    layer.visit_mut(&mut |p| {
        if !p.name.ends_with("weight") {
            for v in p.value.data_mut() {
                *v += jitter.random_range(-0.3..0.3);
            }
        }
    });
    let z = random(&[3, 8], -1.5, 1.5, r);
    let layer_ref = &layer;
    let input = check_inputs(|g, v| probe(layer_ref.forward(g, v[0]).unwrap().0, seed), std::slice::from_ref(&z), Mode::Eval);
    let mut probes = Vec::new();
    layer.visit(&mut |p| probes.extend((0..p.value.numel()).map(|i| (p.name.clone(), i))));
    let params = check_params_mode(&mut layer, &probes, Mode::Eval, &|m, g| {
        probe(m.forward(g, g.constant(z.clone())).unwrap().0, seed)
    });
    input.max(params)
}

/// Gradient of `mean(backbone(x))` at a few input positions of a 32×32
/// desk backbone, in train mode on a batch of two.
pub fn grad_backbone(seed: u64) -> f64 {
    use vtff::backbone::Backbone;
    let cfg = BackboneConfig {
        stage_channels: vec![4, 8, 16],
        stage_strides: vec![2, 2, 2],
        blocks_per_stage: 1,
    };
    let bb = Backbone::<f64>::build(&cfg, seed).unwrap();
    let r = &mut rng(seed);
    let x = random(&[2, 32, 32, 3], 0.0, 255.0, r);
    let loss = |g: &Graph<f64>, x: Var<'_, f64>| -> f64 { bb.forward(g, x).unwrap().mean().unwrap().value().item() };
    let g = Graph::new(Mode::Train);
    let xv = g.input(x.clone());
    let l = bb.forward(&g, xv).unwrap().mean().unwrap();
    let grads = g.backward(l).unwrap();
    let analytic = grads.wrt(xv).unwrap();
    let idx: Vec<usize> = (0..12).map(|_| r.random_range(0..x.numel())).collect();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for &i in &idx {
        let at = |delta: f64| {
            let mut xs = x.clone();
            xs.data_mut()[i] += delta;
            let g = Graph::new(Mode::Train);
            loss(&g, g.constant(xs))
        };
        a.push(analytic.data()[i]);
        n.push((at(EPS) - at(-EPS)) / (2.0 * EPS));
    }
    rel_err(&a, &n)
}

/// N_l = 2, N_h = 2, C_p = 16, five classes.
pub fn encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 16,
        mlp_hidden: 32,
        n_classes: 5,
    }
}

/// Worst deviation over 10 seeds between the encoder output of spatially
/// permuted features and the permuted output, with zero positional
/// embeddings (the `[cls]` logits are compared directly).
pub fn permutation_gap(seeds: u64) -> f64 {
    let cfg = encoder_cfg();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let r = &mut rng(seed);
        let mut tok = Tokenizer::<f32>::new("tokenizer", 8, 16, 9, r);
        tok.pos.value = Tensor::zeros([10, 16]);
        let enc = Encoder::<f32>::new("encoder", &cfg, r).unwrap();
        let theta = Param::new("head.theta", random(&[16, 5], -0.5, 0.5, r).cast::<f32>());
        let x = random(&[3, 3, 8], -2.0, 2.0, r).cast::<f32>();
        let mut perm: Vec<usize> = (0..9).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(r);
        let mut xp = Tensor::<f32>::zeros([3, 3, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                xp.set(&[dst / 3, dst % 3, c], x.at(&[src / 3, src % 3, c]));
            }
        }
        let run = |x: &Tensor<f32>| {
            let g = Graph::new(Mode::Eval);
            let z0 = tok.forward(&g, g.constant(x.clone())).unwrap();
            let (z, _) = enc.encode(&g, z0).unwrap();
            let logits = enc.classify(&g, z, &theta).unwrap();
            ((*z.value()).clone(), (*logits.value()).clone())
        };
        let (z, logits) = run(&x);
        let (zp, logits_p) = run(&xp);
        for (a, b) in logits.data().iter().zip(logits_p.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                worst = worst.max((zp.at(&[dst + 1, c]) - z.at(&[src + 1, c])).abs() as f64);
            }
        }
        for c in 0..16 {
            worst = worst.max((zp.at(&[0, c]) - z.at(&[0, c])).abs() as f64);
        }
    }
    worst
}
