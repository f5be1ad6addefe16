//! Finite-difference checks for every layer kernel and the assembled network.
#![allow(dead_code)]

use super::{central_diff, max_relative_error, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarefy::nn::{self, LayerKind, LayerParams, Mode, Tensor3};
use rarefy::rarefynet::{RarefyConfig, RarefyModel};

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_vec(h, w, c, random_vec(rng, h * w * c, 1.0)).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, kind: LayerKind) -> LayerParams {
    let mut p = LayerParams::new(kind);
    p.weights = random_vec(rng, p.weights.len(), 1.0);
    p.biases = random_vec(rng, p.biases.len(), 0.5);
    p
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of one finite-difference comparison.
#[derive(Debug)]
pub struct Check {
    pub label: String,
    pub max_rel_error: f64,
}

const CONV_SHAPES: [(usize, usize); 7] = [(3, 1), (3, 2), (1, 1), (5, 1), (2, 2), (4, 2), (1, 3)];

fn conv_case(rng: &mut ChaCha8Rng, variant: usize) -> Check {
    let (filter, dilation) = CONV_SHAPES[variant % CONV_SHAPES.len()];
    let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    let layer = random_layer(rng, LayerKind::Conv2d { filter, dilation, in_channels: cin, out_channels: cout });
    let input = random_tensor(rng, h, w, cin);
    let coef = random_vec(rng, h * w * cout, 1.0);
    let out_grad = Tensor3::from_vec(h, w, cout, coef.clone()).unwrap();

    let mut gw = vec![0.0; layer.weights.len()];
    let mut gb = vec![0.0; layer.biases.len()];
    let gi = nn::conv2d_backward(&input, &out_grad, &layer, &mut gw, &mut gb).unwrap();

    let loss_w = |w: &[f64]| {
        let mut l = layer.clone();
        l.weights = w.to_vec();
        dot(&nn::conv2d(&input, &l).unwrap().data, &coef)
    };
    let loss_b = |b: &[f64]| {
        let mut l = layer.clone();
        l.biases = b.to_vec();
        dot(&nn::conv2d(&input, &l).unwrap().data, &coef)
    };
    let loss_x = |x: &[f64]| {
        let t = Tensor3::from_vec(h, w, cin, x.to_vec()).unwrap();
        dot(&nn::conv2d(&t, &layer).unwrap().data, &coef)
    };
    let err = max_relative_error(&gw, &central_diff(&layer.weights, FD_STEP, loss_w))
        .max(max_relative_error(&gb, &central_diff(&layer.biases, FD_STEP, loss_b)))
        .max(max_relative_error(&gi.data, &central_diff(&input.data, FD_STEP, loss_x)));
    Check { label: format!("conv2d f={filter} k={dilation} {h}x{w} {cin}->{cout}"), max_rel_error: err }
}

fn dense_case(rng: &mut ChaCha8Rng) -> Check {
    let (n_in, n_out) = (rng.random_range(1..12), rng.random_range(1..6));
    let layer = random_layer(rng, LayerKind::Dense { inputs: n_in, outputs: n_out });
    let input = random_vec(rng, n_in, 1.0);
    let coef = random_vec(rng, n_out, 1.0);
    let mut gw = vec![0.0; layer.weights.len()];
    let mut gb = vec![0.0; n_out];
    let gi = nn::dense_backward(&input, &coef, &layer, &mut gw, &mut gb).unwrap();
    let with = |w: Option<&[f64]>, b: Option<&[f64]>, x: &[f64]| {
        let mut l = layer.clone();
        if let Some(w) = w {
            l.weights = w.to_vec();
        }
        if let Some(b) = b {
            l.biases = b.to_vec();
        }
        dot(&nn::dense(x, &l).unwrap(), &coef)
    };
    let err = max_relative_error(&gw, &central_diff(&layer.weights, FD_STEP, |w| with(Some(w), None, &input)))
        .max(max_relative_error(&gb, &central_diff(&layer.biases, FD_STEP, |b| with(None, Some(b), &input))))
        .max(max_relative_error(&gi, &central_diff(&input, FD_STEP, |x| with(None, None, x))));
    Check { label: format!("dense {n_in}->{n_out}"), max_rel_error: err }
}

fn batchnorm_case(rng: &mut ChaCha8Rng, mode: Mode) -> Check {
    let channels = rng.random_range(1..4);
    let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
    let n = rng.random_range(2..5);
    let mut layer = random_layer(rng, LayerKind::BatchNorm { channels });
    layer.running_mean = random_vec(rng, channels, 0.5);
    layer.running_var = (0..channels).map(|_| rng.random_range(0.5..2.0)).collect();
    let batch: Vec<Tensor3> = (0..n).map(|_| random_tensor(rng, h, w, channels)).collect();
    let coef: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, h * w * channels, 1.0)).collect();
    let loss = |l: &LayerParams, b: &[Tensor3]| -> f64 {
        let (out, _) = nn::batchnorm_forward(b, l, mode).unwrap();
        out.iter().zip(&coef).map(|(o, c)| dot(&o.data, c)).sum()
    };
    let (_, cache) = nn::batchnorm_forward(&batch, &layer, mode).unwrap();
    let grad_out: Vec<Tensor3> = coef.iter().map(|c| Tensor3::from_vec(h, w, channels, c.clone()).unwrap()).collect();
    let mut gg = vec![0.0; channels];
    let mut gb = vec![0.0; channels];
    let gi = nn::batchnorm_backward(&cache, &grad_out, &layer, &mut gg, &mut gb).unwrap();

    let flat_x: Vec<f64> = batch.iter().flat_map(|t| t.data.clone()).collect();
    let flat_gi: Vec<f64> = gi.iter().flat_map(|t| t.data.clone()).collect();
    let num_x = central_diff(&flat_x, FD_STEP, |x| {
        let b: Vec<Tensor3> = x
            .chunks(h * w * channels)
            .map(|c| Tensor3::from_vec(h, w, channels, c.to_vec()).unwrap())
            .collect();
        loss(&layer, &b)
    });
    let num_g = central_diff(&layer.weights, FD_STEP, |g| {
        let mut l = layer.clone();
        l.weights = g.to_vec();
        loss(&l, &batch)
    });
    let num_b = central_diff(&layer.biases, FD_STEP, |b| {
        let mut l = layer.clone();
        l.biases = b.to_vec();
        loss(&l, &batch)
    });
    let err = max_relative_error(&flat_gi, &num_x)
        .max(max_relative_error(&gg, &num_g))
        .max(max_relative_error(&gb, &num_b));
    Check { label: format!("batchnorm {mode:?} n={n} {h}x{w}x{channels}"), max_rel_error: err }
}

fn activation_case(rng: &mut ChaCha8Rng) -> Check {
    let xs: Vec<f64> = (0..16)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..3.0);
            if rng.random_bool(0.5) { -v } else { v }
        })
        .collect();
    let mut err: f64 = 0.0;
    for &x in &xs {
        let ne = central_diff(&[x], FD_STEP, |v| nn::elu(v[0]))[0];
        let nr = central_diff(&[x], FD_STEP, |v| nn::relu(v[0]))[0];
        err = err
            .max(max_relative_error(&[nn::elu_grad(x)], &[ne]))
            .max(max_relative_error(&[nn::relu_grad(x)], &[nr]));
    }
    Check { label: "elu/relu".into(), max_rel_error: err }
}

fn pooling_case(rng: &mut ChaCha8Rng) -> Check {
    let (h, w, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let input = random_tensor(rng, h, w, c);
    let coef = random_vec(rng, c, 1.0);
    let g = nn::global_avg_pool_backward(&coef, h, w);
    let num = central_diff(&input.data, FD_STEP, |x| {
        let t = Tensor3::from_vec(h, w, c, x.to_vec()).unwrap();
        dot(&nn::global_avg_pool(&t), &coef)
    });
    Check { label: format!("gap {h}x{w}x{c}"), max_rel_error: max_relative_error(&g.data, &num) }
}

fn dropout_case(rng: &mut ChaCha8Rng) -> Check {
    let x = random_vec(rng, 10, 1.0);
    let coef = random_vec(rng, 10, 1.0);
    let seed: u64 = rng.random();
    let run = |v: &[f64]| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        nn::dropout(v, 0.3, Mode::Train, &mut r).unwrap()
    };
    let (_, scale) = run(&x);
    let analytic: Vec<f64> = scale.iter().zip(&coef).map(|(s, c)| s * c).collect();
    let num = central_diff(&x, FD_STEP, |v| dot(&run(v).0, &coef));
    Check { label: "dropout p=0.3".into(), max_rel_error: max_relative_error(&analytic, &num) }
}

/// Runs `cases` randomly drawn layer checks, cycling through every kernel.
pub fn layer_checks(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv_variant = 0;
    let mut next_conv = |rng: &mut ChaCha8Rng| {
        conv_variant += 1;
        conv_case(rng, conv_variant - 1)
    };
    (0..cases)
        .map(|i| match i % 7 {
            0 => next_conv(&mut rng),
            1 => dense_case(&mut rng),
            2 => batchnorm_case(&mut rng, Mode::Train),
            3 => batchnorm_case(&mut rng, Mode::Eval),
            4 => activation_case(&mut rng),
            5 => pooling_case(&mut rng),
            _ => {
                if i % 2 == 0 {
                    next_conv(&mut rng)
                } else {
                    dropout_case(&mut rng)
                }
            }
        })
        .collect()
}

pub fn random_patch_tensor(rng: &mut ChaCha8Rng) -> Tensor3 {
    let mut data = Vec::with_capacity(18);
    for i in 0..9 {
        data.push(rng.random_range(0.1..0.9));
        data.push(i as f64 / 9.0 * rng.random_range(0.5..1.0));
    }
    Tensor3::from_vec(3, 3, 2, data).unwrap()
}

/// Full-network check on a batch of `batch` random inputs, comparing every
/// input entry and `per_layer` sampled parameters from each layer.
pub fn model_check(config: RarefyConfig, seed: u64, batch: usize, mode: Mode, per_layer: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RarefyModel::build(config, seed).unwrap();
    // Keep the output ReLU away from its kink.
    let last = model.params().layers.len() - 1;
    model.params_mut().layers[last].biases[0] = 2.0;
    let inputs: Vec<Tensor3> = (0..batch).map(|_| random_patch_tensor(&mut rng)).collect();
    let coef = random_vec(&mut rng, batch, 1.0);
    let dropout_seed: u64 = rng.random();

    let loss = |m: &RarefyModel, xs: &[Tensor3]| -> f64 {
        let preds = match mode {
            Mode::Train => {
                let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
                m.forward_train(xs, &mut r).unwrap().0
            }
            Mode::Eval => m.forward_eval(xs).unwrap().0,
        };
        dot(&preds, &coef)
    };
    let tape = match mode {
        Mode::Train => {
            let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
            model.forward_train(&inputs, &mut r).unwrap().1
        }
        Mode::Eval => model.forward_eval(&inputs).unwrap().1,
    };
    let (grads, grad_in) = model.backward(&tape, &coef).unwrap();

    let mut err: f64 = 0.0;
    let mut probe = model.clone();
    for (li, layer) in model.params().layers.iter().enumerate() {
        for part in 0..2 {
            let (values, analytic) = if part == 0 {
                (&layer.weights, &grads.layers[li].weights)
            } else {
                (&layer.biases, &grads.layers[li].biases)
            };
            let picks: Vec<usize> = if values.len() <= per_layer {
                (0..values.len()).collect()
            } else {
                (0..per_layer).map(|_| rng.random_range(0..values.len())).collect()
            };
            for j in picks {
                let orig = values[j];
                let mut eval_at = |v: f64| {
                    let l = &mut probe.params_mut().layers[li];
                    if part == 0 {
                        l.weights[j] = v;
                    } else {
                        l.biases[j] = v;
                    }
                    loss(&probe, &inputs)
                };
                let num = (eval_at(orig + FD_STEP) - eval_at(orig - FD_STEP)) / (2.0 * FD_STEP);
                eval_at(orig);
                err = err.max(max_relative_error(&[analytic[j]], &[num]));
            }
        }
    }
    let flat_x: Vec<f64> = inputs.iter().flat_map(|t| t.data.clone()).collect();
    let flat_g: Vec<f64> = grad_in.iter().flat_map(|t| t.data.clone()).collect();
    let num_x = central_diff(&flat_x, FD_STEP, |x| {
        let xs: Vec<Tensor3> = x.chunks(18).map(|c| Tensor3::from_vec(3, 3, 2, c.to_vec()).unwrap()).collect();
        loss(&model, &xs)
    });
    err = err.max(max_relative_error(&flat_g, &num_x));
    Check { label: format!("rarefynet {mode:?} batch={batch}"), max_rel_error: err }
}
