//! Layer forward and backward kernels.
//!
//! Backward functions accumulate parameter gradients into caller-owned
//! buffers and return the gradient with respect to the layer input.

use super::tensor::Tensor3;
use super::{LayerKind, LayerParams, Mode};
use crate::error::{Error, Result};
use rand::Rng;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`] at input `x`.
#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

struct ConvShape {
    filter: usize,
    dilation: usize,
    in_channels: usize,
    out_channels: usize,
    pad: usize,
}

fn conv_shape(params: &LayerParams) -> Result<ConvShape> {
    match params.kind {
        LayerKind::Conv2d { filter, dilation, in_channels, out_channels } => {
            let span = (filter - 1) * dilation;
            if span % 2 != 0 {
                return Err(Error::UnsupportedSpan { filter, dilation });
            }
            Ok(ConvShape { filter, dilation, in_channels, out_channels, pad: span / 2 })
        }
        _ => Err(Error::ShapeMismatch(format!("{:?} is not a convolution", params.kind))),
    }
}

/// Input coordinate of tap `t` for output coordinate `o`, if inside `0..len`.
#[inline]
fn tap(o: usize, t: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o + t * dilation).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// "Same" dilated convolution with symmetric zero padding.
pub fn conv2d(input: &Tensor3, params: &LayerParams) -> Result<Tensor3> {
    let s = conv_shape(params)?;
    if input.channels != s.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            s.in_channels, input.channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let mut out = Tensor3::zeros(h, w, s.out_channels);
    for y in 0..h {
        for x in 0..w {
            let o = out.offset(y, x);
            let acc = &mut out.data[o..o + s.out_channels];
            acc.copy_from_slice(&params.biases);
            for ky in 0..s.filter {
                let Some(iy) = tap(y, ky, s.dilation, s.pad, h) else { continue };
                for kx in 0..s.filter {
                    let Some(ix) = tap(x, kx, s.dilation, s.pad, w) else { continue };
                    let px = &input.data[input.offset(iy, ix)..][..s.in_channels];
                    let base = (ky * s.filter + kx) * s.in_channels;
                    for (ci, &v) in px.iter().enumerate() {
                        let row = &params.weights[(base + ci) * s.out_channels..][..s.out_channels];
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor3,
    grad_out: &Tensor3,
    params: &LayerParams,
    grad_weights: &mut [f64],
    grad_biases: &mut [f64],
) -> Result<Tensor3> {
    let s = conv_shape(params)?;
    if grad_out.channels != s.out_channels || input.height != grad_out.height || input.width != grad_out.width {
        return Err(Error::ShapeMismatch("conv gradient shape".into()));
    }
    let (h, w) = (input.height, input.width);
    let mut grad_in = Tensor3::zeros(h, w, s.in_channels);
    for y in 0..h {
        for x in 0..w {
            let go = &grad_out.data[grad_out.offset(y, x)..][..s.out_channels];
            for (gb, &g) in grad_biases.iter_mut().zip(go) {
                *gb += g;
            }
            for ky in 0..s.filter {
                let Some(iy) = tap(y, ky, s.dilation, s.pad, h) else { continue };
                for kx in 0..s.filter {
                    let Some(ix) = tap(x, kx, s.dilation, s.pad, w) else { continue };
                    let in_off = input.offset(iy, ix);
                    let base = (ky * s.filter + kx) * s.in_channels;
                    for ci in 0..s.in_channels {
                        let v = input.data[in_off + ci];
                        let widx = (base + ci) * s.out_channels;
                        let row = &params.weights[widx..widx + s.out_channels];
                        let grow = &mut grad_weights[widx..widx + s.out_channels];
                        let mut gi = 0.0;
                        for ((gw, &wv), &g) in grow.iter_mut().zip(row).zip(go) {
                            *gw += v * g;
                            gi += wv * g;
                        }
                        grad_in.data[in_off + ci] += gi;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Values cached by a batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Vec<Tensor3>,
    pub inv_std: Vec<f64>,
    /// Batch mean and (biased) variance; empty in eval mode.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub mode: Mode,
}

fn bn_channels(params: &LayerParams) -> Result<usize> {
    match params.kind {
        LayerKind::BatchNorm { channels } => Ok(channels),
        _ => Err(Error::ShapeMismatch(format!("{:?} is not a batch norm", params.kind))),
    }
}

/// Per-channel normalization over the batch (train) or running statistics
/// (eval), followed by the learned scale and shift. Train mode also folds
/// the batch moments into the running statistics of `params`.
pub fn batchnorm(batch: &[Tensor3], params: &mut LayerParams, mode: Mode) -> Result<(Vec<Tensor3>, BatchNormCache)> {
    let (out, cache) = batchnorm_forward(batch, params, mode)?;
    update_running_stats(params, &cache);
    Ok((out, cache))
}

/// [`batchnorm`] without touching the running statistics.
pub fn batchnorm_forward(batch: &[Tensor3], params: &LayerParams, mode: Mode) -> Result<(Vec<Tensor3>, BatchNormCache)> {
    let channels = bn_channels(params)?;
    if batch.iter().any(|t| t.channels != channels) {
        return Err(Error::ShapeMismatch("batch norm channel count".into()));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if batch.is_empty() {
                return Err(Error::EmptyBatch);
            }
            batch_moments(batch, channels)
        }
        Mode::Eval => (params.running_mean.clone(), params.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut normalized = Vec::with_capacity(batch.len());
    let mut out = Vec::with_capacity(batch.len());
    for t in batch {
        let mut n = t.clone();
        let mut o = t.clone();
        for (i, (nv, ov)) in n.data.iter_mut().zip(o.data.iter_mut()).enumerate() {
            let c = i % channels;
            *nv = (*nv - mean[c]) * inv_std[c];
            *ov = params.weights[c] * *nv + params.biases[c];
        }
        normalized.push(n);
        out.push(o);
    }
    let (batch_mean, batch_var) = match mode {
        Mode::Train => (mean, var),
        Mode::Eval => (Vec::new(), Vec::new()),
    };
    Ok((out, BatchNormCache { normalized, inv_std, batch_mean, batch_var, mode }))
}

/// Exponential moving average of the batch moments; no-op for eval caches.
pub fn update_running_stats(params: &mut LayerParams, cache: &BatchNormCache) {
    if cache.mode != Mode::Train {
        return;
    }
    let stats = params.running_mean.iter_mut().zip(params.running_var.iter_mut());
    for ((rm, rv), (m, v)) in stats.zip(cache.batch_mean.iter().zip(&cache.batch_var)) {
        *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
        *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
    }
}

/// Mean and biased variance per channel. The mean is accumulated relative
/// to the first sample so a constant channel yields exactly zero variance.
fn batch_moments(batch: &[Tensor3], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let count: usize = batch.iter().map(|t| t.height * t.width).sum();
    let shift: Vec<f64> = batch[0].data[..channels].to_vec();
    let mut mean = vec![0.0; channels];
    for t in batch {
        for (i, &v) in t.data.iter().enumerate() {
            mean[i % channels] += v - shift[i % channels];
        }
    }
    for (m, s) in mean.iter_mut().zip(&shift) {
        *m = s + *m / count as f64;
    }
    let mut var = vec![0.0; channels];
    for t in batch {
        for (i, &v) in t.data.iter().enumerate() {
            let d = v - mean[i % channels];
            var[i % channels] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var)
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    grad_out: &[Tensor3],
    params: &LayerParams,
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Result<Vec<Tensor3>> {
    let channels = bn_channels(params)?;
    if grad_out.len() != cache.normalized.len() {
        return Err(Error::ShapeMismatch("batch norm gradient batch size".into()));
    }
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for (g, n) in grad_out.iter().zip(&cache.normalized) {
        for (i, (&gv, &nv)) in g.data.iter().zip(&n.data).enumerate() {
            sum_g[i % channels] += gv;
            sum_gx[i % channels] += gv * nv;
        }
    }
    for c in 0..channels {
        grad_gamma[c] += sum_gx[c];
        grad_beta[c] += sum_g[c];
    }
    let count: usize = grad_out.iter().map(|t| t.height * t.width).sum();
    let m = count as f64;
    let grads = grad_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, n)| {
            let mut gi = g.clone();
            for (i, (v, &nv)) in gi.data.iter_mut().zip(&n.data).enumerate() {
                let c = i % channels;
                let scale = params.weights[c] * cache.inv_std[c];
                *v = match cache.mode {
                    Mode::Train => scale * (*v - sum_g[c] / m - nv * sum_gx[c] / m),
                    Mode::Eval => scale * *v,
                };
            }
            gi
        })
        .collect();
    Ok(grads)
}

fn dense_shape(params: &LayerParams) -> Result<(usize, usize)> {
    match params.kind {
        LayerKind::Dense { inputs, outputs } => Ok((inputs, outputs)),
        _ => Err(Error::ShapeMismatch(format!("{:?} is not a dense layer", params.kind))),
    }
}

/// `W x + b` with `W` stored row-major `outputs x inputs`.
pub fn dense(input: &[f64], params: &LayerParams) -> Result<Vec<f64>> {
    let (n_in, _) = dense_shape(params)?;
    if input.len() != n_in {
        return Err(Error::ShapeMismatch(format!("dense expects {n_in} inputs, got {}", input.len())));
    }
    Ok(params
        .weights
        .chunks(n_in)
        .zip(&params.biases)
        .map(|(row, &b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

pub fn dense_backward(
    input: &[f64],
    grad_out: &[f64],
    params: &LayerParams,
    grad_weights: &mut [f64],
    grad_biases: &mut [f64],
) -> Result<Vec<f64>> {
    let (n_in, n_out) = dense_shape(params)?;
    if input.len() != n_in || grad_out.len() != n_out {
        return Err(Error::ShapeMismatch("dense gradient shape".into()));
    }
    let mut grad_in = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_biases[o] += g;
        let row = &params.weights[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weights[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * input[i];
            grad_in[i] += g * row[i];
        }
    }
    Ok(grad_in)
}

/// Inverted dropout. Returns the output and the per-unit scale applied
/// (0 for dropped units, `1/(1-p)` for kept ones), which is also the
/// backward multiplier.
pub fn dropout<R: Rng + ?Sized>(input: &[f64], p: f64, mode: Mode, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((input.to_vec(), vec![1.0; input.len()]));
    }
    let keep = 1.0 / (1.0 - p);
    let scales: Vec<f64> = input
        .iter()
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let out = input.iter().zip(&scales).map(|(x, s)| x * s).collect();
    Ok((out, scales))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(filter: usize, dilation: usize, cin: usize, cout: usize, w: f64, b: f64) -> LayerParams {
        let mut p = LayerParams::new(LayerKind::Conv2d { filter, dilation, in_channels: cin, out_channels: cout });
        p.weights.fill(w);
        p.biases.fill(b);
        p
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut p = conv(1, 1, 3, 3, 0.0, 0.0);
        for c in 0..3 {
            p.weights[c * 3 + c] = 1.0;
        }
        let input = Tensor3::from_vec(3, 3, 3, (0..27).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn zero_weights_give_bias() {
        let p = conv(3, 1, 2, 4, 0.0, 0.7);
        let input = Tensor3::from_vec(3, 3, 2, vec![0.3; 18]).unwrap();
        assert!(conv2d(&input, &p).unwrap().data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn hand_convolution_ones() {
        let p = conv(3, 1, 1, 1, 1.0, 0.0);
        let input = Tensor3::from_vec(3, 3, 1, vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.at(1, 1, 0), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(y, x, 0), 4.0);
        }
        assert_eq!(out.at(0, 1, 0), 6.0);
    }

    #[test]
    fn dilated_taps_on_three_by_three() {
        // Span 5, padding 2: the center sees only itself, a corner also sees the opposite corner.
        let p = conv(3, 2, 1, 1, 1.0, 0.0);
        let input = Tensor3::from_vec(3, 3, 1, (1..=9).map(f64::from).collect()).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.at(1, 1, 0), 5.0);
        assert_eq!(out.at(0, 0, 0), 1.0 + 3.0 + 7.0 + 9.0);
        assert_eq!((out.height, out.width), (3, 3));
    }

    #[test]
    fn odd_span_rejected() {
        let p = conv(2, 1, 1, 1, 1.0, 0.0);
        let input = Tensor3::zeros(3, 3, 1);
        assert!(matches!(conv2d(&input, &p), Err(Error::UnsupportedSpan { filter: 2, dilation: 1 })));
        let ok = conv(2, 2, 1, 1, 1.0, 0.0);
        assert_eq!(conv2d(&input, &ok).unwrap().height, 3);
    }

    #[test]
    fn conv_channel_mismatch() {
        let p = conv(1, 1, 2, 1, 1.0, 0.0);
        assert!(matches!(conv2d(&Tensor3::zeros(3, 3, 3), &p), Err(Error::ShapeMismatch(_))));
    }

    fn bn(channels: usize, gamma: f64, beta: f64) -> LayerParams {
        let mut p = LayerParams::new(LayerKind::BatchNorm { channels });
        p.weights.fill(gamma);
        p.biases.fill(beta);
        p
    }

    #[test]
    fn batchnorm_unit_variance_batch() {
        let mut p = bn(1, 1.0, 0.0);
        let batch = vec![
            Tensor3::from_vec(1, 1, 1, vec![-1.0]).unwrap(),
            Tensor3::from_vec(1, 1, 1, vec![1.0]).unwrap(),
        ];
        let (out, _) = batchnorm(&batch, &mut p, Mode::Train).unwrap();
        let expect = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((out[0].data[0] + expect).abs() < 1e-15);
        assert!((out[1].data[0] - expect).abs() < 1e-15);
        assert!((out[1].data[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_constant_and_affine() {
        let batch = vec![Tensor3::from_vec(3, 3, 2, vec![0.4; 18]).unwrap(); 3];
        let mut p = bn(2, 1.0, 0.0);
        let (out, _) = batchnorm(&batch, &mut p, Mode::Train).unwrap();
        assert!(out.iter().flat_map(|t| &t.data).all(|&v| v == 0.0));
        let mut p = bn(2, 0.0, 5.0);
        let (out, _) = batchnorm(&batch, &mut p, Mode::Train).unwrap();
        assert!(out.iter().flat_map(|t| &t.data).all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_running_stats() {
        let mut p = bn(1, 1.0, 0.0);
        let batch = vec![
            Tensor3::from_vec(1, 1, 1, vec![1.0]).unwrap(),
            Tensor3::from_vec(1, 1, 1, vec![3.0]).unwrap(),
        ];
        batchnorm(&batch, &mut p, Mode::Train).unwrap();
        assert!((p.running_mean[0] - 0.02).abs() < 1e-15);
        assert!((p.running_var[0] - (0.99 + 0.01)).abs() < 1e-15);
        assert!(matches!(batchnorm(&[], &mut p, Mode::Train), Err(Error::EmptyBatch)));
        assert!(batchnorm(&[], &mut p, Mode::Eval).unwrap().0.is_empty());
    }

    #[test]
    fn activations() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        assert_eq!(relu(-3.0), 0.0);
        assert!((elu(-1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }

    fn dense_layer(n_in: usize, n_out: usize, w: &[f64], b: &[f64]) -> LayerParams {
        let mut p = LayerParams::new(LayerKind::Dense { inputs: n_in, outputs: n_out });
        p.weights.copy_from_slice(w);
        p.biases.copy_from_slice(b);
        p
    }

    #[test]
    fn dense_examples() {
        let id = dense_layer(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(dense(&[0.3, -0.2], &id).unwrap(), vec![0.3, -0.2]);
        let zero = dense_layer(2, 1, &[0.0, 0.0], &[3.0]);
        assert_eq!(dense(&[5.0, 6.0], &zero).unwrap(), vec![3.0]);
        let p = dense_layer(2, 1, &[1.0, 2.0], &[0.5]);
        assert_eq!(dense(&[1.0, 1.0], &p).unwrap(), vec![3.5]);
        assert!(matches!(dense(&[1.0], &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dense_hand_gradient() {
        let p = dense_layer(2, 1, &[0.3, -0.7], &[0.1]);
        let mut gw = vec![0.0; 2];
        let mut gb = vec![0.0; 1];
        let gi = dense_backward(&[1.0, 1.0], &[1.0], &p, &mut gw, &mut gb).unwrap();
        assert_eq!(gw, vec![1.0, 1.0]);
        assert_eq!(gb, vec![1.0]);
        assert_eq!(gi, vec![0.3, -0.7]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut p = conv(3, 1, 2, 3, 0.0, 0.0);
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = (i as f64).sin();
        }
        let input = Tensor3::from_vec(3, 3, 2, (0..18).map(|i| i as f64).collect()).unwrap();
        let mut gw = vec![0.0; p.weights.len()];
        let mut gb = vec![0.0; 3];
        let gi = conv2d_backward(&input, &Tensor3::zeros(3, 3, 3), &p, &mut gw, &mut gb).unwrap();
        assert!(gw.iter().chain(&gb).chain(&gi.data).all(|&g| g == 0.0));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![0.5, -1.0, 2.0];
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.2, Mode::Eval, &mut rng).unwrap().0, x);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::InvalidProbability(_))));
        assert!(matches!(dropout(&x, -0.1, Mode::Eval, &mut rng), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = vec![1.0; 100_000];
        let (out, _) = dropout(&x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.25));
    }
}
