use crate::error::{Error, Result};

/// Dense `height x width x channels` tensor, channel-fastest layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x) + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let o = self.offset(y, x);
        &mut self.data[o + c]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Stacks channels of same-sized tensors in list order.
pub fn concat_channels(parts: &[Tensor3]) -> Result<Tensor3> {
    let first = parts.first().ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
    let (h, w) = (first.height, first.width);
    if parts.iter().any(|p| p.height != h || p.width != w) {
        return Err(Error::ShapeMismatch("spatial sizes differ in concat".into()));
    }
    let channels: usize = parts.iter().map(|p| p.channels).sum();
    let mut out = Tensor3::zeros(h, w, channels);
    for pos in 0..h * w {
        let mut o = pos * channels;
        for p in parts {
            let src = &p.data[pos * p.channels..(pos + 1) * p.channels];
            out.data[o..o + p.channels].copy_from_slice(src);
            o += p.channels;
        }
    }
    Ok(out)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(t: &Tensor3, sizes: &[usize]) -> Result<Vec<Tensor3>> {
    if sizes.iter().sum::<usize>() != t.channels {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {} channels into {sizes:?}",
            t.channels
        )));
    }
    let mut parts: Vec<Tensor3> = sizes.iter().map(|&c| Tensor3::zeros(t.height, t.width, c)).collect();
    for pos in 0..t.height * t.width {
        let mut o = pos * t.channels;
        for p in parts.iter_mut() {
            let c = p.channels;
            p.data[pos * c..(pos + 1) * c].copy_from_slice(&t.data[o..o + c]);
            o += c;
        }
    }
    Ok(parts)
}

/// Per-channel spatial mean.
pub fn global_avg_pool(input: &Tensor3) -> Vec<f64> {
    let n = input.height * input.width;
    let mut out = vec![0.0; input.channels];
    for px in input.data.chunks(input.channels) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
    out
}

pub fn global_avg_pool_backward(grad_out: &[f64], height: usize, width: usize) -> Tensor3 {
    let channels = grad_out.len();
    let scale = 1.0 / (height * width) as f64;
    let mut g = Tensor3::zeros(height, width, channels);
    for px in g.data.chunks_mut(channels) {
        for (v, &go) in px.iter_mut().zip(grad_out) {
            *v = go * scale;
        }
    }
    g
}
