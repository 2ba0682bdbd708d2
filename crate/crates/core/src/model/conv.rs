//! Plain convolution stack (conv -> ReLU per layer) with explicit backward.
//! Convolutions are lowered to im2col + GEMM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "unit_dilation")]
    pub dilation: usize,
}

fn unit_dilation() -> usize {
    1
}

impl ConvSpec {
    /// Extent of the dilated kernel.
    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn output_dims(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let span = |n: usize| {
            (n + 2 * self.padding)
                .checked_sub(self.span())
                .map(|r| r / self.stride + 1)
        };
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::Argument(format!(
                "input {h}x{w} too small for {}x{} kernel",
                self.span(),
                self.span()
            ))),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn param_count(&self) -> usize {
        self.out_channels * self.patch_len() + self.out_channels
    }
}

fn im2col(input: &[f32], c: usize, (h, w): (usize, usize), spec: &ConvSpec, (oh, ow): (usize, usize)) -> Vec<f32> {
    let k = spec.kernel;
    let n = oh * ow;
    let mut cols = vec![0.0f32; spec.patch_len() * n];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, (h, w): (usize, usize), spec: &ConvSpec, (oh, ow): (usize, usize)) -> Vec<f32> {
    let k = spec.kernel;
    let n = oh * ow;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    input_dims: (usize, usize),
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    cols: Vec<f32>,
    /// Post-ReLU output.
    output: Vec<f32>,
    in_dims: (usize, usize),
    out_dims: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    specs: Vec<ConvSpec>,
    params: Vec<f32>,
    offsets: Vec<usize>,
}

impl ConvStack {
    pub fn new(specs: Vec<ConvSpec>, params: Vec<f32>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("convolution stack has no layers".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Config(format!(
                    "layer channel mismatch: {} -> {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            if s.kernel == 0 || s.stride == 0 || s.dilation == 0 {
                return Err(Error::Config("kernel, stride and dilation must be positive".into()));
            }
            offsets.push(total);
            total += s.param_count();
        }
        if params.len() != total {
            return Err(Error::Config(format!(
                "expected {total} backbone parameters, found {}",
                params.len()
            )));
        }
        Ok(Self {
            specs,
            params,
            offsets,
        })
    }

    /// He-normal weights, zero biases.
    pub fn initialized(specs: Vec<ConvSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for s in &specs {
            let std = (2.0 / s.patch_len() as f32).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..s.out_channels * s.patch_len()).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(s.out_channels));
        }
        Self::new(specs, params)
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn in_channels(&self) -> usize {
        self.specs[0].in_channels
    }

    pub fn output_dims(&self, input: (usize, usize)) -> Result<(usize, usize, usize)> {
        let mut dims = input;
        for s in &self.specs {
            dims = s.output_dims(dims)?;
        }
        let last = self.specs.last().expect("non-empty stack");
        Ok((last.out_channels, dims.0, dims.1))
    }

    fn layer_params(&self, i: usize) -> (&[f32], &[f32]) {
        let s = &self.specs[i];
        let w_len = s.out_channels * s.patch_len();
        let slice = &self.params[self.offsets[i]..self.offsets[i] + s.param_count()];
        slice.split_at(w_len)
    }

    fn layer_forward(&self, i: usize, input: &[f32], in_dims: (usize, usize)) -> (Vec<f32>, Vec<f32>, (usize, usize)) {
        let s = &self.specs[i];
        let out_dims = s.output_dims(in_dims).expect("dims validated by caller");
        let cols = im2col(input, s.in_channels, in_dims, s, out_dims);
        let n = out_dims.0 * out_dims.1;
        let (w, b) = self.layer_params(i);
        let mut out = vec![0.0f32; s.out_channels * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(b[o]);
        }
        gemm(s.out_channels, s.patch_len(), n, w, false, &cols, false, &mut out, 1.0);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        (cols, out, out_dims)
    }

    pub fn forward(&self, input: &[f32], dims: (usize, usize)) -> Vec<f32> {
        let mut x = input.to_vec();
        let mut d = dims;
        for i in 0..self.specs.len() {
            let (_, out, od) = self.layer_forward(i, &x, d);
            x = out;
            d = od;
        }
        x
    }

    pub fn forward_train(&self, input: &[f32], dims: (usize, usize)) -> (Vec<f32>, StackCache) {
        let mut layers = Vec::with_capacity(self.specs.len());
        let mut d = dims;
        for i in 0..self.specs.len() {
            let x = layers.last().map_or(input, |l: &LayerCache| &l.output[..]);
            let (cols, output, od) = self.layer_forward(i, x, d);
            layers.push(LayerCache {
                cols,
                output,
                in_dims: d,
                out_dims: od,
            });
            d = od;
        }
        let out = layers.last().expect("non-empty stack").output.clone();
        (
            out,
            StackCache {
                input_dims: dims,
                layers,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` (same layout as `params`).
    pub fn backward(&self, cache: &StackCache, grad_output: Vec<f32>, grad: &mut [f32]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer layout");
        debug_assert_eq!(cache.layers[0].in_dims, cache.input_dims);
        let mut upstream = grad_output;
        for i in (0..self.specs.len()).rev() {
            let s = &self.specs[i];
            let layer = &cache.layers[i];
            let n = layer.out_dims.0 * layer.out_dims.1;
            for (g, &o) in upstream.iter_mut().zip(&layer.output) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let w_len = s.out_channels * s.patch_len();
            let (gw, gb) = grad[self.offsets[i]..self.offsets[i] + s.param_count()].split_at_mut(w_len);
            gemm(s.out_channels, n, s.patch_len(), &upstream, false, &layer.cols, true, gw, 1.0);
            for (o, row) in upstream.chunks(n).enumerate() {
                gb[o] += row.iter().sum::<f32>();
            }
            if i > 0 {
                let (w, _) = self.layer_params(i);
                let mut dcols = vec![0.0f32; s.patch_len() * n];
                gemm(s.patch_len(), s.out_channels, n, w, true, &upstream, false, &mut dcols, 0.0);
                upstream = col2im(&dcols, s.in_channels, layer.in_dims, s, layer.out_dims);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(i: usize, o: usize, k: usize, s: usize, p: usize) -> ConvSpec {
        ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
            dilation: 1,
        }
    }

    fn dilated(i: usize, o: usize, d: usize) -> ConvSpec {
        ConvSpec {
            padding: d,
            dilation: d,
            ..spec(i, o, 3, 1, d)
        }
    }

    /// Direct-loop convolution with ReLU.
    fn naive_conv(input: &[f32], c: usize, (h, w): (usize, usize), s: &ConvSpec, wts: &[f32], b: &[f32]) -> Vec<f32> {
        let (oh, ow) = s.output_dims((h, w)).unwrap();
        let mut out = vec![0.0; s.out_channels * oh * ow];
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for ch in 0..c {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wts[((o * c + ch) * s.kernel + ky) * s.kernel + kx]
                                        * input[(ch * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for s in [spec(2, 3, 3, 2, 1), dilated(2, 3, 2)] {
            let stack = ConvStack::initialized(vec![s], 4).unwrap();
            let input: Vec<f32> = (0..2 * 7 * 6).map(|i| ((i * 7) % 13) as f32 / 13.0 - 0.4).collect();
            let got = stack.forward(&input, (7, 6));
            let (w, b) = stack.layer_params(0);
            let want = naive_conv(&input, 2, (7, 6), &s, w, b);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dilation_defaults_to_one_when_absent() {
        let json = r#"{"in_channels":1,"out_channels":2,"kernel":3,"stride":1,"padding":1}"#;
        let s: ConvSpec = serde_json::from_str(json).unwrap();
        assert_eq!(s, spec(1, 2, 3, 1, 1));
        assert_eq!(dilated(1, 1, 4).output_dims((8, 8)).unwrap(), (8, 8));
    }

    #[test]
    fn output_dims_of_stride_two_stack() {
        let specs = vec![spec(3, 4, 3, 2, 1), spec(4, 5, 3, 2, 1)];
        let stack = ConvStack::initialized(specs, 0).unwrap();
        assert_eq!(stack.output_dims((16, 12)).unwrap(), (5, 4, 3));
        assert!(spec(1, 1, 5, 1, 0).output_dims((3, 3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // f64-free check: small stack, loss = sum(output * r), compare a few
        // parameters against central differences.
        let specs = vec![spec(2, 3, 3, 2, 1), dilated(3, 2, 2)];
        let stack = ConvStack::initialized(specs, 9).unwrap();
        let dims = (6, 6);
        let input: Vec<f32> = (0..2 * 36).map(|i| ((i * 5) % 11) as f32 / 11.0).collect();
        let (out, cache) = stack.forward_train(&input, dims);
        let r: Vec<f32> = (0..out.len()).map(|i| ((i * 3) % 7) as f32 / 7.0 - 0.3).collect();
        let mut grad = vec![0.0; stack.params().len()];
        stack.backward(&cache, r.clone(), &mut grad);
        let loss = |st: &ConvStack| -> f64 {
            st.forward(&input, dims)
                .iter()
                .zip(&r)
                .map(|(a, b)| f64::from(a * b))
                .sum()
        };
        let h = 1e-2f32;
        let mut checked = 0;
        for idx in (0..stack.params().len()).step_by(7) {
            let mut plus = stack.clone();
            plus.params_mut()[idx] += h;
            let mut minus = stack.clone();
            minus.params_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * f64::from(h));
            let an = f64::from(grad[idx]);
            assert!((fd - an).abs() <= 2e-2 * an.abs().max(0.05), "param {idx}: fd {fd} vs analytic {an}");
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn rejects_inconsistent_layouts() {
        assert!(ConvStack::new(vec![spec(3, 4, 3, 1, 1), spec(5, 2, 1, 1, 0)], vec![]).is_err());
        assert!(ConvStack::new(vec![spec(1, 1, 1, 1, 0)], vec![0.0]).is_err());
    }
}
