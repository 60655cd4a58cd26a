//! The layer vocabulary: affine, relu, 3x3 stride-1 pad-1 convolution,
//! 2x2 max pooling and flatten, each with hand-written forward and
//! reverse passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vtnet::tensor::Tensor;

/// Declarative layer description; shape compatibility is checked when
/// the network is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Affine { out_dim: usize },
    Relu,
    /// 3x3 kernel, stride 1, pad 1.
    Conv2d { out_channels: usize },
    /// 2x2 window, stride 2.
    MaxPool2d,
    Flatten,
}

impl LayerSpec {
    pub fn to_text(&self) -> String {
        match self {
            LayerSpec::Affine { out_dim } => format!("affine({out_dim})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Conv2d { out_channels } => format!("conv2d({out_channels})"),
            LayerSpec::MaxPool2d => "maxpool2d".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    pub fn parse(s: &str) -> Result<LayerSpec> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid layer spec `{s}`"));
        if s == "relu" {
            return Ok(LayerSpec::Relu);
        }
        if s == "maxpool2d" {
            return Ok(LayerSpec::MaxPool2d);
        }
        if s == "flatten" {
            return Ok(LayerSpec::Flatten);
        }
        if let Some(rest) = s.strip_prefix("affine(").and_then(|r| r.strip_suffix(')')) {
            return Ok(LayerSpec::Affine {
                out_dim: rest.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("conv2d(").and_then(|r| r.strip_suffix(')')) {
            return Ok(LayerSpec::Conv2d {
                out_channels: rest.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

/// A built layer: spec plus parameters, gradients and forward cache.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
    cache_input: Vec<f64>,
    /// Max-pool winner indices from the last forward.
    cache_argmax: Vec<usize>,
}

impl Layer {
    /// Build a layer for a given input shape, initializing parameters
    /// with uniform He-style scaling from `seed`.
    pub fn build(spec: LayerSpec, in_shape: &[usize], seed: u64) -> Result<Layer> {
        let shape_err = |msg: String| Error::Precondition(msg);
        let (out_shape, params) = match &spec {
            LayerSpec::Affine { out_dim } => {
                if in_shape.len() != 1 {
                    return Err(shape_err(format!(
                        "affine expects a flat input, got shape {in_shape:?}"
                    )));
                }
                if *out_dim == 0 {
                    return Err(shape_err("affine out_dim must be positive".into()));
                }
                let fan_in = in_shape[0];
                let mut params = he_uniform(fan_in * out_dim, fan_in, seed);
                params.extend(std::iter::repeat(0.0).take(*out_dim)); // biases
                (vec![*out_dim], params)
            }
            LayerSpec::Relu => (in_shape.to_vec(), Vec::new()),
            LayerSpec::Conv2d { out_channels } => {
                if in_shape.len() != 3 {
                    return Err(shape_err(format!(
                        "conv2d expects [c,h,w] input, got shape {in_shape:?}"
                    )));
                }
                if *out_channels == 0 {
                    return Err(shape_err("conv2d out_channels must be positive".into()));
                }
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let fan_in = c * 9;
                let mut params = he_uniform(out_channels * c * 9, fan_in, seed);
                params.extend(std::iter::repeat(0.0).take(*out_channels));
                (vec![*out_channels, h, w], params)
            }
            LayerSpec::MaxPool2d => {
                if in_shape.len() != 3 || in_shape[1] % 2 != 0 || in_shape[2] % 2 != 0 {
                    return Err(shape_err(format!(
                        "maxpool2d expects [c,even,even] input, got shape {in_shape:?}"
                    )));
                }
                (vec![in_shape[0], in_shape[1] / 2, in_shape[2] / 2], Vec::new())
            }
            LayerSpec::Flatten => (vec![in_shape.iter().product()], Vec::new()),
        };
        let grads = vec![0.0; params.len()];
        Ok(Layer {
            spec,
            in_shape: in_shape.to_vec(),
            out_shape,
            params,
            grads,
            cache_input: Vec::new(),
            cache_argmax: Vec::new(),
        })
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.shape != self.in_shape {
            return Err(Error::Precondition(format!(
                "layer {} expected input shape {:?}, got {:?}",
                self.spec.to_text(),
                self.in_shape,
                input.shape
            )));
        }
        self.cache_input = input.data.clone();
        let out = match &self.spec {
            LayerSpec::Affine { out_dim } => {
                let d = self.in_shape[0];
                let (w, b) = self.params.split_at(d * out_dim);
                let mut out = vec![0.0; *out_dim];
                for o in 0..*out_dim {
                    let row = &w[o * d..(o + 1) * d];
                    out[o] = b[o] + row.iter().zip(&input.data).map(|(x, y)| x * y).sum::<f64>();
                }
                Tensor::from_vec(&self.out_shape, out)?
            }
            LayerSpec::Relu => Tensor::from_vec(
                &self.out_shape,
                input.data.iter().map(|&x| x.max(0.0)).collect(),
            )?,
            LayerSpec::Conv2d { out_channels } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (kernel, bias) = self.params.split_at(out_channels * c * 9);
                let mut out = vec![0.0; out_channels * h * w];
                for oc in 0..*out_channels {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = bias[oc];
                            for ic in 0..c {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iy = y as isize + ky as isize - 1;
                                        let ix = x as isize + kx as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let inp = input.data
                                            [ic * h * w + iy as usize * w + ix as usize];
                                        let k = kernel[((oc * c + ic) * 3 + ky) * 3 + kx];
                                        acc += inp * k;
                                    }
                                }
                            }
                            out[oc * h * w + y * w + x] = acc;
                        }
                    }
                }
                Tensor::from_vec(&self.out_shape, out)?
            }
            LayerSpec::MaxPool2d => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * oh * ow];
                self.cache_argmax = vec![0; c * oh * ow];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ch * h * w + (2 * y + dy) * w + (2 * x + dx);
                                    if input.data[idx] > best {
                                        best = input.data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[ch * oh * ow + y * ow + x] = best;
                            self.cache_argmax[ch * oh * ow + y * ow + x] = best_idx;
                        }
                    }
                }
                Tensor::from_vec(&self.out_shape, out)?
            }
            LayerSpec::Flatten => Tensor::from_vec(&self.out_shape, input.data.clone())?,
        };
        out.assert_finite(&format!("output of {}", self.spec.to_text()))?;
        Ok(out)
    }

    /// Reverse pass for the last forward input; accumulates parameter
    /// gradients into `self.grads` and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        debug_assert_eq!(grad_out.shape, self.out_shape);
        let grad_in = match &self.spec {
            LayerSpec::Affine { out_dim } => {
                let d = self.in_shape[0];
                let w = &self.params[..d * out_dim];
                let (gw, gb) = self.grads.split_at_mut(d * out_dim);
                let mut gin = vec![0.0; d];
                for o in 0..*out_dim {
                    let g = grad_out.data[o];
                    gb[o] += g;
                    for i in 0..d {
                        gw[o * d + i] += g * self.cache_input[i];
                        gin[i] += g * w[o * d + i];
                    }
                }
                Tensor::from_vec(&self.in_shape, gin)?
            }
            LayerSpec::Relu => Tensor::from_vec(
                &self.in_shape,
                self.cache_input
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            )?,
            LayerSpec::Conv2d { out_channels } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let kparams = out_channels * c * 9;
                let kernel: Vec<f64> = self.params[..kparams].to_vec();
                let (gk, gb) = self.grads.split_at_mut(kparams);
                let mut gin = vec![0.0; c * h * w];
                for oc in 0..*out_channels {
                    for y in 0..h {
                        for x in 0..w {
                            let g = grad_out.data[oc * h * w + y * w + x];
                            if g == 0.0 {
                                continue;
                            }
                            gb[oc] += g;
                            for ic in 0..c {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iy = y as isize + ky as isize - 1;
                                        let ix = x as isize + kx as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let in_idx =
                                            ic * h * w + iy as usize * w + ix as usize;
                                        let k_idx = ((oc * c + ic) * 3 + ky) * 3 + kx;
                                        gk[k_idx] += g * self.cache_input[in_idx];
                                        gin[in_idx] += g * kernel[k_idx];
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(&self.in_shape, gin)?
            }
            LayerSpec::MaxPool2d => {
                let mut gin = vec![0.0; self.cache_input.len()];
                for (out_idx, &in_idx) in self.cache_argmax.iter().enumerate() {
                    gin[in_idx] += grad_out.data[out_idx];
                }
                Tensor::from_vec(&self.in_shape, gin)?
            }
            LayerSpec::Flatten => Tensor::from_vec(&self.in_shape, grad_out.data.clone())?,
        };
        if grad_in.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in layer {}",
                self.spec.to_text()
            )));
        }
        Ok(grad_in)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = 0.0;
        }
    }
}

fn he_uniform(count: usize, fan_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_spec_text_round_trip() {
        for spec in [
            LayerSpec::Affine { out_dim: 64 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { out_channels: 8 },
            LayerSpec::MaxPool2d,
            LayerSpec::Flatten,
        ] {
            assert_eq!(LayerSpec::parse(&spec.to_text()).unwrap(), spec);
        }
        assert!(LayerSpec::parse("affine(x)").is_err());
        assert!(LayerSpec::parse("sigmoid").is_err());
    }

    #[test]
    fn affine_forward_matches_hand_computation() {
        let mut layer = Layer::build(LayerSpec::Affine { out_dim: 2 }, &[3], 0).unwrap();
        layer.params = vec![1.0, 2.0, 3.0, 0.5, -1.0, 0.0, 10.0, -10.0];
        let out = layer
            .forward(&Tensor::from_vec(&[3], vec![1.0, 1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(out.data, vec![1.0 + 2.0 + 6.0 + 10.0, 0.5 - 1.0 - 10.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut layer = Layer::build(LayerSpec::MaxPool2d, &[1, 2, 2], 0).unwrap();
        let input = Tensor::from_vec(&[1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.data, vec![5.0]);
        let gin = layer
            .backward(&Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(gin.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_interior() {
        let mut layer = Layer::build(LayerSpec::Conv2d { out_channels: 1 }, &[1, 4, 4], 0).unwrap();
        layer.params = vec![0.0; 10];
        layer.params[4] = 1.0; // center tap
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = layer
            .forward(&Tensor::from_vec(&[1, 4, 4], input.clone()).unwrap())
            .unwrap();
        assert_eq!(out.data, input);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut layer = Layer::build(LayerSpec::Affine { out_dim: 2 }, &[3], 0).unwrap();
        let bad = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        assert!(layer.forward(&bad).is_err());
        assert!(Layer::build(LayerSpec::MaxPool2d, &[1, 3, 4], 0).is_err());
        assert!(Layer::build(LayerSpec::Conv2d { out_channels: 2 }, &[9], 0).is_err());
    }
}
