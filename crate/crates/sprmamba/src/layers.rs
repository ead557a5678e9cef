//! Parameterized building blocks: linear maps, temporal convolutions,
//! normalization layers, and dropout. Each layer owns [`ParamId`] handles
//! into a [`ParamStore`] and builds its forward pass on a [`Graph`].

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding, ParamId, ParamStore};
use crate::tensor::NdArray;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode; dropout is active only in [`Mode::Train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Symmetric uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> NdArray {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    NdArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape/data consistent by construction")
}

/// Fully connected map `[L x in] -> [L x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, &[in_dim, out_dim], in_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), NdArray::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Full temporal convolution `[L x Cin] -> [L x Cout]` with kernel size `k`.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
        padding: Padding,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            init_uniform(rng, &[k, cin, cout], k * cin),
        );
        let bias = store.add(format!("{name}.bias"), NdArray::zeros(&[cout]));
        Conv1dLayer { kernel, bias, dilation, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let kernel = g.param(store, self.kernel);
        let bias = g.param(store, self.bias);
        let y = g.conv1d(x, kernel, self.dilation, self.padding)?;
        g.add_row(y, bias)
    }
}

/// Depthwise temporal convolution `[L x C] -> [L x C]`, one filter per channel.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub padding: Padding,
}

impl DepthwiseConv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        c: usize,
        padding: Padding,
    ) -> Self {
        let kernel = store.add(format!("{name}.kernel"), init_uniform(rng, &[k, c], k));
        let bias = store.add(format!("{name}.bias"), NdArray::zeros(&[c]));
        DepthwiseConv1d { kernel, bias, dilation: 1, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let kernel = g.param(store, self.kernel);
        let bias = g.param(store, self.bias);
        let y = g.conv1d_depthwise(x, kernel, self.dilation, self.padding)?;
        g.add_row(y, bias)
    }

    pub fn forward_spans(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        spans: &[(usize, usize)],
    ) -> Result<NodeId> {
        let kernel = g.param(store, self.kernel);
        let bias = g.param(store, self.bias);
        let y = g.conv1d_depthwise_spans(x, kernel, self.dilation, self.padding, Some(spans))?;
        g.add_row(y, bias)
    }
}

/// Instance normalization with learnable affine parameters.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), NdArray::filled(&[c], 1.0));
        let beta = store.add(format!("{name}.beta"), NdArray::zeros(&[c]));
        InstanceNorm { gamma, beta, eps }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.instance_norm(x, gamma, beta, self.eps, mask, causal)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_spans(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&[bool]>,
        causal: bool,
        spans: &[(usize, usize)],
    ) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.instance_norm_spans(x, gamma, beta, self.eps, mask, causal, Some(spans))
    }
}

/// Layer normalization with learnable affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), NdArray::filled(&[c], 1.0));
        let beta = store.add(format!("{name}.beta"), NdArray::zeros(&[c]));
        LayerNorm { gamma, beta, eps }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Inverted dropout: active only in training mode, kept units scaled by
/// 1/(1-rate) so eval needs no rescaling.
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask = NdArray::new(
        shape,
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect(),
    )?;
    g.mul_const(x, &mask)
}

/// `[L x C]` multiplicative mask matrix: row t is all ones when `mask[t]`,
/// all zeros otherwise.
pub fn row_mask_matrix(mask: &[bool], c: usize) -> NdArray {
    let mut data = vec![0.0; mask.len() * c];
    for (t, &valid) in mask.iter().enumerate() {
        if valid {
            data[t * c..(t + 1) * c].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    NdArray::new(vec![mask.len(), c], data).expect("consistent by construction")
}

/// Zeroes the rows of `x` marked invalid; a no-op when all frames are valid.
pub fn zero_masked_rows(g: &mut Graph, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    if mask.iter().all(|&v| v) {
        return Ok(x);
    }
    let (_, c) = g.value(x).dims2()?;
    let m = row_mask_matrix(mask, c);
    g.mul_const(x, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut rng, "l", 2, 3, true);
        store.entry_mut(lin.w).value =
            NdArray::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        store.entry_mut(lin.b.unwrap()).value =
            NdArray::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 3.5, 0.5]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::filled(&[10, 10], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&mut g, x, 0.4, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        let y = dropout(&mut g, x, 0.4, Mode::Train, &mut rng).unwrap();
        let vals = g.value(y).data();
        let scale = 1.0 / 0.6;
        assert!(vals.iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
        assert!(vals.iter().any(|&v| v == 0.0));
        assert!(vals.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_masked_rows_keeps_valid_bits() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = zero_masked_rows(&mut g, x, &[true, false, true]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
