//! Small multi-layer perceptrons with a learnable per-bin time embedding.
//!
//! A network maps `(x, t_bin)` to a vector. When the network has time bins,
//! row `t_bin` of the embedding table is concatenated to `x` before the first
//! layer; otherwise the network is an ordinary MLP of `x` alone (policies,
//! value functions, discriminators).
//!
//! Hidden layers use the configured activation; the output layer is always
//! affine. With [`Activation::Identity`] the whole map is affine in `x` for a
//! fixed time bin.
//!
//! Weights are stored `(out, in)` so a batch `A` of row vectors is pushed
//! through a layer as `A · Wᵀ + b`.

mod adam;
mod checkpoint;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LEARNING_RATE};
pub use checkpoint::{read_params, write_params, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::read_u32;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Width of the time embedding used by score networks.
pub const TIME_EMBEDDING_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity: the network collapses to an affine map.
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Option<Activation> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Parameters of one network. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproximatorParams {
    /// `(out, in)` matrices, first to last.
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
    /// `(n_time_bins, embed_dim)`; `(0, 0)` for networks without time input.
    pub time_embedding: Array2<f64>,
    pub activation: Activation,
}

/// Intermediate values kept by [`ApproximatorParams::forward_cached`] for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the first one includes the embedding columns).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Array2<f64>>,
    bins: Vec<usize>,
}

/// Builds a network with `layer_sizes = [input, hidden.., output]` and the
/// default 16-wide time embedding (no embedding when `n_time_bins == 0`).
pub fn init_params(
    layer_sizes: &[usize],
    n_time_bins: usize,
    activation: Activation,
    seed: u64,
) -> Result<ApproximatorParams> {
    let embed_dim = if n_time_bins == 0 { 0 } else { TIME_EMBEDDING_DIM };
    init_params_with_embedding(layer_sizes, n_time_bins, embed_dim, activation, seed)
}

/// Weights are uniform in `[-1/√fan_in, 1/√fan_in]`, biases zero. Embedding
/// rows start as sinusoids of the normalized bin position so neighbouring
/// times begin with similar codes; they are trained like any other weight.
pub fn init_params_with_embedding(
    layer_sizes: &[usize],
    n_time_bins: usize,
    embed_dim: usize,
    activation: Activation,
    seed: u64,
) -> Result<ApproximatorParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {layer_sizes:?}")));
    }
    if (n_time_bins == 0) != (embed_dim == 0) {
        return Err(Error::Config(format!(
            "time bins ({n_time_bins}) and embedding width ({embed_dim}) must both be zero or both positive"
        )));
    }

    let mut rng = rng::seeded(seed);
    let mut layer_weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut layer_biases = Vec::with_capacity(layer_sizes.len() - 1);
    for (i, pair) in layer_sizes.windows(2).enumerate() {
        let fan_in = if i == 0 { pair[0] + embed_dim } else { pair[0] };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((pair[1], fan_in), |_| rng.random_range(-bound..=bound));
        layer_weights.push(w);
        layer_biases.push(Array1::zeros(pair[1]));
    }

    let time_embedding = Array2::from_shape_fn((n_time_bins, embed_dim), |(bin, j)| {
        let u = if n_time_bins > 1 { bin as f64 / (n_time_bins - 1) as f64 } else { 0.0 };
        let freq = std::f64::consts::PI * 2f64.powf((j / 2) as f64 / 2.0);
        if j % 2 == 0 {
            (freq * u).sin()
        } else {
            (freq * u).cos()
        }
    });

    Ok(ApproximatorParams { layer_weights, layer_biases, time_embedding, activation })
}

impl ApproximatorParams {
    pub fn n_layers(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn n_time_bins(&self) -> usize {
        self.time_embedding.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.time_embedding.ncols()
    }

    /// Dimension of `x` (excluding the embedding columns).
    pub fn input_dim(&self) -> usize {
        self.layer_weights[0].ncols() - self.embed_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layer_weights[self.n_layers() - 1].nrows()
    }

    /// `[input, hidden.., output]`, the same list `init_params` takes.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layer_weights.iter().map(|w| w.nrows()));
        sizes
    }

    pub fn zeros_like(&self) -> ApproximatorParams {
        ApproximatorParams {
            layer_weights: self.layer_weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            layer_biases: self.layer_biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            time_embedding: Array2::zeros(self.time_embedding.raw_dim()),
            activation: self.activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every parameter block as a flat row-major slice, in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.n_layers() + 1);
        for (w, b) in self.layer_weights.iter().zip(&self.layer_biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.time_embedding.as_slice().expect("standard layout"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.n_layers() + 1);
        for (w, b) in self.layer_weights.iter_mut().zip(self.layer_biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.time_embedding.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Sum of squares over all parameters.
    pub fn sq_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }

    /// `self += alpha * other`, blockwise.
    pub fn axpy(&mut self, alpha: f64, other: &ApproximatorParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    fn same_shape(&self, other: &ApproximatorParams) -> bool {
        self.layer_weights.len() == other.layer_weights.len()
            && self.layer_weights.iter().zip(&other.layer_weights).all(|(a, b)| a.dim() == b.dim())
            && self.layer_biases.iter().zip(&other.layer_biases).all(|(a, b)| a.dim() == b.dim())
            && self.time_embedding.dim() == other.time_embedding.dim()
    }

    fn check_batch(&self, xs: &ArrayView2<f64>, bins: &[usize]) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                xs.ncols(),
                self.input_dim()
            )));
        }
        if self.n_time_bins() > 0 {
            if bins.len() != xs.nrows() {
                return Err(Error::Shape(format!(
                    "{} time bins for {} inputs",
                    bins.len(),
                    xs.nrows()
                )));
            }
            if let Some(&bad) = bins.iter().find(|&&b| b >= self.n_time_bins()) {
                return Err(Error::Shape(format!(
                    "time bin {bad} out of range 0..{}",
                    self.n_time_bins()
                )));
            }
        }
        Ok(())
    }

    fn first_layer_input(&self, xs: &ArrayView2<f64>, bins: &[usize]) -> Array2<f64> {
        let d = self.input_dim();
        let e = self.embed_dim();
        let mut input = Array2::zeros((xs.nrows(), d + e));
        input.slice_mut(s![.., ..d]).assign(xs);
        if e > 0 {
            for (mut row, &bin) in input.rows_mut().into_iter().zip(bins) {
                row.slice_mut(s![d..]).assign(&self.time_embedding.row(bin));
            }
        }
        input
    }

    fn activate(&self, z: &mut Array2<f64>) {
        if self.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Single-input evaluation.
    pub fn forward(&self, x: &[f64], t_bin: usize) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(xs, &[t_bin])?.into_raw_vec_and_offset().0)
    }

    /// Row-wise evaluation of a batch. `bins` may be empty for networks
    /// without time bins.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, bins: &[usize]) -> Result<Array2<f64>> {
        self.check_batch(&xs, bins)?;
        let mut a = self.first_layer_input(&xs, bins);
        let last = self.n_layers() - 1;
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            if l < last {
                self.activate(&mut z);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(
        &self,
        xs: ArrayView2<f64>,
        bins: &[usize],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(&xs, bins)?;
        let mut layer_inputs = Vec::with_capacity(self.n_layers());
        let mut hidden_pre = Vec::with_capacity(self.n_layers() - 1);
        let mut a = self.first_layer_input(&xs, bins);
        let last = self.n_layers() - 1;
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            layer_inputs.push(a);
            if l < last {
                hidden_pre.push(z.clone());
                self.activate(&mut z);
            }
            a = z;
        }
        let bins = if self.n_time_bins() > 0 { bins.to_vec() } else { Vec::new() };
        Ok((a, ForwardCache { layer_inputs, hidden_pre, bins }))
    }

    /// Reverse-mode gradient of `Σ_rows ⟨d_out_row, output_row⟩` with respect
    /// to every parameter, i.e. the chain rule applied to an upstream
    /// gradient `d_out` of the network output.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> ApproximatorParams {
        let mut grads = self.zeros_like();
        let mut dz = d_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let a_in = &cache.layer_inputs[l];
            grads.layer_weights[l] = dz.t().dot(a_in);
            grads.layer_biases[l] = dz.sum_axis(Axis(0));
            if l == 0 && self.embed_dim() == 0 {
                break;
            }
            let mut da = dz.dot(&self.layer_weights[l]);
            if l == 0 {
                let d = self.input_dim();
                for (row, &bin) in da.rows().into_iter().zip(&cache.bins) {
                    let mut g = grads.time_embedding.row_mut(bin);
                    g += &row.slice(s![d..]);
                }
                break;
            }
            if self.activation == Activation::Relu {
                ndarray::Zip::from(&mut da)
                    .and(&cache.hidden_pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            dz = da;
        }
        grads
    }

    /// Gradient of the network output with respect to the non-embedding
    /// inputs, given an upstream gradient.
    pub fn input_gradient(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Array2<f64> {
        let mut dz = d_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let mut da = dz.dot(&self.layer_weights[l]);
            if l == 0 {
                return da.slice_move(s![.., ..self.input_dim()]);
            }
            if self.activation == Activation::Relu {
                ndarray::Zip::from(&mut da)
                    .and(&cache.hidden_pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            dz = da;
        }
        unreachable!("network has at least one layer")
    }
}

/// Mean squared error `mean_i ‖f(x_i, t_i) − y_i‖²` and its exact gradient.
pub fn sq_loss_grad_batch(
    params: &ApproximatorParams,
    xs: ArrayView2<f64>,
    bins: &[usize],
    targets: ArrayView2<f64>,
) -> Result<(f64, ApproximatorParams)> {
    let n = xs.nrows();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if targets.dim() != (n, params.output_dim()) {
        return Err(Error::Shape(format!(
            "targets {:?}, expected ({n}, {})",
            targets.dim(),
            params.output_dim()
        )));
    }
    let (out, cache) = params.forward_cached(xs, bins)?;
    let resid = out - &targets;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let d_out = resid * (2.0 / n as f64);
    Ok((loss, params.backward(&cache, d_out.view())))
}

/// [`sq_loss_grad_batch`] over `(x, t_bin, target)` triples.
pub fn sq_loss_grad(
    params: &ApproximatorParams,
    batch: &[(Vec<f64>, usize, Vec<f64>)],
) -> Result<(f64, ApproximatorParams)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let d = params.input_dim();
    let k = params.output_dim();
    let mut xs = Array2::zeros((batch.len(), d));
    let mut ys = Array2::zeros((batch.len(), k));
    let mut bins = Vec::with_capacity(batch.len());
    for (i, (x, bin, y)) in batch.iter().enumerate() {
        if x.len() != d || y.len() != k {
            return Err(Error::Shape(format!(
                "sample {i}: x has {} entries (want {d}), target has {} (want {k})",
                x.len(),
                y.len()
            )));
        }
        xs.row_mut(i).assign(&ndarray::aview1(x));
        ys.row_mut(i).assign(&ndarray::aview1(y));
        bins.push(*bin);
    }
    sq_loss_grad_batch(params, xs.view(), &bins, ys.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_net(sizes: &[usize], bins: usize) -> ApproximatorParams {
        let mut p = init_params(sizes, bins, Activation::Relu, 0).unwrap();
        for s in p.slices_mut() {
            s.fill(0.0);
        }
        p
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&[2, 256, 2], 10, Activation::Relu, 0).unwrap();
        let b = init_params(&[2, 256, 2], 10, Activation::Relu, 0).unwrap();
        assert_eq!(a, b);
        let c = init_params(&[2, 256, 2], 10, Activation::Relu, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let p = init_params(&[3, 256, 3], 5000, Activation::Relu, 0).unwrap();
        assert_eq!(p.time_embedding.dim(), (5000, 16));
        assert_eq!(p.layer_weights[0].dim(), (256, 3 + 16));
        assert_eq!(p.layer_sizes(), vec![3, 256, 3]);
        assert!(p.layer_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let bound = 1.0 / 19f64.sqrt();
        assert!(p.layer_weights[0].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(init_params(&[], 0, Activation::Relu, 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[3], 0, Activation::Relu, 0), Err(Error::Config(_))));
        assert!(matches!(init_params(&[3, 0, 2], 0, Activation::Relu, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = zero_net(&[2, 8, 2], 4);
        assert_eq!(p.forward(&[3.0, -1.0], 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_net_reproduces_affine_map() {
        // One layer, weights on x set to -I, embedding columns zero.
        let mut p = init_params(&[2, 2], 3, Activation::Identity, 0).unwrap();
        p.layer_weights[0].fill(0.0);
        p.layer_weights[0][[0, 0]] = -1.0;
        p.layer_weights[0][[1, 1]] = -1.0;
        for bin in 0..3 {
            assert_eq!(p.forward(&[1.0, -2.0], bin).unwrap(), vec![-1.0, 2.0]);
        }
    }

    #[test]
    fn identity_activation_is_affine_composition() {
        let p = init_params(&[2, 5, 2], 0, Activation::Identity, 3).unwrap();
        let x = array![0.3, -0.7];
        let composed = p.layer_weights[1].dot(&(p.layer_weights[0].dot(&x) + &p.layer_biases[0]))
            + &p.layer_biases[1];
        let got = p.forward(x.as_slice().unwrap(), 0).unwrap();
        for (g, c) in got.iter().zip(composed.iter()) {
            assert!((g - c).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_pure() {
        let p = init_params(&[2, 16, 2], 8, Activation::Relu, 5).unwrap();
        let a = p.forward(&[0.1, 0.2], 3).unwrap();
        let b = p.forward(&[0.1, 0.2], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_shape_errors() {
        let p = init_params(&[2, 4, 2], 8, Activation::Relu, 0).unwrap();
        assert!(matches!(p.forward(&[1.0], 0), Err(Error::Shape(_))));
        assert!(matches!(p.forward(&[1.0, 2.0], 8), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_net_unit_target_loss_is_one() {
        let p = zero_net(&[1, 4, 2], 0);
        let (loss, _) = sq_loss_grad(&p, &[(vec![5.0], 0, vec![1.0, 0.0])]).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn exact_fit_has_zero_output_gradient() {
        let p = init_params(&[2, 8, 2], 4, Activation::Relu, 1).unwrap();
        let x = vec![0.4, -0.2];
        let y = p.forward(&x, 1).unwrap();
        let (loss, g) = sq_loss_grad(&p, &[(x, 1, y)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layer_weights[1].iter().all(|&v| v == 0.0));
        assert!(g.layer_biases[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = init_params(&[2, 4, 2], 0, Activation::Relu, 0).unwrap();
        assert!(matches!(sq_loss_grad(&p, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let p = init_params(&[3, 12, 2], 4, Activation::Relu, 9).unwrap();
        let x = array![[0.2, -0.5, 0.9]];
        let w = array![[0.7, -1.3]];
        let (_, cache) = p.forward_cached(x.view(), &[2]).unwrap();
        let g = p.input_gradient(&cache, w.view());
        let f = |x: &Array2<f64>| (p.forward_batch(x.view(), &[2]).unwrap() * &w).sum();
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, j]] += 1e-6;
            xm[[0, j]] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - g[[0, j]]).abs() < 1e-6, "{fd} vs {}", g[[0, j]]);
        }
    }
}
