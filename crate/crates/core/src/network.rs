//! Deterministic MLPs over a flat parameter vector.
//!
//! Layout: for each layer in order, the weight matrix (fan_out × fan_in, row-major) followed
//! by the bias. The final layer therefore occupies a contiguous trailing block, which is the
//! `β` block of the default [`Partition`].
//!
//! Jacobians are computed by reverse accumulation, one backward pass per output and input
//! row. The ReLU derivative at exactly zero is taken to be zero.

use std::ops::{Deref, Range};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, FsviError, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::Identity => a,
        }
    }

    /// First derivative given the pre-activation `a` and output `h = φ(a)`.
    #[inline]
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn second_derivative(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * h * (1.0 - h * h),
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

/// Architecture of an MLP with an identity output layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl LayerLayout {
    fn end(&self) -> usize {
        self.bias + self.fan_out
    }
}

impl MlpSpec {
    /// `layer_sizes` runs from the input dimension to the output dimension; `activations`
    /// has one entry per hidden layer.
    ///
    /// A spec with no hidden layer is an affine map, used for linear-model checks.
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(FsviError::InvalidParameter(
                "an MLP needs at least an input and an output size".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(FsviError::InvalidParameter("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(dim_mismatch(
                "one activation per hidden layer",
                layer_sizes.len() - 2,
                activations.len(),
            ));
        }
        Ok(Self { layer_sizes, activations })
    }

    /// Same activation for every hidden layer.
    pub fn with_activation(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self::new(layer_sizes, vec![activation; hidden])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Width of the representation feeding the final layer.
    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    /// Total parameter count `Σ (fan_in + 1)·fan_out`.
    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layouts(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let l =
                    LayerLayout { fan_in: w[0], fan_out: w[1], weights: offset, bias: offset + w[0] * w[1] };
                offset = l.end();
                l
            })
            .collect()
    }

    /// Index range of the final layer's parameters.
    pub fn final_layer_range(&self) -> Range<usize> {
        let p = self.num_params();
        let l = self.layouts()[self.num_layers() - 1];
        l.weights..p
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(dim_mismatch("parameter vector length", self.num_params(), params.len()));
        }
        Ok(())
    }

    fn check_inputs(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(dim_mismatch("input columns", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    fn weights<'a>(&self, params: &'a [f64], l: &LayerLayout) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &params[l.weights..l.bias]).unwrap()
    }

    fn bias<'a>(&self, params: &'a [f64], l: &LayerLayout) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[l.bias..l.end()])
    }

    fn run(&self, params: &[f64], x: ArrayView2<f64>) -> ForwardCache {
        let layouts = self.layouts();
        let mut pre = Vec::with_capacity(layouts.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(layouts.len());
        for (li, l) in layouts.iter().enumerate() {
            let input = if li == 0 { x.view() } else { post[li - 1].view() };
            let mut a = input.dot(&self.weights(params, l).t());
            a += &self.bias(params, l);
            let h = if li + 1 < layouts.len() {
                let act = self.activations[li];
                a.mapv(|v| act.apply(v))
            } else {
                a.clone()
            };
            pre.push(a);
            post.push(h);
        }
        ForwardCache { pre, post }
    }

    /// `f(X; θ)` as an N×Q matrix.
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        let mut cache = self.run(params, x);
        Ok(cache.post.pop().unwrap())
    }

    /// Activations feeding the final layer (the inputs themselves when there is no hidden
    /// layer), N×H.
    pub fn features(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        let n_layers = self.num_layers();
        if n_layers == 1 {
            return Ok(x.to_owned());
        }
        let mut cache = self.run(params, x);
        Ok(cache.post.swap_remove(n_layers - 2))
    }

    /// Outputs together with the final-layer features.
    pub fn forward_with_features(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        let n_layers = self.num_layers();
        let mut cache = self.run(params, x);
        let out = cache.post.pop().unwrap();
        let feats = if n_layers == 1 { x.to_owned() } else { cache.post.pop().unwrap() };
        Ok((out, feats))
    }

    /// Backward pass from a cotangent on the pre-activations of layer `top` down to the
    /// input, accumulating parameter gradients summed over rows.
    fn backward_from(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        cache: &ForwardCache,
        top: usize,
        mut delta: Array2<f64>,
        grad: &mut [f64],
    ) {
        let layouts = self.layouts();
        for li in (0..=top).rev() {
            let l = &layouts[li];
            let input = if li == 0 { x.view() } else { cache.post[li - 1].view() };
            let gw = delta.t().dot(&input);
            let gb = delta.sum_axis(Axis(0));
            for (dst, src) in grad[l.weights..l.bias].iter_mut().zip(gw.iter()) {
                *dst += *src;
            }
            for (dst, src) in grad[l.bias..l.end()].iter_mut().zip(gb.iter()) {
                *dst += *src;
            }
            if li == 0 {
                break;
            }
            let mut next = delta.dot(&self.weights(params, l));
            let act = self.activations[li - 1];
            ndarray::Zip::from(&mut next)
                .and(&cache.pre[li - 1])
                .and(&cache.post[li - 1])
                .for_each(|d, &a, &h| *d *= act.derivative(a, h));
            delta = next;
        }
    }

    /// `Σ_i J(x_i; θ)ᵀ c_i`: the gradient of `Σ_i c_i · f(x_i; θ)` with respect to `θ`.
    pub fn vjp(&self, params: &[f64], x: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        if cotangent.dim() != (x.nrows(), self.output_dim()) {
            return Err(FsviError::DimensionMismatch(format!(
                "cotangent is {:?}, expected ({}, {})",
                cotangent.dim(),
                x.nrows(),
                self.output_dim()
            )));
        }
        let cache = self.run(params, x);
        let mut grad = vec![0.0; self.num_params()];
        self.backward_from(params, x, &cache, self.num_layers() - 1, cotangent.to_owned(), &mut grad);
        Ok(grad)
    }

    /// Gradient of `Σ_{i,j} C_ij · h_j(x_i; θ)` where `h` are the final-layer features.
    /// Final-layer entries of the result are zero.
    pub fn features_vjp(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        cotangent: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        let mut grad = vec![0.0; self.num_params()];
        let n_layers = self.num_layers();
        if n_layers == 1 {
            return Ok(grad);
        }
        if cotangent.dim() != (x.nrows(), self.feature_dim()) {
            return Err(FsviError::DimensionMismatch(format!(
                "feature cotangent is {:?}, expected ({}, {})",
                cotangent.dim(),
                x.nrows(),
                self.feature_dim()
            )));
        }
        let cache = self.run(params, x);
        let top = n_layers - 2;
        let act = self.activations[top];
        let mut delta = cotangent.to_owned();
        ndarray::Zip::from(&mut delta)
            .and(&cache.pre[top])
            .and(&cache.post[top])
            .for_each(|d, &a, &h| *d *= act.derivative(a, h));
        self.backward_from(params, x, &cache, top, delta, &mut grad);
        Ok(grad)
    }

    /// Directional derivative `J(X; θ)·v` as an N×Q matrix, by forward-mode propagation.
    pub fn jvp(&self, params: &[f64], x: ArrayView2<f64>, direction: &[f64]) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        self.check_params(direction)?;
        let (_, tangent) = self.run_tangent(params, x, direction);
        Ok(tangent.into_iter().last().unwrap().1)
    }

    /// Primal cache plus per-layer `(ȧ, ḣ)` tangents.
    fn run_tangent(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        direction: &[f64],
    ) -> (ForwardCache, Vec<Tangent>) {
        let cache = self.run(params, x);
        let layouts = self.layouts();
        let mut tangents: Vec<Tangent> = Vec::with_capacity(layouts.len());
        for (li, l) in layouts.iter().enumerate() {
            let input = if li == 0 { x.view() } else { cache.post[li - 1].view() };
            let mut da = input.dot(&self.weights(direction, l).t());
            da += &self.bias(direction, l);
            if li > 0 {
                da += &tangents[li - 1].1.dot(&self.weights(params, l).t());
            }
            let dh = if li + 1 < layouts.len() {
                let act = self.activations[li];
                let mut dh = da.clone();
                ndarray::Zip::from(&mut dh)
                    .and(&cache.pre[li])
                    .and(&cache.post[li])
                    .for_each(|d, &a, &h| *d *= act.derivative(a, h));
                dh
            } else {
                da.clone()
            };
            tangents.push((da, dh));
        }
        (cache, tangents)
    }

    /// Gradients of `s(θ, v) = Σ_i c_i · (J(x_i; θ) v)`.
    ///
    /// Returns `(∂s/∂θ, ∂s/∂v)`; the second is `Σ_i J(x_i; θ)ᵀ c_i`. The first involves
    /// second derivatives of the network and is what exact gradients through a Jacobian–
    /// vector product need.
    pub fn jvp_vjp(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        direction: &[f64],
        cotangent: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        self.check_params(direction)?;
        if cotangent.dim() != (x.nrows(), self.output_dim()) {
            return Err(dim_mismatch("cotangent rows", x.nrows(), cotangent.nrows()));
        }
        let (cache, tangents) = self.run_tangent(params, x, direction);
        let layouts = self.layouts();
        let p = self.num_params();
        let mut g_params = vec![0.0; p];
        let mut g_dir = vec![0.0; p];
        // adjoints of the primal and tangent pre-activations
        let mut adj_a = Array2::<f64>::zeros(cotangent.raw_dim());
        let mut adj_da = cotangent.to_owned();
        for li in (0..layouts.len()).rev() {
            let l = &layouts[li];
            let input = if li == 0 { x.view() } else { cache.post[li - 1].view() };
            let gw = adj_a.t().dot(&input);
            let mut gw_total = gw;
            if li > 0 {
                gw_total += &adj_da.t().dot(&tangents[li - 1].1);
            }
            let gdw = adj_da.t().dot(&input);
            let gb = adj_a.sum_axis(Axis(0));
            let gdb = adj_da.sum_axis(Axis(0));
            accumulate(&mut g_params[l.weights..l.bias], gw_total.iter());
            accumulate(&mut g_params[l.bias..l.end()], gb.iter());
            accumulate(&mut g_dir[l.weights..l.bias], gdw.iter());
            accumulate(&mut g_dir[l.bias..l.end()], gdb.iter());
            if li == 0 {
                break;
            }
            let w = self.weights(params, l);
            let dw = self.weights(direction, l);
            let adj_h = adj_a.dot(&w) + adj_da.dot(&dw);
            let adj_dh = adj_da.dot(&w);
            let act = self.activations[li - 1];
            let pre = &cache.pre[li - 1];
            let post = &cache.post[li - 1];
            let da = &tangents[li - 1].0;
            let mut new_adj_a = Array2::<f64>::zeros(adj_h.raw_dim());
            let mut new_adj_da = Array2::<f64>::zeros(adj_h.raw_dim());
            for ((i, j), v) in new_adj_a.indexed_iter_mut() {
                let d1 = act.derivative(pre[[i, j]], post[[i, j]]);
                let d2 = act.second_derivative(post[[i, j]]);
                *v = d1 * adj_h[[i, j]] + d2 * da[[i, j]] * adj_dh[[i, j]];
                new_adj_da[[i, j]] = d1 * adj_dh[[i, j]];
            }
            adj_a = new_adj_a;
            adj_da = new_adj_da;
        }
        Ok((g_params, g_dir))
    }

    /// Full parameter Jacobian, (N·Q)×P with row `i·Q + q` holding `∂f_q(x_i)/∂θ`.
    pub fn param_jacobian(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(x)?;
        let q = self.output_dim();
        let p = self.num_params();
        let rows = par::map_indexed(x.nrows(), |i| self.jacobian_rows(params, x.row(i)));
        let mut jac = Array2::<f64>::zeros((x.nrows() * q, p));
        for (i, block) in rows.into_iter().enumerate() {
            jac.slice_mut(s![i * q..(i + 1) * q, ..]).assign(&block);
        }
        Ok(jac)
    }

    /// Q×P Jacobian for a single input, one reverse pass per output.
    fn jacobian_rows(&self, params: &[f64], x: ArrayView1<f64>) -> Array2<f64> {
        let layouts = self.layouts();
        let n_layers = layouts.len();
        // single-example forward
        let mut pre: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
        let mut post: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
        for (li, l) in layouts.iter().enumerate() {
            let input = if li == 0 { x.view() } else { post[li - 1].view() };
            let a = self.weights(params, l).dot(&input) + self.bias(params, l);
            let h = if li + 1 < n_layers {
                let act = self.activations[li];
                a.mapv(|v| act.apply(v))
            } else {
                a.clone()
            };
            pre.push(a);
            post.push(h);
        }
        let q_dim = self.output_dim();
        let mut out = Array2::<f64>::zeros((q_dim, self.num_params()));
        for q in 0..q_dim {
            let mut row = out.row_mut(q);
            let mut delta = Array1::<f64>::zeros(q_dim);
            delta[q] = 1.0;
            for li in (0..n_layers).rev() {
                let l = &layouts[li];
                let input = if li == 0 { x.view() } else { post[li - 1].view() };
                for o in 0..l.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let base = l.weights + o * l.fan_in;
                    for k in 0..l.fan_in {
                        row[base + k] = d * input[k];
                    }
                    row[l.bias + o] = d;
                }
                if li == 0 {
                    break;
                }
                let act = self.activations[li - 1];
                let mut next = self.weights(params, l).t().dot(&delta);
                for k in 0..next.len() {
                    next[k] *= act.derivative(pre[li - 1][k], post[li - 1][k]);
                }
                delta = next;
            }
        }
        out
    }

    /// Closed-form Jacobian with respect to the final layer, (N·Q)×|β|.
    ///
    /// For output `q` at input `x_i` the derivative with respect to the final weight `W_qj`
    /// is the feature `h_j(x_i)`, with respect to the bias `b_q` it is one; entries for other
    /// outputs are zero.
    pub fn final_layer_jacobian(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let feats = self.features(params, x)?;
        let q_dim = self.output_dim();
        let h_dim = self.feature_dim();
        let beta = (h_dim + 1) * q_dim;
        let n = x.nrows();
        let mut jac = Array2::<f64>::zeros((n * q_dim, beta));
        for i in 0..n {
            for q in 0..q_dim {
                let r = i * q_dim + q;
                for j in 0..h_dim {
                    jac[[r, q * h_dim + j]] = feats[[i, j]];
                }
                jac[[r, q_dim * h_dim + q]] = 1.0;
            }
        }
        Ok(jac)
    }
}

fn accumulate<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Per-layer `(ȧ, ḣ)` pair.
type Tangent = (Array2<f64>, Array2<f64>);

struct ForwardCache {
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

/// Per-layer weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A realization of the network parameters in the flat layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        spec.check_params(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.num_params()])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_layers(&self, spec: &MlpSpec) -> Result<Vec<LayerParams>> {
        spec.check_params(&self.0)?;
        Ok(spec
            .layouts()
            .iter()
            .map(|l| LayerParams {
                weights: spec.weights(&self.0, l).to_owned(),
                bias: spec.bias(&self.0, l).to_owned(),
            })
            .collect())
    }

    pub fn from_layers(spec: &MlpSpec, layers: &[LayerParams]) -> Result<Self> {
        let layouts = spec.layouts();
        if layers.len() != layouts.len() {
            return Err(dim_mismatch("layer count", layouts.len(), layers.len()));
        }
        let mut values = Vec::with_capacity(spec.num_params());
        for (l, lp) in layouts.iter().zip(layers) {
            if lp.weights.dim() != (l.fan_out, l.fan_in) || lp.bias.len() != l.fan_out {
                return Err(FsviError::DimensionMismatch(format!(
                    "layer expects {}x{} weights and {} biases",
                    l.fan_out, l.fan_in, l.fan_out
                )));
            }
            values.extend(lp.weights.iter());
            values.extend(lp.bias.iter());
        }
        Ok(Self(values))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Split of the parameter indices into a sampled block `α` and a closed-form block `β`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    alpha: Range<usize>,
    beta: Range<usize>,
}

impl Partition {
    /// `α` = every layer but the last, `β` = the final layer.
    pub fn final_layer(spec: &MlpSpec) -> Self {
        let beta = spec.final_layer_range();
        Self { alpha: 0..beta.start, beta }
    }

    pub fn alpha(&self) -> Range<usize> {
        self.alpha.clone()
    }

    pub fn beta(&self) -> Range<usize> {
        self.beta.clone()
    }

    /// Checks that the partition covers `spec` exactly.
    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        if *self != Self::final_layer(spec) {
            return Err(FsviError::InvalidParameter(
                "partition must split off exactly the final layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights from `U(−1/√fan_in, 1/√fan_in)`, zero biases.
    UniformFanIn,
    Zeros,
}

pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R, scheme: InitScheme) -> ParamVector {
    let mut values = vec![0.0; spec.num_params()];
    if scheme == InitScheme::UniformFanIn {
        for l in spec.layouts() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut values[l.weights..l.bias] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    ParamVector(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tanh_net() -> MlpSpec {
        MlpSpec::with_activation(vec![2, 3, 2], Activation::Tanh).unwrap()
    }

    #[test]
    fn param_count_and_final_block() {
        let spec = tanh_net();
        assert_eq!(spec.num_params(), 3 * 3 + 4 * 2);
        assert_eq!(spec.final_layer_range(), 9..17);
        let part = Partition::final_layer(&spec);
        assert_eq!(part.alpha(), 0..9);
        assert_eq!(part.beta().len(), (3 + 1) * 2);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![2], vec![]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], vec![Activation::Tanh]).is_err());
        assert!(MlpSpec::new(vec![2, 3, 1], vec![]).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let spec = tanh_net();
        let x = array![[0.3, -1.0], [2.0, 5.0]];
        let y = spec.forward(&ParamVector::zeros(&spec), x.view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_evaluated_one_unit_tanh() {
        let spec = MlpSpec::with_activation(vec![1, 1, 1], Activation::Tanh).unwrap();
        // w1, b1, w2, b2
        let params = [1.0, 0.0, 1.0, 0.0];
        let y = spec.forward(&params, array![[0.5]].view()).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], 0.5_f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(y[[0, 0]], 0.46212, epsilon = 1e-5);
    }

    #[test]
    fn forward_rejects_wrong_columns() {
        let spec = tanh_net();
        let err = spec.forward(&ParamVector::zeros(&spec), array![[1.0, 2.0, 3.0]].view()).unwrap_err();
        assert!(matches!(err, FsviError::DimensionMismatch(_)));
        assert!(spec.forward(&[0.0; 3], array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn linear_jacobian_is_the_input() {
        let spec = MlpSpec::new(vec![3, 2], vec![]).unwrap();
        let params: Vec<f64> = (0..spec.num_params()).map(|i| i as f64 * 0.1).collect();
        let x = array![[1.0, -2.0, 0.5]];
        let j = spec.param_jacobian(&params, x.view()).unwrap();
        // W is 2x3 row-major, then 2 biases
        for q in 0..2 {
            for qq in 0..2 {
                for d in 0..3 {
                    let expect = if q == qq { x[[0, d]] } else { 0.0 };
                    assert_eq!(j[[q, qq * 3 + d]], expect);
                }
                assert_eq!(j[[q, 6 + qq]], if q == qq { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn final_layer_jacobian_equals_beta_columns() {
        let spec = MlpSpec::with_activation(vec![2, 3, 2], Activation::Tanh).unwrap();
        let mut rng = crate::seeded_rng(4);
        let params = init_params(&spec, &mut rng, InitScheme::UniformFanIn);
        let x = array![[0.2, -0.7], [1.5, 0.1], [-0.3, 0.9]];
        let full = spec.param_jacobian(&params, x.view()).unwrap();
        let beta = spec.final_layer_jacobian(&params, x.view()).unwrap();
        let range = spec.final_layer_range();
        assert_abs_diff_eq!(full.slice(s![.., range]), beta.view(), epsilon = 1e-12);
    }

    #[test]
    fn final_layer_jacobian_block_structure_two_outputs() {
        let spec = tanh_net();
        let params: Vec<f64> = (0..spec.num_params()).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = array![[0.4, -0.2]];
        let h = spec.features(&params, x.view()).unwrap();
        let j = spec.final_layer_jacobian(&params, x.view()).unwrap();
        assert_eq!(j.dim(), (2, 8));
        let expected = array![
            [h[[0, 0]], h[[0, 1]], h[[0, 2]], 0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, h[[0, 0]], h[[0, 1]], h[[0, 2]], 0.0, 1.0],
        ];
        assert_eq!(j, expected);
    }

    #[test]
    fn zero_features_leave_only_bias_columns() {
        let spec = tanh_net();
        let params = ParamVector::zeros(&spec);
        let j = spec.final_layer_jacobian(&params, array![[1.0, 1.0], [2.0, -3.0]].view()).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(j[[r, c]], 0.0);
            }
            assert_eq!(j[[r, 6 + r % 2]], 1.0);
        }
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let spec = MlpSpec::with_activation(vec![1, 1, 1], Activation::Relu).unwrap();
        // pre-activation w1*x + b1 = 0 exactly
        let params = [1.0, -1.0, 2.0, 0.0];
        let j = spec.param_jacobian(&params, array![[1.0]].view()).unwrap();
        assert_eq!(j[[0, 0]], 0.0);
        assert_eq!(j[[0, 1]], 0.0);
        assert_eq!(j[[0, 2]], 0.0); // h = 0
        assert_eq!(j[[0, 3]], 1.0);
    }

    #[test]
    fn layer_round_trip() {
        let spec = MlpSpec::with_activation(vec![3, 4, 2, 2], Activation::Relu).unwrap();
        let values: Vec<f64> = (0..spec.num_params()).map(|i| i as f64).collect();
        let pv = ParamVector::new(&spec, values.clone()).unwrap();
        let layers = pv.to_layers(&spec).unwrap();
        assert_eq!(layers[0].weights.dim(), (4, 3));
        assert_eq!(layers[0].weights[[1, 0]], 3.0);
        assert_eq!(layers[0].bias[0], 12.0);
        assert_eq!(ParamVector::from_layers(&spec, &layers).unwrap(), pv);
    }

    #[test]
    fn init_schemes() {
        let spec = MlpSpec::with_activation(vec![1, 50, 1], Activation::Tanh).unwrap();
        let z = init_params(&spec, &mut crate::seeded_rng(0), InitScheme::Zeros);
        assert!(z.iter().all(|v| *v == 0.0));
        let a = init_params(&spec, &mut crate::seeded_rng(9), InitScheme::UniformFanIn);
        let b = init_params(&spec, &mut crate::seeded_rng(9), InitScheme::UniformFanIn);
        assert_eq!(a, b);
        let layers = a.to_layers(&spec).unwrap();
        assert!(layers[0].weights.iter().all(|w| w.abs() <= 1.0));
        let bound = 1.0 / 50f64.sqrt();
        assert!(layers[1].weights.iter().all(|w| w.abs() <= bound));
        assert!(layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn jvp_matches_jacobian_product() {
        let spec = MlpSpec::with_activation(vec![2, 4, 3, 2], Activation::Tanh).unwrap();
        let p = spec.num_params();
        let params: Vec<f64> = (0..p).map(|i| (i as f64 * 0.71).cos() * 0.8).collect();
        let v: Vec<f64> = (0..p).map(|i| (i as f64 * 1.3).sin()).collect();
        let x = array![[0.3, -0.4], [1.2, 0.7]];
        let j = spec.param_jacobian(&params, x.view()).unwrap();
        let jv = j.dot(&Array1::from(v.clone()));
        let got = spec.jvp(&params, x.view(), &v).unwrap();
        for i in 0..2 {
            for q in 0..2 {
                assert_abs_diff_eq!(got[[i, q]], jv[i * 2 + q], epsilon = 1e-12);
            }
        }
        let c = array![[0.5, -1.0], [2.0, 0.25]];
        let vjp = spec.vjp(&params, x.view(), c.view()).unwrap();
        let cflat = Array1::from(c.iter().copied().collect::<Vec<_>>());
        let jt_c = j.t().dot(&cflat);
        for k in 0..p {
            assert_abs_diff_eq!(vjp[k], jt_c[k], epsilon = 1e-12);
        }
        let (_, g_dir) = spec.jvp_vjp(&params, x.view(), &v, c.view()).unwrap();
        for k in 0..p {
            assert_abs_diff_eq!(g_dir[k], jt_c[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn jvp_vjp_param_gradient_matches_finite_differences() {
        let spec = MlpSpec::with_activation(vec![2, 3, 3, 2], Activation::Tanh).unwrap();
        let p = spec.num_params();
        let params: Vec<f64> = (0..p).map(|i| (i as f64 * 0.53).sin()).collect();
        let v: Vec<f64> = (0..p).map(|i| (i as f64 * 0.91).cos() * 0.5).collect();
        let x = array![[0.3, -0.4], [1.2, 0.7], [-0.8, 0.1]];
        let c = array![[0.5, -1.0], [2.0, 0.25], [-0.3, 0.6]];
        let s = |theta: &[f64]| -> f64 {
            let jv = spec.jvp(theta, x.view(), &v).unwrap();
            (&jv * &c).sum()
        };
        let (g, _) = spec.jvp_vjp(&params, x.view(), &v, c.view()).unwrap();
        let h = 1e-6;
        for k in 0..p {
            let mut tp = params.clone();
            let mut tm = params.clone();
            tp[k] += h;
            tm[k] -= h;
            let fd = (s(&tp) - s(&tm)) / (2.0 * h);
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn features_vjp_matches_finite_differences() {
        let spec = MlpSpec::with_activation(vec![2, 3, 4, 1], Activation::Tanh).unwrap();
        let p = spec.num_params();
        let params: Vec<f64> = (0..p).map(|i| (i as f64 * 0.29).cos()).collect();
        let x = array![[0.1, 0.2], [-1.0, 0.4]];
        let c = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64 - j as f64) * 0.3 + 0.1);
        let g = spec.features_vjp(&params, x.view(), c.view()).unwrap();
        let s = |theta: &[f64]| (&spec.features(theta, x.view()).unwrap() * &c).sum();
        let h = 1e-6;
        for k in 0..p {
            let mut tp = params.clone();
            let mut tm = params.clone();
            tp[k] += h;
            tm[k] -= h;
            assert_abs_diff_eq!(g[k], (s(&tp) - s(&tm)) / (2.0 * h), epsilon = 1e-8);
        }
        assert!(g[spec.final_layer_range()].iter().all(|v| *v == 0.0));
    }
}
