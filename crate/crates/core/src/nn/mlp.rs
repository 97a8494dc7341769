//! Fully connected networks over row-major batches.
//!
//! Weights of layer `l` are stored `in × out` so a batch `X` (n × in) maps to
//! `X·W + b`. All heavy lifting goes through `ndarray`'s matrix product.
//! Backpropagation is hand-derived per layer; [`super::gradcheck`] holds the
//! finite-difference oracle that keeps it honest.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const SOFTPLUS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Elementwise map applied after the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputTransform {
    None,
    /// `max · tanh(x)`
    TanhScaled { max: f64 },
    Sigmoid,
    /// `(softplus(x − 1e-8) + 1e-8)^alpha`, strictly positive.
    SoftplusPower { alpha: f64 },
}

impl OutputTransform {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            OutputTransform::None => x,
            OutputTransform::TanhScaled { max } => max * x.tanh(),
            OutputTransform::Sigmoid => sigmoid(x),
            OutputTransform::SoftplusPower { alpha } => {
                (softplus(x - SOFTPLUS_EPS) + SOFTPLUS_EPS).powf(alpha)
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            OutputTransform::None => 1.0,
            OutputTransform::TanhScaled { max } => {
                let t = x.tanh();
                max * (1.0 - t * t)
            }
            OutputTransform::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            OutputTransform::SoftplusPower { alpha } => {
                let base = softplus(x - SOFTPLUS_EPS) + SOFTPLUS_EPS;
                alpha * base.powf(alpha - 1.0) * sigmoid(x - SOFTPLUS_EPS)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Architecture of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_transform: OutputTransform,
    /// When set, the last layer's weights are drawn from `Uniform(-x, x)` and
    /// its bias is zero, instead of the default fan-in scaling.
    #[serde(default)]
    pub last_layer_init: Option<f64>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::LeakyRelu,
            output_transform: OutputTransform::None,
            last_layer_init: None,
        }
    }

    pub fn with_output(mut self, transform: OutputTransform) -> Self {
        self.output_transform = transform;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_last_layer_init(mut self, bound: f64) -> Self {
        self.last_layer_init = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::invalid("mlp spec", "all layer widths must be positive"));
        }
        if let OutputTransform::SoftplusPower { alpha } = self.output_transform {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::invalid("mlp spec", format!("softplus power alpha {alpha} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// `(in, out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, &(i, o))| [(format!("l{l}.weight"), vec![i, o]), (format!("l{l}.bias"), vec![o])])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Freshly initialized parameters.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = ParamVector::zeros(&self.layout());
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut offset = 0;
        let data = params.as_mut_slice();
        for (l, &(i, o)) in dims.iter().enumerate() {
            let (w_bound, b_bound) = match (l == last, self.last_layer_init) {
                (true, Some(bound)) => (bound, 0.0),
                _ => {
                    let b = 1.0 / (i as f64).sqrt();
                    (b, b)
                }
            };
            for w in &mut data[offset..offset + i * o] {
                *w = rng.gen_range(-w_bound..=w_bound);
            }
            offset += i * o;
            for b in &mut data[offset..offset + o] {
                *b = if b_bound > 0.0 { rng.gen_range(-b_bound..=b_bound) } else { 0.0 };
            }
            offset += o;
        }
        params
    }

    fn check_params(&self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter length does not match the network spec");
    }

    /// Layer views `(W, b)` into a flat parameter slice.
    fn layers<'a>(&self, params: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let w = ArrayView2::from_shape((i, o), &params[offset..offset + i * o]).expect("layer shape");
                offset += i * o;
                let b = ArrayView1::from(&params[offset..offset + o]);
                offset += o;
                (w, b)
            })
            .collect()
    }

    /// Batched forward pass without retaining intermediates.
    pub fn forward(&self, params: &[f64], input: ArrayView2<f64>) -> Array2<f64> {
        self.check_params(params);
        assert_eq!(input.ncols(), self.input_dim, "input width does not match the network spec");
        let layers = self.layers(params);
        let last = layers.len() - 1;
        let mut h = input.to_owned();
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = Array2::zeros((h.nrows(), w.ncols()));
            general_mat_mul(1.0, &h, w, 0.0, &mut z);
            z += b;
            if l == last {
                let t = self.output_transform;
                z.mapv_inplace(|x| t.apply(x));
            } else {
                let act = self.activation;
                z.mapv_inplace(|x| act.apply(x));
            }
            h = z;
        }
        h
    }

    /// Forward pass that keeps what backpropagation needs.
    pub fn forward_cached(&self, params: &[f64], input: ArrayView2<f64>) -> ForwardCache {
        self.check_params(params);
        assert_eq!(input.ncols(), self.input_dim, "input width does not match the network spec");
        let layers = self.layers(params);
        let last = layers.len() - 1;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut h = input.to_owned();
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = Array2::zeros((h.nrows(), w.ncols()));
            general_mat_mul(1.0, &h, w, 0.0, &mut z);
            z += b;
            let next = if l == last {
                let t = self.output_transform;
                z.mapv(|x| t.apply(x))
            } else {
                let act = self.activation;
                z.mapv(|x| act.apply(x))
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        ForwardCache { inputs, pre, output: h }
    }

    /// Backpropagates `d_output` (gradient w.r.t. the transformed output).
    ///
    /// Parameter gradients are *added* into `grads` when given; the gradient
    /// with respect to the network input is returned.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_output: ArrayView2<f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        self.check_params(params);
        let layers = self.layers(params);
        let last = layers.len() - 1;
        let t = self.output_transform;
        let mut dz = &d_output * &cache.pre[last].mapv(|x| t.derivative(x));

        // Offsets of each layer inside the flat vector.
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for (w, b) in &layers {
            offsets.push(off);
            off += w.len() + b.len();
        }

        for l in (0..layers.len()).rev() {
            let (w, b) = &layers[l];
            if let Some(g) = grads.as_deref_mut() {
                let (i, o) = (w.nrows(), w.ncols());
                let start = offsets[l];
                let mut gw = ArrayViewMut2Helper::view(&mut g[start..start + i * o], i, o);
                general_mat_mul(1.0, &cache.inputs[l].t(), &dz, 1.0, &mut gw);
                let db: Array1<f64> = dz.sum_axis(Axis(0));
                for (gb, d) in g[start + i * o..start + i * o + b.len()].iter_mut().zip(db.iter()) {
                    *gb += d;
                }
            }
            let mut dx = Array2::zeros((dz.nrows(), w.nrows()));
            general_mat_mul(1.0, &dz, &w.t(), 0.0, &mut dx);
            if l == 0 {
                return dx;
            }
            let act = self.activation;
            dx.zip_mut_with(&cache.pre[l - 1], |d, &z| *d *= act.derivative(z));
            dz = dx;
        }
        unreachable!("network has at least one layer")
    }
}

struct ArrayViewMut2Helper;

impl ArrayViewMut2Helper {
    fn view(slice: &mut [f64], rows: usize, cols: usize) -> ndarray::ArrayViewMut2<'_, f64> {
        ndarray::ArrayViewMut2::from_shape((rows, cols), slice).expect("gradient block shape")
    }
}

/// Intermediates of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Final-layer pre-activations (before the output transform).
    pub fn pre_output(&self) -> &Array2<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

/// A network spec bundled with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec.init(rng);
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        self.spec.forward(self.params.as_slice(), input)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> ForwardCache {
        self.spec.forward_cached(self.params.as_slice(), input)
    }

    pub fn backward(&self, cache: &ForwardCache, d_output: ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        self.spec.backward(self.params.as_slice(), cache, d_output, grads)
    }

    /// Single-column output as a vector.
    pub fn forward_scalar(&self, input: ArrayView2<f64>) -> Array1<f64> {
        let out = self.forward(input);
        assert_eq!(out.ncols(), 1, "network output is not scalar");
        out.column(0).to_owned()
    }
}

/// Single-sample forward pass with dimension checking.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "network input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    if params.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            what: "parameter count",
            expected: spec.num_params(),
            got: params.len(),
        });
    }
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    Ok(spec.forward(params.as_slice(), x).row(0).to_vec())
}
