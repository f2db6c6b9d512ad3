//! Minimal dense-network engine with hand-written reverse mode.
//!
//! One struct serves both the direct density network and the coupling-flow
//! conditioners. Parameters live in a single flat `Vec<f64>` so optimizers and
//! checkpoints treat every model uniformly; gradients are accumulated into a
//! caller-provided flat buffer of the same length.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// softplus(z) = ln(1 + exp(beta z)) / beta; smooth, so the network has
    /// spatial gradients (needed by deterministic-drift dynamics).
    Softplus { beta: f64 },
}

impl Activation {
    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus { beta } => {
                // max(z,0) + ln(1 + exp(-|beta z|)) / beta, stable at both ends
                z.max(0.0) + (-(beta * z).abs()).exp().ln_1p() / beta
            }
        }
    }

    #[inline]
    fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus { beta } => 1.0 / (1.0 + (-beta * z).exp()),
        }
    }
}

/// Fully connected stack: linear layers with `act` between them and a linear
/// output. `sizes = [in, h1, ..., out]`.
#[derive(Clone, Debug)]
pub struct DenseNet {
    sizes: Vec<usize>,
    act: Activation,
    params: Vec<f64>,
    /// (weight offset, bias offset) per layer into `params`.
    offsets: Vec<(usize, usize)>,
}

fn layer_offsets(sizes: &[usize]) -> (Vec<(usize, usize)>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for l in 1..sizes.len() {
        let w = sizes[l - 1] * sizes[l];
        offsets.push((at, at + w));
        at += w + sizes[l];
    }
    (offsets, at)
}

impl DenseNet {
    /// Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
    /// biases.
    pub fn new(sizes: Vec<usize>, act: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0));
        let (offsets, len) = layer_offsets(&sizes);
        let mut params = vec![0.0; len];
        for l in 1..sizes.len() {
            let bound = 1.0 / (sizes[l - 1] as f64).sqrt();
            let (w0, b0) = offsets[l - 1];
            for p in params[w0..b0 + sizes[l]].iter_mut() {
                let u: f64 = rng.random();
                *p = bound * (2.0 * u - 1.0);
            }
        }
        DenseNet {
            sizes,
            act,
            params,
            offsets,
        }
    }

    /// Zero the last linear layer (weights and bias); coupling blocks start
    /// as the identity map this way.
    pub fn zero_output_layer(&mut self) {
        let l = self.offsets.len() - 1;
        let (w0, b0) = self.offsets[l];
        let out = self.sizes[l + 1];
        for p in self.params[w0..b0 + out].iter_mut() {
            *p = 0.0;
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w0, b0) = self.offsets[l];
        ArrayView2::from_shape((self.sizes[l], self.sizes[l + 1]), &self.params[w0..b0]).unwrap()
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b0) = self.offsets[l];
        &self.params[b0..b0 + self.sizes[l + 1]]
    }

    /// Batched forward pass; rows of `x` are inputs.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward_impl(x, None)
    }

    /// Forward pass that also records pre-activations and activations for a
    /// later backward pass.
    pub fn forward_tape(&self, x: &ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let out = self.forward_impl(x, Some(&mut tape));
        (out, tape)
    }

    fn forward_impl(&self, x: &ArrayView2<f64>, mut tape: Option<&mut Tape>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        let layers = self.offsets.len();
        let mut a = x.to_owned();
        for l in 0..layers {
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(a.clone());
            }
            let mut z = a.dot(&self.weight(l));
            let b = self.bias(l);
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if l + 1 < layers {
                if let Some(t) = tape.as_deref_mut() {
                    t.pre.push(z.clone());
                }
                z.mapv_inplace(|v| self.act.apply(v));
            }
            a = z;
        }
        a
    }

    /// Reverse pass for the scalar objective sum_rows <upstream_row, out_row>.
    /// Parameter gradients are *added* into `grad`; returns the gradient with
    /// respect to the input rows when `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &ArrayView2<f64>,
        grad: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let layers = self.offsets.len();
        assert_eq!(tape.inputs.len(), layers);
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            assert_eq!(g.len(), self.params.len());
        }
        let mut g = upstream.to_owned();
        for l in (0..layers).rev() {
            if let Some(buf) = grad.as_deref_mut() {
                let (w0, b0) = self.offsets[l];
                // dW = A_{l-1}^T . G, db = column sums of G
                let dw = tape.inputs[l].t().dot(&g);
                for (dst, src) in buf[w0..b0].iter_mut().zip(dw.iter()) {
                    *dst += src;
                }
                let db = g.sum_axis(Axis(0));
                for (dst, src) in buf[b0..b0 + self.sizes[l + 1]].iter_mut().zip(db.iter()) {
                    *dst += src;
                }
            }
            if l > 0 {
                let mut gx = g.dot(&self.weight(l).t());
                let z = &tape.pre[l - 1];
                for (gv, zv) in gx.iter_mut().zip(z.iter()) {
                    *gv *= self.act.derivative(*zv);
                }
                g = gx;
            } else if want_input_grad {
                return Some(g.dot(&self.weight(0).t()));
            }
        }
        None
    }

    /// d out_k / d x for every row, scalar-output networks only. Cheaper than
    /// a full backward: no parameter gradients are formed.
    pub fn spatial_grad(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.output_dim(), 1, "spatial gradient needs scalar output");
        let (_, tape) = self.forward_tape(x);
        let ones = Array2::ones((x.nrows(), 1));
        self.backward(&tape, &ones.view(), None, true).unwrap()
    }
}

pub struct Tape {
    /// A_0 (= input) .. A_{L-1}: inputs of each linear layer.
    inputs: Vec<Array2<f64>>,
    /// Z_1 .. Z_{L-1}: pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}
