//! Fully-connected density model: the network maps `(t, x)` to one raw
//! scalar. ReLU nets train the squared-distance objective; softplus nets are
//! used where the dynamics needs spatial density gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Capabilities, DensityModel};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet};
use crate::noise::{stream_rng, tag};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

pub struct MlpDensity {
    net: DenseNet,
    domain: Domain,
    arch: MlpArch,
}

impl MlpDensity {
    /// Hidden widths + activation; input is `(t, x)`, output one scalar.
    pub fn new(domain: Domain, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(
                "hidden layer widths must be nonempty and positive".into(),
            ));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(domain.dim() + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = stream_rng(seed, &[tag::INIT]);
        let net = DenseNet::new(sizes, activation, &mut rng);
        Ok(MlpDensity {
            net,
            domain,
            arch: MlpArch {
                hidden: hidden.to_vec(),
                activation,
            },
        })
    }

    /// Reference-scale architecture: six hidden layers of width 512.
    pub fn reference_scale(domain: Domain, activation: Activation, seed: u64) -> Result<Self> {
        Self::new(domain, &[512; 6], activation, seed)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    fn assemble_input(&self, t: f64, xs: &ArrayView2<f64>) -> Array2<f64> {
        let n = xs.nrows();
        let d = xs.ncols();
        let mut input = Array2::zeros((n, d + 1));
        input.column_mut(0).fill(t);
        input.slice_mut(s![.., 1..]).assign(xs);
        input
    }
}

impl DensityModel for MlpDensity {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn caps(&self) -> Capabilities {
        Capabilities {
            exact_density: false,
            direct_sampling: false,
            spatial_gradient: matches!(self.arch.activation, Activation::Softplus { .. }),
        }
    }

    fn kind_name(&self) -> &'static str {
        "mlp"
    }

    fn raw_eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        let input = self.assemble_input(t, xs);
        self.net.forward(&input.view()).index_axis_move(Axis(1), 0)
    }

    fn accumulate_raw_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    ) {
        let input = self.assemble_input(t, xs);
        let (_, tape) = self.net.forward_tape(&input.view());
        let upstream = ws.to_owned().insert_axis(Axis(1));
        self.net.backward(&tape, &upstream.view(), Some(grad), false);
    }

    fn raw_spatial_grad_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if !self.caps().spatial_gradient {
            return Err(Error::Capability(
                "spatial density gradients need a smooth activation; this net uses relu".into(),
            ));
        }
        let input = self.assemble_input(t, xs);
        let full = self.net.spatial_grad(&input.view());
        // Drop the time column: callers want d(raw)/dx only.
        Ok(full.slice(s![.., 1..]).to_owned())
    }

    fn param_len(&self) -> usize {
        self.net.param_len()
    }

    fn params_vec(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.net.param_len() {
            return Err(Error::InvalidParameter(format!(
                "parameter length {} does not match model size {}",
                p.len(),
                self.net.param_len()
            )));
        }
        self.net.params_mut().copy_from_slice(p);
        Ok(())
    }

    fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.arch).expect("arch serializes")
    }
}
