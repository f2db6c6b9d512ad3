//! Time-conditioned affine coupling flow: an exact density with direct
//! sampling.
//!
//! Each block splits coordinates into a pass-through half and a transformed
//! half; a conditioner network maps `(t, pass coords)` to per-coordinate
//! log-scales and shifts for the transformed half. Sampling pushes standard
//! normal draws forward through the blocks; log-densities run the closed-form
//! inverse and accumulate the exact log-determinant. Conditioner output
//! layers start at zero, so a fresh flow is exactly the standard normal.
//!
//! In one dimension every block degenerates to a time-dependent affine map of
//! the single coordinate (the pass-through half is empty and the conditioner
//! sees only `t`).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Capabilities, DensityModel};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Tape};
use crate::noise::{stream_rng, tag};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowArch {
    pub blocks: usize,
    pub cond_hidden: Vec<usize>,
}

struct Block {
    net: DenseNet,
    /// Conditioning coordinates, unchanged by the block.
    pass: Vec<usize>,
    /// Transformed coordinates.
    trans: Vec<usize>,
}

pub struct CouplingFlowDensity {
    domain: Domain,
    blocks: Vec<Block>,
    arch: FlowArch,
    param_offsets: Vec<usize>,
    param_len: usize,
}

const LOG_2PI: f64 = 1.8378770664093453;

fn split_coords(dim: usize, block_index: usize) -> (Vec<usize>, Vec<usize>) {
    if dim == 1 {
        return (Vec::new(), vec![0]);
    }
    let mut pass = Vec::new();
    let mut trans = Vec::new();
    for j in 0..dim {
        if (j + block_index) % 2 == 0 {
            pass.push(j);
        } else {
            trans.push(j);
        }
    }
    (pass, trans)
}

impl CouplingFlowDensity {
    pub fn new(
        domain: Domain,
        n_blocks: usize,
        cond_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidParameter("flow needs at least one block".into()));
        }
        if cond_hidden.is_empty() || cond_hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(
                "conditioner hidden widths must be nonempty and positive".into(),
            ));
        }
        let dim = domain.dim();
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut param_offsets = Vec::with_capacity(n_blocks);
        let mut at = 0usize;
        for b in 0..n_blocks {
            let (pass, trans) = split_coords(dim, b);
            let mut sizes = Vec::with_capacity(cond_hidden.len() + 2);
            sizes.push(1 + pass.len());
            sizes.extend_from_slice(cond_hidden);
            sizes.push(2 * trans.len());
            let mut rng = stream_rng(seed, &[tag::INIT, b as u64]);
            let mut net = DenseNet::new(sizes, Activation::Softplus { beta: 1.0 }, &mut rng);
            net.zero_output_layer();
            param_offsets.push(at);
            at += net.param_len();
            blocks.push(Block { net, pass, trans });
        }
        Ok(CouplingFlowDensity {
            domain,
            blocks,
            arch: FlowArch {
                blocks: n_blocks,
                cond_hidden: cond_hidden.to_vec(),
            },
            param_offsets,
            param_len: at,
        })
    }

    /// Six blocks with 64x64 conditioners.
    pub fn reference_scale(domain: Domain, seed: u64) -> Result<Self> {
        Self::new(domain, 6, &[64, 64], seed)
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    fn cond_input(&self, t: f64, y: &Array2<f64>, pass: &[usize]) -> Array2<f64> {
        let n = y.nrows();
        let mut input = Array2::zeros((n, 1 + pass.len()));
        input.column_mut(0).fill(t);
        for (c, &j) in pass.iter().enumerate() {
            input.column_mut(c + 1).assign(&y.column(j));
        }
        input
    }

    /// Forward (sampling) direction: base point -> data point.
    fn forward_map(&self, t: f64, z: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = z.to_owned();
        for block in &self.blocks {
            let input = self.cond_input(t, &y, &block.pass);
            let out = block.net.forward(&input.view());
            let nb = block.trans.len();
            for (c, &j) in block.trans.iter().enumerate() {
                for i in 0..y.nrows() {
                    let s = out[[i, c]];
                    let u = out[[i, nb + c]];
                    y[[i, j]] = y[[i, j]] * s.exp() + u;
                }
            }
        }
        y
    }

    /// Inverse direction with optional trace retention; returns the base
    /// points and per-row log-density.
    fn inverse(&self, t: f64, xs: &ArrayView2<f64>, trace: Option<&mut Vec<BlockTrace>>) -> (Array2<f64>, Array1<f64>) {
        let n = xs.nrows();
        let d = xs.ncols();
        let mut y = xs.to_owned();
        let mut logdet = Array1::zeros(n);
        let mut trace = trace;
        for block in self.blocks.iter().rev() {
            let input = self.cond_input(t, &y, &block.pass);
            let (out, tape) = block.net.forward_tape(&input.view());
            let nb = block.trans.len();
            for (c, &j) in block.trans.iter().enumerate() {
                for i in 0..n {
                    let s = out[[i, c]];
                    let u = out[[i, nb + c]];
                    y[[i, j]] = (y[[i, j]] - u) * (-s).exp();
                    logdet[i] -= s;
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(BlockTrace {
                    tape,
                    s: out.slice(s![.., ..nb]).to_owned(),
                    y_out_trans: {
                        let mut m = Array2::zeros((n, nb));
                        for (c, &j) in block.trans.iter().enumerate() {
                            m.column_mut(c).assign(&y.column(j));
                        }
                        m
                    },
                });
            }
        }
        let mut logp = logdet;
        for i in 0..n {
            let z = y.row(i);
            let sq: f64 = z.iter().map(|v| v * v).sum();
            logp[i] += -0.5 * sq - 0.5 * d as f64 * LOG_2PI;
        }
        (y, logp)
    }

    pub fn log_density_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        self.inverse(t, xs, None).1
    }

    /// Adds d/dtheta of sum_j w_j log p(t, x_j) into `grad`.
    pub fn accumulate_log_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.param_len);
        let n = xs.nrows();
        let d = xs.ncols();
        let mut traces = Vec::with_capacity(self.blocks.len());
        let (z, _) = self.inverse(t, xs, Some(&mut traces));
        // traces[k] corresponds to blocks[L-1-k]; walk them back in sampling
        // order (block 0 first), which is the reverse of the inverse pass.
        let mut g = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                g[[i, j]] = -ws[i] * z[[i, j]];
            }
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            let tr = &traces[self.blocks.len() - 1 - bi];
            let nb = block.trans.len();
            let mut upstream = Array2::zeros((n, 2 * nb));
            let mut g_trans_new = Array2::zeros((n, nb));
            for (c, &j) in block.trans.iter().enumerate() {
                for i in 0..n {
                    let e = (-tr.s[[i, c]]).exp();
                    let gt = g[[i, j]];
                    // y_out = (y_in - u) * exp(-s):
                    //   d/ds = -y_out, d/du = -exp(-s), d/dy_in = exp(-s);
                    // the log-determinant adds -w per log-scale entry.
                    upstream[[i, c]] = -gt * tr.y_out_trans[[i, c]] - ws[i];
                    upstream[[i, nb + c]] = -gt * e;
                    g_trans_new[[i, c]] = gt * e;
                }
            }
            let off = self.param_offsets[bi];
            let len = block.net.param_len();
            let gx = block
                .net
                .backward(
                    &tr.tape,
                    &upstream.view(),
                    Some(&mut grad[off..off + len]),
                    true,
                )
                .unwrap();
            // Route gradients back onto the block's input coordinates: the
            // transformed half via the affine map, the pass-through half via
            // both identity and the conditioner (t column dropped).
            for (c, &j) in block.trans.iter().enumerate() {
                for i in 0..n {
                    g[[i, j]] = g_trans_new[[i, c]];
                }
            }
            for (c, &j) in block.pass.iter().enumerate() {
                for i in 0..n {
                    g[[i, j]] += gx[[i, c + 1]];
                }
            }
        }
    }
}

struct BlockTrace {
    tape: Tape,
    s: Array2<f64>,
    y_out_trans: Array2<f64>,
}

impl DensityModel for CouplingFlowDensity {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn caps(&self) -> Capabilities {
        Capabilities {
            exact_density: true,
            direct_sampling: true,
            spatial_gradient: false,
        }
    }

    fn kind_name(&self) -> &'static str {
        "coupling_flow"
    }

    fn raw_eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        self.log_density_batch(t, xs).mapv(f64::exp)
    }

    fn exact_log_density_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Option<Array1<f64>> {
        Some(self.log_density_batch(t, xs))
    }

    fn accumulate_raw_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    ) {
        // d p / dtheta = p * d log p / dtheta
        let p = self.raw_eval_batch(t, xs);
        let scaled = &ws.to_owned() * &p;
        self.accumulate_log_grad(t, xs, &scaled.view(), grad);
    }

    fn accumulate_exact_log_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        self.accumulate_log_grad(t, xs, ws, grad);
        Ok(())
    }

    fn direct_sample(&self, t: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let d = self.domain.dim();
        let mut z = Array2::zeros((n, d));
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        Ok(self.forward_map(t, &z.view()))
    }

    fn param_len(&self) -> usize {
        self.param_len
    }

    fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len);
        for b in &self.blocks {
            out.extend_from_slice(b.net.params());
        }
        out
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_len {
            return Err(Error::InvalidParameter(format!(
                "parameter length {} does not match model size {}",
                p.len(),
                self.param_len
            )));
        }
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let off = self.param_offsets[bi];
            let len = b.net.param_len();
            b.net.params_mut().copy_from_slice(&p[off..off + len]);
        }
        Ok(())
    }

    fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.arch).expect("arch serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{central_diff, max_scaled_err};
    use crate::quad::tensor_gauss;
    use ndarray::array;
    use rand::Rng;

    fn perturbed(dim: usize, seed: u64) -> CouplingFlowDensity {
        let mut flow =
            CouplingFlowDensity::new(Domain::cube(dim, 3.0).unwrap(), 4, &[8, 8], seed).unwrap();
        let mut rng = stream_rng(seed, &[41]);
        let p: Vec<f64> = flow
            .params_vec()
            .iter()
            .map(|v| v + 0.1 * (rng.random::<f64>() - 0.5))
            .collect();
        flow.set_params(&p).unwrap();
        flow
    }

    #[test]
    fn fresh_flow_is_standard_normal() {
        let flow = CouplingFlowDensity::new(Domain::cube(2, 3.0).unwrap(), 6, &[8], 3).unwrap();
        let xs = array![[0.0, 0.0], [1.0, -0.5]];
        let lp = flow.log_density_batch(0.7, &xs.view());
        for (i, row) in xs.rows().into_iter().enumerate() {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            let expect = -0.5 * sq - LOG_2PI;
            assert!((lp[i] - expect).abs() < 1e-14);
        }
        // The forward map is the identity at init.
        let y = flow.forward_map(0.7, &xs.view());
        assert_eq!(y, xs);
    }

    #[test]
    fn inverse_round_trips_forward() {
        for dim in [1, 2, 3] {
            let flow = perturbed(dim, 11);
            let mut rng = stream_rng(1, &[dim as u64]);
            let z = Array2::from_shape_fn((20, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let x = flow.forward_map(0.4, &z.view());
            let (z_back, _) = flow.inverse(0.4, &x.view(), None);
            for (a, b) in z.iter().zip(z_back.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} (dim {dim})");
            }
        }
    }

    #[test]
    fn density_integrates_to_one_in_two_dimensions() {
        let flow = perturbed(2, 5);
        let dom = Domain::cube(2, 10.0).unwrap();
        let quad = tensor_gauss(&dom, 160).unwrap();
        for t in [0.0, 0.5] {
            let p = flow.raw_eval_batch(t, &quad.points.view());
            let mass: f64 = p.iter().zip(&quad.weights).map(|(v, w)| v * w).sum();
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass} at t={t}");
        }
    }

    #[test]
    fn log_grad_matches_finite_differences() {
        for dim in [1, 3] {
            let mut flow = perturbed(dim, 17);
            let mut rng = stream_rng(2, &[dim as u64]);
            let xs = Array2::from_shape_fn((5, dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let ws = Array1::from_shape_fn(5, |_| rng.random::<f64>() * 2.0 - 1.0);
            let mut analytic = vec![0.0; flow.param_len()];
            flow.accumulate_log_grad(0.3, &xs.view(), &ws.view(), &mut analytic);
            let mut params = flow.params_vec();
            let fd = central_diff(&mut params, 1e-6, |p| {
                flow.set_params(p).unwrap();
                let lp = flow.log_density_batch(0.3, &xs.view());
                lp.iter().zip(ws.iter()).map(|(a, b)| a * b).sum()
            });
            flow.set_params(&params).unwrap();
            let err = max_scaled_err(&analytic, &fd);
            assert!(err < 1e-5, "dim {dim}: fd mismatch {err}");
        }
    }

    #[test]
    fn raw_grad_matches_finite_differences() {
        let mut flow = perturbed(2, 23);
        let mut rng = stream_rng(3, &[9]);
        let xs = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let ws = Array1::from_shape_fn(4, |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut analytic = vec![0.0; flow.param_len()];
        flow.accumulate_raw_grad(0.6, &xs.view(), &ws.view(), &mut analytic);
        let mut params = flow.params_vec();
        let fd = central_diff(&mut params, 1e-6, |p| {
            flow.set_params(p).unwrap();
            let v = flow.raw_eval_batch(0.6, &xs.view());
            v.iter().zip(ws.iter()).map(|(a, b)| a * b).sum()
        });
        flow.set_params(&params).unwrap();
        assert!(max_scaled_err(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn samples_match_base_after_inversion() {
        let flow = perturbed(2, 31);
        let mut rng = stream_rng(4, &[7]);
        let x = flow.direct_sample(0.2, 40_000, &mut rng).unwrap();
        let (z, _) = flow.inverse(0.2, &x.view(), None);
        // Pulled-back samples must be standard normal: check moments.
        for j in 0..2 {
            let col = z.column(j);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let skew = col.mapv(|v| (v - mean).powi(3)).mean().unwrap() / var.powf(1.5);
            let kurt = col.mapv(|v| (v - mean).powi(4)).mean().unwrap() / (var * var);
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
            assert!(skew.abs() < 0.05, "skew {skew}");
            assert!((kurt - 3.0).abs() < 0.15, "kurt {kurt}");
        }
    }

    #[test]
    fn time_conditioning_enters_the_density() {
        let flow = perturbed(2, 37);
        let xs = array![[0.3, -0.4]];
        let a = flow.log_density_batch(0.0, &xs.view())[0];
        let b = flow.log_density_batch(1.0, &xs.view())[0];
        assert!((a - b).abs() > 1e-9, "time input is inert: {a} == {b}");
    }

    #[test]
    fn one_dimensional_blocks_transform_the_single_coordinate() {
        let (pass, trans) = split_coords(1, 0);
        assert!(pass.is_empty());
        assert_eq!(trans, vec![0]);
        let (pass3, trans3) = split_coords(3, 1);
        assert_eq!(pass3, vec![1]);
        assert_eq!(trans3, vec![0, 2]);
    }
}
