//! Spectral density model: per-time-node coefficients in an orthonormal
//! tensor cosine basis on the box, with a closed-form projection update
//! instead of gradient descent.
//!
//! Per axis on `[a, b]` with length `L`: `e_0 = 1/sqrt(L)` and
//! `e_k(x) = sqrt(2/L) cos(k pi (x - a) / L)`; the d-dimensional basis is the
//! tensor product over axes. Projections integrate against a mollified
//! empirical measure with a tensor Gauss-Legendre rule; the rule must resolve
//! the highest mode (a Nyquist-style requirement checked at call time).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Capabilities, DensityModel};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quad::tensor_gauss;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierArch {
    pub modes_per_axis: usize,
    pub grid: TimeGrid,
}

pub struct FourierDensity {
    domain: Domain,
    grid: TimeGrid,
    modes_per_axis: usize,
    n_basis: usize,
    /// (nodes, n_basis): one coefficient row per time node.
    coeffs: Array2<f64>,
}

const MAX_BASIS: usize = 1 << 16;

impl FourierDensity {
    /// Starts at the uniform density on the box (only the constant mode set).
    pub fn new(domain: Domain, grid: TimeGrid, modes_per_axis: usize) -> Result<Self> {
        if modes_per_axis == 0 {
            return Err(Error::InvalidParameter("need at least one mode per axis".into()));
        }
        let n_basis = modes_per_axis
            .checked_pow(domain.dim() as u32)
            .filter(|&n| n <= MAX_BASIS)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "{modes_per_axis}^{} basis functions exceed the supported size",
                    domain.dim()
                ))
            })?;
        let mut coeffs = Array2::zeros((grid.n_nodes(), n_basis));
        // <uniform, e_0> = 1/sqrt(volume); all other modes vanish.
        let c0 = 1.0 / domain.volume().sqrt();
        coeffs.column_mut(0).fill(c0);
        Ok(FourierDensity {
            domain,
            grid,
            modes_per_axis,
            n_basis,
            coeffs,
        })
    }

    pub fn modes_per_axis(&self) -> usize {
        self.modes_per_axis
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &Array2<f64> {
        &self.coeffs
    }

    pub fn coeffs_at(&self, node: usize) -> ArrayView1<'_, f64> {
        self.coeffs.row(node)
    }

    pub fn set_coeffs_at(&mut self, node: usize, c: &ArrayView1<f64>) -> Result<()> {
        if c.len() != self.n_basis {
            return Err(Error::DimensionMismatch {
                expected: self.n_basis,
                got: c.len(),
            });
        }
        self.coeffs.row_mut(node).assign(c);
        Ok(())
    }

    /// Rows = points, columns = tensor basis functions (mode index varies
    /// fastest along axis 0).
    pub fn basis_matrix(&self, xs: &ArrayView2<f64>) -> Array2<f64> {
        let n = xs.nrows();
        let d = self.domain.dim();
        let k = self.modes_per_axis;
        // Per-axis tables: (n, k) each.
        let mut tables = Vec::with_capacity(d);
        for j in 0..d {
            let a = self.domain.lo()[j];
            let len = self.domain.hi()[j] - a;
            let mut t = Array2::zeros((n, k));
            for (i, x) in xs.column(j).iter().enumerate() {
                t[[i, 0]] = 1.0 / len.sqrt();
                for m in 1..k {
                    t[[i, m]] = (2.0 / len).sqrt()
                        * (m as f64 * std::f64::consts::PI * (x - a) / len).cos();
                }
            }
            tables.push(t);
        }
        let mut basis = Array2::ones((n, self.n_basis));
        for idx in 0..self.n_basis {
            let mut rem = idx;
            for table in &tables {
                let m = rem % k;
                rem /= k;
                for i in 0..n {
                    basis[[i, idx]] *= table[[i, m]];
                }
            }
        }
        basis
    }

    /// L2 projection of a scalar field onto the basis via tensor
    /// Gauss-Legendre quadrature. `quad_per_axis` must be at least twice the
    /// per-axis mode count, otherwise the rule cannot resolve the highest
    /// mode and the projection would alias.
    pub fn project(
        &self,
        f: &(dyn Fn(&ArrayView2<f64>) -> Array1<f64> + Sync),
        quad_per_axis: usize,
    ) -> Result<Array1<f64>> {
        if quad_per_axis < 2 * self.modes_per_axis {
            return Err(Error::InvalidParameter(format!(
                "projection quadrature with {quad_per_axis} nodes per axis cannot resolve \
                 {} modes per axis; need at least {}",
                self.modes_per_axis,
                2 * self.modes_per_axis
            )));
        }
        let quad = tensor_gauss(&self.domain, quad_per_axis)?;
        let vals = f(&quad.points.view());
        let basis = self.basis_matrix(&quad.points.view());
        let mut out = Array1::zeros(self.n_basis);
        for (i, (v, w)) in vals.iter().zip(&quad.weights).enumerate() {
            let vw = v * w;
            for b in 0..self.n_basis {
                out[b] += vw * basis[[i, b]];
            }
        }
        Ok(out)
    }
}

/// Closed-form mixing step at one node: `theta <- (1 - 2 rate) theta +
/// 2 rate projected`. Rates live in `(0, 1/2]`; the first step with rate 1/2
/// replaces the initial coefficients entirely.
pub fn fourier_update(
    model: &mut FourierDensity,
    node: usize,
    projected: &ArrayView1<f64>,
    rate: f64,
) -> Result<()> {
    if !(rate > 0.0 && rate <= 0.5) {
        return Err(Error::InvalidParameter(format!(
            "mixing rate must lie in (0, 1/2], got {rate}"
        )));
    }
    if node >= model.grid.n_nodes() {
        return Err(Error::InvalidParameter(format!(
            "node {node} out of range for {} nodes",
            model.grid.n_nodes()
        )));
    }
    if projected.len() != model.n_basis {
        return Err(Error::DimensionMismatch {
            expected: model.n_basis,
            got: projected.len(),
        });
    }
    let keep = 1.0 - 2.0 * rate;
    let mut row = model.coeffs.row_mut(node);
    for (c, p) in row.iter_mut().zip(projected.iter()) {
        *c = keep * *c + 2.0 * rate * p;
    }
    Ok(())
}

impl DensityModel for FourierDensity {
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
            spatial_gradient: false,
        }
    }

    fn kind_name(&self) -> &'static str {
        "fourier"
    }

    fn raw_eval_batch(&self, t: f64, xs: &ArrayView2<f64>) -> Array1<f64> {
        let node = self.grid.nearest_node(t);
        let basis = self.basis_matrix(xs);
        basis.dot(&self.coeffs.row(node))
    }

    fn accumulate_raw_grad(
        &self,
        t: f64,
        xs: &ArrayView2<f64>,
        ws: &ArrayView1<f64>,
        grad: &mut [f64],
    ) {
        // raw(t, x) = sum_b theta_{node, b} e_b(x): the gradient of the
        // weighted sum touches only that node's coefficient block.
        let node = self.grid.nearest_node(t);
        let basis = self.basis_matrix(xs);
        let block = &mut grad[node * self.n_basis..(node + 1) * self.n_basis];
        for (i, w) in ws.iter().enumerate() {
            for b in 0..self.n_basis {
                block[b] += w * basis[[i, b]];
            }
        }
    }

    fn fourier_view(&mut self) -> Option<&mut FourierDensity> {
        Some(self)
    }

    fn fourier_ref(&self) -> Option<&FourierDensity> {
        Some(self)
    }

    fn param_len(&self) -> usize {
        self.coeffs.len()
    }

    fn params_vec(&self) -> Vec<f64> {
        self.coeffs.iter().copied().collect()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.coeffs.len() {
            return Err(Error::InvalidParameter(format!(
                "parameter length {} does not match model size {}",
                p.len(),
                self.coeffs.len()
            )));
        }
        for (dst, src) in self.coeffs.iter_mut().zip(p) {
            *dst = *src;
        }
        Ok(())
    }

    fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(FourierArch {
            modes_per_axis: self.modes_per_axis,
            grid: self.grid.clone(),
        })
        .expect("arch serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{kde_eval, MollifierKind, MollifierSpec};
    use ndarray::array;

    fn grid1() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 4).unwrap()
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        let dom = Domain::new(vec![-2.0], vec![2.0]).unwrap();
        let model = FourierDensity::new(dom.clone(), grid1(), 6).unwrap();
        let quad = tensor_gauss(&dom, 64).unwrap();
        let basis = model.basis_matrix(&quad.points.view());
        for a in 0..6 {
            for b in 0..6 {
                let ip: f64 = (0..quad.weights.len())
                    .map(|i| quad.weights[i] * basis[[i, a]] * basis[[i, b]])
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (ip - expect).abs() < 1e-12,
                    "<e_{a}, e_{b}> = {ip}"
                );
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_in_two_dimensions() {
        let dom = Domain::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        let model = FourierDensity::new(dom.clone(), grid1(), 3).unwrap();
        let quad = tensor_gauss(&dom, 32).unwrap();
        let basis = model.basis_matrix(&quad.points.view());
        for a in 0..9 {
            for b in 0..9 {
                let ip: f64 = (0..quad.weights.len())
                    .map(|i| quad.weights[i] * basis[[i, a]] * basis[[i, b]])
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-12, "<e_{a}, e_{b}> = {ip}");
            }
        }
    }

    #[test]
    fn projection_matches_dense_quadrature_oracle() {
        // Project the Gaussian mollification of a single particle at 0.3 and
        // compare each coefficient against a 1e6-point midpoint rule.
        let dom = Domain::cube(1, 2.0).unwrap();
        let model = FourierDensity::new(dom.clone(), grid1(), 8).unwrap();
        let moll = MollifierSpec::new(MollifierKind::Gaussian, 0.1, 1).unwrap();
        let particles = array![[0.3]];
        let f = |xs: &ArrayView2<f64>| kde_eval(&particles.view(), moll, xs).unwrap();
        let coeffs = model.project(&f, 256).unwrap();

        let (pts, w) = dom.midpoint_grid(1_000_000);
        let vals = f(&pts.view());
        let basis = model.basis_matrix(&pts.view());
        for b in 0..8 {
            let oracle: f64 = (0..pts.nrows()).map(|i| w * vals[i] * basis[[i, b]]).sum();
            assert!(
                (coeffs[b] - oracle).abs() < 1e-8,
                "coefficient {b}: {} vs oracle {oracle}",
                coeffs[b]
            );
        }
    }

    #[test]
    fn projection_reproduces_band_limited_functions_exactly() {
        let dom = Domain::new(vec![-2.0], vec![2.0]).unwrap();
        let model = FourierDensity::new(dom.clone(), grid1(), 5).unwrap();
        // A function already in the span: 0.7 e_0 - 0.2 e_3.
        let f = |xs: &ArrayView2<f64>| -> Array1<f64> {
            let dummy = FourierDensity::new(dom.clone(), grid1(), 5).unwrap();
            let basis = dummy.basis_matrix(xs);
            (0..xs.nrows())
                .map(|i| 0.7 * basis[[i, 0]] - 0.2 * basis[[i, 3]])
                .collect()
        };
        let coeffs = model.project(&f, 32).unwrap();
        let expect = [0.7, 0.0, 0.0, -0.2, 0.0];
        for (b, e) in expect.iter().enumerate() {
            assert!((coeffs[b] - e).abs() < 1e-13, "coeff {b}: {}", coeffs[b]);
        }
    }

    #[test]
    fn projection_rejects_underresolved_quadrature() {
        let dom = Domain::cube(1, 2.0).unwrap();
        let model = FourierDensity::new(dom, grid1(), 16).unwrap();
        let f = |xs: &ArrayView2<f64>| Array1::zeros(xs.nrows());
        assert!(matches!(
            model.project(&f, 31),
            Err(Error::InvalidParameter(_))
        ));
        assert!(model.project(&f, 32).is_ok());
    }

    #[test]
    fn update_mixes_linearly_and_validates_rate() {
        let dom = Domain::cube(1, 2.0).unwrap();
        let mut model = FourierDensity::new(dom, grid1(), 3).unwrap();
        let start = model.coeffs_at(2).to_owned();
        let target = array![1.0, -2.0, 0.5];
        fourier_update(&mut model, 2, &target.view(), 0.25).unwrap();
        let got = model.coeffs_at(2);
        for b in 0..3 {
            let expect = 0.5 * start[b] + 0.5 * target[b];
            assert!((got[b] - expect).abs() < 1e-15);
        }
        // Other nodes untouched.
        assert_eq!(model.coeffs_at(0)[0], start[0]);

        assert!(fourier_update(&mut model, 0, &target.view(), 0.0).is_err());
        assert!(fourier_update(&mut model, 0, &target.view(), 0.51).is_err());
        assert!(fourier_update(&mut model, 9, &target.view(), 0.25).is_err());
        assert!(fourier_update(&mut model, 0, &array![1.0].view(), 0.25).is_err());
    }

    #[test]
    fn half_rate_first_step_erases_initialization() {
        let dom = Domain::cube(1, 2.0).unwrap();
        let mut model = FourierDensity::new(dom, grid1(), 3).unwrap();
        let target = array![3.0, 1.0, -1.0];
        fourier_update(&mut model, 1, &target.view(), 0.5).unwrap();
        assert_eq!(model.coeffs_at(1).to_owned(), target);
    }

    #[test]
    fn harmonic_rate_sequence_yields_equal_mixture_weights() {
        // With rates 1/2, 1/4, ..., 1/(2n) the coefficients after n steps are
        // the plain average of the n projected inputs.
        let dom = Domain::cube(1, 2.0).unwrap();
        let mut model = FourierDensity::new(dom, grid1(), 2).unwrap();
        let inputs = [
            array![1.0, 0.0],
            array![0.0, 1.0],
            array![4.0, -2.0],
            array![-1.0, 3.0],
        ];
        for (l, input) in inputs.iter().enumerate() {
            let rate = 1.0 / (2.0 * (l as f64 + 1.0));
            fourier_update(&mut model, 0, &input.view(), rate).unwrap();
        }
        let mean0: f64 = inputs.iter().map(|v| v[0]).sum::<f64>() / 4.0;
        let mean1: f64 = inputs.iter().map(|v| v[1]).sum::<f64>() / 4.0;
        let got = model.coeffs_at(0);
        assert!((got[0] - mean0).abs() < 1e-14);
        assert!((got[1] - mean1).abs() < 1e-14);
    }

    #[test]
    fn eval_snaps_to_nearest_node_and_grad_targets_its_block() {
        let dom = Domain::cube(1, 2.0).unwrap();
        let mut model = FourierDensity::new(dom, grid1(), 2).unwrap();
        let c1 = array![2.0, 0.0];
        model.set_coeffs_at(1, &c1.view()).unwrap();
        let xs = array![[0.0]];
        // elapsed 0.26 rounds to node 1 (dt = 0.25)
        let v = model.raw_eval_batch(0.26, &xs.view());
        assert!((v[0] - 2.0 / 4.0f64.sqrt()).abs() < 1e-14);

        let mut grad = vec![0.0; model.param_len()];
        let ws = array![1.0];
        model.accumulate_raw_grad(0.26, &xs.view(), &ws.view(), &mut grad);
        // Only node 1's block is touched.
        assert!(grad[..2].iter().all(|&g| g == 0.0));
        assert!(grad[2] != 0.0);
        assert!(grad[4..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_initialization_integrates_to_one() {
        let dom = Domain::new(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
        let model = FourierDensity::new(dom.clone(), grid1(), 4).unwrap();
        let quad = tensor_gauss(&dom, 16).unwrap();
        let vals = model.raw_eval_batch(0.0, &quad.points.view());
        let mass: f64 = vals.iter().zip(&quad.weights).map(|(v, w)| v * w).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
