//! Joint-embedding objectives: SimCLR's NT-Xent, Barlow Twins and VICReg.
//!
//! Each objective returns its value together with the exact gradient with
//! respect to both embedding matrices, derived by hand. [`record_on_tape`]
//! splices a loss into a [`ComputationTape`] as a fused scalar node, so the
//! encoder and projector receive gradients through the ordinary reverse
//! sweep.
//!
//! Conventions:
//!
//! * SimCLR uses cosine similarity `u_i·u_k / τ` with
//!   `u = z / max(‖z‖, ε_norm)`, averaged over all `2N` anchors.
//! * Barlow Twins standardises each dimension over the batch with the
//!   population variance (plus `ε_var`) and uses `C = Ẑ_aᵀ Ẑ_b / N`.
//! * VICReg uses the unbiased (`N−1`) variance and covariance.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tape::{ComputationTape, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SslMethod {
    SimClr,
    BarlowTwins,
    VicReg,
}

impl SslMethod {
    pub const ALL: [SslMethod; 3] = [SslMethod::SimClr, SslMethod::BarlowTwins, SslMethod::VicReg];

    pub fn name(self) -> &'static str {
        match self {
            SslMethod::SimClr => "simclr",
            SslMethod::BarlowTwins => "barlow_twins",
            SslMethod::VicReg => "vicreg",
        }
    }
}

impl fmt::Display for SslMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SslMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SslMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown SSL method `{s}`")))
    }
}

/// Hyperparameters of the three objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct SslLossConfig {
    pub method: SslMethod,
    /// NT-Xent temperature.
    pub temperature: f64,
    /// Barlow Twins off-diagonal weight.
    pub bt_lambda: f64,
    /// VICReg invariance weight.
    pub vic_lambda: f64,
    /// VICReg variance weight.
    pub vic_mu: f64,
    /// VICReg covariance weight.
    pub vic_nu: f64,
    /// VICReg target standard deviation.
    pub vic_gamma: f64,
    pub eps_var: f64,
    pub eps_norm: f64,
}

impl SslLossConfig {
    pub fn new(method: SslMethod) -> Self {
        Self {
            method,
            temperature: 0.1,
            bt_lambda: 0.005,
            vic_lambda: 25.0,
            vic_mu: 25.0,
            vic_nu: 1.0,
            vic_gamma: 1.0,
            eps_var: 1e-4,
            eps_norm: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let weights = [
            self.bt_lambda,
            self.vic_lambda,
            self.vic_mu,
            self.vic_nu,
            self.vic_gamma,
            self.eps_var,
            self.eps_norm,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("SSL loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, batch: &EmbeddingBatch) -> Result<LossGrad> {
        self.validate()?;
        match self.method {
            SslMethod::SimClr => simclr_loss(batch, self.temperature, self.eps_norm),
            SslMethod::BarlowTwins => barlow_twins_loss(batch, self.bt_lambda, self.eps_var),
            SslMethod::VicReg => vicreg_loss(batch, &VicRegParams::from(self)).map(|(lg, _)| lg),
        }
    }
}

/// Projector outputs for the two views of each positive pair.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    z_a: Tensor,
    z_b: Tensor,
}

impl EmbeddingBatch {
    pub fn new(z_a: Tensor, z_b: Tensor) -> Result<Self> {
        if z_a.ndim() != 2 || z_a.shape() != z_b.shape() {
            return Err(shape_err!(
                "embedding views must be equal 2-D shapes, got {:?} and {:?}",
                z_a.shape(),
                z_b.shape()
            ));
        }
        if z_a.shape()[0] < 2 {
            return Err(Error::InvalidArgument("SSL objectives need at least 2 pairs".into()));
        }
        Ok(Self { z_a, z_b })
    }

    /// Splits a `[2N, D]` matrix whose first `N` rows are view A.
    pub fn from_stacked(z: &Tensor) -> Result<Self> {
        let [rows, d] = *z.shape() else {
            return Err(shape_err!("stacked embeddings must be 2-D, got {:?}", z.shape()));
        };
        if rows % 2 != 0 {
            return Err(shape_err!("stacked embeddings need an even row count, got {rows}"));
        }
        let n = rows / 2;
        let (a, b) = z.data().split_at(n * d);
        Self::new(
            Tensor::from_parts(vec![n, d], a.to_vec()),
            Tensor::from_parts(vec![n, d], b.to_vec()),
        )
    }

    pub fn z_a(&self) -> &Tensor {
        &self.z_a
    }

    pub fn z_b(&self) -> &Tensor {
        &self.z_b
    }

    pub fn n(&self) -> usize {
        self.z_a.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z_a.shape()[1]
    }
}

/// A loss value with its gradient for each view.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

fn finish(value: f64, n: usize, d: usize, ga: Vec<f64>, gb: Vec<f64>, op: &str) -> Result<LossGrad> {
    if !value.is_finite() {
        return Err(Error::NonFinite(op.into()));
    }
    Ok(LossGrad {
        value,
        grad_a: Tensor::checked(vec![n, d], ga, op)?,
        grad_b: Tensor::checked(vec![n, d], gb, op)?,
    })
}

/// Normalised temperature-scaled cross entropy over `2N` anchors.
pub fn simclr_loss(batch: &EmbeddingBatch, temperature: f64, eps_norm: f64) -> Result<LossGrad> {
    let (n, d) = (batch.n(), batch.dim());
    let m = 2 * n;
    let z: Vec<f64> = batch.z_a.data().iter().chain(batch.z_b.data()).copied().collect();

    let norms: Vec<f64> = z.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut u = z.clone();
    for (row, &r) in u.chunks_exact_mut(d).zip(&norms) {
        let den = r.max(eps_norm);
        row.iter_mut().for_each(|v| *v /= den);
    }
    let ut = Tensor::from_parts(vec![m, d], u.clone());
    let sim = ops::matmul(&ut, &transpose(&ut))?;
    let s: Vec<f64> = sim.data().iter().map(|v| v / temperature).collect();

    let partner = |i: usize| (i + n) % m;
    let mut total = 0.0;
    // g[i][k] = dL/ds_ik
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        let row = &s[i * m..(i + 1) * m];
        let mx = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] - mx).exp()).sum();
        let lse = mx + denom.ln();
        total += lse - row[partner(i)];
        for k in (0..m).filter(|&k| k != i) {
            let target = if k == partner(i) { 1.0 } else { 0.0 };
            g[i * m + k] = ((row[k] - lse).exp() - target) / m as f64;
        }
    }
    let value = total / m as f64;

    // dL/du_i = (1/τ) Σ_k (g_ik + g_ki) u_k
    let mut sym = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            sym[i * m + k] = (g[i * m + k] + g[k * m + i]) / temperature;
        }
    }
    let du = ops::matmul(&Tensor::from_parts(vec![m, m], sym), &ut)?;
    let du = du.data();

    let mut dz = vec![0.0; m * d];
    for i in 0..m {
        let (ui, gi) = (&u[i * d..(i + 1) * d], &du[i * d..(i + 1) * d]);
        let out = &mut dz[i * d..(i + 1) * d];
        if norms[i] > eps_norm {
            let proj: f64 = ui.iter().zip(gi).map(|(a, b)| a * b).sum();
            for j in 0..d {
                out[j] = (gi[j] - ui[j] * proj) / norms[i];
            }
        } else {
            for j in 0..d {
                out[j] = gi[j] / eps_norm;
            }
        }
    }
    let gb = dz.split_off(n * d);
    finish(value, n, d, dz, gb, "simclr_loss")
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Redundancy-reduction loss on the cross-correlation of the standardised
/// views: `Σ_d (1−C_dd)² + λ Σ_{d≠e} C_de²`.
pub fn barlow_twins_loss(batch: &EmbeddingBatch, lambda: f64, eps_var: f64) -> Result<LossGrad> {
    let (n, d) = (batch.n(), batch.dim());
    let (za, inv_a) = ops::batch_norm(&batch.z_a, eps_var)?;
    let (zb, inv_b) = ops::batch_norm(&batch.z_b, eps_var)?;
    let c = ops::scale(&ops::matmul(&transpose(&za), &zb)?, 1.0 / n as f64)?;

    let mut value = 0.0;
    let mut g = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let cij = c.data()[i * d + j];
            if i == j {
                value += (1.0 - cij) * (1.0 - cij);
                g[i * d + j] = -2.0 * (1.0 - cij);
            } else {
                value += lambda * cij * cij;
                g[i * d + j] = 2.0 * lambda * cij;
            }
        }
    }
    let g = Tensor::from_parts(vec![d, d], g);
    let dza = ops::scale(&ops::matmul(&zb, &transpose(&g))?, 1.0 / n as f64)?;
    let dzb = ops::scale(&ops::matmul(&za, &g)?, 1.0 / n as f64)?;
    let ga = ops::batch_norm_backward(&za, &inv_a, &dza).into_data();
    let gb = ops::batch_norm_backward(&zb, &inv_b, &dzb).into_data();
    finish(value, n, d, ga, gb, "barlow_twins_loss")
}

/// VICReg weights and regularisation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicRegParams {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl From<&SslLossConfig> for VicRegParams {
    fn from(c: &SslLossConfig) -> Self {
        Self {
            lambda: c.vic_lambda,
            mu: c.vic_mu,
            nu: c.vic_nu,
            gamma: c.vic_gamma,
            eps: c.eps_var,
        }
    }
}

/// Unweighted VICReg components, summed over both views where applicable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicRegTerms {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

/// Variance hinge and covariance penalty of one view, accumulated into `grad`
/// with weights `mu` and `nu`.
fn vicreg_regularisers(z: &Tensor, p: &VicRegParams, grad: &mut [f64]) -> (f64, f64) {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    let mut mean = vec![0.0; d];
    for row in zd.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let x: Vec<f64> = zd.iter().enumerate().map(|(k, v)| v - mean[k % d]).collect();
    let xt = Tensor::from_parts(vec![n, d], x.clone());
    let cov = transpose(&xt);
    let cov = ops::matmul(&cov, &xt).expect("square shapes");
    let cov: Vec<f64> = cov.data().iter().map(|v| v / (n - 1) as f64).collect();

    let mut variance = 0.0;
    for j in 0..d {
        let std = (cov[j * d + j] + p.eps).sqrt();
        if p.gamma - std > 0.0 {
            variance += (p.gamma - std) / d as f64;
            for i in 0..n {
                grad[i * d + j] -= p.mu * x[i * d + j] / ((n - 1) as f64 * std * d as f64);
            }
        }
    }

    let mut covariance = 0.0;
    let mut gcov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let c = cov[i * d + j];
                covariance += c * c / d as f64;
                gcov[i * d + j] = 2.0 * c / d as f64;
            }
        }
    }
    // d/dX of Σ G_ij Cov_ij is 2·X·G/(N−1) for symmetric G; centring does not
    // change it because the columns of X·G already have zero mean.
    let dx = ops::matmul(&xt, &Tensor::from_parts(vec![d, d], gcov)).expect("square shapes");
    for (g, v) in grad.iter_mut().zip(dx.data()) {
        *g += p.nu * 2.0 * v / (n - 1) as f64;
    }
    (variance, covariance)
}

/// `λ·s + μ·(v(Z_a)+v(Z_b)) + ν·(c(Z_a)+c(Z_b))`.
pub fn vicreg_loss(batch: &EmbeddingBatch, p: &VicRegParams) -> Result<(LossGrad, VicRegTerms)> {
    let (n, d) = (batch.n(), batch.dim());
    let (a, b) = (batch.z_a.data(), batch.z_b.data());
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; n * d];

    let mut invariance = 0.0;
    for k in 0..n * d {
        let diff = a[k] - b[k];
        invariance += diff * diff / n as f64;
        ga[k] = p.lambda * 2.0 * diff / n as f64;
        gb[k] = -ga[k];
    }
    let (va, ca) = vicreg_regularisers(&batch.z_a, p, &mut ga);
    let (vb, cb) = vicreg_regularisers(&batch.z_b, p, &mut gb);
    let terms = VicRegTerms {
        invariance,
        variance: va + vb,
        covariance: ca + cb,
    };
    let value = p.lambda * terms.invariance + p.mu * terms.variance + p.nu * terms.covariance;
    Ok((finish(value, n, d, ga, gb, "vicreg_loss")?, terms))
}

/// Records the configured objective on `z`, a `[2N, D]` node whose first
/// `N` rows embed view A. Returns the scalar loss node.
pub fn record_on_tape(tape: &mut ComputationTape, z: NodeId, config: &SslLossConfig) -> Result<NodeId> {
    let batch = EmbeddingBatch::from_stacked(tape.value(z))?;
    let lg = config.evaluate(&batch)?;
    let mut grad = lg.grad_a.into_data();
    grad.extend_from_slice(lg.grad_b.data());
    let grad = Tensor::from_parts(tape.value(z).shape().to_vec(), grad);
    tape.fused_scalar(&[z], lg.value, vec![grad])
}
