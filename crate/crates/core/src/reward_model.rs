//! Linear token rewards, Bradley–Terry maximum likelihood, the data covariance
//! `Σ_D`, and pessimistic reward estimates.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{numerical, usage, Error, Result};
use crate::features::{FeatureSpec, FeatureTable};
use crate::mdp::{NodeId, RewardTable};
use crate::preference::{log_sigmoid, sigmoid, PreferenceDataset};

/// `r(s, a) = φ(s, a)ᵀ θ` with `‖φ‖ ≤ L` and `‖θ‖ ≤ B`.
#[derive(Debug, Clone)]
pub struct LinearReward {
    pub features: Arc<FeatureTable>,
    pub theta: Vec<f64>,
    pub l_bound: f64,
    pub b_bound: f64,
}

impl LinearReward {
    pub fn new(features: Arc<FeatureTable>, theta: Vec<f64>, l_bound: f64, b_bound: f64) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(usage(format!("theta has {} entries, features have dim {}", theta.len(), features.dim())));
        }
        if norm2(&theta) > b_bound * (1.0 + 1e-12) {
            return Err(Error::Assumption(format!("‖θ‖ = {} exceeds B = {b_bound}", norm2(&theta))));
        }
        let max_phi = features.max_norm();
        if max_phi > l_bound * (1.0 + 1e-12) {
            return Err(Error::Assumption(format!("max ‖φ‖ = {max_phi} exceeds L = {l_bound}")));
        }
        Ok(LinearReward { features, theta, l_bound, b_bound })
    }

    pub fn edge(&self, e: NodeId) -> f64 {
        self.features.dot(e, &self.theta)
    }

    pub fn table(&self) -> RewardTable {
        plug_in_reward(&self.features, &self.theta)
    }

    pub fn to_file(&self) -> LinearRewardFile {
        LinearRewardFile {
            features: self.features.spec().clone(),
            theta: self.theta.clone(),
            l_bound: self.l_bound,
            b_bound: self.b_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearRewardFile {
    pub features: FeatureSpec,
    pub theta: Vec<f64>,
    pub l_bound: f64,
    pub b_bound: f64,
}

/// `φᵀθ` on every reachable edge.
pub fn plug_in_reward(features: &FeatureTable, theta: &[f64]) -> RewardTable {
    RewardTable::from_edge_fn(features.shape(), |e| features.dot(e, theta))
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(weight, Δφ)` per pair with `Δφ = Σ_h φ(winner) − Σ_h φ(loser)`.
pub fn pair_differences(dataset: &PreferenceDataset, features: &FeatureTable) -> Result<Vec<(f64, Vec<f64>)>> {
    let shape = features.shape();
    dataset
        .resolved(shape)?
        .into_iter()
        .map(|(w, win, lose)| {
            let mut delta = features.path_sum(win);
            for (d, l) in delta.iter_mut().zip(features.path_sum(lose)) {
                *d -= l;
            }
            Ok((w, delta))
        })
        .collect()
}

/// `L_D(θ) = Σ log σ(θᵀΔφ)`.
pub fn mle_loglik_from(diffs: &[(f64, Vec<f64>)], theta: &[f64]) -> f64 {
    diffs.iter().map(|(w, d)| w * log_sigmoid(dot(theta, d))).sum()
}

/// `∇L_D(θ) = Σ (1 − σ(θᵀΔφ)) Δφ`.
pub fn mle_gradient_from(diffs: &[(f64, Vec<f64>)], theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for (w, d) in diffs {
        let c = w * sigmoid(-dot(theta, d));
        for (gi, di) in g.iter_mut().zip(d) {
            *gi += c * di;
        }
    }
    g
}

pub fn mle_loglik(theta: &[f64], dataset: &PreferenceDataset, features: &FeatureTable) -> Result<f64> {
    check_dim(theta, features)?;
    Ok(mle_loglik_from(&pair_differences(dataset, features)?, theta))
}

pub fn mle_gradient(theta: &[f64], dataset: &PreferenceDataset, features: &FeatureTable) -> Result<Vec<f64>> {
    check_dim(theta, features)?;
    Ok(mle_gradient_from(&pair_differences(dataset, features)?, theta))
}

fn check_dim(theta: &[f64], features: &FeatureTable) -> Result<()> {
    if theta.len() != features.dim() {
        return Err(usage(format!("theta has {} entries, features have dim {}", theta.len(), features.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    /// Stationarity tolerance on the (projected) gradient, sup-norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig { tol: 1e-9, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Sup-norm of the gradient with its radial component removed on the boundary.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub on_boundary: bool,
}

/// Gradient with the outward radial component removed when `θ` sits on the
/// sphere `‖θ‖ = B` and the gradient points outwards.
fn stationarity(g: &[f64], theta: &[f64], b: f64) -> f64 {
    let n = norm2(theta);
    let gt = dot(g, theta);
    if n >= b * (1.0 - 1e-10) && gt > 0.0 {
        let scale = gt / (n * n);
        g.iter().zip(theta).map(|(gi, ti)| (gi - scale * ti).abs()).fold(0.0, f64::max)
    } else {
        g.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Maximizes `L_D(θ) − ν‖θ‖²/2` by damped Newton from `start`.
fn penalized_newton(diffs: &[(f64, Vec<f64>)], nu: f64, start: &[f64], budget: &mut usize, cap: f64) -> Vec<f64> {
    let d = start.len();
    let mut theta = start.to_vec();
    let objective = |t: &[f64]| mle_loglik_from(diffs, t) - 0.5 * nu * dot(t, t);
    let mut f = objective(&theta);
    for _ in 0..200 {
        if *budget == 0 {
            break;
        }
        *budget -= 1;
        let mut g = DVector::from_vec(mle_gradient_from(diffs, &theta));
        g.axpy(-nu, &DVector::from_column_slice(&theta), 1.0);
        if g.amax() <= 1e-13 * (1.0 + nu) {
            break;
        }
        let mut h = DMatrix::<f64>::identity(d, d) * nu;
        for (w, delta) in diffs {
            let s = sigmoid(dot(&theta, delta));
            let c = w * s * (1.0 - s);
            if c == 0.0 {
                continue;
            }
            let dv = DVector::from_column_slice(delta);
            h.ger(c, &dv, &dv, 1.0);
        }
        let ridge = 1e-12 * (1.0 + h.diagonal().amax());
        let step = match Cholesky::new(h.clone() + DMatrix::<f64>::identity(d, d) * ridge) {
            Some(ch) => ch.solve(&g),
            None => g.clone(),
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
            let fc = objective(&cand);
            if fc >= f + 1e-4 * t * slope || (fc >= f && t < 1e-12) {
                theta = cand;
                improved = fc > f;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !improved || norm2(&theta) > cap {
            break;
        }
    }
    theta
}

/// Constrained MLE over `‖θ‖₂ ≤ B`.
///
/// The interior maximizer is found by damped Newton. When it lies outside the
/// ball the solution is on the sphere, where `θ(ν) = argmax L_D − ν‖θ‖²/2`
/// and `‖θ(ν)‖` decreases in `ν`; bisection on `ν` hits `‖θ‖ = B`.
pub fn mle_fit(dataset: &PreferenceDataset, features: &FeatureTable, b_bound: f64, cfg: &MleConfig) -> Result<MleFit> {
    if dataset.is_empty() {
        return Err(usage("MLE needs a nonempty dataset"));
    }
    if !(b_bound > 0.0) {
        return Err(usage("B must be positive"));
    }
    let diffs = pair_differences(dataset, features)?;
    if diffs.iter().all(|(w, d)| *w == 0.0 || d.iter().all(|&x| x == 0.0)) {
        return Err(Error::Numerical("all feature differences are zero; the likelihood is flat".into()));
    }
    let dim = features.dim();
    let mut budget = cfg.max_iter;
    let mut theta = penalized_newton(&diffs, 0.0, &vec![0.0; dim], &mut budget, 2.0 * b_bound);
    let mut on_boundary = false;
    if norm2(&theta) > b_bound {
        on_boundary = true;
        let (mut lo, mut hi) = (0.0f64, 1e-3f64);
        let mut warm = project_ball(&theta, b_bound);
        loop {
            let t = penalized_newton(&diffs, hi, &warm, &mut budget, f64::INFINITY);
            if norm2(&t) <= b_bound || budget == 0 {
                warm = t;
                break;
            }
            lo = hi;
            hi *= 4.0;
        }
        for _ in 0..200 {
            if budget == 0 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let t = penalized_newton(&diffs, mid, &warm, &mut budget, f64::INFINITY);
            let n = norm2(&t);
            if n > b_bound {
                lo = mid;
            } else {
                hi = mid;
            }
            warm = t;
            if (n - b_bound).abs() <= 1e-14 * b_bound || hi - lo <= 1e-15 * hi {
                break;
            }
        }
        theta = project_ball(&warm, b_bound);
        // polish on the sphere with projected gradient steps
        let mut f = mle_loglik_from(&diffs, &theta);
        for _ in 0..1000 {
            let g = mle_gradient_from(&diffs, &theta);
            if stationarity(&g, &theta, b_bound) <= cfg.tol || budget == 0 {
                break;
            }
            budget -= 1;
            let mut step = 1.0;
            let mut moved = false;
            while step > 1e-12 {
                let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t + step * gi).collect();
                let cand = project_ball(&cand, b_bound);
                let fc = mle_loglik_from(&diffs, &cand);
                if fc > f {
                    theta = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    let g = mle_gradient_from(&diffs, &theta);
    let grad_norm = stationarity(&g, &theta, b_bound);
    let loglik = mle_loglik_from(&diffs, &theta);
    if !loglik.is_finite() {
        return Err(numerical("log-likelihood diverged"));
    }
    let iterations = cfg.max_iter - budget;
    Ok(MleFit { theta, loglik, grad_norm, iterations, converged: grad_norm <= cfg.tol, on_boundary })
}

pub(crate) fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let n = norm2(v);
    if n <= radius {
        v.to_vec()
    } else {
        v.iter().map(|x| x * radius / n).collect()
    }
}

/// `Σ_D = Σ_pairs w Δφ Δφᵀ + λI`, kept with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    matrix: DMatrix<f64>,
    lambda: f64,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFile {
    pub lambda: f64,
    pub rows: Vec<Vec<f64>>,
}

impl CovarianceMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(usage("covariance must be square"));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * (1.0 + matrix.amax()) {
            return Err(usage(format!("covariance is not symmetric (max asymmetry {asym})")));
        }
        let chol = Cholesky::new(matrix.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "Σ_D is numerically singular (condition number {:.3e})",
                condition_number(&matrix)
            ))
        })?;
        Ok(CovarianceMatrix { matrix, lambda, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `Σ_D⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// `‖v‖_{Σ_D⁻¹}`.
    pub fn inv_norm(&self, v: &[f64]) -> f64 {
        dot(v, &self.solve(v)).max(0.0).sqrt()
    }

    /// `‖v‖_{Σ_D}`.
    pub fn norm(&self, v: &[f64]) -> f64 {
        let x = DVector::from_column_slice(v);
        x.dot(&(&self.matrix * &x)).max(0.0).sqrt()
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.matrix)
    }

    pub fn to_file(&self) -> CovarianceFile {
        let rows = (0..self.dim()).map(|i| self.matrix.row(i).iter().cloned().collect()).collect();
        CovarianceFile { lambda: self.lambda, rows }
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn covariance(dataset: &PreferenceDataset, features: &FeatureTable, lambda: f64) -> Result<CovarianceMatrix> {
    if !(lambda > 0.0) {
        return Err(usage(format!("λ must be positive, got {lambda}")));
    }
    let d = features.dim();
    let mut m = DMatrix::<f64>::identity(d, d) * lambda;
    for (w, delta) in pair_differences(dataset, features)? {
        let v = DVector::from_vec(delta);
        m.ger(w, &v, &v, 1.0);
    }
    // rank-one updates are symmetric up to rounding; enforce it exactly
    let m = (&m + m.transpose()) * 0.5;
    CovarianceMatrix::from_matrix(m, lambda)
}

/// `Υ = 1 / (2 + e^{−2HLB} + e^{2HLB})`.
pub fn upsilon(horizon: usize, l_bound: f64, b_bound: f64) -> f64 {
    let x = 2.0 * horizon as f64 * l_bound * b_bound;
    1.0 / (2.0 + (-x).exp() + x.exp())
}

/// `ϱ = C · sqrt(d log(1/δ) / Υ + λB²)`.
pub fn rho(c: f64, dim: usize, delta: f64, upsilon: f64, lambda: f64, b_bound: f64) -> f64 {
    c * (dim as f64 * (1.0 / delta).ln() / upsilon + lambda * b_bound * b_bound).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PessimismConfig {
    pub delta: f64,
    pub c: f64,
    pub upsilon: f64,
    pub rho: f64,
}

impl PessimismConfig {
    pub fn derive(
        delta: f64,
        c: f64,
        horizon: usize,
        l_bound: f64,
        b_bound: f64,
        dim: usize,
        lambda: f64,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(usage("δ must lie in (0, 1)"));
        }
        if !(c >= 0.0) {
            return Err(usage("C must be non-negative"));
        }
        let u = upsilon(horizon, l_bound, b_bound);
        Ok(PessimismConfig { delta, c, upsilon: u, rho: rho(c, dim, delta, u, lambda, b_bound) })
    }

    /// Fixed `ϱ`, bypassing the closed form.
    pub fn with_rho(rho: f64) -> Self {
        PessimismConfig { delta: f64::NAN, c: f64::NAN, upsilon: f64::NAN, rho }
    }
}

/// `r̂(s, a) = φᵀθ_MLE − ϱ ‖φ‖_{Σ_D⁻¹}` on every reachable edge.
pub fn pessimistic_reward(
    features: &FeatureTable,
    theta_mle: &[f64],
    sigma: &CovarianceMatrix,
    cfg: &PessimismConfig,
) -> Result<RewardTable> {
    if sigma.dim() != features.dim() || theta_mle.len() != features.dim() {
        return Err(usage("θ, Σ_D and the features disagree on the dimension"));
    }
    let rho = cfg.rho;
    Ok(RewardTable::from_edge_fn(features.shape(), |e| {
        let bonus = if rho == 0.0 { 0.0 } else { rho * sigma.inv_norm(&features.vector(e)) };
        features.dot(e, theta_mle) - bonus
    }))
}

/// `‖φ(s, a)‖_{Σ_D⁻¹}` per reachable edge.
pub fn uncertainty_table(features: &FeatureTable, sigma: &CovarianceMatrix) -> RewardTable {
    RewardTable::from_edge_fn(features.shape(), |e| sigma.inv_norm(&features.vector(e)))
}
