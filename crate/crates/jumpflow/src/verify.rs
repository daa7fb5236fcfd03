//! The analytic side of the toolkit: local and nonlocal generators, their
//! mollified counterparts, weak-equation residuals, the martingale functional,
//! the truncation family used for moment propagation, and maximum-principle /
//! growth probes.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::empirical::{
    mollified_diffusion, mollified_drift, tilt_distribution, MarginalFlow, MollifiedView,
    ProbCloud,
};
use crate::error::{Error, Result};
use crate::model::{CoefficientSet, JumpKernel};
use crate::simulate::PathEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTag {
    /// Compactly supported C^2.
    CompactC2,
    /// C^2 with (1 + |x|)-controlled value, gradient and Hessian.
    ExtendedC2,
}

type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type HessFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A C^2 test function with analytic derivatives.
#[derive(Clone)]
pub struct TestFunction {
    pub id: String,
    pub class_tag: ClassTag,
    /// Value, gradient and Hessian vanish for `|x| >= support_radius`
    /// (infinite for the extended class).
    pub support_radius: f64,
    value: Arc<ScalarFn>,
    gradient: Arc<GradFn>,
    hessian: Arc<HessFn>,
}

impl TestFunction {
    pub fn from_parts(
        id: impl Into<String>,
        class_tag: ClassTag,
        support_radius: f64,
        value: Arc<ScalarFn>,
        gradient: Arc<GradFn>,
        hessian: Arc<HessFn>,
    ) -> Self {
        Self {
            id: id.into(),
            class_tag,
            support_radius,
            value,
            gradient,
            hessian,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(x)
    }

    /// Polynomial bump `p(x) (1 - |x - c|^2 / R^2)^3` on `|x - c| <= R`.
    pub fn poly_bump(p: BumpPoly, center: DVector<f64>, radius: f64) -> Self {
        let dim = center.len();
        let id = format!("bump_{}_c{:.3}_r{}", p.id_tag(), center[0], radius);
        let r2 = radius * radius;

        let c_v = center.clone();
        let p_v = p;
        let value = Arc::new(move |x: &DVector<f64>| {
            let s = (x - &c_v).norm_squared() / r2;
            if s >= 1.0 {
                0.0
            } else {
                p_v.value(x) * (1.0 - s).powi(3)
            }
        });

        let c_g = center.clone();
        let gradient = Arc::new(move |x: &DVector<f64>| {
            let d = x - &c_g;
            let s = d.norm_squared() / r2;
            if s >= 1.0 {
                return DVector::zeros(dim);
            }
            let w = (1.0 - s).powi(3);
            let dw = &d * (-6.0 * (1.0 - s).powi(2) / r2);
            p.grad(x) * w + dw * p.value(x)
        });

        let c_h = center.clone();
        let hessian = Arc::new(move |x: &DVector<f64>| {
            let d = x - &c_h;
            let s = d.norm_squared() / r2;
            if s >= 1.0 {
                return DMatrix::zeros(dim, dim);
            }
            let w = (1.0 - s).powi(3);
            let dw = &d * (-6.0 * (1.0 - s).powi(2) / r2);
            let hess_w = DMatrix::identity(dim, dim) * (-6.0 * (1.0 - s).powi(2) / r2)
                + (&d * d.transpose()) * (24.0 * (1.0 - s) / (r2 * r2));
            let gp = p.grad(x);
            p.hess(x, dim) * w + &gp * dw.transpose() + &dw * gp.transpose()
                + hess_w * p.value(x)
        });

        Self {
            id,
            class_tag: ClassTag::CompactC2,
            support_radius: center.norm() + radius,
            value,
            gradient,
            hessian,
        }
    }

    /// Radial cutoff with `1{|x| <= n} <= chi_n <= 1{|x| <= n + 1}`, C^2 via a
    /// quintic transition profile.
    pub fn cutoff(n: f64, dim: usize) -> Self {
        assert!(n >= 1.0);
        // S(u) = 6u^5 - 15u^4 + 10u^3: S(0)=0, S(1)=1, S'=S''=0 at both ends.
        let smooth = |u: f64| u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        let dsmooth = |u: f64| 30.0 * u * u * (u - 1.0) * (u - 1.0);
        let d2smooth = |u: f64| 60.0 * u * (u - 1.0) * (2.0 * u - 1.0);

        let value = Arc::new(move |x: &DVector<f64>| {
            let r = x.norm();
            if r <= n {
                1.0
            } else if r >= n + 1.0 {
                0.0
            } else {
                1.0 - smooth(r - n)
            }
        });
        let gradient = Arc::new(move |x: &DVector<f64>| {
            let r = x.norm();
            if r <= n || r >= n + 1.0 {
                DVector::zeros(dim)
            } else {
                x * (-dsmooth(r - n) / r)
            }
        });
        let hessian = Arc::new(move |x: &DVector<f64>| {
            let r = x.norm();
            if r <= n || r >= n + 1.0 {
                DMatrix::zeros(dim, dim)
            } else {
                let u = r - n;
                let dir = x / r;
                (&dir * dir.transpose()) * (-d2smooth(u))
                    + (DMatrix::identity(dim, dim) - &dir * dir.transpose())
                        * (-dsmooth(u) / r)
            }
        });
        Self {
            id: format!("chi_{n}"),
            class_tag: ClassTag::CompactC2,
            support_radius: n + 1.0,
            value,
            gradient,
            hessian,
        }
    }

    /// Max central-difference error of gradient and Hessian against the
    /// analytic derivatives, relative to `1 + |analytic|`.
    pub fn derivative_probe_error(&self, probes: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for x in probes {
            let h = 1e-5 * (1.0 + x.norm());
            let dim = x.len();
            let grad = self.gradient(x);
            let hess = self.hessian(x);
            let mut fd_grad = DVector::zeros(dim);
            let mut fd_hess = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                fd_grad[i] = (self.value(&xp) - self.value(&xm)) / (2.0 * h);
                let gp = self.gradient(&xp);
                let gm = self.gradient(&xm);
                for j in 0..dim {
                    fd_hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
                }
            }
            worst = worst.max((fd_grad - &grad).norm() / (1.0 + grad.norm()));
            worst = worst.max((fd_hess - &hess).norm() / (1.0 + hess.norm()));
        }
        worst
    }
}

/// Polynomial prefactors used by the bump bank.
#[derive(Debug, Clone, Copy)]
pub enum BumpPoly {
    One,
    Coord(usize),
    Quad(usize, usize),
}

impl BumpPoly {
    fn id_tag(self) -> String {
        match self {
            BumpPoly::One => "1".into(),
            BumpPoly::Coord(i) => format!("x{i}"),
            BumpPoly::Quad(i, j) => format!("x{i}x{j}"),
        }
    }

    fn value(self, x: &DVector<f64>) -> f64 {
        match self {
            BumpPoly::One => 1.0,
            BumpPoly::Coord(i) => x[i],
            BumpPoly::Quad(i, j) => x[i] * x[j],
        }
    }

    fn grad(self, x: &DVector<f64>) -> DVector<f64> {
        let dim = x.len();
        let mut g = DVector::zeros(dim);
        match self {
            BumpPoly::One => {}
            BumpPoly::Coord(i) => g[i] = 1.0,
            BumpPoly::Quad(i, j) => {
                g[i] += x[j];
                g[j] += x[i];
            }
        }
        g
    }

    fn hess(self, _x: &DVector<f64>, dim: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(dim, dim);
        if let BumpPoly::Quad(i, j) = self {
            h[(i, j)] += 1.0;
            h[(j, i)] += 1.0;
        }
        h
    }
}

/// The default compact test bank: polynomial bumps at two centers and two
/// radii with constant, coordinate and quadratic prefactors.
pub fn compact_bank(dim: usize) -> Vec<TestFunction> {
    let mut bank = Vec::new();
    let mut centers = vec![DVector::zeros(dim)];
    let mut shifted = DVector::zeros(dim);
    shifted[0] = 2.0;
    centers.push(shifted);
    for center in &centers {
        for &radius in &[3.0, 5.0] {
            bank.push(TestFunction::poly_bump(BumpPoly::One, center.clone(), radius));
            bank.push(TestFunction::poly_bump(
                BumpPoly::Coord(0),
                center.clone(),
                radius,
            ));
            bank.push(TestFunction::poly_bump(
                BumpPoly::Quad(0, 0),
                center.clone(),
                radius,
            ));
        }
    }
    bank
}

/// `phi(x) = (1 + |x|^2)^{1/2}`.
pub fn weight_phi(x: &DVector<f64>) -> f64 {
    (1.0 + x.norm_squared()).sqrt()
}

// chi: increasing C^2 with chi(r) = r on [0, 1], chi(r) = 2 on [2, inf);
// on [1, 2] the quintic interpolant with matching value/slope/curvature.
fn chi(r: f64) -> f64 {
    if r <= 1.0 {
        r
    } else if r >= 2.0 {
        2.0
    } else {
        let s = r - 1.0;
        1.0 + s + s * s * s * (4.0 + s * (-7.0 + 3.0 * s))
    }
}

fn chi_d1(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let s = r - 1.0;
        1.0 + s * s * (12.0 + s * (-28.0 + 15.0 * s))
    }
}

fn chi_d2(r: f64) -> f64 {
    if !(1.0..2.0).contains(&r) {
        0.0
    } else {
        let s = r - 1.0;
        s * (24.0 + s * (-84.0 + 60.0 * s))
    }
}

/// Truncation family `psi_n(x) = n chi(phi(x) / n)`: smooth, bounded by `2n`,
/// equal to `phi` where `phi <= n`, and sandwiched between `phi /\ n` and
/// `2 (phi /\ n)`.
pub fn truncation_family(n: u32, dim: usize) -> TestFunction {
    assert!(n >= 1);
    let nf = n as f64;
    let value = Arc::new(move |x: &DVector<f64>| nf * chi(weight_phi(x) / nf));
    let gradient = Arc::new(move |x: &DVector<f64>| {
        let phi = weight_phi(x);
        x * (chi_d1(phi / nf) / phi)
    });
    let hessian = Arc::new(move |x: &DVector<f64>| {
        let phi = weight_phi(x);
        let grad_phi = x / phi;
        (&grad_phi * grad_phi.transpose()) * (chi_d2(phi / nf) / nf)
            + (DMatrix::identity(dim, dim) / phi - x * x.transpose() / (phi * phi * phi))
                * chi_d1(phi / nf)
    });
    TestFunction {
        id: format!("psi_{n}"),
        class_tag: ClassTag::ExtendedC2,
        support_radius: f64::INFINITY,
        value,
        gradient,
        hessian,
    }
}

/// `(A psi, B psi)` at `(t, x)`: the local part `b . grad + 1/2 tr(a Hess)`
/// and the nonlocal part summed over the finite mark set, with the thinning
/// coordinate integrated out into the kappa factor.
pub fn apply_generator(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    x: &DVector<f64>,
) -> Result<(f64, f64)> {
    coeffs.check_time(t)?;
    let b = coeffs.drift(t, x);
    let a = coeffs.a(t, x);
    let grad = psi.gradient(x);
    let hess = psi.hessian(x);
    let local = b.dot(&grad) + 0.5 * (a * hess).trace();

    let base = psi.value(x);
    let mut nonlocal = 0.0;
    for mark in kernel.marks() {
        let kappa = kernel.rate(t, mark.label, x);
        if kappa > 0.0 {
            let shifted = x + kernel.displacement(t, mark.label, x);
            nonlocal += mark.weight * kappa * (psi.value(&shifted) - base);
        }
    }
    Ok((local, nonlocal))
}

/// Mollified generator `(A_eps psi, B_eps psi)` at `(t, y)`. The local part
/// uses the tilt-averaged coefficients; the nonlocal part evaluates rate and
/// displacement at tilt-sampled anchor atoms while the increment is applied
/// at `y`.
pub fn apply_mollified_generator(
    view: &MollifiedView,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    y: &DVector<f64>,
) -> Result<(f64, f64)> {
    coeffs.check_time(t)?;
    let b = mollified_drift(view, coeffs, t, y)?;
    let probs = tilt_distribution(view, y);
    let d = coeffs.dim();
    let mut a = DMatrix::zeros(d, d);
    for (x, &p) in view.cloud().points().iter().zip(&probs) {
        if p > 0.0 {
            a += coeffs.a(t, x) * p;
        }
    }
    let grad = psi.gradient(y);
    let hess = psi.hessian(y);
    let local = b.dot(&grad) + 0.5 * (a * hess).trace();

    let base = psi.value(y);
    let mut nonlocal = 0.0;
    for (x, &p) in view.cloud().points().iter().zip(&probs) {
        if p <= 0.0 {
            continue;
        }
        for mark in kernel.marks() {
            let kappa = kernel.rate(t, mark.label, x);
            if kappa > 0.0 {
                let shifted = y + kernel.displacement(t, mark.label, x);
                nonlocal += p * mark.weight * kappa * (psi.value(&shifted) - base);
            }
        }
    }
    Ok((local, nonlocal))
}

/// Which generator a residual or martingale evaluation uses.
#[derive(Clone, Copy)]
pub enum GeneratorMode<'a> {
    Plain,
    Mollified { flow: &'a MarginalFlow, eps: f64 },
}

/// `(A + B) psi` at `(t, x)` under the chosen mode.
pub fn generator_value(
    mode: &GeneratorMode,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    x: &DVector<f64>,
) -> Result<f64> {
    let (a, b) = match mode {
        GeneratorMode::Plain => apply_generator(coeffs, kernel, psi, t, x)?,
        GeneratorMode::Mollified { flow, eps } => {
            let view = MollifiedView::new(flow.cloud_at(t), *eps)?;
            apply_mollified_generator(&view, coeffs, kernel, psi, t, x)?
        }
    };
    Ok(a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Plain,
    Mollified { eps_milli: u32 },
}

/// One weak-equation residual evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub test_fn_id: String,
    pub t: f64,
    pub residual: f64,
    pub dt: f64,
    pub se: Option<f64>,
    pub bias_budget: f64,
    pub verdict: bool,
}

impl ResidualReport {
    fn finish(mut self) -> Self {
        self.verdict = self.residual.abs() <= self.bias_budget + 3.0 * self.se.unwrap_or(0.0);
        self
    }
}

pub fn write_residual_csv<W: Write>(reports: &[ResidualReport], out: &mut W) -> Result<()> {
    writeln!(out, "test_fn_id,t,value,se,bias_budget,verdict")?;
    for r in reports {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{},{:.17e},{}",
            r.test_fn_id,
            r.t,
            r.residual,
            r.se.map(|s| format!("{s:.17e}")).unwrap_or_default(),
            r.bias_budget,
            if r.verdict { "pass" } else { "fail" },
        )?;
    }
    Ok(())
}

fn pairing(cloud: &ProbCloud, f: impl Fn(&DVector<f64>) -> f64) -> f64 {
    cloud
        .points()
        .iter()
        .zip(cloud.weights())
        .map(|(x, w)| w * f(x))
        .sum()
}

fn grid_index_of(grid: &[f64], t: f64) -> Result<usize> {
    grid.iter()
        .position(|&g| (g - t).abs() <= 1e-9)
        .ok_or(Error::TimeOutOfRange {
            t,
            horizon: *grid.last().unwrap(),
        })
}

/// Gauss-Hermite rule for the standard normal weight: nodes and weights via
/// the symmetric Jacobi matrix eigenproblem.
fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(m, m);
    for k in 1..m {
        let v = (k as f64).sqrt();
        j[(k - 1, k)] = v;
        j[(k, k - 1)] = v;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = eig.eigenvectors.column(i)[0].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// `<g, f^eps>` for a 1D cloud: exact Gaussian mixture quadrature per atom.
fn smoothed_pairing(
    cloud: &ProbCloud,
    eps: f64,
    g: impl Fn(&DVector<f64>) -> f64,
) -> Result<f64> {
    if cloud.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: cloud.dim(),
            context: "mollified pairings use 1D Gauss-Hermite quadrature".into(),
        });
    }
    let (nodes, weights) = gauss_hermite(24);
    let sqrt_eps = eps.sqrt();
    let mut acc = 0.0;
    let mut y = DVector::zeros(1);
    for (x, w) in cloud.points().iter().zip(cloud.weights()) {
        for (&u, &q) in nodes.iter().zip(&weights) {
            y[0] = x[0] + sqrt_eps * u;
            acc += w * q * g(&y);
        }
    }
    Ok(acc)
}

/// Weak-equation residual
/// `R = <psi, f_t> - <psi, f_0> - sum_k dt_k <(A + B) psi, f_{t_k}>`
/// with left-endpoint time quadrature on the flow grid. In mollified mode the
/// measures become `f^eps` views and the operators their mollified versions.
pub fn weak_residual(
    flow: &MarginalFlow,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    mode: ResidualMode,
    bias_budget: f64,
    se: Option<f64>,
) -> Result<ResidualReport> {
    let end = grid_index_of(flow.grid(), t)?;
    let grid = flow.grid();
    let mut integral = 0.0;
    let mut max_dt: f64 = 0.0;
    for k in 0..end {
        let dt = grid[k + 1] - grid[k];
        max_dt = max_dt.max(dt);
        let cloud = &flow.clouds()[k];
        let mean = match mode {
            ResidualMode::Plain => pairing(cloud, |x| {
                let (a, b) = apply_generator(coeffs, kernel, psi, grid[k], x).unwrap();
                a + b
            }),
            ResidualMode::Mollified { eps_milli } => {
                let eps = eps_milli as f64 / 1000.0;
                let view = MollifiedView::new(cloud, eps)?;
                smoothed_pairing(cloud, eps, |y| {
                    let (a, b) =
                        apply_mollified_generator(&view, coeffs, kernel, psi, grid[k], y)
                            .unwrap();
                    a + b
                })?
            }
        };
        integral += dt * mean;
    }
    let (head, tail) = match mode {
        ResidualMode::Plain => (
            pairing(&flow.clouds()[end], |x| psi.value(x)),
            pairing(&flow.clouds()[0], |x| psi.value(x)),
        ),
        ResidualMode::Mollified { eps_milli } => {
            let eps = eps_milli as f64 / 1000.0;
            (
                smoothed_pairing(&flow.clouds()[end], eps, |y| psi.value(y))?,
                smoothed_pairing(&flow.clouds()[0], eps, |y| psi.value(y))?,
            )
        }
    };
    Ok(ResidualReport {
        test_fn_id: psi.id.clone(),
        t,
        residual: head - tail - integral,
        dt: max_dt,
        se,
        bias_budget,
        verdict: false,
    }
    .finish())
}

/// Observation window for the martingale functional: bounded continuous
/// weights sampled at `obs_times <= s`, increment over `[s, t]`.
#[derive(Debug, Clone)]
pub struct Window {
    pub obs_times: Vec<f64>,
    pub s: f64,
    pub t: f64,
}

/// Sample mean and standard error of the per-path functional
/// `K = prod_i w_i(X_{s_i}) (psi(X_t) - psi(X_s) - int_s^t (A + B) psi(X_r) dr)`
/// with trapezoid quadrature along the recorded path.
pub fn martingale_statistic(
    ens: &PathEnsemble,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    mode: &GeneratorMode,
    window: &Window,
    weights: &[TestFunction],
    psi: &TestFunction,
) -> Result<(f64, f64)> {
    if weights.len() != window.obs_times.len() {
        return Err(Error::Config(
            "one weight function per observation time".into(),
        ));
    }
    let grid = ens.grid();
    let obs_idx: Vec<usize> = window
        .obs_times
        .iter()
        .map(|&u| grid_index_of(grid, u))
        .collect::<Result<_>>()?;
    let is = grid_index_of(grid, window.s)?;
    let ie = grid_index_of(grid, window.t)?;
    if window.obs_times.iter().any(|&u| u > window.s) || window.s > window.t {
        return Err(Error::Config("window must satisfy s_i <= s <= t".into()));
    }

    let values: Vec<f64> = ens
        .states()
        .par_iter()
        .map(|path| -> Result<f64> {
            let mut factor = 1.0;
            for (w, &k) in weights.iter().zip(&obs_idx) {
                factor *= w.value(&path[k]);
            }
            let mut gen_vals = Vec::with_capacity(ie - is + 1);
            for k in is..=ie {
                gen_vals.push(generator_value(mode, coeffs, kernel, psi, grid[k], &path[k])?);
            }
            let mut integral = 0.0;
            for k in is..ie {
                integral +=
                    0.5 * (grid[k + 1] - grid[k]) * (gen_vals[k - is] + gen_vals[k + 1 - is]);
            }
            Ok(factor * (psi.value(&path[ie]) - psi.value(&path[is]) - integral))
        })
        .collect::<Result<_>>()?;

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Report from the jump-increment inequality sweep
/// `|psi_n(x + h) - psi_n(x)| <= C |h| psi_n(x) / phi(x)`.
#[derive(Debug, Clone, Serialize)]
pub struct JumpIncrementReport {
    pub n: u32,
    pub max_ratio: f64,
    pub probe_count: usize,
}

pub fn jump_increment_bound_check(
    kernel: &JumpKernel,
    coeffs: &CoefficientSet,
    n: u32,
    t: f64,
    probes: &[DVector<f64>],
) -> Result<JumpIncrementReport> {
    coeffs.check_time(t)?;
    let psi = truncation_family(n, coeffs.dim());
    let mut max_ratio: f64 = 0.0;
    let mut count = 0;
    for x in probes {
        let base = psi.value(x);
        let phi = weight_phi(x);
        for mark in kernel.marks() {
            if kernel.rate(t, mark.label, x) <= 0.0 {
                continue;
            }
            let h = kernel.displacement(t, mark.label, x);
            count += 1;
            let hn = h.norm();
            if hn == 0.0 {
                continue;
            }
            let delta = (psi.value(&(x + h)) - base).abs();
            max_ratio = max_ratio.max(delta * phi / (hn * base));
        }
    }
    Ok(JumpIncrementReport {
        n,
        max_ratio,
        probe_count: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MpVerdict {
    Pass,
    Fail,
    /// The grid argmax landed on the search boundary, so nothing is implied.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct MpReport {
    pub verdict: MpVerdict,
    pub argmax: Vec<f64>,
    pub jump_part: f64,
    pub trace_part: f64,
    pub tol: f64,
}

/// Maximum-principle probe: at the grid argmax of a compactly supported
/// `psi`, the nonlocal part and the second-order local part must be
/// nonpositive up to a grid-resolution allowance.
pub fn maximum_principle_check(
    mode: &GeneratorMode,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    search_grid: &[DVector<f64>],
) -> Result<MpReport> {
    coeffs.check_time(t)?;
    if psi.class_tag != ClassTag::CompactC2 {
        return Err(Error::Config(
            "maximum principle probe needs a compactly supported test function".into(),
        ));
    }
    let (arg_idx, _) = search_grid
        .iter()
        .enumerate()
        .map(|(i, x)| (i, psi.value(x)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .ok_or_else(|| Error::Config("empty search grid".into()))?;
    let y0 = &search_grid[arg_idx];

    let max_norm = search_grid.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let on_boundary = y0.norm() >= 0.999 * max_norm;

    let (local2, jump_part, grad_b) = match mode {
        GeneratorMode::Plain => {
            let (_, b_op) = apply_generator(coeffs, kernel, psi, t, y0)?;
            let a = coeffs.a(t, y0);
            let trace = 0.5 * (&a * psi.hessian(y0)).trace();
            let gb = psi.gradient(y0).norm() * (1.0 + coeffs.drift(t, y0).norm() + a.trace());
            (trace, b_op, gb)
        }
        GeneratorMode::Mollified { flow, eps } => {
            let view = MollifiedView::new(flow.cloud_at(t), *eps)?;
            let (_, b_op) = apply_mollified_generator(&view, coeffs, kernel, psi, t, y0)?;
            let (a, _) = mollified_diffusion(&view, coeffs, t, y0)?;
            let trace = 0.5 * (&a * psi.hessian(y0)).trace();
            let b = mollified_drift(&view, coeffs, t, y0)?;
            let gb = psi.gradient(y0).norm() * (1.0 + b.norm() + a.trace());
            (trace, b_op, gb)
        }
    };
    let tol = 1e-8 + grad_b;
    let verdict = if on_boundary {
        MpVerdict::Inconclusive
    } else if jump_part <= tol && local2 <= tol {
        MpVerdict::Pass
    } else {
        MpVerdict::Fail
    };
    Ok(MpReport {
        verdict,
        argmax: y0.iter().copied().collect(),
        jump_part,
        trace_part: local2,
        tol,
    })
}

/// `max over probes of |A psi| + |B psi|`, the boundedness estimate for a
/// compactly supported test function; include probes far outside the support
/// to exercise the far-field bound.
pub fn operator_bound_probe(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    psi: &TestFunction,
    t: f64,
    probes: &[DVector<f64>],
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for x in probes {
        let (a, b) = apply_generator(coeffs, kernel, psi, t, x)?;
        sup = sup.max(a.abs() + b.abs());
    }
    Ok(sup)
}

/// Max over probes of the mollified linear-growth ratio
/// `(|b^eps| + |a^eps|^{1/2} + tilt-averaged jump flux) / (1 + |y|)`.
pub fn growth_probe(
    view: &MollifiedView,
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    t: f64,
    probes: &[DVector<f64>],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for y in probes {
        let b = mollified_drift(view, coeffs, t, y)?;
        let (a, _) = mollified_diffusion(view, coeffs, t, y)?;
        let probs = tilt_distribution(view, y);
        let mut flux = 0.0;
        for (x, &p) in view.cloud().points().iter().zip(&probs) {
            if p <= 0.0 {
                continue;
            }
            for mark in kernel.marks() {
                let kappa = kernel.rate(t, mark.label, x);
                if kappa > 0.0 {
                    flux += p * mark.weight * kappa * kernel.displacement(t, mark.label, x).norm();
                }
            }
        }
        worst = worst.max((b.norm() + a.norm().sqrt() + flux) / (1.0 + y.norm()));
    }
    Ok(worst)
}

/// Max difference quotient of the mollified coefficients over probe pairs:
/// the local-Lipschitz estimate.
pub fn lipschitz_probe(
    view: &MollifiedView,
    coeffs: &CoefficientSet,
    t: f64,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (y1, y2) in pairs {
        let gap = (y1 - y2).norm();
        if gap < 1e-12 {
            continue;
        }
        let b1 = mollified_drift(view, coeffs, t, y1)?;
        let b2 = mollified_drift(view, coeffs, t, y2)?;
        let (_, s1) = mollified_diffusion(view, coeffs, t, y1)?;
        let (_, s2) = mollified_diffusion(view, coeffs, t, y2)?;
        worst = worst.max(((b1 - b2).norm() + (s1 - s2).norm()) / gap);
    }
    Ok(worst)
}
