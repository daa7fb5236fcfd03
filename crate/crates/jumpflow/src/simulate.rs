//! Monte Carlo path generation for the base jumping SDE and its regularized
//! counterpart, plus the ensemble statistics used by the tightness and moment
//! bounds.
//!
//! Time stepping is Euler-Maruyama with coefficients frozen at the left limit
//! of each interval. Candidate jump times are drawn exactly from exponential
//! clocks at the dominating rate `nu(F) * kappa_bar` and thinned, so the jump
//! component carries no discretization bias; only drift and diffusion are
//! first order in the step size.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::empirical::{
    mollified_density, psd_sqrt, MarginalFlow, MollifiedView, ProbCloud,
};
use crate::error::{Error, Result};
use crate::model::{CoefficientSet, JumpKernel};
use crate::rng::{path_stream, StreamPurpose};

/// States beyond this magnitude flag the path as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Uniform recording grid `0, dt, 2 dt, ..., t_end` with `steps` intervals.
pub fn uniform_grid(t_end: f64, steps: usize) -> Vec<f64> {
    assert!(t_end > 0.0 && steps >= 1);
    (0..=steps)
        .map(|k| t_end * k as f64 / steps as f64)
        .collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 {
        return Err(Error::Config("grid must start at 0 with >= 2 points".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Initial law: a weighted atom cloud or an arbitrary sampler.
#[derive(Clone)]
pub enum InitialLaw {
    Cloud(ProbCloud),
    Sampler(Arc<dyn Fn(&mut ChaCha8Rng) -> DVector<f64> + Send + Sync>),
}

impl InitialLaw {
    pub fn dirac(x: DVector<f64>) -> Self {
        InitialLaw::Cloud(ProbCloud::dirac(x))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            InitialLaw::Cloud(cloud) => cloud.points()[cloud.sample_index(rng)].clone(),
            InitialLaw::Sampler(f) => f(rng),
        }
    }
}

/// An accepted jump on a recorded path.
#[derive(Debug, Clone)]
pub struct JumpEvent {
    pub time: f64,
    pub mark_label: f64,
    pub displacement: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Record accepted jumps per path.
    pub record_jumps: bool,
    /// Keep going when paths diverge; the ensemble reports the count and the
    /// caller decides. Default is to fail the run.
    pub allow_diverged: bool,
    /// Record only every k-th grid time (plus the endpoints). The dynamics
    /// still step through the full grid; this only thins the stored states,
    /// which dominate memory for large ensembles on fine grids.
    pub record_stride: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record_jumps: false,
            allow_diverged: false,
            record_stride: 1,
        }
    }
}

fn recorded_grid(grid: &[f64], stride: usize) -> Vec<f64> {
    let last = grid.len() - 1;
    grid.iter()
        .enumerate()
        .filter(|(k, _)| k % stride == 0 || *k == last)
        .map(|(_, &t)| t)
        .collect()
}

/// N recorded paths on a shared grid with per-path RNG provenance.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: Vec<f64>,
    /// `states[n][k]` is path `n` at `grid[k]`.
    states: Vec<Vec<DVector<f64>>>,
    jump_log: Option<Vec<Vec<JumpEvent>>>,
    seed: u64,
    epsilon: Option<f64>,
    diverged: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub grid: GridSummary,
    pub sup_norm_moment: f64,
    pub diverged_count: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub t_end: f64,
    pub steps: usize,
}

impl PathEnsemble {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn states(&self) -> &[Vec<DVector<f64>>] {
        &self.states
    }

    pub fn jump_log(&self) -> Option<&[Vec<JumpEvent>]> {
        self.jump_log.as_deref()
    }

    pub fn diverged(&self) -> &[usize] {
        &self.diverged
    }

    fn grid_index_at(&self, t: f64) -> Result<usize> {
        let t_end = *self.grid.last().unwrap();
        if !(t.is_finite() && (0.0..=t_end).contains(&t)) {
            return Err(Error::TimeOutOfRange { t, horizon: t_end });
        }
        Ok(match self
            .grid
            .binary_search_by(|g| g.partial_cmp(&t).unwrap())
        {
            Ok(k) => k,
            Err(k) => k - 1,
        })
    }

    /// Equal-weight cloud of the recorded states at the grid time `<= t`.
    pub fn marginal_at(&self, t: f64) -> Result<ProbCloud> {
        let k = self.grid_index_at(t)?;
        ProbCloud::equal_weights(self.states.iter().map(|path| path[k].clone()).collect())
    }

    /// `(1/N) sum_n max_k |X^n_{t_k}|`, the empirical sup-norm moment.
    pub fn sup_norm_moment(&self) -> f64 {
        let n = self.states.len() as f64;
        self.states
            .iter()
            .map(|path| path.iter().map(|x| x.norm()).fold(0.0, f64::max))
            .sum::<f64>()
            / n
    }

    /// Mean modulus table `E|X_{S + beta} - X_S|` over anchors and lags,
    /// with the fitted constant `max value / (beta + sqrt(beta))`.
    pub fn aldous_modulus(&self, betas: &[f64], anchors: &[f64]) -> Result<AldousTable> {
        let t_end = *self.grid.last().unwrap();
        let mut entries = Vec::new();
        let mut c_hat: f64 = 0.0;
        for &s in anchors {
            for &beta in betas {
                if !(beta > 0.0) || s + beta > t_end + 1e-12 {
                    return Err(Error::Config(format!(
                        "anchor {s} + beta {beta} exceeds horizon {t_end}"
                    )));
                }
                let ks = self.grid_index_at(s)?;
                let ke = self.grid_index_at((s + beta).min(t_end))?;
                let value = self
                    .states
                    .iter()
                    .map(|path| (&path[ke] - &path[ks]).norm())
                    .sum::<f64>()
                    / self.states.len() as f64;
                c_hat = c_hat.max(value / (beta + beta.sqrt()));
                entries.push(AldousEntry {
                    anchor: s,
                    beta,
                    value,
                });
            }
        }
        Ok(AldousTable { entries, c_hat })
    }

    /// The deterministic prefix of the ensemble: the first `k` paths. Handy
    /// when a statistic's cost scales with N but its tolerance is set by its
    /// own standard error.
    pub fn subsample(&self, k: usize) -> PathEnsemble {
        let k = k.min(self.states.len());
        PathEnsemble {
            grid: self.grid.clone(),
            states: self.states[..k].to_vec(),
            jump_log: self.jump_log.as_ref().map(|l| l[..k].to_vec()),
            seed: self.seed,
            epsilon: self.epsilon,
            diverged: self.diverged.iter().copied().filter(|&n| n < k).collect(),
        }
    }

    pub fn summary(&self) -> EnsembleSummary {
        EnsembleSummary {
            n_paths: self.n_paths(),
            grid: GridSummary {
                t_end: *self.grid.last().unwrap(),
                steps: self.grid.len() - 1,
            },
            sup_norm_moment: self.sup_norm_moment(),
            diverged_count: self.diverged.len(),
            seed: self.seed,
            epsilon: self.epsilon,
        }
    }

    /// Writes `path_id, t, x_1..x_d` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let dim = self.states[0][0].len();
        let coords: Vec<String> = (1..=dim).map(|i| format!("x_{i}")).collect();
        writeln!(out, "path_id,t,{}", coords.join(","))?;
        for (n, path) in self.states.iter().enumerate() {
            for (k, x) in path.iter().enumerate() {
                let cs: Vec<String> = x.iter().map(|c| format!("{c:.17e}")).collect();
                writeln!(out, "{n},{:.17e},{}", self.grid[k], cs.join(","))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AldousEntry {
    pub anchor: f64,
    pub beta: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AldousTable {
    pub entries: Vec<AldousEntry>,
    pub c_hat: f64,
}

struct PathResult {
    states: Vec<DVector<f64>>,
    jumps: Vec<JumpEvent>,
    diverged: bool,
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

fn is_sane(x: &DVector<f64>) -> bool {
    x.iter().all(|c| c.is_finite()) && x.norm() <= DIVERGENCE_THRESHOLD
}

fn assemble(
    grid: &[f64],
    results: Vec<PathResult>,
    seed: u64,
    epsilon: Option<f64>,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    let diverged: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.diverged)
        .map(|(n, _)| n)
        .collect();
    if !diverged.is_empty() && !opts.allow_diverged {
        return Err(Error::DivergedPaths {
            diverged: diverged.len(),
            total: results.len(),
            threshold: DIVERGENCE_THRESHOLD,
        });
    }
    let jump_log = if opts.record_jumps {
        Some(results.iter().map(|r| r.jumps.clone()).collect())
    } else {
        None
    };
    Ok(PathEnsemble {
        grid: recorded_grid(grid, opts.record_stride),
        states: results.into_iter().map(|r| r.states).collect(),
        jump_log,
        seed,
        epsilon,
        diverged,
    })
}

/// Simulates the base SDE: Euler-Maruyama between exact thinned jump times.
pub fn simulate_base_paths(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    init: &InitialLaw,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_base_paths_with(
        coeffs,
        kernel,
        init,
        grid,
        n_paths,
        seed,
        &SimOptions::default(),
    )
}

pub fn simulate_base_paths_with(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    init: &InitialLaw,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    validate_grid(grid)?;
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    if opts.record_stride == 0 {
        return Err(Error::Config("record_stride must be at least 1".into()));
    }
    if *grid.last().unwrap() > coeffs.horizon() + 1e-12 {
        return Err(Error::Config("grid exceeds coefficient horizon".into()));
    }
    let dim = coeffs.dim();
    let candidate_rate = kernel.candidate_intensity();

    let results: Vec<PathResult> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path_id| {
            let mut init_rng = path_stream(seed, path_id, StreamPurpose::Init);
            let mut gauss = path_stream(seed, path_id, StreamPurpose::Gaussian);
            let mut clock = path_stream(seed, path_id, StreamPurpose::Clock);
            let mut mark_rng = path_stream(seed, path_id, StreamPurpose::Mark);
            let mut thin = path_stream(seed, path_id, StreamPurpose::ThinningU);

            let mut x = init.sample(&mut init_rng);
            let mut states = Vec::with_capacity(grid.len());
            states.push(x.clone());
            let mut jumps = Vec::new();
            let mut diverged = !is_sane(&x);

            let mut next_jump = exp_draw(&mut clock, candidate_rate);
            for (step, win) in grid.windows(2).enumerate() {
                let (mut t_cur, t_next) = (win[0], win[1]);
                if !diverged {
                    while next_jump <= t_next {
                        euler_step(coeffs, t_cur, next_jump - t_cur, &mut x, &mut gauss, dim);
                        if let Some(mark) = kernel.sample_mark(&mut mark_rng) {
                            let u: f64 = thin.random::<f64>() * kernel.rate_majorant();
                            if u <= kernel.rate(next_jump, mark.label, &x) {
                                let disp = kernel.displacement(next_jump, mark.label, &x);
                                x += &disp;
                                jumps.push(JumpEvent {
                                    time: next_jump,
                                    mark_label: mark.label,
                                    displacement: disp,
                                });
                            }
                        }
                        t_cur = next_jump;
                        next_jump += exp_draw(&mut clock, candidate_rate);
                    }
                    euler_step(coeffs, t_cur, t_next - t_cur, &mut x, &mut gauss, dim);
                    diverged = !is_sane(&x);
                }
                if (step + 1) % opts.record_stride == 0 || step + 2 == grid.len() {
                    states.push(x.clone());
                }
            }
            PathResult {
                states,
                jumps,
                diverged,
            }
        })
        .collect();

    assemble(grid, results, seed, None, opts)
}

fn euler_step(
    coeffs: &CoefficientSet,
    t: f64,
    dt: f64,
    x: &mut DVector<f64>,
    gauss: &mut ChaCha8Rng,
    dim: usize,
) {
    if dt <= 0.0 {
        return;
    }
    let b = coeffs.drift(t, x);
    let sigma = coeffs.sigma(t, x);
    let xi = normal_vec(gauss, dim);
    *x += b * dt + sigma * xi * dt.sqrt();
}

/// Precomputed per-interval tables for the regularized simulator: the flow
/// cloud at the interval's left edge with drift/diffusion evaluated once per
/// atom (shared across all paths).
struct IntervalTable {
    atoms: Vec<DVector<f64>>,
    log_w: Vec<f64>,
    drifts: Vec<DVector<f64>>,
    amats: Vec<DMatrix<f64>>,
    /// Flat `(x_i, b_i, a_i)` copies in 1D, so the inner stepping loop runs
    /// allocation-free.
    flat1: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl IntervalTable {
    fn build(coeffs: &CoefficientSet, cloud: &ProbCloud, t: f64) -> Self {
        let atoms: Vec<DVector<f64>> = cloud.points().to_vec();
        let log_w: Vec<f64> = cloud.weights().iter().map(|w| w.ln()).collect();
        let drifts: Vec<DVector<f64>> = atoms.iter().map(|x| coeffs.drift(t, x)).collect();
        let amats: Vec<DMatrix<f64>> = atoms.iter().map(|x| coeffs.a(t, x)).collect();
        let flat1 = (coeffs.dim() == 1).then(|| {
            (
                atoms.iter().map(|x| x[0]).collect(),
                drifts.iter().map(|b| b[0]).collect(),
                amats.iter().map(|a| a[(0, 0)]).collect(),
            )
        });
        Self {
            atoms,
            log_w,
            drifts,
            amats,
            flat1,
        }
    }

    /// Allocation-free tilt-averaged `(b^eps, a^eps)` at a scalar state.
    fn mollified_coeffs_1d(&self, y: f64, eps: f64) -> (f64, f64) {
        let (xs, bs, aa) = self.flat1.as_ref().expect("1D table");
        let inv = 1.0 / (2.0 * eps);
        let mut max = f64::NEG_INFINITY;
        for (x, lw) in xs.iter().zip(&self.log_w) {
            let l = lw - (x - y) * (x - y) * inv;
            if l > max {
                max = l;
            }
        }
        let (mut total, mut b, mut a) = (0.0, 0.0, 0.0);
        for i in 0..xs.len() {
            let d = xs[i] - y;
            let l = self.log_w[i] - d * d * inv - max;
            // Atoms 45 log-units below the mode are exp-underflow noise
            // (< 3e-20 of the total); skipping them skips most exp calls.
            if l < -45.0 {
                continue;
            }
            let p = l.exp();
            total += p;
            b += p * bs[i];
            a += p * aa[i];
        }
        (b / total, a / total)
    }

    /// Tilt softmax over the atoms at query point `y`.
    fn tilt(&self, y: &DVector<f64>, eps: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * eps);
        let mut logs: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.log_w)
            .map(|(x, lw)| lw - (x - y).norm_squared() * inv)
            .collect();
        let max = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
        let mut total = 0.0;
        for l in logs.iter_mut() {
            // See `mollified_coeffs_1d`: far-field atoms underflow anyway.
            *l = if *l - max < -45.0 { 0.0 } else { (*l - max).exp() };
            total += *l;
        }
        for l in logs.iter_mut() {
            *l /= total;
        }
        logs
    }

    fn mollified_coeffs(&self, y: &DVector<f64>, eps: f64, dim: usize) -> (DVector<f64>, DMatrix<f64>) {
        let probs = self.tilt(y, eps);
        let mut b = DVector::zeros(dim);
        let mut a = DMatrix::zeros(dim, dim);
        for ((bi, ai), &p) in self.drifts.iter().zip(&self.amats).zip(&probs) {
            if p > 0.0 {
                b.axpy(p, bi, 1.0);
                // a += p * ai
                a.iter_mut().zip(ai.iter()).for_each(|(t, &s)| *t += p * s);
            }
        }
        (b, a)
    }
}

/// Simulates the regularized SDE against a fixed marginal flow: drift and
/// diffusion are the mollified coefficients of the flow's cloud at the current
/// time; jump anchors are exact tilt draws, realizing the `f_s(dx)`-marginal
/// restricted by the tilt indicator.
pub fn simulate_regularized_paths(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    flow: &MarginalFlow,
    eps: f64,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_regularized_paths_with(
        coeffs,
        kernel,
        flow,
        eps,
        grid,
        n_paths,
        seed,
        &SimOptions::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_regularized_paths_with(
    coeffs: &CoefficientSet,
    kernel: &JumpKernel,
    flow: &MarginalFlow,
    eps: f64,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    validate_grid(grid)?;
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("eps = {eps} must lie in (0, 1)")));
    }
    if opts.record_stride == 0 {
        return Err(Error::Config("record_stride must be at least 1".into()));
    }
    // The flow grid must refine (or equal) the simulation grid so each
    // interval's left edge looks up an exact flow time.
    for &t in grid {
        let k = flow.index_at(t);
        if (flow.grid()[k] - t).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "flow grid does not contain simulation grid time {t}"
            )));
        }
    }
    if *grid.last().unwrap() > coeffs.horizon() + 1e-12 {
        return Err(Error::Config("grid exceeds coefficient horizon".into()));
    }

    let dim = coeffs.dim();
    let candidate_rate = kernel.candidate_intensity();
    let sqrt_eps = eps.sqrt();

    let tables: Vec<IntervalTable> = grid[..grid.len() - 1]
        .par_iter()
        .map(|&t| IntervalTable::build(coeffs, flow.cloud_at(t), t))
        .collect();
    let init_cloud = &flow.clouds()[0];

    let results: Vec<PathResult> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path_id| {
            let mut init_rng = path_stream(seed, path_id, StreamPurpose::Init);
            let mut gauss = path_stream(seed, path_id, StreamPurpose::Gaussian);
            let mut clock = path_stream(seed, path_id, StreamPurpose::Clock);
            let mut mark_rng = path_stream(seed, path_id, StreamPurpose::Mark);
            let mut thin = path_stream(seed, path_id, StreamPurpose::ThinningU);
            let mut tilt_rng = path_stream(seed, path_id, StreamPurpose::Tilt);

            // L(X_0) = f_0 * phi_eps: draw an atom, displace by sqrt(eps) xi.
            let idx = init_cloud.sample_index(&mut init_rng);
            let mut x =
                &init_cloud.points()[idx] + normal_vec(&mut init_rng, dim) * sqrt_eps;
            let mut states = Vec::with_capacity(grid.len());
            states.push(x.clone());
            let mut jumps = Vec::new();
            let mut diverged = !is_sane(&x);

            let mut next_jump = exp_draw(&mut clock, candidate_rate);
            for (step, win) in grid.windows(2).enumerate() {
                let table = &tables[step];
                let (mut t_cur, t_next) = (win[0], win[1]);
                if !diverged {
                    while next_jump <= t_next {
                        mollified_euler_step(
                            table, eps, t_cur, next_jump - t_cur, &mut x, &mut gauss, dim,
                        );
                        if let Some(mark) = kernel.sample_mark(&mut mark_rng) {
                            // Anchor draw: exact categorical tilt against the
                            // flow cloud at the candidate time.
                            let cloud = flow.cloud_at(next_jump);
                            let view = MollifiedView::new(cloud, eps)
                                .expect("eps validated above");
                            let anchor_idx =
                                crate::empirical::sample_tilted(&view, &x, &mut tilt_rng);
                            let anchor = &cloud.points()[anchor_idx];
                            let u: f64 = thin.random::<f64>() * kernel.rate_majorant();
                            if u <= kernel.rate(next_jump, mark.label, anchor) {
                                let disp = kernel.displacement(next_jump, mark.label, anchor);
                                x += &disp;
                                jumps.push(JumpEvent {
                                    time: next_jump,
                                    mark_label: mark.label,
                                    displacement: disp,
                                });
                            }
                        }
                        t_cur = next_jump;
                        next_jump += exp_draw(&mut clock, candidate_rate);
                    }
                    mollified_euler_step(table, eps, t_cur, t_next - t_cur, &mut x, &mut gauss, dim);
                    diverged = !is_sane(&x);
                }
                if (step + 1) % opts.record_stride == 0 || step + 2 == grid.len() {
                    states.push(x.clone());
                }
            }
            PathResult {
                states,
                jumps,
                diverged,
            }
        })
        .collect();

    assemble(grid, results, seed, Some(eps), opts)
}

fn mollified_euler_step(
    table: &IntervalTable,
    eps: f64,
    _t: f64,
    dt: f64,
    x: &mut DVector<f64>,
    gauss: &mut ChaCha8Rng,
    dim: usize,
) {
    if dt <= 0.0 {
        return;
    }
    if dim == 1 {
        // 1D fast path: no allocations, sigma^eps is the scalar square root.
        let (b, a) = table.mollified_coeffs_1d(x[0], eps);
        let xi: f64 = StandardNormal.sample(gauss);
        x[0] += b * dt + a.max(0.0).sqrt() * xi * dt.sqrt();
    } else {
        let (b, a) = table.mollified_coeffs(x, eps, dim);
        let xi = normal_vec(gauss, dim);
        let sigma = psd_sqrt(&a).expect("convex combination of PSD matrices is PSD");
        *x += b * dt + sigma * xi * dt.sqrt();
    }
}

/// Convenience: the mollified density value of the flow at `(t, y)`, used by
/// callers that compare a regularized ensemble marginal against `f_t^eps`.
pub fn flow_mollified_density(flow: &MarginalFlow, eps: f64, t: f64, y: &DVector<f64>) -> Result<f64> {
    let view = MollifiedView::new(flow.cloud_at(t), eps)?;
    Ok(mollified_density(&view, y))
}

/// Samples `n` points from `f_t * phi_eps` (atom draw plus Gaussian
/// displacement): the reference cloud for the marginal identity check.
pub fn smoothed_cloud_sample(
    cloud: &ProbCloud,
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<ProbCloud> {
    if !(eps > 0.0) {
        return Err(Error::Domain("eps must be positive".into()));
    }
    let dim = cloud.dim();
    let sqrt_eps = eps.sqrt();
    let points: Vec<DVector<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_stream(seed, i, StreamPurpose::Init);
            let idx = cloud.sample_index(&mut rng);
            &cloud.points()[idx] + normal_vec(&mut rng, dim) * sqrt_eps
        })
        .collect();
    ProbCloud::equal_weights(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::wasserstein1_1d;
    use crate::model::Mark;
    use approx::assert_relative_eq;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_column_slice(&[x])
    }

    fn unit_jump_kernel(rate: f64) -> JumpKernel {
        JumpKernel::new(
            vec![Mark {
                weight: 1.0,
                label: 0.0,
            }],
            Arc::new(|_t, _w, _x| v1(1.0)),
            Arc::new(move |_t, _w, _x| rate),
            rate.max(1.0),
        )
    }

    #[test]
    fn zero_dynamics_paths_are_exactly_constant() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(1.25));
        let grid = uniform_grid(1.0, 16);
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 50, 3).unwrap();
        for path in ens.states() {
            for x in path {
                assert_eq!(x[0], 1.25);
            }
        }
    }

    #[test]
    fn pure_jump_terminal_law_is_poisson() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = unit_jump_kernel(1.0);
        let init = InitialLaw::dirac(v1(0.0));
        let grid = uniform_grid(1.0, 10);
        let n = 40_000;
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, n, 7).unwrap();
        let marg = ens.marginal_at(1.0).unwrap();
        let p0 = marg
            .points()
            .iter()
            .filter(|x| x[0].abs() < 1e-9)
            .count() as f64
            / n as f64;
        // Exact Poisson pmf oracle: P(X_1 = 0) = e^{-1}.
        let p = (-1.0f64).exp();
        let half_width = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((p0 - p).abs() < half_width, "p0 = {p0}, expected {p}");
    }

    #[test]
    fn pure_drift_matches_ode_solution() {
        let coeffs = CoefficientSet::new(
            1,
            1.0,
            Arc::new(|_t, x: &DVector<f64>| -x),
            Arc::new(|_t, _x| DMatrix::zeros(1, 1)),
        );
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(2.0));
        let grid = uniform_grid(1.0, 1000);
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 1, 1).unwrap();
        let x1 = ens.states()[0].last().unwrap()[0];
        let exact = 2.0 * (-1.0f64).exp();
        assert!((x1 - exact).abs() < 5e-3, "x1 = {x1}, exact = {exact}");
    }

    #[test]
    fn drift_error_halves_with_step() {
        let coeffs = CoefficientSet::new(
            1,
            1.0,
            Arc::new(|_t, x: &DVector<f64>| -x),
            Arc::new(|_t, _x| DMatrix::zeros(1, 1)),
        );
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(2.0));
        let exact = 2.0 * (-1.0f64).exp();

        let err = |steps: usize| {
            let grid = uniform_grid(1.0, steps);
            let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 1, 1).unwrap();
            (ens.states()[0].last().unwrap()[0] - exact).abs()
        };
        let ratio = err(256) / err(128);
        assert!(
            (0.3..=0.7).contains(&ratio),
            "halving ratio {ratio} outside first-order band"
        );
    }

    #[test]
    fn ensembles_are_bit_reproducible() {
        let coeffs = CoefficientSet::new(
            1,
            1.0,
            Arc::new(|_t, x: &DVector<f64>| -x),
            Arc::new(|_t, _x| DMatrix::identity(1, 1)),
        );
        let kernel = unit_jump_kernel(0.7);
        let init = InitialLaw::dirac(v1(0.5));
        let grid = uniform_grid(1.0, 50);
        let a = simulate_base_paths(&coeffs, &kernel, &init, &grid, 200, 99).unwrap();
        let b = simulate_base_paths(&coeffs, &kernel, &init, &grid, 200, 99).unwrap();
        for (pa, pb) in a.states().iter().zip(b.states()) {
            for (xa, xb) in pa.iter().zip(pb) {
                assert_eq!(xa[0].to_bits(), xb[0].to_bits());
            }
        }
    }

    #[test]
    fn thinning_accepted_counts_are_poisson() {
        // State-independent kappa = 0.6 under majorant 1 with nu(F) = 2:
        // accepted count on [0, 1] ~ Poisson(1.2).
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::new(
            vec![
                Mark {
                    weight: 1.5,
                    label: 0.0,
                },
                Mark {
                    weight: 0.5,
                    label: 1.0,
                },
            ],
            Arc::new(|_t, _w, _x| v1(0.0)),
            Arc::new(|_t, _w, _x| 0.6),
            1.0,
        );
        let init = InitialLaw::dirac(v1(0.0));
        let grid = uniform_grid(1.0, 4);
        let n = 10_000;
        let ens = simulate_base_paths_with(
            &coeffs,
            &kernel,
            &init,
            &grid,
            n,
            13,
            &SimOptions {
                record_jumps: true,
                allow_diverged: false,
                ..SimOptions::default()
            },
        )
        .unwrap();

        let lambda = 1.2f64;
        let mut observed = [0usize; 7];
        for jumps in ens.jump_log().unwrap() {
            let count = jumps.len().min(6);
            observed[count] += 1;
        }
        // Poisson pmf with the tail folded into the last bin.
        let mut expected = [0.0f64; 7];
        let mut pmf = (-lambda).exp();
        let mut cum = 0.0;
        for (k, e) in expected.iter_mut().enumerate().take(6) {
            *e = pmf * n as f64;
            cum += pmf;
            pmf *= lambda / (k as f64 + 1.0);
        }
        expected[6] = (1.0 - cum) * n as f64;
        let chi2: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        // 1% critical value, 6 degrees of freedom.
        assert!(chi2 < 16.81, "chi-square statistic {chi2} rejects Poisson");
    }

    #[test]
    fn pure_jump_chain_is_piecewise_constant() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = unit_jump_kernel(2.0);
        let init = InitialLaw::dirac(v1(0.0));
        let grid = uniform_grid(1.0, 64);
        let ens = simulate_base_paths_with(
            &coeffs,
            &kernel,
            &init,
            &grid,
            100,
            5,
            &SimOptions {
                record_jumps: true,
                allow_diverged: false,
                ..SimOptions::default()
            },
        )
        .unwrap();
        for (path, jumps) in ens.states().iter().zip(ens.jump_log().unwrap()) {
            for (k, win) in ens.grid().windows(2).enumerate() {
                let jumps_inside = jumps
                    .iter()
                    .filter(|j| j.time > win[0] && j.time <= win[1])
                    .map(|j| j.displacement[0])
                    .sum::<f64>();
                assert_eq!(path[k + 1][0], path[k][0] + jumps_inside);
            }
        }
    }

    #[test]
    fn marginal_at_basics() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(4.0));
        let grid = uniform_grid(1.0, 4);
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 3, 0).unwrap();
        let m0 = ens.marginal_at(0.0).unwrap();
        assert_eq!(m0.len(), 3);
        assert!(m0.points().iter().all(|x| x[0] == 4.0));
        // Constant paths: identical marginal at any t, left-continuous lookup.
        let m = ens.marginal_at(0.6).unwrap();
        assert!(m.points().iter().all(|x| x[0] == 4.0));

        let single = simulate_base_paths(&coeffs, &kernel, &init, &grid, 1, 0).unwrap();
        assert_eq!(single.marginal_at(1.0).unwrap().len(), 1);
    }

    #[test]
    fn sup_norm_moment_on_decaying_drift() {
        let coeffs = CoefficientSet::new(
            1,
            1.0,
            Arc::new(|_t, x: &DVector<f64>| -x),
            Arc::new(|_t, _x| DMatrix::zeros(1, 1)),
        );
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(2.0));
        let grid = uniform_grid(1.0, 100);
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 10, 0).unwrap();
        // Monotone decay: the sup is attained at t = 0.
        assert_relative_eq!(ens.sup_norm_moment(), 2.0, epsilon = 1e-12);

        let constant = simulate_base_paths(
            &CoefficientSet::zero(1, 1.0),
            &kernel,
            &InitialLaw::dirac(v1(-3.0)),
            &grid,
            10,
            0,
        )
        .unwrap();
        assert_eq!(constant.sup_norm_moment(), 3.0);
    }

    #[test]
    fn aldous_modulus_constant_and_brownian() {
        let kernel = JumpKernel::none(1);
        let grid = uniform_grid(1.0, 200);

        let constant = simulate_base_paths(
            &CoefficientSet::zero(1, 1.0),
            &kernel,
            &InitialLaw::dirac(v1(1.0)),
            &grid,
            100,
            0,
        )
        .unwrap();
        let table = constant
            .aldous_modulus(&[0.1, 0.25], &[0.0, 0.5])
            .unwrap();
        assert!(table.entries.iter().all(|e| e.value == 0.0));
        assert_eq!(table.c_hat, 0.0);

        // Pure Brownian: E|X_{S+beta} - X_S| = sqrt(2 beta / pi).
        let brownian = CoefficientSet::new(
            1,
            1.0,
            Arc::new(|_t, _x| DVector::zeros(1)),
            Arc::new(|_t, _x| DMatrix::identity(1, 1)),
        );
        let n = 20_000;
        let ens = simulate_base_paths(
            &brownian,
            &kernel,
            &InitialLaw::dirac(v1(0.0)),
            &grid,
            n,
            21,
        )
        .unwrap();
        let betas = [0.05, 0.1, 0.2];
        let table = ens.aldous_modulus(&betas, &[0.0, 0.4]).unwrap();
        let mut prev = 0.0;
        for e in table.entries.iter().filter(|e| e.anchor == 0.0) {
            let oracle = (2.0 * e.beta / std::f64::consts::PI).sqrt();
            // Half-normal mean and spread: SE ~ sqrt((1 - 2/pi) beta / n).
            let se = ((1.0 - 2.0 / std::f64::consts::PI) * e.beta / n as f64).sqrt();
            assert!(
                (e.value - oracle).abs() < 3.0 * se,
                "beta = {}, value = {}, oracle = {oracle}",
                e.beta,
                e.value
            );
            assert!(e.value >= prev - 3.0 * se, "not nondecreasing in beta");
            prev = e.value;
            // sqrt(2/pi) sqrt(beta) <= sqrt(2/pi) (beta + sqrt(beta)).
            assert!(e.value <= 0.85 * (e.beta + e.beta.sqrt()));
        }
        assert!(table.c_hat.is_finite());
    }

    #[test]
    fn diverged_paths_fail_by_default() {
        let coeffs = CoefficientSet::new(
            1,
            1.0,
            // Super-linear drift: guaranteed blow-up under Euler.
            Arc::new(|_t, x: &DVector<f64>| v1(x[0] * x[0] * x[0] * 1e6 + 1e6)),
            Arc::new(|_t, _x| DMatrix::zeros(1, 1)),
        );
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(10.0));
        let grid = uniform_grid(1.0, 50);
        let err = simulate_base_paths(&coeffs, &kernel, &init, &grid, 4, 0);
        assert!(matches!(err, Err(Error::DivergedPaths { .. })));
        let ens = simulate_base_paths_with(
            &coeffs,
            &kernel,
            &init,
            &grid,
            4,
            0,
            &SimOptions {
                record_jumps: false,
                allow_diverged: true,
                ..SimOptions::default()
            },
        )
        .unwrap();
        assert_eq!(ens.diverged().len(), 4);
    }

    #[test]
    fn regularized_single_particle_flow_is_shifted_smoothed_poisson() {
        // f_t = delta_0 constant; b = sigma = 0; unit jumps at rate 1.
        // Then X_t^eps ~ sqrt(eps) xi + Poisson(t).
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = unit_jump_kernel(1.0);
        let grid = uniform_grid(1.0, 10);
        let flow = MarginalFlow::new(
            grid.clone(),
            grid.iter().map(|_| ProbCloud::dirac(v1(0.0))).collect(),
        )
        .unwrap();
        let eps = 0.25;
        let n = 30_000;
        let ens =
            simulate_regularized_paths(&coeffs, &kernel, &flow, eps, &grid, n, 17).unwrap();
        let marg = ens.marginal_at(1.0).unwrap();

        // Direct draws from the closed form.
        let direct: Vec<DVector<f64>> = (0..n as u64)
            .map(|i| {
                let mut rng = path_stream(4242, i, StreamPurpose::Init);
                let mut count = 0.0;
                let mut t = exp_draw(&mut rng, 1.0);
                while t <= 1.0 {
                    count += 1.0;
                    t += exp_draw(&mut rng, 1.0);
                }
                let xi: f64 = StandardNormal.sample(&mut rng);
                v1(count + eps.sqrt() * xi)
            })
            .collect();
        let reference = ProbCloud::equal_weights(direct).unwrap();
        let d = wasserstein1_1d(&marg, &reference).unwrap();
        assert!(d < 0.03, "W1 = {d}");
    }

    #[test]
    fn regularized_no_jump_marginal_matches_smoothed_flow() {
        // kappa = 0: pure mollified diffusion; with the trivial constant flow
        // delta_2, the marginal must stay (delta_2 * phi_eps).
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::none(1);
        let grid = uniform_grid(1.0, 10);
        let flow = MarginalFlow::new(
            grid.clone(),
            grid.iter().map(|_| ProbCloud::dirac(v1(2.0))).collect(),
        )
        .unwrap();
        let eps = 0.1;
        let n = 20_000;
        let ens =
            simulate_regularized_paths(&coeffs, &kernel, &flow, eps, &grid, n, 23).unwrap();
        let marg = ens.marginal_at(1.0).unwrap();
        let reference = smoothed_cloud_sample(flow.cloud_at(1.0), eps, n, 555).unwrap();
        let d = wasserstein1_1d(&marg, &reference).unwrap();
        assert!(d < 0.02, "W1 = {d}");
    }

    #[test]
    fn regularized_requires_matching_flow_grid() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::none(1);
        let flow = MarginalFlow::new(
            vec![0.0, 0.7],
            vec![ProbCloud::dirac(v1(0.0)), ProbCloud::dirac(v1(0.0))],
        )
        .unwrap();
        let grid = uniform_grid(1.0, 2);
        let err = simulate_regularized_paths(&coeffs, &kernel, &flow, 0.1, &grid, 2, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn csv_and_summary_outputs() {
        let coeffs = CoefficientSet::zero(1, 1.0);
        let kernel = JumpKernel::none(1);
        let init = InitialLaw::dirac(v1(1.0));
        let grid = uniform_grid(1.0, 2);
        let ens = simulate_base_paths(&coeffs, &kernel, &init, &grid, 2, 9).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path_id,t,x_1\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);

        let summary = ens.summary();
        assert_eq!(summary.n_paths, 2);
        assert_eq!(summary.diverged_count, 0);
        assert_eq!(summary.seed, 9);
        assert_eq!(summary.grid.steps, 2);
    }
}
