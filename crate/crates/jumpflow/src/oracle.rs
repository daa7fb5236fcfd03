//! Ground truth: registered scenarios with closed-form marginals where they
//! exist, and an independent 1D finite-volume solver for the nonlocal
//! Fokker-Planck equation used to cross-validate the Monte Carlo pipeline.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::empirical::{MarginalFlow, ProbCloud};
use crate::error::{Error, Result};
use crate::model::{CoefficientSet, JumpKernel, Mark};

/// Frozen per-scenario tolerance budget: discretization-bias coefficients for
/// verdicts and W1 budgets at the reference resolutions used in the
/// acceptance suite.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioTolerances {
    /// Weak-residual bias coefficient: |R| <= residual_c_fit * dt.
    pub residual_c_fit: f64,
    /// Martingale-statistic bias coefficient: |K| <= 3 SE + martingale_c_fit * dt.
    pub martingale_c_fit: f64,
    /// W1 budget for MC marginals at N = 1e5, dt = 1e-3.
    pub mc_w1_tol: f64,
    /// W1 budget for the grid solver at dx = 0.01, L = 30.
    pub grid_w1_tol: f64,
}

type MarginalFn = dyn Fn(f64) -> ProbCloud + Send + Sync;

/// A registered problem: coefficients, kernel, initial law, optional exact
/// marginals, and its frozen tolerance budget.
#[derive(Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub coeffs: CoefficientSet,
    pub kernel: JumpKernel,
    pub initial: ProbCloud,
    pub notes: &'static str,
    pub tol: ScenarioTolerances,
    exact: Option<Arc<MarginalFn>>,
    exact_mean: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl Scenario {
    /// Exact marginal law at `t`, when the scenario has one.
    pub fn exact_marginal(&self, t: f64) -> Option<ProbCloud> {
        self.exact.as_ref().map(|f| f(t))
    }

    /// Exact first moment at `t`, when known in closed form.
    pub fn exact_mean(&self, t: f64) -> Option<f64> {
        self.exact_mean.as_ref().map(|f| f(t))
    }

    /// Exact marginal flow on `grid`, when the scenario has one.
    pub fn exact_flow(&self, grid: &[f64]) -> Option<MarginalFlow> {
        let f = self.exact.as_ref()?;
        let clouds = grid.iter().map(|&t| f(t)).collect();
        Some(MarginalFlow::new(grid.to_vec(), clouds).expect("exact clouds on valid grid"))
    }
}

pub const SCENARIO_NAMES: [&str; 5] = [
    "pure-drift",
    "compound-poisson",
    "ou-jump",
    "rough-drift",
    "two-sided-jumps",
];

fn v1(x: f64) -> DVector<f64> {
    DVector::from_column_slice(&[x])
}

/// Poisson atoms `k = 0..k_max` shifted by `offset`, tail below 1e-12.
pub fn poisson_cloud(lambda: f64, offset: f64) -> ProbCloud {
    if lambda <= 0.0 {
        return ProbCloud::dirac(v1(offset));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut pmf = (-lambda).exp();
    let mut k = 0.0;
    let mut cum = 0.0;
    while cum < 1.0 - 1e-12 {
        points.push(v1(offset + k));
        weights.push(pmf);
        cum += pmf;
        k += 1.0;
        pmf *= lambda / k;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    ProbCloud::new(points, weights).unwrap()
}

const HORIZON: f64 = 2.0;

fn unit_jump_kernel(rate: f64) -> JumpKernel {
    JumpKernel::new(
        vec![Mark {
            weight: rate,
            label: 0.0,
        }],
        Arc::new(|_t, _w, _x| v1(1.0)),
        Arc::new(|_t, _w, _x| 1.0),
        1.0,
    )
}

/// Looks up a registered scenario by name.
pub fn scenario(name: &str) -> Result<Scenario> {
    match name {
        "pure-drift" => Ok(Scenario {
            name: "pure-drift",
            coeffs: CoefficientSet::new(
                1,
                HORIZON,
                Arc::new(|_t, x: &DVector<f64>| -x),
                Arc::new(|_t, _x| DMatrix::zeros(1, 1)),
            ),
            kernel: JumpKernel::none(1),
            initial: ProbCloud::dirac(v1(2.0)),
            notes: "deterministic linear decay; every marginal is a point mass",
            tol: ScenarioTolerances {
                residual_c_fit: 5.0,
                martingale_c_fit: 1.0,
                mc_w1_tol: 0.02,
                grid_w1_tol: 0.03,
            },
            exact: Some(Arc::new(|t| ProbCloud::dirac(v1(2.0 * (-t).exp())))),
            exact_mean: Some(Arc::new(|t| 2.0 * (-t).exp())),
        }),
        "compound-poisson" => Ok(Scenario {
            name: "compound-poisson",
            coeffs: CoefficientSet::zero(1, HORIZON),
            kernel: unit_jump_kernel(1.0),
            initial: ProbCloud::dirac(v1(0.0)),
            notes: "pure jumps; marginals are Poisson counting laws",
            tol: ScenarioTolerances {
                residual_c_fit: 2.0,
                martingale_c_fit: 1.0,
                mc_w1_tol: 0.02,
                grid_w1_tol: 0.03,
            },
            exact: Some(Arc::new(|t| poisson_cloud(t, 0.0))),
            exact_mean: Some(Arc::new(|t| t)),
        }),
        "ou-jump" => Ok(Scenario {
            name: "ou-jump",
            coeffs: CoefficientSet::new(
                1,
                HORIZON,
                Arc::new(|_t, x: &DVector<f64>| -x),
                Arc::new(|_t, _x| DMatrix::identity(1, 1)),
            ),
            kernel: unit_jump_kernel(1.0),
            initial: ProbCloud::dirac(v1(2.0)),
            notes: "mean reversion, diffusion and unit jumps; closed-form mean only",
            tol: ScenarioTolerances {
                residual_c_fit: 2.0,
                martingale_c_fit: 1.0,
                mc_w1_tol: 0.03,
                grid_w1_tol: 0.03,
            },
            exact: None,
            // dm/dt = -m + lambda with m(0) = 2, lambda = 1.
            exact_mean: Some(Arc::new(|t| 2.0 * (-t).exp() + (1.0 - (-t).exp()))),
        }),
        "rough-drift" => Ok(Scenario {
            name: "rough-drift",
            coeffs: CoefficientSet::new(
                1,
                HORIZON,
                Arc::new(|_t, x: &DVector<f64>| {
                    let s = if x[0] > 0.0 {
                        1.0
                    } else if x[0] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    v1(s - x[0])
                }),
                Arc::new(|_t, _x| DMatrix::identity(1, 1)),
            ),
            kernel: JumpKernel::none(1),
            initial: ProbCloud::dirac(v1(0.0)),
            notes: "merely measurable drift with a jump discontinuity at 0",
            tol: ScenarioTolerances {
                residual_c_fit: 2.0,
                martingale_c_fit: 1.0,
                mc_w1_tol: 0.03,
                grid_w1_tol: 0.03,
            },
            exact: None,
            exact_mean: None,
        }),
        "two-sided-jumps" => Ok(Scenario {
            name: "two-sided-jumps",
            coeffs: CoefficientSet::zero(1, HORIZON),
            kernel: JumpKernel::new(
                vec![
                    Mark {
                        weight: 1.0,
                        label: 1.0,
                    },
                    Mark {
                        weight: 1.0,
                        label: -1.0,
                    },
                ],
                Arc::new(|_t, w, _x: &DVector<f64>| v1(w)),
                Arc::new(|_t, _w, x: &DVector<f64>| 1.0 / (1.0 + x[0] * x[0])),
                1.0,
            ),
            initial: ProbCloud::dirac(v1(0.0)),
            notes: "state-dependent bounded rate, jumps in both directions",
            tol: ScenarioTolerances {
                residual_c_fit: 2.0,
                martingale_c_fit: 1.0,
                mc_w1_tol: 0.03,
                grid_w1_tol: 0.03,
            },
            exact: None,
            exact_mean: None,
        }),
        other => Err(Error::Config(format!(
            "unknown scenario '{other}'; registered: {}",
            SCENARIO_NAMES.join(", ")
        ))),
    }
}

/// A cell-averaged density on `[-L, L]` with leakage accounting.
#[derive(Debug, Clone, Serialize)]
pub struct GridDensity {
    pub t: f64,
    pub l: f64,
    pub cell_avg: Vec<f64>,
    pub leaked_mass: f64,
    pub clipped_mass: f64,
}

impl GridDensity {
    pub fn dx(&self) -> f64 {
        2.0 * self.l / self.cell_avg.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.cell_avg.len())
            .map(|i| -self.l + (i as f64 + 0.5) * dx)
            .collect()
    }

    pub fn interior_mass(&self) -> f64 {
        self.cell_avg.iter().sum::<f64>() * self.dx()
    }

    /// Writes `cell_center, density` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "cell_center,density")?;
        for (c, f) in self.centers().iter().zip(&self.cell_avg) {
            writeln!(out, "{c:.17e},{f:.17e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    /// Half-width of the domain `[-L, L]`.
    pub l: f64,
    /// Number of cells.
    pub m: usize,
}

/// Deposits `mass` at position `y` into the cell averages, split linearly
/// between the two bracketing cells; out-of-domain portions leak.
fn deposit(cells: &mut [f64], l: f64, dx: f64, y: f64, mass: f64, leaked: &mut f64) {
    let m = cells.len() as isize;
    let p = (y + l) / dx - 0.5;
    let i0 = p.floor() as isize;
    let frac = p - i0 as f64;
    for (idx, share) in [(i0, 1.0 - frac), (i0 + 1, frac)] {
        if share == 0.0 {
            continue;
        }
        if idx < 0 || idx >= m {
            *leaked += mass * share;
        } else {
            cells[idx as usize] += mass * share / dx;
        }
    }
}

/// Explicit finite-volume solve of the nonlocal Fokker-Planck equation:
/// upwind drift, central diffusion, exact jump departure rates with linear
/// two-cell deposition. Returns a snapshot per requested output time.
pub fn fp_grid_solve(
    scn: &Scenario,
    spec: GridSpec,
    t_end: f64,
    dt: f64,
    output_times: &[f64],
) -> Result<Vec<GridDensity>> {
    if spec.m < 2 || spec.l <= 0.0 || dt <= 0.0 || t_end <= 0.0 {
        return Err(Error::Config("need M >= 2, L > 0, dt > 0, t_end > 0".into()));
    }
    if scn.coeffs.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: scn.coeffs.dim(),
            context: "the grid solver is 1D only".into(),
        });
    }
    let m = spec.m;
    let l = spec.l;
    let dx = 2.0 * l / m as f64;
    let centers: Vec<f64> = (0..m).map(|i| -l + (i as f64 + 0.5) * dx).collect();

    // Stability pre-check at t = 0 over all cells.
    let mut max_rate: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_b: f64 = 0.0;
    for &c in &centers {
        let x = v1(c);
        let lam: f64 = scn
            .kernel
            .marks()
            .iter()
            .map(|mk| mk.weight * scn.kernel.rate(0.0, mk.label, &x))
            .sum();
        max_rate = max_rate.max(lam);
        max_a = max_a.max(scn.coeffs.a(0.0, &x)[(0, 0)]);
        max_b = max_b.max(scn.coeffs.drift(0.0, &x)[0].abs());
    }
    let cfl = dt * (max_rate + 2.0 * max_a / (dx * dx) + max_b / dx);
    if cfl > 0.9 {
        // Safety factor keeps the suggestion strictly inside the limit.
        return Err(Error::Stability {
            dt,
            suggested: 0.85 * dt / cfl,
        });
    }

    // Initial deposition of the atom cloud.
    let mut f = vec![0.0f64; m];
    let mut leaked = 0.0;
    let mut clipped = 0.0;
    for (x, w) in scn.initial.points().iter().zip(scn.initial.weights()) {
        deposit(&mut f, l, dx, x[0], *w, &mut leaked);
    }
    let initial_mass = f.iter().sum::<f64>() * dx + leaked;

    let mut sorted_out: Vec<f64> = output_times.to_vec();
    sorted_out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted_out.iter().any(|&t| t < 0.0 || t > t_end + 1e-9) {
        return Err(Error::Config("output times must lie in [0, t_end]".into()));
    }

    let steps = (t_end / dt).round().max(1.0) as usize;
    let dt = t_end / steps as f64;
    let mut snapshots = Vec::new();
    let mut next_out = 0usize;
    let snapshot = |t: f64, f: &[f64], leaked: f64, clipped: f64| GridDensity {
        t,
        l,
        cell_avg: f.to_vec(),
        leaked_mass: leaked,
        clipped_mass: clipped,
    };

    let mut new = vec![0.0f64; m];
    for step in 0..=steps {
        let t = step as f64 * dt;
        while next_out < sorted_out.len() && sorted_out[next_out] <= t + 1e-9 {
            snapshots.push(snapshot(sorted_out[next_out], &f, leaked, clipped));
            next_out += 1;
        }
        if step == steps {
            break;
        }

        // Per-cell coefficients at the current time.
        let mut b = Vec::with_capacity(m);
        let mut af = Vec::with_capacity(m);
        for (i, &c) in centers.iter().enumerate() {
            let x = v1(c);
            b.push(scn.coeffs.drift(t, &x)[0]);
            af.push(scn.coeffs.a(t, &x)[(0, 0)] * f[i]);
        }

        new.copy_from_slice(&f);
        // Drift: upwind face fluxes, no-flux boundaries.
        // Diffusion: flux form of (1/2) d^2(a f), no-flux boundaries.
        for i in 0..m - 1 {
            let b_face = 0.5 * (b[i] + b[i + 1]);
            let adv = if b_face >= 0.0 {
                b_face * f[i]
            } else {
                b_face * f[i + 1]
            };
            let dif = (af[i + 1] - af[i]) / (2.0 * dx);
            let net = (-adv + dif) * dt / dx;
            new[i] += net;
            new[i + 1] -= net;
        }
        // Jumps: exact departure, linear two-cell deposition of landings.
        for (i, &c) in centers.iter().enumerate() {
            if f[i] == 0.0 {
                continue;
            }
            let x = v1(c);
            for mk in scn.kernel.marks() {
                let rate = mk.weight * scn.kernel.rate(t, mk.label, &x);
                if rate <= 0.0 {
                    continue;
                }
                let moved = dt * rate * f[i];
                new[i] -= moved;
                let y = c + scn.kernel.displacement(t, mk.label, &x)[0];
                deposit(&mut new, l, dx, y, moved * dx, &mut leaked);
            }
        }
        // Positivity: clip roundoff negatives and track the added mass.
        for v in new.iter_mut() {
            if *v < 0.0 {
                clipped += -*v * dx;
                *v = 0.0;
            }
        }
        if clipped >= 1e-8 {
            return Err(Error::Numeric(format!(
                "clipped mass {clipped:.3e} exceeds 1e-8; scheme not positivity-preserving here"
            )));
        }
        std::mem::swap(&mut f, &mut new);

        let balance = f.iter().sum::<f64>() * dx + leaked - clipped - initial_mass;
        if balance.abs() > 1e-10 {
            return Err(Error::Numeric(format!(
                "mass balance violated by {balance:.3e} at t = {:.6}",
                t + dt
            )));
        }
    }
    while next_out < sorted_out.len() {
        snapshots.push(snapshot(sorted_out[next_out], &f, leaked, clipped));
        next_out += 1;
    }
    Ok(snapshots)
}

/// Converts a grid density to an atom cloud at the cell centers with
/// renormalized masses.
pub fn grid_to_cloud(g: &GridDensity) -> Result<ProbCloud> {
    if g.leaked_mass >= 0.01 {
        eprintln!(
            "warning: grid density at t = {} leaked {:.3e} mass",
            g.t, g.leaked_mass
        );
    }
    let dx = g.dx();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (c, &v) in g.centers().iter().zip(&g.cell_avg) {
        if v > 0.0 {
            points.push(v1(*c));
            weights.push(v * dx);
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("grid density has no interior mass".into()));
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    ProbCloud::new(points, weights)
}
