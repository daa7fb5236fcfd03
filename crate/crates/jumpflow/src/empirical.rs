//! Weighted empirical measures, Wasserstein-1 comparison and the Gaussian
//! mollification machinery (`f^eps`, `a^eps`, `b^eps`, tilt kernel) evaluated
//! exactly on particle clouds.
//!
//! All Gaussian ratios are computed through log-weights with max-subtraction:
//! the tilt involves ratios of potentially underflowing Gaussians and the
//! positivity of `f^eps` has to survive floating point.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::CoefficientSet;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted empirical probability measure on `R^d`: finite atoms with
/// positive weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCloud {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
    dim: usize,
}

impl ProbCloud {
    pub fn new(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::Config(
                "cloud needs matching nonempty points and weights".into(),
            ));
        }
        let dim = points[0].len();
        for p in &points {
            if p.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: p.len(),
                });
            }
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Numeric("non-finite cloud point".into()));
            }
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("cloud weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!(
                "cloud weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL:e}"
            )));
        }
        Ok(Self {
            points,
            weights,
            dim,
        })
    }

    /// Equal-weight cloud over the given states.
    pub fn equal_weights(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Config("empty cloud".into()));
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Exact renormalization of the last weight against accumulation error.
        let sum: f64 = weights.iter().sum();
        weights[n - 1] += 1.0 - sum;
        Self::new(points, weights)
    }

    /// Point mass at `x`.
    pub fn dirac(x: DVector<f64>) -> Self {
        Self {
            dim: x.len(),
            points: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// First moment `m_1 = sum_i w_i |x_i|`.
    pub fn first_moment(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p.norm())
            .sum()
    }

    /// Draws an atom index from the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u: f64 = rng.random();
        for (i, &w) in self.weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        self.points.len() - 1
    }

    /// Writes `x_1..x_d, weight` rows in input order.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim)
            .map(|i| format!("x_{i}"))
            .chain(std::iter::once("weight".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (p, w) in self.points.iter().zip(&self.weights) {
            let coords: Vec<String> = p.iter().map(|c| format!("{c:.17e}")).collect();
            writeln!(out, "{},{:.17e}", coords.join(","), w)?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty cloud CSV".into()))??;
        let dim = header.split(',').count() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad CSV field: {e}")))
                })
                .collect::<Result<_>>()?;
            if fields.len() != dim + 1 {
                return Err(Error::Config("ragged cloud CSV row".into()));
            }
            points.push(DVector::from_column_slice(&fields[..dim]));
            weights.push(fields[dim]);
        }
        Self::new(points, weights)
    }
}

/// Time-indexed family of clouds on a strictly increasing grid.
/// Off-grid lookup is left-continuous step interpolation.
#[derive(Debug, Clone)]
pub struct MarginalFlow {
    grid: Vec<f64>,
    clouds: Vec<ProbCloud>,
}

impl MarginalFlow {
    pub fn new(grid: Vec<f64>, clouds: Vec<ProbCloud>) -> Result<Self> {
        if grid.is_empty() || grid.len() != clouds.len() {
            return Err(Error::Config(
                "flow needs one cloud per grid time".into(),
            ));
        }
        if grid[0] != 0.0 {
            return Err(Error::Config("flow grid must start at t = 0".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("flow grid must be strictly increasing".into()));
        }
        Ok(Self { grid, clouds })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn clouds(&self) -> &[ProbCloud] {
        &self.clouds
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Index of the largest grid time `<= t`.
    pub fn index_at(&self, t: f64) -> usize {
        match self
            .grid
            .binary_search_by(|g| g.partial_cmp(&t).unwrap())
        {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) => k - 1,
        }
    }

    pub fn cloud_at(&self, t: f64) -> &ProbCloud {
        &self.clouds[self.index_at(t)]
    }

    pub fn sup_first_moment(&self) -> f64 {
        self.clouds
            .iter()
            .map(ProbCloud::first_moment)
            .fold(0.0, f64::max)
    }
}

/// Gaussian density `phi_eps(v) = (2 pi eps)^(-d/2) exp(-|v|^2 / (2 eps))`.
pub fn gaussian_kernel(eps: f64, v: &DVector<f64>) -> Result<f64> {
    Ok(log_gaussian_kernel(eps, v.len(), v.norm_squared())?.exp())
}

fn log_gaussian_kernel(eps: f64, dim: usize, norm_sq: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("mollifier bandwidth eps = {eps} must be positive")));
    }
    Ok(-0.5 * dim as f64 * (2.0 * std::f64::consts::PI * eps).ln() - norm_sq / (2.0 * eps))
}

/// A cloud viewed through the Gaussian mollifier at bandwidth `eps`.
#[derive(Debug, Clone, Copy)]
pub struct MollifiedView<'a> {
    cloud: &'a ProbCloud,
    eps: f64,
}

impl<'a> MollifiedView<'a> {
    pub fn new(cloud: &'a ProbCloud, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Domain(format!(
                "mollifier bandwidth eps = {eps} must lie in (0, 1)"
            )));
        }
        Ok(Self { cloud, eps })
    }

    pub fn cloud(&self) -> &ProbCloud {
        self.cloud
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `log(w_i) + log(phi_eps(x_i - y))` per atom.
    fn log_weights(&self, y: &DVector<f64>) -> Vec<f64> {
        let dim = self.cloud.dim();
        self.cloud
            .points()
            .iter()
            .zip(self.cloud.weights())
            .map(|(x, &w)| {
                w.ln()
                    + log_gaussian_kernel(self.eps, dim, (x - y).norm_squared())
                        .expect("eps validated at construction")
            })
            .collect()
    }

    /// Normalized tilt probabilities `w_i F^eps(x_i, y)` and the log of the
    /// unnormalized total, i.e. `log f^eps(y)`.
    fn softmax(&self, y: &DVector<f64>) -> (Vec<f64>, f64) {
        let logs = self.log_weights(y);
        let max = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
        // Entries 45 log-units below the mode underflow against the total
        // (< 3e-20); writing an exact 0 skips the exp call.
        let mut probs: Vec<f64> = logs
            .iter()
            .map(|&l| if l - max < -45.0 { 0.0 } else { (l - max).exp() })
            .collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        (probs, max + total.ln())
    }
}

/// Mollified density `f^eps(y) = sum_i w_i phi_eps(x_i - y)`.
pub fn mollified_density(view: &MollifiedView, y: &DVector<f64>) -> f64 {
    let (_, log_density) = view.softmax(y);
    log_density.exp()
}

/// Tilt probabilities over cloud indices: `p_i = w_i phi_eps(x_i - y) / f^eps(y)`.
pub fn tilt_distribution(view: &MollifiedView, y: &DVector<f64>) -> Vec<f64> {
    view.softmax(y).0
}

/// Exact categorical draw from the tilt distribution; returns the atom index.
pub fn sample_tilted<R: Rng + ?Sized>(
    view: &MollifiedView,
    y: &DVector<f64>,
    rng: &mut R,
) -> usize {
    let probs = tilt_distribution(view, y);
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Mollified drift `b^eps(t, y)`: convex combination of the drifts at the
/// atoms with tilt weights.
pub fn mollified_drift(
    view: &MollifiedView,
    coeffs: &CoefficientSet,
    t: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    coeffs.check_time(t)?;
    let probs = tilt_distribution(view, y);
    let mut acc = DVector::zeros(coeffs.dim());
    for (x, &p) in view.cloud().points().iter().zip(&probs) {
        if p > 0.0 {
            acc += coeffs.drift(t, x) * p;
        }
    }
    Ok(acc)
}

/// Mollified diffusion `a^eps(t, y)` and its symmetric PSD square root.
pub fn mollified_diffusion(
    view: &MollifiedView,
    coeffs: &CoefficientSet,
    t: f64,
    y: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    coeffs.check_time(t)?;
    let probs = tilt_distribution(view, y);
    let d = coeffs.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (x, &p) in view.cloud().points().iter().zip(&probs) {
        if p > 0.0 {
            acc += coeffs.a(t, x) * p;
        }
    }
    let root = psd_sqrt(&acc)?;
    Ok((acc, root))
}

/// Unique symmetric PSD square root via eigendecomposition. Eigenvalues
/// within numerical noise of zero are clamped.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite matrix in sqrt: {a}")));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let tol = 1e-10 * (1.0 + a.norm());
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::Numeric(format!(
                "matrix not PSD (eigenvalue {v}): {a}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Exact Wasserstein-1 distance between two weighted atom clouds on the line,
/// by integrating the absolute CDF difference over the merged breakpoints.
pub fn wasserstein1_1d(a: &ProbCloud, b: &ProbCloud) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: a.dim().max(b.dim()),
            context: "exact W1 is 1D; use wasserstein1 for coordinate marginals".into(),
        });
    }
    Ok(w1_atoms(
        &sorted_atoms(a.points().iter().map(|p| p[0]), a.weights()),
        &sorted_atoms(b.points().iter().map(|p| p[0]), b.weights()),
    ))
}

/// Coordinate-marginal W1: the max over coordinates of the exact 1D distance.
pub fn wasserstein1(a: &ProbCloud, b: &ProbCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut worst: f64 = 0.0;
    for k in 0..a.dim() {
        let d = w1_atoms(
            &sorted_atoms(a.points().iter().map(|p| p[k]), a.weights()),
            &sorted_atoms(b.points().iter().map(|p| p[k]), b.weights()),
        );
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Coarsens a 1D cloud to `k` equal-weight quantile atoms: atom `i` sits at
/// the `(i + 1/2) / k` quantile. Keeps W1 distance to the original within one
/// inter-quantile gap; used to keep mollified coefficient tables small when a
/// flow comes from a dense grid solve.
pub fn quantile_cloud(cloud: &ProbCloud, k: usize) -> Result<ProbCloud> {
    if cloud.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: cloud.dim(),
            context: "quantile coarsening is 1D".into(),
        });
    }
    if k == 0 {
        return Err(Error::Config("need at least one quantile atom".into()));
    }
    if cloud.len() <= k {
        return Ok(cloud.clone());
    }
    let atoms = sorted_atoms(cloud.points().iter().map(|p| p[0]), cloud.weights());
    let mut points = Vec::with_capacity(k);
    let mut idx = 0;
    let mut cdf = atoms[0].1;
    for i in 0..k {
        let q = (i as f64 + 0.5) / k as f64;
        while cdf < q && idx + 1 < atoms.len() {
            idx += 1;
            cdf += atoms[idx].1;
        }
        points.push(DVector::from_column_slice(&[atoms[idx].0]));
    }
    ProbCloud::equal_weights(points)
}

fn sorted_atoms(xs: impl Iterator<Item = f64>, ws: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = xs.zip(ws.iter().copied()).collect();
    atoms.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    atoms
}

fn w1_atoms(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    // W1 = integral |F_A(x) - F_B(x)| dx over the union of breakpoints.
    let mut dist = 0.0;
    let (mut i, mut j) = (0, 0);
    let (mut cdf_a, mut cdf_b) = (0.0f64, 0.0f64);
    let mut prev: Option<f64> = None;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&(xa, _)), Some(&(xb, _))) => xa.min(xb),
            (Some(&(xa, _)), None) => xa,
            (None, Some(&(xb, _))) => xb,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            dist += (cdf_a - cdf_b).abs() * (x - p);
        }
        while i < a.len() && a[i].0 == x {
            cdf_a += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            cdf_b += b[j].1;
            j += 1;
        }
        prev = Some(x);
    }
    dist
}
