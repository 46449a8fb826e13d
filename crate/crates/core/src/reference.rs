//! Reference solutions the filters are measured against.
//!
//! For linear-Gaussian problems the exact Kalman filter gives the mean-field
//! limit directly. For scalar nonlinear problems the deterministic
//! mean-field EnKF (DMFEnKF) evolves the filter density on a mesh: a
//! Crank-Nicolson Fokker-Planck solve for the prediction, then the
//! mean-field update written as the density of
//! `(1 - K H) v + K y + K eta`, i.e. an affine change of variables followed
//! by a convolution with the `N(0, K^2 Gamma)` density.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::enkf::{kalman_gain, ObservationModel, Observable};
use crate::error::{Error, Result};
use crate::models::{ou_exact_coefficients, Diffusion, DynamicsModel};
use crate::scalar::Real;

/// Mean and covariance of a Gaussian filter distribution at time `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    pub time_index: usize,
}

impl<T: Real> GaussianState<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>, time_index: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {}x{}, mean has {d} components",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian state"));
        }
        let tol = T::lit(1e-12) * (T::one() + cov.amax());
        if (&cov - cov.transpose()).amax() > tol {
            return Err(Error::invalid("covariance must be symmetric"));
        }
        Ok(GaussianState {
            mean,
            cov,
            time_index,
        })
    }

    pub fn scalar(mean: T, var: T) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var), 0)
    }

    /// `E[x_1]`.
    pub fn first_mean(&self) -> T {
        self.mean[0]
    }

    /// `Var[x_1]`.
    pub fn first_variance(&self) -> T {
        self.cov[(0, 0)]
    }
}

/// Linear Gaussian unit-time map `u -> A u + xi`, `xi ~ N(0, Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T: Real> {
    pub a: DMatrix<T>,
    pub q: DMatrix<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(a: DMatrix<T>, q: DMatrix<T>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch("A and Q must be square of equal size".into()));
        }
        if (&q - q.transpose()).amax() > T::lit(1e-12) * (T::one() + q.amax()) {
            return Err(Error::invalid("Q must be symmetric"));
        }
        if (0..d).any(|i| q[(i, i)] < T::zero()) {
            return Err(Error::invalid("Q must be positive semi-definite"));
        }
        Ok(LinearModel { a, q })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Exact unit-time transition of `du = -u dt + sigma dW` in `d` dimensions.
    pub fn ou_exact(sigma: T, d: usize) -> Result<Self> {
        let (decay, std) = ou_exact_coefficients(sigma);
        Self::new(
            DMatrix::identity(d, d) * decay,
            DMatrix::identity(d, d) * (std * std),
        )
    }

    /// Unit-time transition of `N` Euler-Maruyama (= Milstein) OU substeps:
    /// `A = (1 - 1/N)^N`, `Q = sigma^2/N * sum_k (1 - 1/N)^{2k}`.
    pub fn ou_discretized(sigma: T, n_substeps: usize, d: usize) -> Result<Self> {
        if n_substeps == 0 {
            return Err(Error::invalid("number of substeps must be positive"));
        }
        let dt = T::one() / T::from_usize_lossy(n_substeps);
        let r = T::one() - dt;
        let mut a = T::one();
        let mut q = T::zero();
        for _ in 0..n_substeps {
            q += a * a;
            a *= r;
        }
        q *= sigma * sigma * dt;
        Self::new(DMatrix::identity(d, d) * a, DMatrix::identity(d, d) * q)
    }
}

/// One Kalman prediction and update.
pub fn kalman_step<T: Real>(
    state: &GaussianState<T>,
    lin: &LinearModel<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
) -> Result<GaussianState<T>> {
    let d = state.mean.len();
    if lin.dim() != d || obs.state_dim() != d || y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state d={d}, linear model d={}, observation operator {}x{}, y has {}",
            lin.dim(),
            obs.obs_dim(),
            obs.state_dim(),
            y.len()
        )));
    }
    let m_pred = &lin.a * &state.mean;
    let c_pred = &lin.a * &state.cov * lin.a.transpose() + &lin.q;
    let gain = kalman_gain(&c_pred, obs)?;
    let innov = y - obs.h() * &m_pred;
    let mean = &m_pred + &gain * innov;
    let c = (DMatrix::identity(d, d) - &gain * obs.h()) * &c_pred;
    let cov = (&c + c.transpose()) * T::lit(0.5);
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kalman posterior"));
    }
    Ok(GaussianState {
        mean,
        cov,
        time_index: state.time_index + 1,
    })
}

/// Filter distributions for `n = 0..=observations.len()`, starting with
/// `initial`.
pub fn kalman_run<T: Real>(
    initial: &GaussianState<T>,
    lin: &LinearModel<T>,
    obs: &ObservationModel<T>,
    observations: &[DVector<T>],
) -> Result<Vec<GaussianState<T>>> {
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(initial.clone());
    for y in observations {
        let next = kalman_step(out.last().expect("nonempty"), lin, obs, y)?;
        out.push(next);
    }
    Ok(out)
}

/// Scalar density sampled at the nodes `x_j = x0 + j dx`, `j = 0..=Nx`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid<T> {
    x0: T,
    x1: T,
    nx: usize,
    values: Vec<T>,
    /// Absolute mass of negative values removed by the last clipping.
    pub clipped_mass: T,
}

impl<T: Real> DensityGrid<T> {
    pub fn new(x0: T, x1: T, nx: usize, values: Vec<T>) -> Result<Self> {
        if !(x1 > x0) || nx < 2 {
            return Err(Error::invalid("grid needs x1 > x0 and at least two cells"));
        }
        if values.len() != nx + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} cells need {} node values, got {}",
                nx,
                nx + 1,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density values"));
        }
        Ok(DensityGrid {
            x0,
            x1,
            nx,
            values,
            clipped_mass: T::zero(),
        })
    }

    /// Samples `f` on the mesh and normalizes.
    pub fn from_fn(x0: T, x1: T, nx: usize, f: impl Fn(T) -> T) -> Result<Self> {
        let dx = (x1 - x0) / T::from_usize_lossy(nx);
        let values = (0..=nx).map(|j| f(x0 + dx * T::from_usize_lossy(j))).collect();
        let mut g = Self::new(x0, x1, nx, values)?;
        g.clip_and_normalize()?;
        Ok(g)
    }

    /// Normalized `N(mean, var)` density on the mesh.
    pub fn gaussian(x0: T, x1: T, nx: usize, mean: T, var: T) -> Result<Self> {
        if !(var > T::zero()) {
            return Err(Error::invalid("Gaussian density needs positive variance"));
        }
        let two = T::lit(2.0);
        Self::from_fn(x0, x1, nx, |x| {
            let z = x - mean;
            (-(z * z) / (two * var)).exp()
        })
    }

    pub fn x0(&self) -> T {
        self.x0
    }

    pub fn x1(&self) -> T {
        self.x1
    }

    pub fn cells(&self) -> usize {
        self.nx
    }

    pub fn dx(&self) -> T {
        (self.x1 - self.x0) / T::from_usize_lossy(self.nx)
    }

    pub fn x(&self, j: usize) -> T {
        self.x0 + self.dx() * T::from_usize_lossy(j)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Trapezoid rule for `int f(x) rho(x) dx`.
    pub fn integrate(&self, f: impl Fn(T) -> T) -> T {
        let half = T::lit(0.5);
        let mut s = T::zero();
        for (j, &v) in self.values.iter().enumerate() {
            let w = if j == 0 || j == self.nx { half } else { T::one() };
            s += w * v * f(self.x(j));
        }
        s * self.dx()
    }

    pub fn mass(&self) -> T {
        let half = T::lit(0.5);
        let inner = self.values[1..self.nx].iter().fold(T::zero(), |a, &v| a + v);
        (inner + half * (self.values[0] + self.values[self.nx])) * self.dx()
    }

    /// Mass within two cells of either endpoint.
    pub fn boundary_mass(&self) -> T {
        let band = 2.min(self.nx / 2);
        let mut s = T::zero();
        for j in 0..=band {
            s += self.values[j].abs() + self.values[self.nx - j].abs();
        }
        s * self.dx()
    }

    pub fn check_boundary(&self) -> Result<()> {
        let m = self.boundary_mass().as_f64();
        if m >= 1e-8 {
            return Err(Error::BoundaryMass { mass: m });
        }
        Ok(())
    }

    /// Sets negative values to zero (recording their mass) and rescales to
    /// unit mass.
    pub fn clip_and_normalize(&mut self) -> Result<()> {
        let mut neg = T::zero();
        for v in &mut self.values {
            if *v < T::zero() {
                neg -= *v;
                *v = T::zero();
            }
        }
        self.clipped_mass = neg * self.dx();
        let mass = self.mass();
        if !(mass > T::zero()) || !mass.is_finite() {
            return Err(Error::invalid("density has no positive mass"));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    /// Writes `x,rho` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["x", "rho"]).map_err(|e| csv_error(path, e))?;
        for (j, v) in self.values.iter().enumerate() {
            w.write_record([self.x(j).as_f64().to_string(), v.as_f64().to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Trapezoid-rule mean and variance.
pub fn density_moments<T: Real>(rho: &DensityGrid<T>) -> (T, T) {
    let mass = rho.mass();
    let mean = rho.integrate(|x| x) / mass;
    let var = rho.integrate(|x| (x - mean) * (x - mean)) / mass;
    (mean, var.max(T::zero()))
}

/// Crank-Nicolson solver for `p_t = -(a p)_x + D p_xx` with homogeneous
/// Dirichlet boundaries and centered differences. The tridiagonal system is
/// factored once and reused every step.
struct CrankNicolson<T> {
    lower: Vec<T>,
    diag: Vec<T>,
    upper: Vec<T>,
    // Thomas factors of the implicit matrix.
    c_prime: Vec<T>,
    inv_denom: Vec<T>,
    half_dt: T,
}

impl<T: Real> CrankNicolson<T> {
    fn new(rho: &DensityGrid<T>, model: &DynamicsModel<T>, dt: T) -> Result<Self> {
        if model.state_dim() != 1 {
            return Err(Error::invalid("the Fokker-Planck solver is one-dimensional"));
        }
        let sigma = match model.diffusion() {
            Diffusion::Constant(s) => *s,
            Diffusion::StateDependent { .. } => {
                return Err(Error::invalid("the Fokker-Planck solver needs constant diffusion"))
            }
        };
        let dx = rho.dx();
        let diff = sigma * sigma * T::lit(0.5) / (dx * dx);
        let two_dx = T::lit(2.0) * dx;
        let n = rho.nx + 1;
        let a: Vec<T> = (0..n).map(|j| model.drift_scalar(rho.x(j))).collect();
        let mut lower = vec![T::zero(); n];
        let mut diag = vec![T::zero(); n];
        let mut upper = vec![T::zero(); n];
        for j in 1..n - 1 {
            lower[j] = a[j - 1] / two_dx + diff;
            diag[j] = -T::lit(2.0) * diff;
            upper[j] = -a[j + 1] / two_dx + diff;
        }
        let half_dt = dt * T::lit(0.5);
        // Implicit matrix I - dt/2 L on interior nodes 1..n-1.
        let mut c_prime = vec![T::zero(); n];
        let mut inv_denom = vec![T::zero(); n];
        let mut prev_c = T::zero();
        for j in 1..n - 1 {
            let b = T::one() - half_dt * diag[j];
            let lo = if j > 1 { -half_dt * lower[j] } else { T::zero() };
            let denom = b - lo * prev_c;
            if denom == T::zero() || !denom.is_finite() {
                return Err(Error::invalid("Crank-Nicolson system is singular"));
            }
            let inv = T::one() / denom;
            let up = if j + 1 < n - 1 { -half_dt * upper[j] } else { T::zero() };
            c_prime[j] = up * inv;
            inv_denom[j] = inv;
            prev_c = c_prime[j];
        }
        Ok(CrankNicolson {
            lower,
            diag,
            upper,
            c_prime,
            inv_denom,
            half_dt,
        })
    }

    fn step(&self, p: &mut [T], rhs: &mut [T]) {
        let n = p.len();
        for j in 1..n - 1 {
            let lp = self.lower[j] * p[j - 1] + self.diag[j] * p[j] + self.upper[j] * p[j + 1];
            rhs[j] = p[j] + self.half_dt * lp;
        }
        // Forward sweep.
        let mut prev = T::zero();
        for j in 1..n - 1 {
            let lo = if j > 1 { -self.half_dt * self.lower[j] } else { T::zero() };
            rhs[j] = (rhs[j] - lo * prev) * self.inv_denom[j];
            prev = rhs[j];
        }
        p[n - 2] = rhs[n - 2];
        for j in (1..n - 2).rev() {
            p[j] = rhs[j] - self.c_prime[j] * p[j + 1];
        }
        p[0] = T::zero();
        p[n - 1] = T::zero();
    }
}

/// Propagates a density over `t_final` time units with steps of `dt`.
///
/// Fails when the input or output carries boundary mass, or when more
/// than `1e-6` of the mass is lost before renormalization.
pub fn fpe_propagate<T: Real>(
    rho: &DensityGrid<T>,
    model: &DynamicsModel<T>,
    dt: T,
    t_final: T,
) -> Result<DensityGrid<T>> {
    if !(dt > T::zero()) || !(t_final >= T::zero()) {
        return Err(Error::invalid("time step must be positive"));
    }
    let steps_f = (t_final / dt).as_f64();
    let steps = steps_f.round();
    if (steps - steps_f).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::invalid("time step must divide the horizon"));
    }
    rho.check_boundary()?;
    let solver = CrankNicolson::new(rho, model, dt)?;
    let mut p = rho.values.clone();
    let mut rhs = vec![T::zero(); p.len()];
    for _ in 0..steps as usize {
        solver.step(&mut p, &mut rhs);
    }
    let mut out = DensityGrid::new(rho.x0, rho.x1, rho.nx, p)?;
    let before = out.mass();
    let loss = (T::one() - before).abs().as_f64();
    if loss > 1e-6 {
        return Err(Error::MassLoss { loss });
    }
    out.clip_and_normalize()?;
    out.check_boundary()?;
    Ok(out)
}

/// Density of `(1 - K H) X + K y + K eta` for `X ~ rho`, `eta ~ N(0, Gamma)`,
/// resampled on the mesh of `rho`.
pub fn affine_convolution_update<T: Real>(
    rho: &DensityGrid<T>,
    gain: T,
    h: T,
    gamma: T,
    y: T,
) -> Result<DensityGrid<T>> {
    let a = T::one() - gain * h;
    if a.abs().as_f64() < 1e-12 {
        return Err(Error::DegenerateAffine(a.as_f64()));
    }
    let dx = rho.dx();
    let shift = gain * y;
    let n = rho.nx;
    let inv_a = T::one() / a;
    let jac = inv_a.abs();
    let mut moved = vec![T::zero(); n + 1];
    for (j, out) in moved.iter_mut().enumerate() {
        let src = (rho.x(j) - shift) * inv_a;
        let s = ((src - rho.x0) / dx).as_f64();
        if s < 0.0 || s > n as f64 {
            continue;
        }
        let k = (s.floor() as usize).min(n - 1);
        let w = T::lit(s - k as f64);
        *out = ((T::one() - w) * rho.values[k] + w * rho.values[k + 1]) * jac;
    }

    let var = gain * gain * gamma;
    let values = if var > T::zero() {
        let std = var.sqrt();
        let half_width = (T::lit(12.0) * std / dx).as_f64().ceil() as usize;
        let mut kernel: Vec<T> = (0..=2 * half_width)
            .map(|i| {
                let z = dx * (T::from_usize_lossy(i) - T::from_usize_lossy(half_width));
                (-(z * z) / (T::lit(2.0) * var)).exp()
            })
            .collect();
        let total = kernel.iter().fold(T::zero(), |acc, &w| acc + w);
        for w in &mut kernel {
            *w /= total;
        }
        let hw = half_width as isize;
        (0..=n as isize)
            .map(|j| {
                let lo = (j - hw).max(0);
                let hi = (j + hw).min(n as isize);
                (lo..=hi).fold(T::zero(), |acc, i| {
                    acc + kernel[(j - i + hw) as usize] * moved[i as usize]
                })
            })
            .collect()
    } else {
        moved
    };
    let mut out = DensityGrid::new(rho.x0, rho.x1, rho.nx, values)?;
    out.clip_and_normalize()?;
    Ok(out)
}

/// Moments and gain of one mean-field update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanFieldUpdate<T> {
    pub prediction_mean: T,
    pub prediction_variance: T,
    pub gain: T,
}

/// Mean-field EnKF update of a scalar prediction density.
pub fn mfenkf_update<T: Real>(
    rho_pred: &DensityGrid<T>,
    obs: &ObservationModel<T>,
    y: T,
) -> Result<(DensityGrid<T>, MeanFieldUpdate<T>)> {
    if obs.state_dim() != 1 || obs.obs_dim() != 1 {
        return Err(Error::invalid("the density update is scalar"));
    }
    let h = obs.h()[(0, 0)];
    let gamma = obs.gamma()[(0, 0)];
    let (mean, var) = density_moments(rho_pred);
    let gain = var * h / (h * h * var + gamma);
    let out = affine_convolution_update(rho_pred, gain, h, gamma, y)?;
    Ok((
        out,
        MeanFieldUpdate {
            prediction_mean: mean,
            prediction_variance: var,
            gain,
        },
    ))
}

/// Mesh and time step of the density solver.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridConfig {
    pub x0: f64,
    pub x1: f64,
    pub cells: usize,
    pub dt: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x0: -5.0,
            x1: 5.0,
            cells: 4000,
            dt: 1e-3,
        }
    }
}

impl GridConfig {
    pub fn refined(self) -> Self {
        GridConfig {
            cells: self.cells * 2,
            dt: self.dt / 2.0,
            ..self
        }
    }
}

/// One time of a DMFEnKF run.
#[derive(Clone, Debug)]
pub struct DmfenkfStep<T: Real> {
    pub time_index: usize,
    /// `None` at `n = 0`.
    pub predicted: Option<DensityGrid<T>>,
    pub updated: DensityGrid<T>,
    pub update: Option<MeanFieldUpdate<T>>,
    pub mean: T,
    pub variance: T,
    /// Quadrature of each observable against the updated density.
    pub qoi: Vec<T>,
}

/// Runs the DMFEnKF from `N(m0, C0)` given by the initial mean and variance.
pub fn dmfenkf_run<T: Real>(
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    observations: &[DVector<T>],
    grid: &GridConfig,
    initial_mean: T,
    initial_variance: T,
    observables: &[Observable<T>],
) -> Result<Vec<DmfenkfStep<T>>> {
    let rho0 = DensityGrid::gaussian(
        T::lit(grid.x0),
        T::lit(grid.x1),
        grid.cells,
        initial_mean,
        initial_variance,
    )?;
    let quad = |rho: &DensityGrid<T>| -> Vec<T> {
        observables
            .iter()
            .map(|phi| rho.integrate(|x| phi.eval(&[x])))
            .collect()
    };
    let (m, v) = density_moments(&rho0);
    let mut out = vec![DmfenkfStep {
        time_index: 0,
        predicted: None,
        qoi: quad(&rho0),
        updated: rho0,
        update: None,
        mean: m,
        variance: v,
    }];
    let dt = T::lit(grid.dt);
    for (n, y) in observations.iter().enumerate() {
        if y.len() != 1 {
            return Err(Error::DimensionMismatch("the density filter observes scalars".into()));
        }
        let pred = fpe_propagate(&out[n].updated, model, dt, T::one())?;
        let (upd, info) = mfenkf_update(&pred, obs, y[0])?;
        let (m, v) = density_moments(&upd);
        out.push(DmfenkfStep {
            time_index: n + 1,
            predicted: Some(pred),
            qoi: quad(&upd),
            updated: upd,
            update: Some(info),
            mean: m,
            variance: v,
        });
    }
    Ok(out)
}

/// Writes a reference QoI table with columns `n,qoi_name,value`.
pub fn write_qoi_csv(path: &Path, names: &[&str], values: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "n,qoi_name,value").map_err(|e| Error::io(path, e))?;
    for (n, row) in values.iter().enumerate() {
        if row.len() != names.len() {
            return Err(Error::DimensionMismatch("one value per QoI name".into()));
        }
        for (name, v) in names.iter().zip(row) {
            // `{:?}` prints the shortest representation that parses back exactly.
            writeln!(w, "{n},{name},{v:?}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_qoi_csv`] back into `values[n][q]`
/// ordered by `names`.
pub fn read_qoi_csv(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if rec.len() != 3 {
            return Err(bad("expected columns n,qoi_name,value"));
        }
        let n: usize = rec[0].parse().map_err(|_| bad("bad time index"))?;
        let value: f64 = rec[2].parse().map_err(|_| bad("bad value"))?;
        let Some(q) = names.iter().position(|&s| s == &rec[1]) else {
            continue;
        };
        if out.len() <= n {
            out.resize(n + 1, vec![None; names.len()]);
        }
        out[n][q] = Some(value);
    }
    out.into_iter()
        .map(|row| {
            row.into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::MissingReference(path.display().to_string()))
        })
        .collect()
}
