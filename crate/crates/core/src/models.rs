//! Hidden-state dynamics: SDE models and their one-unit-time propagators.
//!
//! The assimilation interval is always one unit of time, so a propagator
//! with `N` substeps uses `dt = 1/N`. A [`NoisePath`] holds the Brownian
//! increments of one such interval; coarser resolutions are obtained by
//! summing consecutive fine increments, which is how fine and coarse
//! particles share their driving noise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::GaussianSource;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "ou")]
    OrnsteinUhlenbeck,
    DoubleWell,
    #[serde(rename = "cosine")]
    CosineDrift,
    Custom,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::OrnsteinUhlenbeck => "ou",
            ModelKind::DoubleWell => "double-well",
            ModelKind::CosineDrift => "cosine",
            ModelKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ou" => Ok(ModelKind::OrnsteinUhlenbeck),
            "double-well" => Ok(ModelKind::DoubleWell),
            "cosine" => Ok(ModelKind::CosineDrift),
            other => Err(Error::invalid(format!(
                "unknown model {other:?} (expected ou, double-well or cosine)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    EulerMaruyama,
    #[default]
    Milstein,
    Exact,
}

pub type DriftFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;
pub type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// Diffusion coefficient, always diagonal: component `j` is driven by its
/// own Wiener process `W_j`.
#[derive(Clone)]
pub enum Diffusion<T> {
    Constant(T),
    /// `b(u_j)` applied componentwise, with its analytic derivative `b'`
    /// for the Milstein correction.
    StateDependent { b: ScalarFn<T>, db: ScalarFn<T> },
}

/// Drift `a(u)` and diffusion of the hidden SDE `du = a(u) dt + b(u) dW`.
#[derive(Clone)]
pub struct DynamicsModel<T> {
    kind: ModelKind,
    state_dim: usize,
    diffusion: Diffusion<T>,
    custom_drift: Option<DriftFn<T>>,
}

impl<T: Real> fmt::Debug for DynamicsModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("kind", &self.kind)
            .field("state_dim", &self.state_dim)
            .field("sigma", &self.sigma())
            .finish()
    }
}

fn check_sigma<T: Real>(sigma: T) -> Result<()> {
    if !sigma.is_finite() || sigma <= T::zero() {
        return Err(Error::invalid(format!(
            "diffusion sigma must be positive and finite, got {}",
            sigma.as_f64()
        )));
    }
    Ok(())
}

/// `-V'(u)` for `V(u) = u^2/2`.
#[inline(always)]
fn ou_drift<T: Real>(u: T) -> T {
    -u
}

/// `-V'(u)` for the double-well potential `V(u) = 1/(2+4u^2) + u^2/4`.
#[inline(always)]
fn double_well_drift<T: Real>(u: T) -> T {
    let q = T::lit(2.0) + T::lit(4.0) * u * u;
    T::lit(8.0) * u / (q * q) - u / T::lit(2.0)
}

#[inline(always)]
fn cosine_drift<T: Real>(u: T) -> T {
    let pi = T::pi();
    -(u + pi * (pi * u / T::lit(5.0)).cos() / T::lit(5.0))
}

/// The double-well potential itself.
pub fn double_well_potential<T: Real>(u: T) -> T {
    T::one() / (T::lit(2.0) + T::lit(4.0) * u * u) + u * u / T::lit(4.0)
}

impl<T: Real> DynamicsModel<T> {
    fn builtin(kind: ModelKind, sigma: T) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(DynamicsModel {
            kind,
            state_dim: 1,
            diffusion: Diffusion::Constant(sigma),
            custom_drift: None,
        })
    }

    /// Ornstein-Uhlenbeck process, `a(u) = -u`.
    pub fn ornstein_uhlenbeck(sigma: T) -> Result<Self> {
        Self::builtin(ModelKind::OrnsteinUhlenbeck, sigma)
    }

    pub fn double_well(sigma: T) -> Result<Self> {
        Self::builtin(ModelKind::DoubleWell, sigma)
    }

    /// `a(u) = -(u + pi cos(pi u / 5) / 5)`.
    pub fn cosine_drift(sigma: T) -> Result<Self> {
        Self::builtin(ModelKind::CosineDrift, sigma)
    }

    pub fn by_kind(kind: ModelKind, sigma: T) -> Result<Self> {
        match kind {
            ModelKind::Custom => Err(Error::invalid(
                "custom models need a drift; use DynamicsModel::custom",
            )),
            k => Self::builtin(k, sigma),
        }
    }

    /// Model selected by its configuration name: `ou`, `double-well`, `cosine`.
    pub fn from_name(name: &str, sigma: T) -> Result<Self> {
        Self::by_kind(name.parse()?, sigma)
    }

    pub fn custom(
        state_dim: usize,
        drift: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
        diffusion: Diffusion<T>,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if let Diffusion::Constant(s) = diffusion {
            check_sigma(s)?;
        }
        Ok(DynamicsModel {
            kind: ModelKind::Custom,
            state_dim,
            diffusion,
            custom_drift: Some(Arc::new(drift)),
        })
    }

    /// Applies a built-in scalar model componentwise in `d` dimensions.
    pub fn with_state_dim(mut self, d: usize) -> Result<Self> {
        if self.kind == ModelKind::Custom {
            return Err(Error::invalid("custom models fix their own dimension"));
        }
        if d == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        self.state_dim = d;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Constant diffusion coefficient, if the model has one.
    pub fn sigma(&self) -> Option<T> {
        match self.diffusion {
            Diffusion::Constant(s) => Some(s),
            Diffusion::StateDependent { .. } => None,
        }
    }

    pub fn diffusion(&self) -> &Diffusion<T> {
        &self.diffusion
    }

    pub fn has_exact_step(&self) -> bool {
        self.kind == ModelKind::OrnsteinUhlenbeck
    }

    /// Evaluates `a(u)` into `out`.
    pub fn drift_into(&self, u: &[T], out: &mut [T]) {
        match self.kind {
            ModelKind::OrnsteinUhlenbeck => map_into(u, out, ou_drift),
            ModelKind::DoubleWell => map_into(u, out, double_well_drift),
            ModelKind::CosineDrift => map_into(u, out, cosine_drift),
            ModelKind::Custom => (self.custom_drift.as_ref().expect("custom drift"))(u, out),
        }
    }

    pub fn drift(&self, u: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); u.len()];
        self.drift_into(u, &mut out);
        out
    }

    /// Drift of a scalar (`d = 1`) model at `x`.
    pub fn drift_scalar(&self, x: T) -> T {
        let mut out = [T::zero()];
        self.drift_into(&[x], &mut out);
        out[0]
    }

    /// Advances `u` by one unit of time in place, consuming `noise`.
    ///
    /// For `Scheme::Exact` (Ornstein-Uhlenbeck only) the transition is
    /// driven by `W(1)`, the sum of the path's increments, so every
    /// resolution of a shared path yields the same exact sample.
    pub fn advance(&self, u: &mut [T], noise: &NoisePath<T>, scheme: Scheme) -> Result<()> {
        if u.len() != self.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state has {} components, model has {}",
                u.len(),
                self.state_dim
            )));
        }
        if noise.dim() != self.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "noise path has {} components, model has {}",
                noise.dim(),
                self.state_dim
            )));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        match scheme {
            Scheme::Exact => {
                if !self.has_exact_step() {
                    return Err(Error::invalid(format!(
                        "model {} has no exact propagator",
                        self.kind
                    )));
                }
                let sigma = self.sigma().expect("OU has constant diffusion");
                let (a, s) = ou_exact_coefficients(sigma);
                for (j, x) in u.iter_mut().enumerate() {
                    *x = a * *x + s * noise.component_total(j);
                }
                Ok(())
            }
            Scheme::EulerMaruyama | Scheme::Milstein => {
                match (&self.diffusion, self.kind) {
                    (Diffusion::Constant(s), ModelKind::OrnsteinUhlenbeck) => {
                        additive_loop(u, noise, *s, ou_drift)
                    }
                    (Diffusion::Constant(s), ModelKind::DoubleWell) => {
                        additive_loop(u, noise, *s, double_well_drift)
                    }
                    (Diffusion::Constant(s), ModelKind::CosineDrift) => {
                        additive_loop(u, noise, *s, cosine_drift)
                    }
                    _ => self.general_loop(u, noise, scheme == Scheme::Milstein),
                }
                Ok(())
            }
        }
    }

    fn general_loop(&self, u: &mut [T], noise: &NoisePath<T>, milstein: bool) {
        let d = u.len();
        let dt = noise.dt();
        let half = T::lit(0.5);
        let mut a = vec![T::zero(); d];
        for k in 0..noise.n_substeps() {
            self.drift_into(u, &mut a);
            let dw = noise.increment(k);
            match &self.diffusion {
                Diffusion::Constant(s) => {
                    for j in 0..d {
                        u[j] += a[j] * dt + *s * dw[j];
                    }
                }
                Diffusion::StateDependent { b, db } => {
                    for j in 0..d {
                        let bj = b(u[j]);
                        let mut inc = a[j] * dt + bj * dw[j];
                        if milstein {
                            inc += half * bj * db(u[j]) * (dw[j] * dw[j] - dt);
                        }
                        u[j] += inc;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn map_into<T: Real>(u: &[T], out: &mut [T], f: impl Fn(T) -> T) {
    for (o, &x) in out.iter_mut().zip(u) {
        *o = f(x);
    }
}

/// Euler-Maruyama for a componentwise drift and constant diffusion. The
/// Milstein correction `b b' (dW^2 - dt)/2` vanishes identically here.
#[inline(always)]
fn additive_loop<T: Real>(u: &mut [T], noise: &NoisePath<T>, sigma: T, f: impl Fn(T) -> T) {
    let dt = noise.dt();
    let d = u.len();
    if d == 1 {
        let mut x = u[0];
        for &dw in &noise.increments {
            x += f(x) * dt + sigma * dw;
        }
        u[0] = x;
    } else {
        for dw in noise.increments.chunks_exact(d) {
            for j in 0..d {
                u[j] += f(u[j]) * dt + sigma * dw[j];
            }
        }
    }
}

/// `(e^{-1}, sqrt(sigma^2 (1 - e^{-2}) / 2))`: mean factor and noise
/// standard deviation of the exact unit-time OU transition.
pub fn ou_exact_coefficients<T: Real>(sigma: T) -> (T, T) {
    let a = (-T::one()).exp();
    let var = sigma * sigma * (T::one() - (T::lit(-2.0)).exp()) / T::lit(2.0);
    (a, var.sqrt())
}

/// Exact unit-time OU transition `u e^{-1} + sqrt(sigma^2 (1-e^{-2})/2) * gauss`.
pub fn exact_ou_step<T: Real>(u: &[T], sigma: T, gauss: &[T]) -> Result<Vec<T>> {
    check_sigma(sigma)?;
    if u.len() != gauss.len() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} components, gauss has {}",
            u.len(),
            gauss.len()
        )));
    }
    if u.iter().chain(gauss).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("exact OU input"));
    }
    let (a, s) = ou_exact_coefficients(sigma);
    Ok(u.iter().zip(gauss).map(|(&x, &g)| a * x + s * g).collect())
}

/// Brownian increments over one unit of time at uniform resolution.
///
/// Stored substep-major: increment `k` of component `j` is
/// `increments[k * dim + j]`, distributed `N(0, 1/N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath<T> {
    n_substeps: usize,
    dim: usize,
    increments: Vec<T>,
}

impl<T: Real> NoisePath<T> {
    pub fn new(n_substeps: usize, dim: usize, increments: Vec<T>) -> Result<Self> {
        if n_substeps == 0 {
            return Err(Error::invalid("noise path needs at least one substep"));
        }
        if dim == 0 {
            return Err(Error::invalid("noise dimension must be positive"));
        }
        if increments.len() != n_substeps * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} increments for {n_substeps} substeps of dimension {dim}",
                increments.len()
            )));
        }
        Ok(NoisePath {
            n_substeps,
            dim,
            increments,
        })
    }

    pub fn zeros(n_substeps: usize, dim: usize) -> Result<Self> {
        Self::new(n_substeps, dim, vec![T::zero(); n_substeps * dim])
    }

    /// Draws a fresh path of `n_substeps` increments.
    pub fn sample<G: GaussianSource>(n_substeps: usize, dim: usize, src: &mut G) -> Result<Self> {
        let mut p = Self::zeros(n_substeps, dim)?;
        p.resample(src);
        Ok(p)
    }

    /// Overwrites the increments with fresh draws, keeping the resolution.
    #[inline]
    pub fn resample<G: GaussianSource>(&mut self, src: &mut G) {
        let scale = (1.0 / self.n_substeps as f64).sqrt();
        for x in &mut self.increments {
            *x = T::lit(scale * src.standard_normal());
        }
    }

    pub fn n_substeps(&self) -> usize {
        self.n_substeps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> T {
        T::one() / T::from_usize_lossy(self.n_substeps)
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    pub fn increment(&self, k: usize) -> &[T] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// `W_j(1)`, the sum of all increments of component `j`.
    pub fn component_total(&self, j: usize) -> T {
        self.increments
            .iter()
            .skip(j)
            .step_by(self.dim)
            .fold(T::zero(), |acc, &x| acc + x)
    }

    /// Aggregates groups of `factor` consecutive increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let mut out = NoisePath {
            n_substeps: 1,
            dim: self.dim,
            increments: Vec::new(),
        };
        self.coarsen_into(factor, &mut out)?;
        Ok(out)
    }

    /// Like [`NoisePath::coarsen`] but reusing `out`'s allocation.
    pub fn coarsen_into(&self, factor: usize, out: &mut Self) -> Result<()> {
        if factor == 0 || !self.n_substeps.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "coarsening factor {factor} does not divide {} substeps",
                self.n_substeps
            )));
        }
        let d = self.dim;
        out.n_substeps = self.n_substeps / factor;
        out.dim = d;
        out.increments.clear();
        if d == 1 {
            out.increments.extend(
                self.increments
                    .chunks_exact(factor)
                    .map(|g| g.iter().fold(T::zero(), |acc, &x| acc + x)),
            );
            return Ok(());
        }
        out.increments.resize(out.n_substeps * d, T::zero());
        for (k, group) in self.increments.chunks_exact(factor * d).enumerate() {
            for sub in group.chunks_exact(d) {
                for j in 0..d {
                    out.increments[k * d + j] += sub[j];
                }
            }
        }
        Ok(())
    }
}

/// `Psi^N(u)`: one unit of time with `noise.n_substeps()` uniform substeps.
pub fn simulate_step<T: Real>(
    model: &DynamicsModel<T>,
    u: &[T],
    noise: &NoisePath<T>,
    scheme: Scheme,
) -> Result<Vec<T>> {
    let mut out = u.to_vec();
    model.advance(&mut out, noise, scheme)?;
    Ok(out)
}

/// Advances a fine state on `noise_fine` and a coarse state on the same
/// path coarsened to `coarse_substeps` increments.
pub fn simulate_coupled_step<T: Real>(
    model: &DynamicsModel<T>,
    u_fine: &[T],
    u_coarse: &[T],
    noise_fine: &NoisePath<T>,
    coarse_substeps: usize,
    scheme: Scheme,
) -> Result<(Vec<T>, Vec<T>)> {
    if coarse_substeps == 0 || !noise_fine.n_substeps().is_multiple_of(coarse_substeps) {
        return Err(Error::invalid(format!(
            "coarse resolution {coarse_substeps} does not divide fine resolution {}",
            noise_fine.n_substeps()
        )));
    }
    let coarse_noise = noise_fine.coarsen(noise_fine.n_substeps() / coarse_substeps)?;
    let fine = simulate_step(model, u_fine, noise_fine, scheme)?;
    let coarse = simulate_step(model, u_coarse, &coarse_noise, scheme)?;
    Ok((fine, coarse))
}

/// Greatest common divisor, used to find a common noise resolution.
pub(crate) fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, ZeroNoise};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ou() -> DynamicsModel<f64> {
        DynamicsModel::ornstein_uhlenbeck(0.5).unwrap()
    }

    #[test]
    fn drift_values() {
        assert_eq!(ou().drift(&[2.0]), vec![-2.0]);
        let dw = DynamicsModel::double_well(0.5).unwrap();
        assert_eq!(dw.drift_scalar(0.0), 0.0);
        // Central difference of V against the closed-form derivative.
        for &x in &[-1.3, -0.4, 0.2, 0.9, 2.5] {
            let h = 1e-6;
            let fd = (double_well_potential(x + h) - double_well_potential(x - h)) / (2.0 * h);
            assert_relative_eq!(dw.drift_scalar(x), -fd, epsilon = 1e-8);
        }
        let cos = DynamicsModel::cosine_drift(0.5).unwrap();
        assert_relative_eq!(cos.drift_scalar(0.0), -std::f64::consts::PI / 5.0);
    }

    #[test]
    fn rejects_bad_sigma_and_names() {
        assert!(DynamicsModel::<f64>::ornstein_uhlenbeck(0.0).is_err());
        assert!(DynamicsModel::<f64>::double_well(-1.0).is_err());
        assert!(DynamicsModel::<f64>::from_name("lorenz", 0.5).is_err());
        let m = DynamicsModel::<f64>::from_name("double-well", 0.5).unwrap();
        assert_eq!(m.kind(), ModelKind::DoubleWell);
    }

    #[test]
    fn exact_ou_deterministic_part() {
        let z = NoisePath::zeros(1, 1).unwrap();
        let out = simulate_step(&ou(), &[1.0], &z, Scheme::Exact).unwrap();
        assert_relative_eq!(out[0], (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(out[0], 0.367879, epsilon = 1e-6);
        assert_eq!(exact_ou_step(&[0.0], 0.5, &[0.0]).unwrap(), vec![0.0]);
        assert_relative_eq!(exact_ou_step(&[1.0], 3.0, &[0.0]).unwrap()[0], (-1.0f64).exp());
    }

    #[test]
    fn exact_requires_exact_model() {
        let dw = DynamicsModel::double_well(0.5).unwrap();
        let z = NoisePath::zeros(4, 1).unwrap();
        assert!(simulate_step(&dw, &[0.0], &z, Scheme::Exact).is_err());
    }

    #[test]
    fn double_well_fixed_point() {
        let dw = DynamicsModel::double_well(0.5).unwrap();
        let z = NoisePath::zeros(1, 1).unwrap();
        assert_eq!(simulate_step(&dw, &[0.0], &z, Scheme::Milstein).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_zero_substeps_and_non_finite_state() {
        assert!(NoisePath::<f64>::zeros(0, 1).is_err());
        let z = NoisePath::zeros(2, 1).unwrap();
        assert!(matches!(
            simulate_step(&ou(), &[f64::NAN], &z, Scheme::EulerMaruyama),
            Err(Error::NonFinite(_))
        ));
        assert!(exact_ou_step(&[f64::INFINITY], 0.5, &[0.0]).is_err());
    }

    #[test]
    fn coupled_euler_hand_iteration() {
        let z = NoisePath::zeros(2, 1).unwrap();
        let (f, c) =
            simulate_coupled_step(&ou(), &[1.0], &[1.0], &z, 1, Scheme::EulerMaruyama).unwrap();
        assert_eq!(f, vec![0.25]);
        assert_eq!(c, vec![0.0]);
        assert!(simulate_coupled_step(&ou(), &[1.0], &[1.0], &z, 3, Scheme::Milstein).is_err());
    }

    #[test]
    fn coarsen_sums_pairs() {
        let p = NoisePath::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.coarsen(2).unwrap().increments(), &[3.0, 7.0]);
        assert!(p.coarsen(3).is_err());
        let p2 = NoisePath::new(2, 2, vec![1.0, 10.0, 2.0, 20.0]).unwrap();
        assert_eq!(p2.coarsen(2).unwrap().increments(), &[3.0, 30.0]);
    }

    #[test]
    fn exact_step_noise_variance() {
        // Var of the unit-time OU noise term: sigma^2 (1 - e^{-2}) / 2.
        let sigma = 0.5;
        let expected = sigma * sigma * (1.0 - (-2.0f64).exp()) / 2.0;
        assert_relative_eq!(expected, 0.108083, epsilon = 1e-6);
        let mut src = RngStream::from_seed(1);
        let n = 1_000_000;
        let mut path = NoisePath::zeros(4, 1).unwrap();
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            path.resample(&mut src);
            let x = simulate_step(&ou(), &[0.0], &path, Scheme::Exact).unwrap()[0];
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // Gaussian sample-variance standard error sqrt(2/n) * var.
        let se = (2.0 / n as f64).sqrt() * expected;
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn stationary_variance_of_iterated_exact_map() {
        let sigma = 0.5;
        let mut src = RngStream::from_seed(2);
        let mut x = 0.0;
        let (mut s2, n) = (0.0, 400_000);
        for i in 0..n + 100 {
            let g = src.standard_normal();
            x = exact_ou_step(&[x], sigma, &[g]).unwrap()[0];
            if i >= 100 {
                s2 += x * x;
            }
        }
        let var = s2 / n as f64;
        // AR(1) with lag-1 correlation e^{-1}: inflate the standard error.
        let rho = (-2.0f64).exp();
        let se = 0.125 * (2.0 / n as f64 * (1.0 + rho) / (1.0 - rho)).sqrt();
        assert!((var - 0.125).abs() < 4.0 * se, "{var}");
    }

    #[test]
    fn milstein_matches_euler_for_additive_noise() {
        let mut src = RngStream::from_seed(3);
        for model in [
            ou(),
            DynamicsModel::double_well(0.5).unwrap(),
            DynamicsModel::cosine_drift(0.5).unwrap(),
        ] {
            for _ in 0..50 {
                let p = NoisePath::sample(16, 1, &mut src).unwrap();
                let u = [src.standard_normal()];
                let a = simulate_step(&model, &u, &p, Scheme::EulerMaruyama).unwrap();
                let b = simulate_step(&model, &u, &p, Scheme::Milstein).unwrap();
                assert_eq!(a[0].to_bits(), b[0].to_bits());
            }
        }
    }

    #[test]
    fn milstein_correction_for_state_dependent_diffusion() {
        // Geometric Brownian motion du = mu u dt + s u dW.
        let (mu, s) = (0.1, 0.4);
        let gbm = DynamicsModel::custom(
            1,
            move |u: &[f64], out: &mut [f64]| out[0] = mu * u[0],
            Diffusion::StateDependent {
                b: Arc::new(move |x| s * x),
                db: Arc::new(move |_| s),
            },
        )
        .unwrap();
        let p = NoisePath::new(1, 1, vec![0.3]).unwrap();
        let em = simulate_step(&gbm, &[1.0], &p, Scheme::EulerMaruyama).unwrap()[0];
        let mil = simulate_step(&gbm, &[1.0], &p, Scheme::Milstein).unwrap()[0];
        assert_relative_eq!(em, 1.0 + 0.1 + 0.4 * 0.3, epsilon = 1e-15);
        assert_relative_eq!(mil, em + 0.5 * 0.4 * 0.4 * (0.09 - 1.0), epsilon = 1e-15);
    }

    #[test]
    fn componentwise_builtin_in_two_dimensions() {
        let m = ou().with_state_dim(2).unwrap();
        let p = NoisePath::new(2, 2, vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let out = simulate_step(&m, &[1.0, -2.0], &p, Scheme::EulerMaruyama).unwrap();
        let scalar = |u0: f64, a: f64, b: f64| {
            let mut x = u0;
            x += -x * 0.5 + 0.5 * a;
            x += -x * 0.5 + 0.5 * b;
            x
        };
        assert_relative_eq!(out[0], scalar(1.0, 0.1, 0.3), epsilon = 1e-15);
        assert_relative_eq!(out[1], scalar(-2.0, -0.2, 0.05), epsilon = 1e-15);
    }

    #[test]
    fn zero_noise_source_gives_zero_path() {
        let p: NoisePath<f64> = NoisePath::sample(8, 1, &mut ZeroNoise).unwrap();
        assert!(p.increments().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f32_instantiation() {
        let m = DynamicsModel::<f32>::ornstein_uhlenbeck(0.5).unwrap();
        let z = NoisePath::<f32>::zeros(2, 1).unwrap();
        assert_eq!(simulate_step(&m, &[1.0f32], &z, Scheme::EulerMaruyama).unwrap(), vec![0.25f32]);
    }

    proptest! {
        #[test]
        fn coarsening_preserves_total(incs in proptest::collection::vec(-3.0f64..3.0, 1..32)) {
            let n = incs.len() * 2;
            let mut all = incs.clone();
            all.extend(incs.iter().map(|x| x * 0.5));
            let p = NoisePath::new(n, 1, all).unwrap();
            let c = p.coarsen(2).unwrap();
            prop_assert_eq!(c.n_substeps(), n / 2);
            for j in 0..c.n_substeps() {
                prop_assert_eq!(c.increments()[j], p.increments()[2 * j] + p.increments()[2 * j + 1]);
            }
            let total: f64 = p.increments().iter().sum();
            let coarse_total: f64 = c.increments().iter().sum();
            prop_assert!((total - coarse_total).abs() < 1e-12);
        }

        #[test]
        fn simulate_step_is_deterministic(seed in 0u64..1000, u in -3.0f64..3.0) {
            let mut src = RngStream::from_seed(seed);
            let p = NoisePath::sample(8, 1, &mut src).unwrap();
            let m = DynamicsModel::double_well(0.5).unwrap();
            let a = simulate_step(&m, &[u], &p, Scheme::Milstein).unwrap();
            let b = simulate_step(&m, &[u], &p, Scheme::Milstein).unwrap();
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }
}
