//! Single-level ensemble Kalman filter with perturbed observations.
//!
//! One assimilation cycle maps an updated ensemble at time `n` to the next
//! updated ensemble:
//!
//! 1. [`predict`]: every particle is pushed through `Psi^N` with its own
//!    freshly drawn noise path;
//! 2. [`sample_covariance`] and [`kalman_gain`] give `K = C H^T (H C H^T + Gamma)^{-1}`;
//! 3. [`update`]: `v_i <- (I - K H) v_i + K (y + eta_i)` with iid
//!    `eta_i ~ N(0, Gamma)`.
//!
//! Ensembles are stored as `d x P` matrices, one column per particle, so each
//! particle is contiguous in memory.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DynamicsModel, NoisePath, Scheme};
use crate::rng::{tag, GaussianSource, StreamKey};
use crate::scalar::{round_half_away, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Updated,
    Prediction,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// `(1/P) sum v v^T - vbar vbar^T`.
    #[default]
    Biased,
    /// The biased estimate scaled by `P/(P-1)`.
    Unbiased,
}

/// Linear observations `y = H u + eta`, `eta ~ N(0, Gamma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationModel<T: Real> {
    h: DMatrix<T>,
    gamma: DMatrix<T>,
    gamma_chol: DMatrix<T>,
}

impl<T: Real> ObservationModel<T> {
    pub fn new(h: DMatrix<T>, gamma: DMatrix<T>) -> Result<Self> {
        let d_obs = h.nrows();
        if d_obs == 0 || h.ncols() == 0 {
            return Err(Error::invalid("observation operator must be non-empty"));
        }
        if gamma.shape() != (d_obs, d_obs) {
            return Err(Error::DimensionMismatch(format!(
                "Gamma is {:?}, expected {d_obs}x{d_obs}",
                gamma.shape()
            )));
        }
        if h.iter().chain(gamma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation model"));
        }
        let scale = gamma.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let tol = T::lit(1e-12) * scale;
        for i in 0..d_obs {
            for j in 0..i {
                if (gamma[(i, j)] - gamma[(j, i)]).abs() > tol {
                    return Err(Error::NotPositiveDefinite("Gamma"));
                }
            }
        }
        let gamma_chol = gamma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Gamma"))?
            .unpack();
        Ok(ObservationModel {
            h,
            gamma,
            gamma_chol,
        })
    }

    /// Scalar observation of a scalar state.
    pub fn scalar(h: T, gamma: T) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, h), DMatrix::from_element(1, 1, gamma))
    }

    pub fn h(&self) -> &DMatrix<T> {
        &self.h
    }

    pub fn gamma(&self) -> &DMatrix<T> {
        &self.gamma
    }

    /// Lower-triangular `L` with `L L^T = Gamma`.
    pub fn gamma_chol(&self) -> &DMatrix<T> {
        &self.gamma_chol
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    /// Draws `eta ~ N(0, Gamma)` into `out`.
    #[inline]
    pub fn draw_perturbation<G: GaussianSource>(&self, src: &mut G, out: &mut [T]) {
        let k = out.len();
        if k == 1 {
            out[0] = self.gamma_chol[(0, 0)] * T::lit(src.standard_normal());
            return;
        }
        let mut z = [T::zero(); 8];
        let mut heap;
        let z: &mut [T] = if k <= 8 {
            &mut z[..k]
        } else {
            heap = vec![T::zero(); k];
            &mut heap
        };
        for zi in z.iter_mut() {
            *zi = T::lit(src.standard_normal());
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.gamma_chol[(i, j)] * *zj;
            }
            *o = acc;
        }
    }
}

/// Particles of one EnKF ensemble at one assimilation time.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState<T: Real> {
    particles: DMatrix<T>,
    pub time_index: usize,
    pub phase: Phase,
}

impl<T: Real> EnsembleState<T> {
    /// `particles` is `d x P`, one column per particle.
    pub fn new(particles: DMatrix<T>, time_index: usize, phase: Phase) -> Result<Self> {
        if particles.ncols() == 0 || particles.nrows() == 0 {
            return Err(Error::invalid("ensemble needs at least one particle"));
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ensemble"));
        }
        Ok(EnsembleState {
            particles,
            time_index,
            phase,
        })
    }

    /// Scalar ensemble from a list of particle values.
    pub fn from_scalars(values: &[T], time_index: usize, phase: Phase) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, values.len(), values), time_index, phase)
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn particles(&self) -> &DMatrix<T> {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.particles.as_slice()[i * d..(i + 1) * d]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        self.particles.as_mut_slice()
    }

    pub fn mean(&self) -> DVector<T> {
        DVector::from_vec(column_mean(self.particles.as_slice(), self.dim()))
    }

    /// `mu[phi] = (1/P) sum_i phi(v_i)`.
    pub fn empirical(&self, phi: &Observable<T>) -> T {
        empirical_average(self.particles.as_slice(), self.dim(), phi)
    }

    fn expect_phase(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(Error::WrongPhase {
                expected,
                found: self.phase,
            });
        }
        Ok(())
    }
}

/// Scalar quantity of interest `phi: R^d -> R`.
#[derive(Clone)]
pub struct Observable<T> {
    name: Arc<str>,
    f: Arc<dyn Fn(&[T]) -> T + Send + Sync>,
}

impl<T> fmt::Debug for Observable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observable({})", self.name)
    }
}

impl<T: Real> Observable<T> {
    pub fn new(name: &str, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Observable {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    /// `phi(x) = x_0`.
    pub fn first_component() -> Self {
        Self::new("x", |v| v[0])
    }

    /// `phi(x) = x_0^2`.
    pub fn first_component_squared() -> Self {
        Self::new("x^2", |v| v[0] * v[0])
    }

    pub fn constant(c: T) -> Self {
        Self::new("const", move |_| c)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline(always)]
    pub fn eval(&self, v: &[T]) -> T {
        (self.f)(v)
    }
}

pub(crate) fn empirical_average<T: Real>(data: &[T], d: usize, phi: &Observable<T>) -> T {
    let p = data.len() / d;
    let sum = data
        .chunks_exact(d)
        .fold(T::zero(), |acc, v| acc + phi.eval(v));
    sum / T::from_usize_lossy(p)
}

pub(crate) fn column_mean<T: Real>(data: &[T], d: usize) -> Vec<T> {
    let p = data.len() / d;
    let mut m = vec![T::zero(); d];
    for v in data.chunks_exact(d) {
        for j in 0..d {
            m[j] += v[j];
        }
    }
    let inv = T::one() / T::from_usize_lossy(p);
    m.iter_mut().for_each(|x| *x *= inv);
    m
}

/// Biased or unbiased sample covariance of particle columns in `data`.
///
/// Evaluated in centered form, which is algebraically identical to
/// `(1/P) sum v v^T - vbar vbar^T` but free of cancellation.
pub(crate) fn covariance_of<T: Real>(data: &[T], d: usize, mode: CovarianceMode) -> Result<DMatrix<T>> {
    let p = data.len() / d;
    if p == 0 {
        return Err(Error::invalid("covariance of an empty ensemble"));
    }
    if mode == CovarianceMode::Unbiased && p < 2 {
        return Err(Error::invalid(
            "unbiased sample covariance needs at least two particles",
        ));
    }
    if d == 1 {
        return Ok(DMatrix::from_element(1, 1, scalar_variance(data, mode)));
    }
    let m = column_mean(data, d);
    let mut c = DMatrix::zeros(d, d);
    {
        for v in data.chunks_exact(d) {
            for a in 0..d {
                let ea = v[a] - m[a];
                for b in 0..=a {
                    c[(a, b)] += ea * (v[b] - m[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                c[(b, a)] = c[(a, b)];
            }
        }
    }
    let pf = T::from_usize_lossy(p);
    c /= pf;
    if mode == CovarianceMode::Unbiased {
        c *= pf / (pf - T::one());
    }
    Ok(c)
}

/// Scalar-state case of [`covariance_of`]; needs at least one particle
/// (two when unbiased).
#[inline]
pub(crate) fn scalar_variance<T: Real>(data: &[T], mode: CovarianceMode) -> T {
    let pf = T::from_usize_lossy(data.len());
    let mu = data.iter().fold(T::zero(), |acc, &x| acc + x) * (T::one() / pf);
    let s = data.iter().fold(T::zero(), |acc, &x| {
        let e = x - mu;
        acc + e * e
    });
    let c = s / pf;
    match mode {
        CovarianceMode::Biased => c,
        CovarianceMode::Unbiased => c * (pf / (pf - T::one())),
    }
}

/// Scalar-state, scalar-observation case of [`kalman_gain`].
#[inline]
pub(crate) fn scalar_gain<T: Real>(c: T, h: T, gamma: T) -> T {
    let s = h * c * h + gamma;
    c * h / s
}

/// Scalar case of [`update_data`].
#[inline]
pub(crate) fn update_scalar<T: Real>(data: &mut [T], g: T, h: T, y: T, etas: &[T]) {
    for (v, &eta) in data.iter_mut().zip(etas) {
        *v += g * (y + eta - h * *v);
    }
}

/// Sample covariance of the ensemble.
pub fn sample_covariance<T: Real>(ens: &EnsembleState<T>, mode: CovarianceMode) -> Result<DMatrix<T>> {
    covariance_of(ens.particles.as_slice(), ens.dim(), mode)
}

/// `K = C H^T (H C H^T + Gamma)^{-1}`, via a Cholesky solve of the SPD
/// innovation covariance.
pub fn kalman_gain<T: Real>(c: &DMatrix<T>, obs: &ObservationModel<T>) -> Result<DMatrix<T>> {
    let d = obs.state_dim();
    if c.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {:?}, expected {d}x{d}",
            c.shape()
        )));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    let h = obs.h();
    if d == 1 && obs.obs_dim() == 1 {
        let g = scalar_gain(c[(0, 0)], h[(0, 0)], obs.gamma()[(0, 0)]);
        return Ok(DMatrix::from_element(1, 1, g));
    }
    let hc = h * c;
    let s = &hc * h.transpose() + obs.gamma();
    let chol = s
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
    // S K^T = H C, since C is symmetric.
    Ok(chol.solve(&hc).transpose())
}

/// Advances particle columns in place; each particle gets a fresh path.
pub(crate) fn predict_data<T: Real, G: GaussianSource>(
    data: &mut [T],
    model: &DynamicsModel<T>,
    path: &mut NoisePath<T>,
    scheme: Scheme,
    src: &mut G,
) -> Result<()> {
    let d = model.state_dim();
    for v in data.chunks_exact_mut(d) {
        path.resample(src);
        model.advance(v, path, scheme)?;
    }
    Ok(())
}

/// Prediction: `v_{n+1,i} = Psi^N(vhat_{n,i})` with independent noise.
pub fn predict<T: Real, G: GaussianSource>(
    ens: &EnsembleState<T>,
    model: &DynamicsModel<T>,
    n_substeps: usize,
    scheme: Scheme,
    src: &mut G,
) -> Result<EnsembleState<T>> {
    ens.expect_phase(Phase::Updated)?;
    let mut out = ens.clone();
    predict_in_place(&mut out, model, n_substeps, scheme, src)?;
    Ok(out)
}

pub fn predict_in_place<T: Real, G: GaussianSource>(
    ens: &mut EnsembleState<T>,
    model: &DynamicsModel<T>,
    n_substeps: usize,
    scheme: Scheme,
    src: &mut G,
) -> Result<()> {
    ens.expect_phase(Phase::Updated)?;
    let mut path = NoisePath::zeros(n_substeps, model.state_dim())?;
    predict_data(ens.data_mut(), model, &mut path, scheme, src)?;
    ens.time_index += 1;
    ens.phase = Phase::Prediction;
    Ok(())
}

/// Draws `count` perturbations `eta_i ~ N(0, Gamma)`, stored contiguously.
pub(crate) fn draw_perturbations<T: Real, G: GaussianSource>(
    obs: &ObservationModel<T>,
    count: usize,
    src: &mut G,
    out: &mut Vec<T>,
) {
    let k = obs.obs_dim();
    out.clear();
    out.resize(count * k, T::zero());
    for eta in out.chunks_exact_mut(k) {
        obs.draw_perturbation(src, eta);
    }
}

/// `v_i <- v_i + K (y + eta_i - H v_i)` for every particle column.
pub(crate) fn update_data<T: Real>(
    data: &mut [T],
    gain: &DMatrix<T>,
    h: &DMatrix<T>,
    y: &[T],
    etas: &[T],
) {
    let (d, k) = (h.ncols(), h.nrows());
    if d == 1 && k == 1 {
        update_scalar(data, gain[(0, 0)], h[(0, 0)], y[0], etas);
        return;
    }
    let mut innov = vec![T::zero(); k];
    for (v, eta) in data.chunks_exact_mut(d).zip(etas.chunks_exact(k)) {
        for r in 0..k {
            let mut hv = T::zero();
            for c in 0..d {
                hv += h[(r, c)] * v[c];
            }
            innov[r] = y[r] + eta[r] - hv;
        }
        for c in 0..d {
            let mut acc = T::zero();
            for r in 0..k {
                acc += gain[(c, r)] * innov[r];
            }
            v[c] += acc;
        }
    }
}

fn check_update_dims<T: Real>(
    d: usize,
    gain: &DMatrix<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
) -> Result<()> {
    if obs.state_dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "H has {} columns, state has {d}",
            obs.state_dim()
        )));
    }
    if gain.shape() != (d, obs.obs_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "gain is {:?}, expected {d}x{}",
            gain.shape(),
            obs.obs_dim()
        )));
    }
    if y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation has {} components, expected {}",
            y.len(),
            obs.obs_dim()
        )));
    }
    Ok(())
}

/// Analysis: `vhat_i = (I - K H) v_i + K (y + eta_i)`, fresh `eta_i` per particle.
pub fn update<T: Real, G: GaussianSource>(
    ens: &EnsembleState<T>,
    gain: &DMatrix<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    src: &mut G,
) -> Result<EnsembleState<T>> {
    let mut out = ens.clone();
    update_in_place(&mut out, gain, obs, y, src)?;
    Ok(out)
}

pub fn update_in_place<T: Real, G: GaussianSource>(
    ens: &mut EnsembleState<T>,
    gain: &DMatrix<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    src: &mut G,
) -> Result<()> {
    ens.expect_phase(Phase::Prediction)?;
    check_update_dims(ens.dim(), gain, obs, y)?;
    let mut etas = Vec::new();
    draw_perturbations(obs, ens.size(), src, &mut etas);
    update_data(ens.data_mut(), gain, obs.h(), y.as_slice(), &etas);
    ens.phase = Phase::Updated;
    Ok(())
}

/// Same as [`update`] with the perturbations supplied by the caller.
pub fn update_with_perturbations<T: Real>(
    ens: &EnsembleState<T>,
    gain: &DMatrix<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    etas: &[DVector<T>],
) -> Result<EnsembleState<T>> {
    ens.expect_phase(Phase::Prediction)?;
    check_update_dims(ens.dim(), gain, obs, y)?;
    if etas.len() != ens.size() || etas.iter().any(|e| e.len() != obs.obs_dim()) {
        return Err(Error::DimensionMismatch(
            "one perturbation per particle required".into(),
        ));
    }
    let flat: Vec<T> = etas.iter().flat_map(|e| e.iter().copied()).collect();
    let mut out = ens.clone();
    update_data(out.data_mut(), gain, obs.h(), y.as_slice(), &flat);
    out.phase = Phase::Updated;
    Ok(out)
}

/// Gaussian initial distribution `N(mean, cov)` for the updated ensemble at `n = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDistribution<T: Real> {
    mean: DVector<T>,
    chol: DMatrix<T>,
}

impl<T: Real> InitialDistribution<T> {
    pub fn gaussian(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::DimensionMismatch("initial covariance shape".into()));
        }
        let chol = cov
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("initial covariance"))?
            .unpack();
        Ok(InitialDistribution { mean, chol })
    }

    /// `N(0, Gamma)`, requiring `d = d_O`.
    pub fn from_observation_noise(obs: &ObservationModel<T>) -> Result<Self> {
        if obs.obs_dim() != obs.state_dim() {
            return Err(Error::DimensionMismatch(
                "N(0, Gamma) prior needs equal state and observation dimensions".into(),
            ));
        }
        Self::gaussian(DVector::zeros(obs.state_dim()), obs.gamma().clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<T> {
        &self.chol * self.chol.transpose()
    }

    pub fn sample_into<G: GaussianSource>(&self, src: &mut G, out: &mut [T]) {
        let d = self.dim();
        let z: Vec<T> = (0..d).map(|_| T::lit(src.standard_normal())).collect();
        for i in 0..d {
            let mut acc = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.chol[(i, j)] * *zj;
            }
            out[i] = acc;
        }
    }

    /// `count` iid draws as an updated ensemble at time 0.
    pub fn sample_ensemble<G: GaussianSource>(&self, count: usize, src: &mut G) -> Result<EnsembleState<T>> {
        let d = self.dim();
        let mut data = DMatrix::zeros(d, count);
        for v in data.as_mut_slice().chunks_exact_mut(d) {
            self.sample_into(src, v);
        }
        EnsembleState::new(data, 0, Phase::Updated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnkfConfig {
    /// Substeps per unit time, `N`.
    pub n_substeps: usize,
    /// Ensemble size, `P`.
    pub ensemble_size: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub covariance_mode: CovarianceMode,
}

impl EnkfConfig {
    pub fn new(n_substeps: usize, ensemble_size: usize) -> Self {
        EnkfConfig {
            n_substeps,
            ensemble_size,
            scheme: Scheme::Milstein,
            seed: 0,
            covariance_mode: CovarianceMode::Biased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_substeps == 0 {
            return Err(Error::invalid("EnKF resolution N must be at least 1"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::invalid("EnKF ensemble size P must be at least 1"));
        }
        Ok(())
    }

    /// Stream used by [`enkf_run`].
    pub fn stream_key(&self) -> StreamKey {
        StreamKey::root(self.seed).child(tag::ENKF)
    }
}

/// Updated ensemble at one assimilation time with its QoI averages.
#[derive(Clone, Debug)]
pub struct EnkfRecord<T: Real> {
    pub state: EnsembleState<T>,
    pub qoi: Vec<T>,
}

/// One predict / covariance / gain / update cycle.
pub(crate) fn assimilate<T: Real, G: GaussianSource>(
    ens: &mut EnsembleState<T>,
    cfg: &EnkfConfig,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    src: &mut G,
) -> Result<()> {
    predict_in_place(ens, model, cfg.n_substeps, cfg.scheme, src)?;
    let c = sample_covariance(ens, cfg.covariance_mode)?;
    let k = kalman_gain(&c, obs)?;
    update_in_place(ens, &k, obs, y, src)
}

fn check_run_inputs<T: Real>(
    cfg: &EnkfConfig,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    initial: &InitialDistribution<T>,
) -> Result<()> {
    cfg.validate()?;
    if model.state_dim() != obs.state_dim() || initial.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model d={}, observation operator d={}, initial d={}",
            model.state_dim(),
            obs.state_dim(),
            initial.dim()
        )));
    }
    Ok(())
}

/// Full EnKF recursion keeping every updated ensemble.
///
/// Record `n` holds the updated ensemble after assimilating `y_n`
/// (`n = 0` is the initial ensemble) and `mu_n[phi]` for each observable.
pub fn enkf_run<T: Real>(
    cfg: &EnkfConfig,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    observations: &[DVector<T>],
    initial: &InitialDistribution<T>,
    observables: &[Observable<T>],
) -> Result<Vec<EnkfRecord<T>>> {
    check_run_inputs(cfg, model, obs, initial)?;
    let mut src = cfg.stream_key().stream();
    let mut ens = initial.sample_ensemble(cfg.ensemble_size, &mut src)?;
    let qoi = |e: &EnsembleState<T>| observables.iter().map(|phi| e.empirical(phi)).collect();
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(EnkfRecord {
        qoi: qoi(&ens),
        state: ens.clone(),
    });
    for y in observations {
        assimilate(&mut ens, cfg, model, obs, y, &mut src)?;
        out.push(EnkfRecord {
            qoi: qoi(&ens),
            state: ens.clone(),
        });
    }
    Ok(out)
}

/// EnKF recursion that only keeps `mu_n[phi]`, indexed `[n][observable]`.
pub fn enkf_qoi_run<T: Real, G: GaussianSource>(
    cfg: &EnkfConfig,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    observations: &[DVector<T>],
    initial: &InitialDistribution<T>,
    observables: &[Observable<T>],
    src: &mut G,
) -> Result<Vec<Vec<T>>> {
    check_run_inputs(cfg, model, obs, initial)?;
    let mut ens = initial.sample_ensemble(cfg.ensemble_size, src)?;
    let qoi = |e: &EnsembleState<T>| observables.iter().map(|phi| e.empirical(phi)).collect();
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(qoi(&ens));
    for y in observations {
        assimilate(&mut ens, cfg, model, obs, y, src)?;
        out.push(qoi(&ens));
    }
    Ok(out)
}

/// Resolution and ensemble size balancing bias and statistical error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnkfParameters {
    pub n_substeps: usize,
    pub ensemble_size: usize,
}

/// `P = Round(8 eps^-2)`, `N = Round(eps^{-1/alpha})`.
pub fn enkf_parameters(eps: f64, alpha: f64) -> Result<EnkfParameters> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("accuracy must lie in (0, 1), got {eps}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("weak rate must be positive, got {alpha}")));
    }
    let p = round_half_away(8.0 * eps.powi(-2)).max(1) as usize;
    let n = round_half_away(eps.powf(-1.0 / alpha)).max(1) as usize;
    Ok(EnkfParameters {
        n_substeps: n,
        ensemble_size: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, Scripted, ZeroNoise};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_obs() -> ObservationModel<f64> {
        ObservationModel::scalar(1.0, 0.1).unwrap()
    }

    #[test]
    fn observation_model_validation() {
        let obs = scalar_obs();
        assert_relative_eq!(obs.gamma_chol()[(0, 0)].powi(2), 0.1, epsilon = 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(ObservationModel::new(DMatrix::identity(2, 2), bad).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ObservationModel::new(DMatrix::identity(2, 2), indefinite).is_err());
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let o = ObservationModel::new(DMatrix::identity(2, 2), g.clone()).unwrap();
        let rebuilt = o.gamma_chol() * o.gamma_chol().transpose();
        assert!((rebuilt - g).abs().max() < 1e-12 * 2.0);
    }

    #[test]
    fn covariance_of_identical_particles_is_zero() {
        let e = EnsembleState::from_scalars(&[1.5, 1.5, 1.5], 0, Phase::Prediction).unwrap();
        assert_eq!(sample_covariance(&e, CovarianceMode::Biased).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn covariance_hand_values() {
        let e = EnsembleState::from_scalars(&[0.0, 2.0], 0, Phase::Prediction).unwrap();
        assert_eq!(sample_covariance(&e, CovarianceMode::Biased).unwrap()[(0, 0)], 1.0);
        assert_eq!(sample_covariance(&e, CovarianceMode::Unbiased).unwrap()[(0, 0)], 2.0);
        let one = EnsembleState::from_scalars(&[3.0], 0, Phase::Prediction).unwrap();
        assert_eq!(sample_covariance(&one, CovarianceMode::Biased).unwrap()[(0, 0)], 0.0);
        assert!(sample_covariance(&one, CovarianceMode::Unbiased).is_err());
    }

    #[test]
    fn covariance_matches_raw_moment_formula_in_2d() {
        let data = DMatrix::from_column_slice(2, 4, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0, 0.5, -2.0]);
        let e = EnsembleState::new(data.clone(), 0, Phase::Prediction).unwrap();
        let c = sample_covariance(&e, CovarianceMode::Biased).unwrap();
        let p = 4.0;
        let mut raw = DMatrix::<f64>::zeros(2, 2);
        for col in data.column_iter() {
            raw += col * col.transpose() / p;
        }
        let m = e.mean();
        raw -= &m * m.transpose();
        assert!((c - raw).abs().max() < 1e-14);
    }

    #[test]
    fn large_standard_normal_covariance() {
        let mut src = RngStream::from_seed(5);
        let vals: Vec<f64> = (0..1_000_000).map(|_| src.standard_normal()).collect();
        let e = EnsembleState::from_scalars(&vals, 0, Phase::Prediction).unwrap();
        let c = sample_covariance(&e, CovarianceMode::Biased).unwrap()[(0, 0)];
        assert!((c - 1.0).abs() < 0.005, "{c}");
    }

    #[test]
    fn gain_hand_values() {
        let obs = scalar_obs();
        let k = kalman_gain(&DMatrix::from_element(1, 1, 0.1), &obs).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.5, epsilon = 1e-15);
        let k0 = kalman_gain(&DMatrix::zeros(1, 1), &obs).unwrap();
        assert_eq!(k0[(0, 0)], 0.0);
        assert!(kalman_gain(&DMatrix::from_element(1, 1, f64::NAN), &obs).is_err());
    }

    #[test]
    fn gain_matches_explicit_inverse_in_2d() {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let obs = ObservationModel::new(h.clone(), DMatrix::from_element(1, 1, 0.2)).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let k = kalman_gain(&c, &obs).unwrap();
        let s = &h * &c * h.transpose() + obs.gamma();
        let expected = &c * h.transpose() * s.try_inverse().unwrap();
        assert!((k - expected).abs().max() < 1e-14);
    }

    #[test]
    fn update_identities() {
        let obs = scalar_obs();
        let y = DVector::from_element(1, 0.0);
        let pred = EnsembleState::from_scalars(&[2.0], 1, Phase::Prediction).unwrap();
        let k = DMatrix::from_element(1, 1, 0.5);
        let out = update(&pred, &k, &obs, &y, &mut ZeroNoise).unwrap();
        assert_eq!(out.particle(0), &[1.0]);
        assert_eq!(out.phase, Phase::Updated);
        assert_eq!(out.time_index, 1);

        let pred = EnsembleState::from_scalars(&[2.0, -1.0, 0.3], 1, Phase::Prediction).unwrap();
        let zero_gain = DMatrix::zeros(1, 1);
        let mut src = RngStream::from_seed(1);
        let same = update(&pred, &zero_gain, &obs, &y, &mut src).unwrap();
        assert_eq!(same.particles(), pred.particles());

        let y = DVector::from_element(1, 0.7);
        let full = update(&pred, &DMatrix::identity(1, 1), &obs, &y, &mut ZeroNoise).unwrap();
        assert!(full.particles().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn update_checks_phase_and_dims() {
        let obs = scalar_obs();
        let upd = EnsembleState::from_scalars(&[1.0], 0, Phase::Updated).unwrap();
        let y = DVector::from_element(1, 0.0);
        let k = DMatrix::zeros(1, 1);
        assert!(matches!(
            update(&upd, &k, &obs, &y, &mut ZeroNoise),
            Err(Error::WrongPhase { .. })
        ));
        let pred = EnsembleState::from_scalars(&[1.0], 0, Phase::Prediction).unwrap();
        let y2 = DVector::from_element(2, 0.0);
        assert!(matches!(
            update(&pred, &k, &obs, &y2, &mut ZeroNoise),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn affine_update_identity_on_recorded_noise() {
        let obs = scalar_obs();
        let mut src = RngStream::from_seed(9);
        let vals: Vec<f64> = (0..500).map(|_| src.standard_normal()).collect();
        let pred = EnsembleState::from_scalars(&vals, 1, Phase::Prediction).unwrap();
        let etas: Vec<DVector<f64>> = (0..500)
            .map(|_| DVector::from_element(1, 0.3 * src.standard_normal()))
            .collect();
        let y = DVector::from_element(1, 0.4);
        let k = 0.37;
        let out =
            update_with_perturbations(&pred, &DMatrix::from_element(1, 1, k), &obs, &y, &etas)
                .unwrap();
        let eta_mean = etas.iter().map(|e| e[0]).sum::<f64>() / 500.0;
        let expected = (1.0 - k) * pred.mean()[0] + k * 0.4 + k * eta_mean;
        assert_relative_eq!(out.mean()[0], expected, epsilon = 1e-13);
    }

    #[test]
    fn predict_delegates_to_exact_step() {
        let model = DynamicsModel::ornstein_uhlenbeck(0.5f64).unwrap();
        let ens = EnsembleState::from_scalars(&[0.8], 0, Phase::Updated).unwrap();
        let z = 1.234;
        let out = predict(&ens, &model, 1, Scheme::Exact, &mut Scripted::new(vec![z])).unwrap();
        let direct = crate::models::exact_ou_step(&[0.8], 0.5, &[z]).unwrap();
        assert_eq!(out.particle(0)[0].to_bits(), direct[0].to_bits());
        assert_eq!(out.phase, Phase::Prediction);
        assert_eq!(out.time_index, 1);
        assert!(predict(&out, &model, 1, Scheme::Exact, &mut ZeroNoise).is_err());
    }

    #[test]
    fn predict_identical_particles_without_noise() {
        let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
        let ens = EnsembleState::from_scalars(&[0.3; 3], 0, Phase::Updated).unwrap();
        let out = predict(&ens, &model, 1, Scheme::EulerMaruyama, &mut ZeroNoise).unwrap();
        assert!(out.particles().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_variance_propagates() {
        let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
        let mut src = RngStream::from_seed(12);
        let p = 10_000;
        let vals: Vec<f64> = (0..p).map(|_| 0.1f64.sqrt() * src.standard_normal()).collect();
        let ens = EnsembleState::from_scalars(&vals, 0, Phase::Updated).unwrap();
        let out = predict(&ens, &model, 1, Scheme::Exact, &mut src).unwrap();
        let var = sample_covariance(&out, CovarianceMode::Biased).unwrap()[(0, 0)];
        let q = 0.25 * (1.0 - (-2.0f64).exp()) / 2.0;
        let expected = 0.1 * (-2.0f64).exp() + q;
        let se = (2.0 / p as f64).sqrt() * expected;
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn parameter_formulas() {
        let p4 = enkf_parameters(2f64.powi(-4), 1.0).unwrap();
        assert_eq!((p4.n_substeps, p4.ensemble_size), (16, 2048));
        let p5 = enkf_parameters(2f64.powi(-5), 1.0).unwrap();
        assert_eq!((p5.n_substeps, p5.ensemble_size), (32, 8192));
        assert_eq!(p5.ensemble_size, 4 * p4.ensemble_size);
        assert_eq!(p5.n_substeps, 2 * p4.n_substeps);
        assert!(enkf_parameters(1.0, 1.0).is_err());
        assert!(enkf_parameters(0.1, 0.0).is_err());
    }

    #[test]
    fn zero_observations_returns_initial_statistics() {
        let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
        let obs = scalar_obs();
        let init = InitialDistribution::from_observation_noise(&obs).unwrap();
        let cfg = EnkfConfig::new(4, 50);
        let phis = [Observable::first_component()];
        let out = enkf_run(&cfg, &model, &obs, &[], &init, &phis).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].state.time_index, 0);
        assert_relative_eq!(out[0].qoi[0], out[0].state.mean()[0]);
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let model = DynamicsModel::double_well(0.5).unwrap();
        let obs = scalar_obs();
        let init = InitialDistribution::from_observation_noise(&obs).unwrap();
        let mut cfg = EnkfConfig::new(8, 64);
        cfg.seed = 42;
        let ys: Vec<_> = [0.2, -0.4, 1.0].iter().map(|&y| DVector::from_element(1, y)).collect();
        let phis = [Observable::first_component(), Observable::first_component_squared()];
        let a = enkf_run(&cfg, &model, &obs, &ys, &init, &phis).unwrap();
        let b = enkf_run(&cfg, &model, &obs, &ys, &init, &phis).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.state, rb.state);
            assert_eq!(ra.qoi, rb.qoi);
        }
        let lean =
            enkf_qoi_run(&cfg, &model, &obs, &ys, &init, &phis, &mut cfg.stream_key().stream())
                .unwrap();
        for (ra, q) in a.iter().zip(&lean) {
            assert_eq!(&ra.qoi, q);
        }
    }

    #[test]
    fn single_particle_is_allowed() {
        let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
        let obs = scalar_obs();
        let init = InitialDistribution::from_observation_noise(&obs).unwrap();
        let ys = vec![DVector::from_element(1, 1.0)];
        let out = enkf_run(&EnkfConfig::new(2, 1), &model, &obs, &ys, &init, &[]).unwrap();
        assert_eq!(out.len(), 2);
    }

    proptest! {
        #[test]
        fn scalar_gain_in_unit_interval(c in 0.0f64..1e6, gamma in 1e-6f64..1e3) {
            let obs = ObservationModel::scalar(1.0, gamma).unwrap();
            let k = kalman_gain(&DMatrix::from_element(1, 1, c), &obs).unwrap()[(0, 0)];
            prop_assert!((0.0..1.0).contains(&k));
        }

        #[test]
        fn unbiased_is_scaled_biased(vals in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let e = EnsembleState::from_scalars(&vals, 0, Phase::Prediction).unwrap();
            let b = sample_covariance(&e, CovarianceMode::Biased).unwrap()[(0, 0)];
            let u = sample_covariance(&e, CovarianceMode::Unbiased).unwrap()[(0, 0)];
            let p = vals.len() as f64;
            prop_assert_eq!(u, b * (p / (p - 1.0)));
            prop_assert!(b >= 0.0);
        }

        #[test]
        fn empirical_measure_is_exchangeable(mut vals in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let phi = Observable::first_component_squared();
            let a = EnsembleState::from_scalars(&vals, 0, Phase::Updated).unwrap().empirical(&phi);
            vals.reverse();
            let b = EnsembleState::from_scalars(&vals, 0, Phase::Updated).unwrap().empirical(&phi);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
