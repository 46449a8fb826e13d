//! Multilevel EnKF from independent pairwise-coupled EnKF samples.
//!
//! A level-`l` sample runs three EnKF ensembles side by side: a fine one
//! with `P_l` particles at resolution `N_l`, and two coarse ones with
//! `P_{l-1} = P_l / 2` particles each at resolution `N_{l-1}`. Fine particle
//! `i` is paired with particle `i` of the first coarse ensemble when
//! `i < P_{l-1}` and with particle `i - P_{l-1}` of the second otherwise.
//! Paired particles share their initial value, their Brownian path (the
//! coarse one consumes the coarsened fine increments) and their perturbed
//! observations. Each ensemble keeps its own sample covariance and gain.
//!
//! The estimator is
//!
//! ```text
//! mu_n^ML[phi] = sum_l (1/M_l) sum_m ( mu_n^{l,f,m}[phi] - mu_n^{l,c,m}[phi] ),
//! ```
//!
//! with `mu^{0,c} = 0` and `mu^{l,c} = (mu^{l,c1} + mu^{l,c2}) / 2`. Every
//! `(l, m)` sample owns an independent noise stream.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{
    covariance_of, draw_perturbations, kalman_gain, scalar_gain, scalar_variance, update_data,
    update_scalar, CovarianceMode, EnsembleState,
    InitialDistribution, ObservationModel, Observable, Phase,
};
use crate::error::{Error, Result};
use crate::models::{lcm, DynamicsModel, NoisePath, Scheme};
use crate::rng::{tag, GaussianSource, StreamKey};
use crate::scalar::{round_half_away, Real};

/// Everything a filter sample needs besides its parameters and data.
#[derive(Clone, Debug)]
pub struct FilterProblem<T: Real> {
    pub model: DynamicsModel<T>,
    pub obs: ObservationModel<T>,
    pub initial: InitialDistribution<T>,
    pub scheme: Scheme,
    pub covariance_mode: CovarianceMode,
}

impl<T: Real> FilterProblem<T> {
    /// Milstein dynamics, biased covariances and an `N(0, Gamma)` prior.
    pub fn new(model: DynamicsModel<T>, obs: ObservationModel<T>) -> Result<Self> {
        let initial = InitialDistribution::from_observation_noise(&obs)?;
        let p = FilterProblem {
            model,
            obs,
            initial,
            scheme: Scheme::Milstein,
            covariance_mode: CovarianceMode::Biased,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.state_dim();
        if self.obs.state_dim() != d || self.initial.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "model d={d}, observation operator d={}, initial d={}",
                self.obs.state_dim(),
                self.initial.dim()
            )));
        }
        Ok(())
    }
}

/// One ensemble taking part in a coupled cycle: its particles follow the
/// global particle indices `offset..offset + size`.
struct Member<'a, T: Real> {
    ens: &'a mut EnsembleState<T>,
    substeps: usize,
    offset: usize,
}

/// Noise and perturbations handed to each ensemble during coupled cycles.
#[derive(Clone, Debug, Default)]
pub struct CouplingAudit<T> {
    /// `(step, member, global particle index, path)`.
    pub paths: Vec<(usize, usize, usize, NoisePath<T>)>,
    /// `(step, member, global particle index, eta)`.
    pub perturbations: Vec<(usize, usize, usize, Vec<T>)>,
}

#[derive(Debug)]
struct Workspace<T: Real> {
    base: NoisePath<T>,
    coarse: Vec<(usize, NoisePath<T>)>,
    etas: Vec<T>,
    gains: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(resolutions: &[usize], dim: usize) -> Result<Self> {
        let base_res = resolutions.iter().copied().fold(1, lcm);
        let mut coarse = Vec::new();
        for &r in resolutions {
            if r != base_res && !coarse.iter().any(|(c, _)| *c == r) {
                coarse.push((r, NoisePath::zeros(r, dim)?));
            }
        }
        Ok(Workspace {
            base: NoisePath::zeros(base_res, dim)?,
            coarse,
            etas: Vec::new(),
            gains: Vec::new(),
        })
    }

    fn path(&self, res: usize) -> &NoisePath<T> {
        if res == self.base.n_substeps() {
            &self.base
        } else {
            &self.coarse.iter().find(|(r, _)| *r == res).expect("resolution").1
        }
    }
}

/// One prediction/update cycle of a group of coupled ensembles.
///
/// All members consume one base Brownian path per global particle index
/// (drawn at the least common multiple of their resolutions and coarsened
/// by summation) and one perturbation per global index. Each member gets
/// its own covariance and gain.
#[allow(clippy::too_many_arguments)]
fn coupled_cycle<T: Real, G: GaussianSource>(
    members: &mut [Member<'_, T>],
    total: usize,
    ws: &mut Workspace<T>,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    scheme: Scheme,
    mode: CovarianceMode,
    src: &mut G,
    mut audit: Option<&mut CouplingAudit<T>>,
) -> Result<()> {
    let d = model.state_dim();
    if y.len() != obs.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation has {} components, expected {}",
            y.len(),
            obs.obs_dim()
        )));
    }
    for m in members.iter() {
        if m.ens.phase != Phase::Updated {
            return Err(Error::WrongPhase {
                expected: Phase::Updated,
                found: m.ens.phase,
            });
        }
    }
    let step = members[0].ens.time_index + 1;
    let base_res = ws.base.n_substeps();

    for i in 0..total {
        ws.base.resample(src);
        let Workspace { base, coarse, .. } = ws;
        for (r, path) in coarse.iter_mut() {
            base.coarsen_into(base_res / *r, path)?;
        }
        for (k, m) in members.iter_mut().enumerate() {
            let size = m.ens.size();
            if i < m.offset || i >= m.offset + size {
                continue;
            }
            let j = i - m.offset;
            let path = ws.path(m.substeps);
            model.advance(&mut m.ens.data_mut()[j * d..(j + 1) * d], path, scheme)?;
            if let Some(a) = audit.as_deref_mut() {
                a.paths.push((step, k, i, path.clone()));
            }
        }
    }

    let k = obs.obs_dim();
    if d == 1 && k == 1 {
        let (h, gamma, y0) = (obs.h()[(0, 0)], obs.gamma()[(0, 0)], y[0]);
        ws.gains.clear();
        for m in members.iter_mut() {
            m.ens.time_index += 1;
            m.ens.phase = Phase::Prediction;
            if mode == CovarianceMode::Unbiased && m.ens.size() < 2 {
                return Err(Error::invalid(
                    "unbiased sample covariance needs at least two particles",
                ));
            }
            let c = scalar_variance(m.ens.particles().as_slice(), mode);
            if !c.is_finite() {
                return Err(Error::NonFinite("covariance"));
            }
            ws.gains.push(scalar_gain(c, h, gamma));
        }
        draw_perturbations(obs, total, src, &mut ws.etas);
        for (idx, (m, &g)) in members.iter_mut().zip(&ws.gains).enumerate() {
            let size = m.ens.size();
            let etas = &ws.etas[m.offset..m.offset + size];
            update_scalar(m.ens.data_mut(), g, h, y0, etas);
            m.ens.phase = Phase::Updated;
            if let Some(a) = audit.as_deref_mut() {
                for (j, &eta) in etas.iter().enumerate() {
                    a.perturbations.push((step, idx, m.offset + j, vec![eta]));
                }
            }
        }
        return Ok(());
    }

    let mut gains = Vec::with_capacity(members.len());
    for m in members.iter_mut() {
        m.ens.time_index += 1;
        m.ens.phase = Phase::Prediction;
        let c = covariance_of(m.ens.particles().as_slice(), d, mode)?;
        gains.push(kalman_gain(&c, obs)?);
    }

    draw_perturbations(obs, total, src, &mut ws.etas);
    for (idx, (m, gain)) in members.iter_mut().zip(&gains).enumerate() {
        let size = m.ens.size();
        let etas = &ws.etas[m.offset * k..(m.offset + size) * k];
        update_data(m.ens.data_mut(), gain, obs.h(), y.as_slice(), etas);
        m.ens.phase = Phase::Updated;
        if let Some(a) = audit.as_deref_mut() {
            for (j, eta) in etas.chunks_exact(k).enumerate() {
                a.perturbations.push((step, idx, m.offset + j, eta.to_vec()));
            }
        }
    }
    Ok(())
}

/// Initial updated ensembles for a group: `total` iid draws, copied into
/// every member according to its offset.
fn initial_draws<T: Real, G: GaussianSource>(
    initial: &InitialDistribution<T>,
    total: usize,
    src: &mut G,
) -> Result<EnsembleState<T>> {
    initial.sample_ensemble(total, src)
}

fn slice_ensemble<T: Real>(ens: &EnsembleState<T>, offset: usize, size: usize) -> Result<EnsembleState<T>> {
    let d = ens.dim();
    let data = ens.particles().as_slice()[offset * d..(offset + size) * d].to_vec();
    EnsembleState::new(DMatrix::from_vec(d, size, data), ens.time_index, ens.phase)
}

/// Fine ensemble and, above level 0, the two coarse ensembles of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledLevelState<T: Real> {
    pub level: usize,
    pub fine_substeps: usize,
    pub coarse_substeps: usize,
    pub fine: EnsembleState<T>,
    pub coarse1: Option<EnsembleState<T>>,
    pub coarse2: Option<EnsembleState<T>>,
}

impl<T: Real> CoupledLevelState<T> {
    /// Draws `fine_size` initial particles; above level 0 the coarse
    /// ensembles are the two halves of the same draws.
    pub fn initial<G: GaussianSource>(
        level: usize,
        fine_substeps: usize,
        coarse_substeps: usize,
        fine_size: usize,
        initial: &InitialDistribution<T>,
        src: &mut G,
    ) -> Result<Self> {
        if fine_substeps == 0 || coarse_substeps == 0 {
            return Err(Error::invalid("resolutions must be positive"));
        }
        if level > 0 && (fine_size < 2 || !fine_size.is_multiple_of(2)) {
            return Err(Error::invalid(format!(
                "level {level} needs an even fine ensemble size, got {fine_size}"
            )));
        }
        let fine = initial_draws(initial, fine_size, src)?;
        let (coarse1, coarse2) = if level == 0 {
            (None, None)
        } else {
            let half = fine_size / 2;
            (
                Some(slice_ensemble(&fine, 0, half)?),
                Some(slice_ensemble(&fine, half, half)?),
            )
        };
        Ok(CoupledLevelState {
            level,
            fine_substeps,
            coarse_substeps,
            fine,
            coarse1,
            coarse2,
        })
    }

    fn resolutions(&self) -> Vec<usize> {
        if self.level == 0 {
            vec![self.fine_substeps]
        } else {
            vec![self.fine_substeps, self.coarse_substeps]
        }
    }

    fn members(&mut self) -> Vec<Member<'_, T>> {
        let half = self.fine.size() / 2;
        let mut out = vec![Member {
            ens: &mut self.fine,
            substeps: self.fine_substeps,
            offset: 0,
        }];
        if let Some(c1) = self.coarse1.as_mut() {
            out.push(Member {
                ens: c1,
                substeps: self.coarse_substeps,
                offset: 0,
            });
        }
        if let Some(c2) = self.coarse2.as_mut() {
            out.push(Member {
                ens: c2,
                substeps: self.coarse_substeps,
                offset: half,
            });
        }
        out
    }

    /// `mu^{l,f}[phi] - mu^{l,c}[phi]`, with `mu^{0,c} = 0`.
    pub fn increment(&self, phi: &Observable<T>) -> T {
        let d = self.fine.dim();
        let p = self.fine.size();
        let fine = self.fine.particles().as_slice();
        match (&self.coarse1, &self.coarse2) {
            (Some(c1), Some(c2)) => {
                let coarse = c1
                    .particles()
                    .as_slice()
                    .chunks_exact(d)
                    .chain(c2.particles().as_slice().chunks_exact(d));
                let sum = fine
                    .chunks_exact(d)
                    .zip(coarse)
                    .fold(T::zero(), |acc, (f, c)| acc + (phi.eval(f) - phi.eval(c)));
                sum / T::from_usize_lossy(p)
            }
            _ => self.fine.empirical(phi),
        }
    }
}

/// Advances a coupled triple through one prediction and update.
#[allow(clippy::too_many_arguments)]
pub fn coupled_step<T: Real, G: GaussianSource>(
    state: &mut CoupledLevelState<T>,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    scheme: Scheme,
    mode: CovarianceMode,
    src: &mut G,
) -> Result<()> {
    let mut ws = Workspace::new(&state.resolutions(), model.state_dim())?;
    let total = state.fine.size();
    coupled_cycle(&mut state.members(), total, &mut ws, model, obs, y, scheme, mode, src, None)
}

/// [`coupled_step`] that also records the noise each ensemble consumed.
#[allow(clippy::too_many_arguments)]
pub fn coupled_step_audited<T: Real, G: GaussianSource>(
    state: &mut CoupledLevelState<T>,
    model: &DynamicsModel<T>,
    obs: &ObservationModel<T>,
    y: &DVector<T>,
    scheme: Scheme,
    mode: CovarianceMode,
    src: &mut G,
    audit: &mut CouplingAudit<T>,
) -> Result<()> {
    let mut ws = Workspace::new(&state.resolutions(), model.state_dim())?;
    let total = state.fine.size();
    coupled_cycle(
        &mut state.members(),
        total,
        &mut ws,
        model,
        obs,
        y,
        scheme,
        mode,
        src,
        Some(audit),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Fixed constants for `alpha = 1, beta = 2`: `L = Round(log2(1/eps)) - 1`,
    /// `N_l = 2^{l+1}`, `P_l = 10 * 2^l`.
    #[default]
    Paper,
    /// Asymptotic rules for general `(alpha, beta)` with unit constants.
    Corollary,
}

/// Levels, resolutions, ensemble sizes and sample counts of an estimator.
#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLPlan {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub s: f64,
    pub L: usize,
    pub N_levels: Vec<usize>,
    pub P_levels: Vec<usize>,
    pub M_levels: Vec<usize>,
}

impl MLPlan {
    pub fn finest_level(&self) -> usize {
        self.L
    }

    /// Coarse resolution of level `l >= 1`.
    pub fn coarse_substeps(&self, level: usize) -> usize {
        if level == 0 {
            self.N_levels[0]
        } else {
            self.N_levels[level - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.L + 1;
        if self.N_levels.len() != n || self.P_levels.len() != n || self.M_levels.len() != n {
            return Err(Error::invalid("plan sequences must have L + 1 entries"));
        }
        if self.N_levels.iter().chain(&self.P_levels).chain(&self.M_levels).any(|&x| x == 0) {
            return Err(Error::invalid("plan entries must be positive"));
        }
        for l in 1..n {
            if self.P_levels[l] != 2 * self.P_levels[l - 1] {
                return Err(Error::invalid(format!(
                    "ensemble sizes must double between levels ({} -> {})",
                    self.P_levels[l - 1],
                    self.P_levels[l]
                )));
            }
        }
        Ok(())
    }

    /// Work of one assimilation cycle: particle substeps over all samples.
    pub fn cost_per_cycle(&self) -> f64 {
        (0..=self.L)
            .map(|l| {
                let per = self.P_levels[l] * self.N_levels[l]
                    + if l > 0 { self.P_levels[l] * self.N_levels[l - 1] } else { 0 };
                per as f64 * self.M_levels[l] as f64
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub mode: PlanMode,
    /// Overrides the automatic choice of `s` (corollary mode only).
    pub s: Option<f64>,
    /// `N_0`.
    pub base_substeps: usize,
    /// `P_0`.
    pub base_ensemble: usize,
    /// Constant in front of the corollary-mode `M_l` rule.
    pub sample_prefactor: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            mode: PlanMode::Paper,
            s: None,
            base_substeps: 2,
            base_ensemble: 10,
            sample_prefactor: 1.0,
        }
    }
}

/// Resolution-growth exponent for given weak/strong rates, taking the
/// smallest admissible value of each case. Only `beta < 1` with `alpha > beta`
/// departs from `1 / alpha`.
pub fn optimal_growth_exponent(alpha: f64, beta: f64) -> f64 {
    if beta < 1.0 && alpha > beta {
        1.0 / (2.0 * alpha - beta)
    } else {
        1.0 / alpha
    }
}

/// Plans an estimator of accuracy `eps`.
pub fn ml_plan(eps: f64, alpha: f64, beta: f64, opts: &PlanOptions) -> Result<MLPlan> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("accuracy must lie in (0, 1), got {eps}")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::invalid("rates alpha and beta must be positive"));
    }
    if opts.base_substeps == 0 || opts.base_ensemble == 0 {
        return Err(Error::invalid("N_0 and P_0 must be positive"));
    }
    let inv = 1.0 / eps;
    let plan = match opts.mode {
        PlanMode::Paper => {
            let l_max = (round_half_away(inv.log2()) - 1).max(0) as usize;
            let lf = l_max as f64;
            let m = (0..=l_max)
                .map(|l| {
                    let v = if l == 0 {
                        2 * round_half_away(inv * inv * lf * lf / 8.0)
                    } else {
                        round_half_away(inv * inv * lf * lf * 2f64.powi(-2 * l as i32 - 3))
                    };
                    v.max(1) as usize
                })
                .collect();
            MLPlan {
                eps,
                alpha,
                beta,
                s: 1.0,
                L: l_max,
                N_levels: (0..=l_max).map(|l| 1usize << (l + 1)).collect(),
                P_levels: (0..=l_max).map(|l| 10usize << l).collect(),
                M_levels: m,
            }
        }
        PlanMode::Corollary => {
            let s = opts.s.unwrap_or_else(|| optimal_growth_exponent(alpha, beta));
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("growth exponent must be positive, got {s}")));
            }
            let rate = 1.0f64.min((1.0 + beta * s) / 2.0).min(alpha * s);
            let l_max = (inv.log2() / rate).ceil().max(0.0) as usize;
            let lf = l_max as f64;
            let bs = (beta * s).min(1.0);
            let decay = (3.0 + 2.0 * s + bs) / 3.0;
            let m = (0..=l_max)
                .map(|l| {
                    let l = l as f64;
                    let raw = if (bs - s).abs() <= 1e-12 {
                        inv * inv * lf * lf * 2f64.powf(-(1.0 + s) * l)
                    } else if bs > s {
                        inv * inv * 2f64.powf(-decay * l)
                    } else {
                        inv.powf(2.0 + 2.0 * (s - bs) / (3.0 * rate)) * 2f64.powf(-decay * l)
                    };
                    round_half_away(opts.sample_prefactor * raw).max(1) as usize
                })
                .collect();
            MLPlan {
                eps,
                alpha,
                beta,
                s,
                L: l_max,
                N_levels: (0..=l_max)
                    .map(|l| {
                        let n = opts.base_substeps as f64 * 2f64.powf(s * l as f64);
                        round_half_away(n).max(1) as usize
                    })
                    .collect(),
                P_levels: (0..=l_max).map(|l| opts.base_ensemble << l).collect(),
                M_levels: m,
            }
        }
    };
    plan.validate()?;
    Ok(plan)
}

/// Key of sample `m` on level `l` below an estimator key.
pub fn sample_key(base: StreamKey, level: usize, m: usize) -> StreamKey {
    base.child(tag::LEVEL.wrapping_add(level as u64)).child(m as u64)
}

/// Level increments of one sample, for every observable at every time.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelIncrement<T> {
    pub level: usize,
    pub sample_index: usize,
    /// `values[n][q]` for observable `q` at time `n = 0..=N`.
    pub values: Vec<Vec<T>>,
}

/// Runs one coupled-triple filter over all observations, drawing from the
/// stream of `(level, m)` below `base`.
#[allow(clippy::too_many_arguments)]
pub fn level_increment<T: Real>(
    level: usize,
    m: usize,
    plan: &MLPlan,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    base: StreamKey,
) -> Result<LevelIncrement<T>> {
    if level > plan.L {
        return Err(Error::invalid(format!(
            "level {level} exceeds finest level {}",
            plan.L
        )));
    }
    let mut src = sample_key(base, level, m).stream();
    let values = run_coupled(
        level,
        plan.N_levels[level],
        plan.coarse_substeps(level),
        plan.P_levels[level],
        problem,
        observations,
        observables,
        &mut src,
    )?;
    Ok(LevelIncrement {
        level,
        sample_index: m,
        values,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_coupled<T: Real, G: GaussianSource>(
    level: usize,
    fine_substeps: usize,
    coarse_substeps: usize,
    fine_size: usize,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    src: &mut G,
) -> Result<Vec<Vec<T>>> {
    let mut state = CoupledLevelState::initial(
        level,
        fine_substeps,
        coarse_substeps,
        fine_size,
        &problem.initial,
        src,
    )?;
    let mut ws = Workspace::new(&state.resolutions(), problem.model.state_dim())?;
    let record =
        |s: &CoupledLevelState<T>| observables.iter().map(|phi| s.increment(phi)).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(record(&state));
    for y in observations {
        coupled_cycle(
            &mut state.members(),
            fine_size,
            &mut ws,
            &problem.model,
            &problem.obs,
            y,
            problem.scheme,
            problem.covariance_mode,
            src,
            None,
        )?;
        out.push(record(&state));
    }
    Ok(out)
}

/// `mu_n^ML[phi]` for every observable, indexed `[n][q]`.
///
/// Samples run in parallel on the current rayon pool; the reduction sums
/// levels in ascending order and samples in ascending order within a
/// level, so the result does not depend on the number of workers.
pub fn mlenkf_estimate<T: Real>(
    plan: &MLPlan,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    base: StreamKey,
) -> Result<Vec<Vec<T>>> {
    estimate(plan, problem, observations, observables, base, true)
}

/// [`mlenkf_estimate`] on the calling thread only; bit-identical results.
pub fn mlenkf_estimate_serial<T: Real>(
    plan: &MLPlan,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    base: StreamKey,
) -> Result<Vec<Vec<T>>> {
    estimate(plan, problem, observations, observables, base, false)
}

fn estimate<T: Real>(
    plan: &MLPlan,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    base: StreamKey,
    parallel: bool,
) -> Result<Vec<Vec<T>>> {
    plan.validate()?;
    problem.validate()?;
    let mut total = vec![vec![T::zero(); observables.len()]; observations.len() + 1];
    for level in 0..=plan.L {
        let samples = plan.M_levels[level];
        let run = |m| level_increment(level, m, plan, problem, observations, observables, base);
        let incs = if parallel {
            (0..samples).into_par_iter().map(run).collect::<Result<Vec<_>>>()?
        } else {
            (0..samples).map(run).collect::<Result<Vec<_>>>()?
        };
        let inv = T::one() / T::from_usize_lossy(samples);
        for n in 0..total.len() {
            for q in 0..observables.len() {
                let sum = incs.iter().fold(T::zero(), |acc, inc| acc + inc.values[n][q]);
                total[n][q] += sum * inv;
            }
        }
    }
    Ok(total)
}

/// Hierarchy of the multi-index difference: `N = n0 2^{l1}`, `P = p0 2^{l2}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiHierarchy {
    pub base_substeps: usize,
    pub base_ensemble: usize,
}

impl Default for MiHierarchy {
    fn default() -> Self {
        MiHierarchy {
            base_substeps: 2,
            base_ensemble: 10,
        }
    }
}

/// Experimental four-coupled double difference
///
/// ```text
/// Delta = mu^{N_l1, P_l2} - (mu^{N_l1, P_l2-1, 1} + mu^{N_l1, P_l2-1, 2}) / 2
///       - mu^{N_l1-1, P_l2} + (mu^{N_l1-1, P_l2-1, 1} + mu^{N_l1-1, P_l2-1, 2}) / 2
/// ```
///
/// from six EnKF ensembles that share initial values, Brownian paths
/// (coarsened across the resolution axis) and perturbed observations
/// (split in halves across the ensemble-size axis). Terms with a negative
/// index are dropped, so the boundaries reduce to first differences.
#[allow(clippy::too_many_arguments)]
pub fn mienkf_delta<T: Real>(
    resolution_level: usize,
    size_level: usize,
    m: usize,
    hierarchy: &MiHierarchy,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    base: StreamKey,
) -> Result<Vec<Vec<T>>> {
    let key = base
        .child(tag::MIENKF)
        .child(resolution_level as u64)
        .child(size_level as u64)
        .child(m as u64);
    mienkf_delta_with(
        resolution_level,
        size_level,
        hierarchy,
        problem,
        observations,
        observables,
        &mut key.stream(),
    )
}

/// [`mienkf_delta`] drawing from a caller-supplied source.
#[allow(clippy::too_many_arguments)]
pub fn mienkf_delta_with<T: Real, G: GaussianSource>(
    resolution_level: usize,
    size_level: usize,
    hierarchy: &MiHierarchy,
    problem: &FilterProblem<T>,
    observations: &[DVector<T>],
    observables: &[Observable<T>],
    src: &mut G,
) -> Result<Vec<Vec<T>>> {
    problem.validate()?;
    let n_fine = hierarchy.base_substeps << resolution_level;
    let n_coarse = if resolution_level > 0 { n_fine / 2 } else { n_fine };
    let p = hierarchy.base_ensemble << size_level;
    if size_level > 0 && !p.is_multiple_of(2) {
        return Err(Error::invalid("ensemble size must be even to split in halves"));
    }
    let half = p / 2;
    let init = initial_draws(&problem.initial, p, src)?;

    // (ensemble, resolution, offset, sign) with sign +1 / -1 and the halves
    // weighted through the particle-wise pairing.
    let mut parts: Vec<(EnsembleState<T>, usize, usize, bool)> = vec![(init.clone(), n_fine, 0, true)];
    if size_level > 0 {
        parts.push((slice_ensemble(&init, 0, half)?, n_fine, 0, false));
        parts.push((slice_ensemble(&init, half, half)?, n_fine, half, false));
    }
    if resolution_level > 0 {
        parts.push((init.clone(), n_coarse, 0, false));
        if size_level > 0 {
            parts.push((slice_ensemble(&init, 0, half)?, n_coarse, 0, true));
            parts.push((slice_ensemble(&init, half, half)?, n_coarse, half, true));
        }
    }
    let resolutions: Vec<usize> = parts.iter().map(|p| p.1).collect();
    let mut ws = Workspace::new(&resolutions, problem.model.state_dim())?;
    let d = problem.model.state_dim();

    let record = |parts: &[(EnsembleState<T>, usize, usize, bool)]| -> Vec<T> {
        observables
            .iter()
            .map(|phi| {
                // Every global index i appears in exactly one ensemble of
                // each (resolution, size) combination.
                let mut sum = T::zero();
                for (ens, _, _, positive) in parts {
                    let s = ens
                        .particles()
                        .as_slice()
                        .chunks_exact(d)
                        .fold(T::zero(), |acc, v| acc + phi.eval(v));
                    if *positive {
                        sum += s;
                    } else {
                        sum -= s;
                    }
                }
                sum / T::from_usize_lossy(p)
            })
            .collect()
    };

    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(record(&parts));
    for y in observations {
        let mut members: Vec<Member<'_, T>> = parts
            .iter_mut()
            .map(|(ens, res, offset, _)| Member {
                ens,
                substeps: *res,
                offset: *offset,
            })
            .collect();
        coupled_cycle(
            &mut members,
            p,
            &mut ws,
            &problem.model,
            &problem.obs,
            y,
            problem.scheme,
            problem.covariance_mode,
            src,
            None,
        )?;
        out.push(record(&parts));
    }
    Ok(out)
}
