//! Gradient descent, Adam, nonlinear conjugate gradient with line search,
//! and the step-size schedule checker.

use thiserror::Error;

use crate::tensor::{dot, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: parameters {params}, gradient {gradient}")]
    LengthMismatch { params: usize, gradient: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
    #[error("direction is not a descent direction (slope {0})")]
    NotDescent(f64),
    #[error("line search failed after {0} trials")]
    LineSearchFailed(usize),
}

fn check_lengths(params: &[f64], gradient: &[f64]) -> Result<(), OptimError> {
    if params.len() != gradient.len() {
        return Err(OptimError::LengthMismatch {
            params: params.len(),
            gradient: gradient.len(),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite("gradient"));
    }
    Ok(())
}

/// `w <- w - c_t * g`
pub fn sgd_step(params: &mut [f64], gradient: &[f64], rate: f64) -> Result<(), OptimError> {
    check_lengths(params, gradient)?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(OptimError::InvalidConfig(format!("step size {rate}")));
    }
    for (w, g) in params.iter_mut().zip(gradient) {
        *w -= rate * g;
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(OptimError::NonFinite("parameters"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    Constant,
    Power,
}

/// Step sizes `c_t = a / t^p` for `t >= 1`; the constant family has `p = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    pub a: f64,
    pub p: f64,
}

impl ScheduleSpec {
    pub fn constant(a: f64) -> Self {
        Self {
            family: ScheduleFamily::Constant,
            a,
            p: 0.0,
        }
    }

    pub fn power(a: f64, p: f64) -> Self {
        Self {
            family: ScheduleFamily::Power,
            a,
            p,
        }
    }

    pub fn exponent(&self) -> f64 {
        match self.family {
            ScheduleFamily::Constant => 0.0,
            ScheduleFamily::Power => self.p,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "schedule scale {}",
                self.a
            )));
        }
        if !(self.exponent() >= 0.0 && self.exponent().is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "schedule exponent {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Step size at step `t` (1-based).
    pub fn rate(&self, t: u64) -> f64 {
        self.a / (t.max(1) as f64).powf(self.exponent())
    }
}

/// Outcome of the two step-size conditions for a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobbinsMonro {
    /// The step sizes sum to infinity.
    pub divergent_sum: bool,
    /// The squared step sizes have a finite sum.
    pub finite_square_sum: bool,
}

/// Classifies `c_t = a / t^p` by the p-series test: `sum c_t` diverges iff
/// `p <= 1`, `sum c_t^2` converges iff `2p > 1`.
pub fn check_robbins_monro(schedule: &ScheduleSpec) -> RobbinsMonro {
    let p = schedule.exponent();
    RobbinsMonro {
        divergent_sum: p <= 1.0,
        finite_square_sum: 2.0 * p > 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub c: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            c: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.c > 0.0 && self.c.is_finite())
            || !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.epsilon > 0.0 && self.epsilon.is_finite())
        {
            return Err(OptimError::InvalidConfig(format!("adam {self:?}")));
        }
        Ok(())
    }
}

/// Moment accumulators of bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// First-moment moving average.
    pub m: Tensor,
    /// Second-moment moving average, elementwise nonnegative.
    pub d: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros =
            || Tensor::filled(&[len], 0.0).map_err(|e| OptimError::InvalidConfig(e.to_string()));
        Ok(Self {
            config,
            m: zeros()?,
            d: zeros()?,
            t: 0,
        })
    }
}

/// One bias-corrected Adam step with `t` incremented first:
/// `m <- b1 m + (1-b1) g`, `d <- b2 d + (1-b2) g^2`,
/// `w <- w - c * (m / (1-b1^t)) / (sqrt(d / (1-b2^t)) + eps)`.
pub fn adam_step(
    params: &mut [f64],
    gradient: &[f64],
    state: &mut AdamState,
) -> Result<(), OptimError> {
    check_lengths(params, gradient)?;
    if state.m.len() != params.len() {
        return Err(OptimError::LengthMismatch {
            params: params.len(),
            gradient: state.m.len(),
        });
    }
    let AdamConfig {
        c,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let m = state.m.values_mut();
    let d = state.d.values_mut();
    for i in 0..params.len() {
        let g = gradient[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        d[i] = beta2 * d[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bias1;
        let d_hat = d[i] / bias2;
        params[i] -= c * m_hat / (d_hat.sqrt() + epsilon);
    }
    if params.iter().any(|w| !w.is_finite()) || d.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite("adam update"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgBeta {
    /// Polak–Ribière clamped at zero.
    PolakRibierePlus,
    FletcherReeves,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearchMode {
    /// Backtracking until sufficient decrease.
    Armijo,
    /// Secant iteration on the directional derivative, falling back to
    /// Armijo when it does not produce a decrease.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchConfig {
    pub sufficient_decrease: f64,
    pub backtrack: f64,
    pub max_trials: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            sufficient_decrease: 1e-4,
            backtrack: 0.5,
            max_trials: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgConfig {
    pub beta: CgBeta,
    pub line_search: LineSearchMode,
    pub armijo: LineSearchConfig,
    /// Restart period; `None` restarts every `P` iterations.
    pub restart_every: Option<usize>,
    /// Length of the first trial step along a fresh steepest-descent
    /// direction, measured in parameter space.
    pub initial_step: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            beta: CgBeta::PolakRibierePlus,
            line_search: LineSearchMode::Armijo,
            armijo: LineSearchConfig::default(),
            restart_every: None,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CgState {
    pub prev_gradient: Option<Vec<f64>>,
    pub direction: Vec<f64>,
    /// Number of restarts taken so far (including the initial one).
    pub restart_counter: usize,
    pub since_restart: usize,
    prev_step: f64,
    prev_slope: f64,
}

impl CgState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub loss: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub restarted: bool,
}

fn moved(params: &[f64], direction: &[f64], step: f64) -> Vec<f64> {
    params
        .iter()
        .zip(direction)
        .map(|(w, d)| w + step * d)
        .collect()
}

fn armijo<E, F>(
    loss_fn: &mut F,
    params: &[f64],
    loss: f64,
    slope: f64,
    direction: &[f64],
    initial_step: f64,
    cfg: &LineSearchConfig,
) -> Result<LineSearchOutcome, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    E: From<OptimError>,
{
    let mut step = initial_step;
    for trial in 1..=cfg.max_trials {
        let (trial_loss, _) = loss_fn(&moved(params, direction, step))?;
        if trial_loss.is_finite() && trial_loss <= loss + cfg.sufficient_decrease * step * slope {
            return Ok(LineSearchOutcome {
                step,
                loss: trial_loss,
                evaluations: trial,
            });
        }
        step *= cfg.backtrack;
    }
    Err(OptimError::LineSearchFailed(cfg.max_trials).into())
}

fn exact<E, F>(
    loss_fn: &mut F,
    params: &[f64],
    loss: f64,
    slope: f64,
    direction: &[f64],
    initial_step: f64,
    cfg: &LineSearchConfig,
) -> Result<LineSearchOutcome, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    E: From<OptimError>,
{
    let (mut a0, mut s0) = (0.0, slope);
    let mut a1 = initial_step;
    let mut evaluations = 0;
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..50 {
        let (l1, g1) = loss_fn(&moved(params, direction, a1))?;
        evaluations += 1;
        let s1 = dot(&g1, direction);
        if !(l1.is_finite() && s1.is_finite()) {
            break;
        }
        best = Some((a1, l1));
        if s1.abs() <= 1e-12 * slope.abs() || s1 == s0 {
            break;
        }
        let a2 = a1 - s1 * (a1 - a0) / (s1 - s0);
        if !(a2.is_finite() && a2 > 0.0) {
            break;
        }
        if (a2 - a1).abs() <= 1e-15 * a1.abs() {
            break;
        }
        (a0, s0, a1) = (a1, s1, a2);
    }
    if let Some((step, trial_loss)) = best {
        if trial_loss <= loss + cfg.sufficient_decrease * step * slope {
            return Ok(LineSearchOutcome {
                step,
                loss: trial_loss,
                evaluations,
            });
        }
    }
    let mut out = armijo(loss_fn, params, loss, slope, direction, initial_step, cfg)?;
    out.evaluations += evaluations;
    Ok(out)
}

/// Armijo backtracking along `direction` from `params`: the accepted step
/// satisfies `f(w + s d) <= f(w) + 1e-4 s g.d`, halving from
/// `initial_step` for at most 40 trials.
pub fn line_search<E, F>(
    loss_fn: &mut F,
    params: &[f64],
    direction: &[f64],
    initial_step: f64,
) -> Result<LineSearchOutcome, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    E: From<OptimError>,
{
    let (loss, gradient) = loss_fn(params)?;
    check_lengths(params, &gradient)?;
    if direction.len() != params.len() {
        return Err(OptimError::LengthMismatch {
            params: params.len(),
            gradient: direction.len(),
        }
        .into());
    }
    let slope = dot(&gradient, direction);
    if slope.is_nan() || slope >= 0.0 {
        return Err(OptimError::NotDescent(slope).into());
    }
    armijo(
        loss_fn,
        params,
        loss,
        slope,
        direction,
        initial_step,
        &LineSearchConfig::default(),
    )
}

/// One nonlinear conjugate-gradient iteration. The loss never increases:
/// a failed search along a conjugate direction retries along steepest
/// descent, and a failure there is returned with `params` untouched.
pub fn cg_step<E, F>(
    loss_fn: &mut F,
    state: &mut CgState,
    params: &mut [f64],
    config: &CgConfig,
) -> Result<CgStepReport, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    E: From<OptimError>,
{
    if !(config.initial_step > 0.0 && config.initial_step.is_finite()) {
        return Err(
            OptimError::InvalidConfig(format!("initial step {}", config.initial_step)).into(),
        );
    }
    let (loss, gradient) = loss_fn(params)?;
    check_lengths(params, &gradient)?;
    if !loss.is_finite() {
        return Err(OptimError::NonFinite("loss").into());
    }
    let gnorm2 = dot(&gradient, &gradient);
    if gnorm2 == 0.0 {
        return Ok(CgStepReport {
            loss_before: loss,
            loss_after: loss,
            gradient_norm: 0.0,
            step: 0.0,
            restarted: false,
        });
    }
    let period = config.restart_every.unwrap_or(params.len()).max(1);
    let steepest: Vec<f64> = gradient.iter().map(|g| -g).collect();

    let mut direction = None;
    if let Some(prev) = &state.prev_gradient {
        if state.since_restart < period && state.direction.len() == params.len() {
            let prev2 = dot(prev, prev);
            let beta = match config.beta {
                CgBeta::PolakRibierePlus => {
                    let diff: f64 = gradient.iter().zip(prev).map(|(g, p)| g * (g - p)).sum();
                    (diff / prev2).max(0.0)
                }
                CgBeta::FletcherReeves => gnorm2 / prev2,
            };
            if beta > 0.0 && beta.is_finite() {
                let d: Vec<f64> = steepest
                    .iter()
                    .zip(&state.direction)
                    .map(|(s, p)| s + beta * p)
                    .collect();
                if dot(&gradient, &d) < 0.0 {
                    direction = Some(d);
                }
            }
        }
    }
    let mut restarted = direction.is_none();
    let mut dir = direction.unwrap_or_else(|| steepest.clone());
    let mut slope = dot(&gradient, &dir);

    let initial = |state: &CgState, dir: &[f64], slope: f64, restarted: bool| -> f64 {
        if restarted || state.prev_step <= 0.0 {
            config.initial_step / dot(dir, dir).sqrt()
        } else {
            (state.prev_step * state.prev_slope / slope).min(1e10)
        }
    };
    let search = |loss_fn: &mut F, dir: &[f64], slope: f64, step0: f64| match config.line_search {
        LineSearchMode::Armijo => armijo(loss_fn, params, loss, slope, dir, step0, &config.armijo),
        LineSearchMode::Exact => exact(loss_fn, params, loss, slope, dir, step0, &config.armijo),
    };

    let outcome = match search(loss_fn, &dir, slope, initial(state, &dir, slope, restarted)) {
        Ok(o) => o,
        Err(e) if restarted => return Err(e),
        Err(_) => {
            restarted = true;
            dir = steepest;
            slope = -gnorm2;
            search(loss_fn, &dir, slope, initial(state, &dir, slope, true))?
        }
    };

    for (w, d) in params.iter_mut().zip(&dir) {
        *w += outcome.step * d;
    }
    if restarted {
        state.restart_counter += 1;
        state.since_restart = 1;
    } else {
        state.since_restart += 1;
    }
    state.prev_gradient = Some(gradient);
    state.direction = dir;
    state.prev_step = outcome.step;
    state.prev_slope = slope;
    Ok(CgStepReport {
        loss_before: loss,
        loss_after: outcome.loss,
        gradient_norm: gnorm2.sqrt(),
        step: outcome.step,
        restarted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Obj = Box<dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>), OptimError>>;

    #[test]
    fn sgd_examples() {
        let mut w = vec![1.0];
        sgd_step(&mut w, &[2.0], 0.5).unwrap();
        assert_eq!(w, vec![0.0]);

        let mut w = vec![0.3, -1.2];
        sgd_step(&mut w, &[0.0, 0.0], 0.7).unwrap();
        assert_eq!(w, vec![0.3, -1.2]);

        let g = [0.75, -2.5];
        let mut a = vec![1.0, 2.0];
        sgd_step(&mut a, &g, 0.25).unwrap();
        sgd_step(&mut a, &g, 0.25).unwrap();
        let mut b = vec![1.0, 2.0];
        sgd_step(&mut b, &g, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_errors() {
        let mut w = vec![1.0, 2.0];
        assert!(matches!(
            sgd_step(&mut w, &[1.0], 0.1),
            Err(OptimError::LengthMismatch { .. })
        ));
        assert_eq!(
            sgd_step(&mut w, &[1.0, f64::INFINITY], 0.1),
            Err(OptimError::NonFinite("gradient"))
        );
        assert!(sgd_step(&mut w, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut state = AdamState::new(1, AdamConfig::default()).unwrap();
        let mut w = vec![0.5];
        adam_step(&mut w, &[0.2], &mut state).unwrap();
        // at t=1: m_hat = g, sqrt(d_hat) = |g|
        let expected = 0.5 - 0.001 * 0.2 / (0.2 + 1e-7);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.4990000005).abs() < 1e-9);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut state = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut w = vec![0.1, -0.2, 0.3];
        adam_step(&mut w, &[0.0; 3], &mut state).unwrap();
        assert_eq!(w, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        for &g in &[1e-6, 0.3, -0.3, 17.0, -1e3] {
            let mut state = AdamState::new(1, AdamConfig::default()).unwrap();
            let mut w = vec![0.0];
            adam_step(&mut w, &[g], &mut state).unwrap();
            assert_eq!(w[0].signum(), -f64::signum(g));
        }
    }

    #[test]
    fn adam_bounded_for_constant_gradient() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2, cfg).unwrap();
        let mut w = vec![0.0, 0.0];
        for _ in 0..10_000 {
            let before = w.clone();
            adam_step(&mut w, &[0.37, -5.0], &mut state).unwrap();
            for (a, b) in w.iter().zip(&before) {
                assert!((a - b).abs() <= cfg.c * (1.0 + 1e-9));
            }
        }
        assert_eq!(state.t, 10_000);
        assert!(state.d.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut state = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut w = vec![0.0; 2];
        assert!(adam_step(&mut w, &[f64::NAN, 0.0], &mut state).is_err());
        let mut w3 = vec![0.0; 3];
        assert!(adam_step(&mut w3, &[0.0; 3], &mut state).is_err());
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(2, bad).is_err());
    }

    #[test]
    fn schedule_checker() {
        let cases = [
            (ScheduleSpec::power(1.0, 1.0), (true, true)),
            (ScheduleSpec::constant(0.01), (true, false)),
            (ScheduleSpec::power(0.5, 2.0), (false, true)),
        ];
        for (s, (c3, c4)) in cases {
            let r = check_robbins_monro(&s);
            assert_eq!((r.divergent_sum, r.finite_square_sum), (c3, c4), "{s:?}");
        }
        assert_eq!(ScheduleSpec::power(2.0, 1.0).rate(4), 0.5);
        assert_eq!(ScheduleSpec::constant(0.3).rate(1000), 0.3);
        assert!(ScheduleSpec::constant(0.0).validate().is_err());
    }

    fn quadratic_1d(f: fn(f64) -> f64, df: fn(f64) -> f64) -> Obj {
        Box::new(move |w: &[f64]| Ok((f(w[0]), vec![df(w[0])])))
    }

    #[test]
    fn armijo_on_square() {
        let mut f = quadratic_1d(|x| x * x, |x| 2.0 * x);
        let out = line_search(&mut f, &[1.0], &[-1.0], 1.0).unwrap();
        let fx = out.loss;
        assert!(fx <= 1.0 - 1e-4 * out.step * 2.0);
    }

    #[test]
    fn armijo_linear_accepts_initial() {
        let mut f = quadratic_1d(|x| -x, |_| -1.0);
        let out = line_search(&mut f, &[0.0], &[1.0], 3.0).unwrap();
        assert_eq!(out.step, 3.0);
        assert_eq!(out.evaluations, 1);
    }

    #[test]
    fn armijo_quartic_rejects_overshoot() {
        // chain for f(x)=x^4 at x=1, d=-1, s0=2: s=2 gives f(-1)=1 > 1-8e-4
        // (rejected); s=1 gives f(0)=0 <= 1-4e-4 (accepted).
        let mut f = quadratic_1d(|x| x.powi(4), |x| 4.0 * x.powi(3));
        let out = line_search(&mut f, &[1.0], &[-1.0], 2.0).unwrap();
        assert_eq!(out.step, 1.0);
        assert!(out.step < 2.0);
    }

    #[test]
    fn line_search_errors() {
        let mut f = quadratic_1d(|x| x * x, |x| 2.0 * x);
        assert_eq!(
            line_search(&mut f, &[1.0], &[1.0], 1.0),
            Err(OptimError::NotDescent(2.0))
        );
        // a cliff: any positive step increases the loss
        let mut cliff = quadratic_1d(|x| if x < 1.0 { 1e9 } else { x }, |_| 1.0);
        assert_eq!(
            line_search(&mut cliff, &[1.0], &[-1.0], 1.0),
            Err(OptimError::LineSearchFailed(40))
        );
    }

    #[test]
    fn cg_first_step_is_steepest_descent() {
        let mut f: Obj = Box::new(|w: &[f64]| {
            let loss = w[0] * w[0] + 10.0 * w[1] * w[1];
            Ok((loss, vec![2.0 * w[0], 20.0 * w[1]]))
        });
        let mut state = CgState::new();
        let mut w = vec![1.0, 1.0];
        let report = cg_step(&mut f, &mut state, &mut w, &CgConfig::default()).unwrap();
        assert!(report.restarted);
        assert_eq!(state.direction, vec![-2.0, -20.0]);
        assert!(report.loss_after < report.loss_before);
    }

    #[test]
    fn cg_isotropic_quadratic_one_iteration() {
        let mut f: Obj = Box::new(|w: &[f64]| Ok((0.5 * dot(w, w), w.to_vec())));
        let cfg = CgConfig {
            line_search: LineSearchMode::Exact,
            ..CgConfig::default()
        };
        let mut state = CgState::new();
        let mut w = vec![3.0, 4.0];
        cg_step(&mut f, &mut state, &mut w, &cfg).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-12), "{w:?}");
    }

    #[test]
    fn cg_loss_never_increases_on_rosenbrock() {
        let mut f: Obj = Box::new(|w: &[f64]| {
            let (x, y) = (w[0], w[1]);
            let loss = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
            let gy = 200.0 * (y - x * x);
            Ok((loss, vec![gx, gy]))
        });
        let mut state = CgState::new();
        let mut w = vec![-1.2, 1.0];
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let r = cg_step(&mut f, &mut state, &mut w, &CgConfig::default()).unwrap();
            assert!(r.loss_after <= r.loss_before);
            assert!(r.loss_before <= last);
            last = r.loss_after;
        }
        assert!(last < 1e-3, "{last}");
        assert!(state.restart_counter > 1);
    }

    #[test]
    fn fletcher_reeves_variant_converges() {
        let mut f: Obj = Box::new(|w: &[f64]| {
            let loss = 0.5 * (w[0] * w[0] + 4.0 * w[1] * w[1]) - w[0];
            Ok((loss, vec![w[0] - 1.0, 4.0 * w[1]]))
        });
        let cfg = CgConfig {
            beta: CgBeta::FletcherReeves,
            line_search: LineSearchMode::Exact,
            ..CgConfig::default()
        };
        let mut state = CgState::new();
        let mut w = vec![5.0, -2.0];
        for _ in 0..2 {
            cg_step(&mut f, &mut state, &mut w, &cfg).unwrap();
        }
        assert!((w[0] - 1.0).abs() < 1e-9 && w[1].abs() < 1e-9, "{w:?}");
    }
}
