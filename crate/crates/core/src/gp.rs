//! Exact Gaussian-process regression with the composed ageing kernel.
//!
//! Training rows repeat inputs heavily (every cell at a condition yields the
//! same `(1/T, SOC, Δt)` triples), so the likelihood and posterior are
//! evaluated on the distinct inputs: a group of `m` replicates with mean `ȳ`
//! is equivalent to one observation of `ȳ` with noise `σ_n²/m`, plus a
//! within-group term that only involves `σ_n²`. This is an exact identity,
//! not an approximation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MAX_TEMPERATURE_K, MIN_TEMPERATURE_K};
use crate::error::{Error, Result};
use crate::kernel::{
    cross_covariance, gram_matrix, kernel_gradients, GradientSpace, HyperParam, Hyperparameters,
    InputVector,
};
use crate::preprocess::TrainingRow;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Length-scale used when a pinned θ_SOC should switch the SOC factor off.
pub const PINNED_THETA_SOC: f64 = 1e6;

/// Default value a hyperparameter takes when pinned without an explicit value.
pub fn default_pin_value(p: HyperParam) -> f64 {
    match p {
        HyperParam::ThetaT => 1e6,
        HyperParam::ThetaSoc => PINNED_THETA_SOC,
        HyperParam::ThetaDt => 0.0,
        HyperParam::SigmaF2 => 1.0,
        HyperParam::SigmaN2 => 0.0,
    }
}

/// Log-uniform initialisation ranges. Length-scale ranges are multiples of
/// the training span of the corresponding input.
#[derive(Clone, Debug, PartialEq)]
pub struct InitRanges {
    pub theta_t_span: (f64, f64),
    pub theta_soc_span: (f64, f64),
    pub theta_dt: (f64, f64),
    pub sigma_f2: (f64, f64),
    pub sigma_n2: (f64, f64),
}

impl Default for InitRanges {
    fn default() -> Self {
        InitRanges {
            theta_t_span: (0.1, 10.0),
            theta_soc_span: (0.1, 10.0),
            theta_dt: (1.0, 300.0),
            sigma_f2: (1e-4, 1e2),
            sigma_n2: (1e-8, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init_ranges: InitRanges,
    pub seed: u64,
    /// First non-zero jitter level, relative to the mean diagonal.
    pub jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            max_iters: 200,
            grad_tol: 1e-6,
            init_ranges: InitRanges::default(),
            seed: 0,
            jitter: 1e-8,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        let r = &self.init_ranges;
        for (name, (lo, hi)) in [
            ("theta_t_span", r.theta_t_span),
            ("theta_soc_span", r.theta_soc_span),
            ("theta_dt", r.theta_dt),
            ("sigma_f2", r.sigma_f2),
            ("sigma_n2", r.sigma_n2),
        ] {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Config(format!(
                    "init range {name} = ({lo}, {hi}) is invalid"
                )));
            }
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "restarts and max_iters must be positive".into(),
            ));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::Config(format!(
                "jitter must be positive, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Replicate-compressed training set.
#[derive(Clone, Debug)]
struct Design {
    unique: Vec<InputVector>,
    counts: Vec<f64>,
    means: DVector<f64>,
    within_ss: Vec<f64>,
    n: usize,
}

impl Design {
    fn new(inputs: &[InputVector], targets: &[f64]) -> Design {
        let mut index: HashMap<[u64; 3], usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut members: Vec<Vec<f64>> = Vec::new();
        for (x, &y) in inputs.iter().zip(targets) {
            let j = *index.entry(x.bits()).or_insert_with(|| {
                unique.push(*x);
                members.push(Vec::new());
                unique.len() - 1
            });
            members[j].push(y);
        }
        let counts: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();
        let means: Vec<f64> = members
            .iter()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
            .collect();
        let within_ss = members
            .iter()
            .zip(&means)
            .map(|(m, mu)| m.iter().map(|y| (y - mu) * (y - mu)).sum())
            .collect();
        Design {
            unique,
            counts,
            means: DVector::from_vec(means),
            within_ss,
            n: inputs.len(),
        }
    }

    fn has_replicates(&self) -> bool {
        self.unique.len() < self.n
    }

    /// Mean diagonal of the uncompressed `K + σ_n²I`.
    fn mean_diagonal(&self, h: &Hyperparameters) -> f64 {
        let weighted: f64 = self
            .unique
            .iter()
            .zip(&self.counts)
            .map(|(x, m)| m * h.sigma_f2 * (x.dt * x.dt + h.theta_dt * h.theta_dt))
            .sum();
        weighted / self.n as f64 + h.sigma_n2
    }
}

#[derive(Clone, Debug)]
struct Factorization {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// Absolute jitter added to every diagonal entry of `K + σ_n²I`.
    jitter: f64,
}

fn factorize_at(design: &Design, h: &Hyperparameters, jitter: f64) -> Option<Factorization> {
    let noise = h.sigma_n2 + jitter;
    if noise <= 0.0 && design.has_replicates() {
        return None;
    }
    let mut a = gram_matrix(&design.unique, h, false).ok()?;
    for (j, m) in design.counts.iter().enumerate() {
        a[(j, j)] += noise / m;
    }
    let chol = Cholesky::new(a)?;
    let alpha = chol.solve(&design.means);
    alpha
        .iter()
        .all(|v| v.is_finite())
        .then_some(Factorization {
            chol,
            alpha,
            jitter,
        })
}

fn jitter_levels(design: &Design, h: &Hyperparameters, base: f64) -> [f64; 4] {
    let md = design.mean_diagonal(h);
    [0.0, base * md, base * 1e2 * md, base * 1e4 * md]
}

fn factorize(design: &Design, h: &Hyperparameters, base_jitter: f64) -> Result<Factorization> {
    h.validate()?;
    let levels = jitter_levels(design, h, base_jitter);
    levels
        .iter()
        .find_map(|&j| factorize_at(design, h, j))
        .ok_or_else(|| Error::Numerical {
            attempted: levels.to_vec(),
        })
}

/// Log marginal likelihood and its gradient in the optimizer's log coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    /// Indexed by [`HyperParam::index`]; see [`Hyperparameters::to_log`].
    pub gradient: [f64; 5],
    /// Hyperparameters the optimizer holds fixed; their gradient is still reported.
    pub pinned: BTreeSet<HyperParam>,
}

fn lml_value(design: &Design, f: &Factorization, h: &Hyperparameters) -> f64 {
    let noise = h.sigma_n2 + f.jitter;
    let u = design.unique.len() as f64;
    let log_det: f64 = f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let mut value = -0.5 * design.means.dot(&f.alpha) - log_det - 0.5 * u * (2.0 * PI).ln();
    for (m, ss) in design.counts.iter().zip(&design.within_ss) {
        if *m > 1.0 {
            value += -0.5 * (m - 1.0) * (2.0 * PI * noise).ln() - 0.5 * m.ln() - ss / (2.0 * noise);
        }
    }
    value
}

fn lml_with_gradient(
    design: &Design,
    f: &Factorization,
    h: &Hyperparameters,
) -> Result<LogLikelihood> {
    let value = lml_value(design, f, h);
    let noise = h.sigma_n2 + f.jitter;
    let grads = kernel_gradients(&design.unique, h, GradientSpace::Log)?;
    let inv = f.chol.inverse();
    let alpha = &f.alpha;
    let half_trace = |g: &DMatrix<f64>| {
        let quad = alpha.dot(&(g * alpha));
        let tr: f64 = inv.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        0.5 * (quad - tr)
    };
    let mut gradient = [0.0; 5];
    for p in [
        HyperParam::ThetaT,
        HyperParam::ThetaSoc,
        HyperParam::ThetaDt,
        HyperParam::SigmaF2,
    ] {
        gradient[p.index()] = half_trace(&grads[p.index()]);
    }
    // Noise: reduced diagonal σ_n²/m plus the within-group term.
    let mut g_noise = 0.0;
    for (j, (m, ss)) in design.counts.iter().zip(&design.within_ss).enumerate() {
        g_noise += 0.5 * (alpha[j] * alpha[j] - inv[(j, j)]) * h.sigma_n2 / m;
        if *m > 1.0 {
            g_noise += h.sigma_n2 * (-(m - 1.0) / (2.0 * noise) + ss / (2.0 * noise * noise));
        }
    }
    gradient[HyperParam::SigmaN2.index()] = g_noise;
    Ok(LogLikelihood {
        value,
        gradient,
        pinned: h.pinned.clone(),
    })
}

fn check_finite(x: &[InputVector], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Data(format!(
            "{} inputs but {} targets",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Data("no training data".into()));
    }
    let ok = x
        .iter()
        .all(|v| v.inv_temp.is_finite() && v.soc.is_finite() && v.dt.is_finite())
        && y.iter().all(|v| v.is_finite());
    if !ok {
        return Err(Error::Data(
            "training data contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// `log p(y | X, h)` with its log-coordinate gradient, using the default jitter ladder.
pub fn log_marginal_likelihood(
    x: &[InputVector],
    y: &[f64],
    h: &Hyperparameters,
) -> Result<LogLikelihood> {
    check_finite(x, y)?;
    let design = Design::new(x, y);
    let f = factorize(&design, h, FitConfig::default().jitter)?;
    lml_with_gradient(&design, &f, h)
}

/// Fitted, immutable GP.
#[derive(Clone, Debug)]
pub struct GpModel {
    rows: Vec<TrainingRow>,
    inputs: Vec<InputVector>,
    targets: Vec<f64>,
    h: Hyperparameters,
    design: Design,
    fact: Factorization,
    lml: f64,
    fit_seed: Option<u64>,
}

impl GpModel {
    /// Conditions the GP on `rows` with fixed hyperparameters.
    pub fn new(rows: Vec<TrainingRow>, h: Hyperparameters) -> Result<GpModel> {
        Self::build(rows, h, None, FitConfig::default().jitter, None)
    }

    fn build(
        rows: Vec<TrainingRow>,
        h: Hyperparameters,
        exact_jitter: Option<f64>,
        base_jitter: f64,
        fit_seed: Option<u64>,
    ) -> Result<GpModel> {
        let inputs: Vec<InputVector> = rows.iter().map(row_input).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r.dq).collect();
        check_finite(&inputs, &targets)?;
        h.validate()?;
        let design = Design::new(&inputs, &targets);
        let fact = match exact_jitter {
            Some(j) => {
                factorize_at(&design, &h, j).ok_or(Error::Numerical { attempted: vec![j] })?
            }
            None => factorize(&design, &h, base_jitter)?,
        };
        let lml = lml_value(&design, &fact, &h);
        Ok(GpModel {
            rows,
            inputs,
            targets,
            h,
            design,
            fact,
            lml,
            fit_seed,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.h
    }

    pub fn rows(&self) -> &[TrainingRow] {
        &self.rows
    }

    pub fn inputs(&self) -> &[InputVector] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn jitter_used(&self) -> f64 {
        self.fact.jitter
    }

    pub fn fit_seed(&self) -> Option<u64> {
        self.fit_seed
    }

    /// Number of distinct training inputs.
    pub fn distinct_inputs(&self) -> usize {
        self.design.unique.len()
    }

    /// Lower Cholesky factor of the compressed training covariance
    /// `K_u + diag((σ_n² + jitter)/m)` over distinct inputs; equals the factor of
    /// `K + σ_n²I` when no input repeats.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.fact.chol.l()
    }

    /// Distinct training inputs, in the order used by [`GpModel::cholesky_factor`].
    pub fn distinct_input_vectors(&self) -> &[InputVector] {
        &self.design.unique
    }

    /// Δt values present in the training rows, ascending.
    pub fn training_windows(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self.inputs.iter().map(|x| x.dt).collect();
        w.sort_by(f64::total_cmp);
        w.dedup();
        w
    }
}

pub fn row_input(r: &TrainingRow) -> InputVector {
    InputVector::new(r.inv_temp, r.soc, r.dt)
}

/// Posterior over the latent ΔQ at test inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    /// Diagonal of the posterior covariance, clamped at zero.
    pub var: Vec<f64>,
    pub std: Vec<f64>,
    /// Full posterior covariance when requested.
    pub cov: Option<DMatrix<f64>>,
}

pub fn predict(model: &GpModel, xstar: &[InputVector], full_cov: bool) -> Result<Posterior> {
    let h = &model.h;
    let ks = cross_covariance(xstar, &model.design.unique, h)?;
    let mean: Vec<f64> = (&ks * &model.fact.alpha).iter().copied().collect();
    let v = model
        .fact
        .chol
        .l_dirty()
        .solve_lower_triangular(&ks.transpose())
        .ok_or(Error::Numerical {
            attempted: vec![model.fact.jitter],
        })?;
    let (var, cov) = if full_cov {
        let mut cov = gram_matrix(xstar, h, false)? - v.transpose() * &v;
        let m = cov.nrows();
        for i in 0..m {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        (cov.diagonal().iter().copied().collect(), Some(cov))
    } else {
        let var = xstar
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let prior = crate::kernel::composed_kernel(x, x, h, false)?;
                Ok((prior - v.column(i).norm_squared()).max(0.0))
            })
            .collect::<Result<Vec<f64>>>()?;
        (var, None)
    };
    let std = var.iter().map(|v| v.sqrt()).collect();
    Ok(Posterior {
        mean,
        var,
        std,
        cov,
    })
}

/// Input span of the operating window, used when training data has no spread.
fn fallback_span(p: HyperParam) -> f64 {
    match p {
        HyperParam::ThetaT => 1.0 / MIN_TEMPERATURE_K - 1.0 / MAX_TEMPERATURE_K,
        _ => 100.0,
    }
}

fn span(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

fn input_spans(x: &[InputVector]) -> (f64, f64) {
    (
        span(x.iter().map(|v| v.inv_temp)),
        span(x.iter().map(|v| v.soc)),
    )
}

/// Box constraints in log coordinates.
fn log_bounds(x: &[InputVector]) -> [(f64, f64); 5] {
    let (st, ss) = input_spans(x);
    let st = if st > 0.0 {
        st
    } else {
        fallback_span(HyperParam::ThetaT)
    };
    let ss = if ss > 0.0 {
        ss
    } else {
        fallback_span(HyperParam::ThetaSoc)
    };
    [
        ((1e-3 * st).ln(), (1e3 * st).ln()),
        ((1e-3 * ss).ln(), (1e3 * ss).ln()),
        (1e-6f64.ln(), 1e10f64.ln()),
        (1e-12f64.ln(), 1e8f64.ln()),
        (1e-12f64.ln(), 1e4f64.ln()),
    ]
}

struct Objective<'a> {
    design: &'a Design,
    template: Hyperparameters,
    jitter: f64,
}

impl Objective<'_> {
    fn eval(&self, phi: &[f64; 5]) -> Option<(f64, [f64; 5])> {
        let h = self.template.with_log(phi);
        let f = factorize(self.design, &h, self.jitter).ok()?;
        let ll = lml_with_gradient(self.design, &f, &h).ok()?;
        if !ll.value.is_finite() || ll.gradient.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let mut g = ll.gradient;
        for p in &h.pinned {
            g[p.index()] = 0.0;
        }
        Some((ll.value, g))
    }
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;

/// Projected ascent with backtracking in log coordinates.
///
/// The search direction is the gradient scaled by a BFGS inverse-Hessian
/// estimate over the free coordinates, falling back to the plain gradient
/// whenever that estimate stops pointing uphill. The sufficient-increase test
/// and the stopping rule only involve the gradient.
fn ascend(
    obj: &Objective<'_>,
    start: [f64; 5],
    bounds: &[(f64, f64); 5],
    cfg: &FitConfig,
) -> Option<([f64; 5], f64)> {
    let pinned = |i: usize| obj.template.pinned.contains(&HyperParam::ALL[i]);
    let clamp = |phi: [f64; 5]| -> [f64; 5] {
        std::array::from_fn(|i| {
            if pinned(i) {
                phi[i]
            } else {
                phi[i].clamp(bounds[i].0, bounds[i].1)
            }
        })
    };
    let mut phi = clamp(start);
    let (mut value, mut grad) = obj.eval(&phi)?;
    let mut inv_hess = Matrix5::<f64>::identity();
    let mut fresh = true;

    for _ in 0..cfg.max_iters {
        // Drop components pushing against an active bound.
        let mut free = [true; 5];
        for i in 0..5 {
            let (lo, hi) = bounds[i];
            if pinned(i) || (phi[i] <= lo && grad[i] < 0.0) || (phi[i] >= hi && grad[i] > 0.0) {
                grad[i] = 0.0;
                free[i] = false;
            }
        }
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < cfg.grad_tol {
            break;
        }
        let g = Vector5::from(grad);
        let mask = Vector5::from_fn(|i, _| if free[i] { 1.0 } else { 0.0 });
        let mut dir = (inv_hess * g).component_mul(&mask);
        if dir.dot(&g) <= 0.0 || !dir.iter().all(|d| d.is_finite()) {
            inv_hess = Matrix5::identity();
            fresh = true;
            dir = g;
        }
        // An unscaled gradient can be huge; start such steps at unit length.
        let mut step = if fresh {
            1.0 / dir.amax().max(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = clamp(std::array::from_fn(|i| phi[i] + step * dir[i]));
            let gain: f64 = (0..5).map(|i| grad[i] * (cand[i] - phi[i])).sum();
            if gain > 0.0 {
                if let Some((v, gn)) = obj.eval(&cand) {
                    if v >= value + ARMIJO_C * gain {
                        accepted = Some((cand, v, gn));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, v, gn)) = accepted else { break };

        // BFGS on -f: s = Δφ, y = -(Δ∇f).
        let sv = Vector5::from_fn(|i, _| cand[i] - phi[i]);
        let yv = Vector5::from_fn(|i, _| if pinned(i) { 0.0 } else { grad[i] - gn[i] });
        let sy = sv.dot(&yv);
        if sy > 1e-12 * sv.norm() * yv.norm() {
            if fresh {
                inv_hess *= sy / yv.norm_squared();
                fresh = false;
            }
            let rho = 1.0 / sy;
            let left = Matrix5::identity() - sv * yv.transpose() * rho;
            inv_hess = left * inv_hess * left.transpose() + sv * sv.transpose() * rho;
        }
        phi = cand;
        value = v;
        grad = gn;
    }
    Some((phi, value))
}

fn validate_rows(rows: &[TrainingRow]) -> Result<(Vec<InputVector>, Vec<f64>)> {
    let inputs: Vec<InputVector> = rows.iter().map(row_input).collect();
    let targets: Vec<f64> = rows.iter().map(|r| r.dq).collect();
    check_finite(&inputs, &targets)?;
    if rows.len() < 2 {
        return Err(Error::Data(format!(
            "fit needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    if inputs.iter().all(|x| x.bits() == inputs[0].bits()) {
        return Err(Error::Data("fit needs at least two distinct inputs".into()));
    }
    Ok((inputs, targets))
}

fn sample_log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn random_start(
    rng: &mut ChaCha8Rng,
    ranges: &InitRanges,
    spans: (f64, f64),
    pinned: &BTreeMap<HyperParam, f64>,
) -> Hyperparameters {
    let (st, ss) = spans;
    let st = if st > 0.0 {
        st
    } else {
        fallback_span(HyperParam::ThetaT)
    };
    let ss = if ss > 0.0 {
        ss
    } else {
        fallback_span(HyperParam::ThetaSoc)
    };
    let scaled = |(a, b): (f64, f64), s: f64| (a * s, b * s);
    let mut h = Hyperparameters {
        theta_t: sample_log_uniform(rng, scaled(ranges.theta_t_span, st)),
        theta_soc: sample_log_uniform(rng, scaled(ranges.theta_soc_span, ss)),
        theta_dt: sample_log_uniform(rng, ranges.theta_dt),
        sigma_f2: sample_log_uniform(rng, ranges.sigma_f2),
        sigma_n2: sample_log_uniform(rng, ranges.sigma_n2),
        pinned: pinned.keys().copied().collect(),
    };
    for (&p, &v) in pinned {
        h.set(p, v);
    }
    h
}

/// Maximises the log marginal likelihood over hyperparameters.
///
/// `pinned` maps hyperparameters to the values they are held at. Restarts
/// draw log-uniform initial points from a seeded stream; the best run wins,
/// ties going to the earliest restart.
pub fn fit(
    rows: &[TrainingRow],
    cfg: &FitConfig,
    pinned: &BTreeMap<HyperParam, f64>,
) -> Result<GpModel> {
    fit_with_starts(rows, cfg, pinned, &[])
}

/// [`fit`] with extra starting points tried before the random restarts.
/// The total number of runs stays `cfg.restarts`.
pub fn fit_with_starts(
    rows: &[TrainingRow],
    cfg: &FitConfig,
    pinned: &BTreeMap<HyperParam, f64>,
    starts: &[Hyperparameters],
) -> Result<GpModel> {
    cfg.validate()?;
    let (inputs, targets) = validate_rows(rows)?;
    let design = Design::new(&inputs, &targets);
    let bounds = log_bounds(&inputs);
    let spans = input_spans(&inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut candidates: Vec<Hyperparameters> = starts
        .iter()
        .take(cfg.restarts)
        .map(|s| {
            let mut h = s.clone();
            h.pinned = pinned.keys().copied().collect();
            for (&p, &v) in pinned {
                h.set(p, v);
            }
            h
        })
        .collect();
    while candidates.len() < cfg.restarts {
        candidates.push(random_start(&mut rng, &cfg.init_ranges, spans, pinned));
    }

    let mut best: Option<(Hyperparameters, f64)> = None;
    for start in candidates {
        let obj = Objective {
            design: &design,
            template: start.clone(),
            jitter: cfg.jitter,
        };
        if let Some((phi, value)) = ascend(&obj, start.to_log(), &bounds, cfg) {
            if best.as_ref().is_none_or(|(_, v)| value > *v) {
                best = Some((start.with_log(&phi), value));
            }
        }
    }
    let (h, _) = best.ok_or_else(|| Error::Fit("every restart failed to factorize".into()))?;
    GpModel::build(rows.to_vec(), h, None, cfg.jitter, Some(cfg.seed))
}

/// Normalised input relevance from inverse length-scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub temperature: f64,
    pub soc: f64,
}

/// `span/θ` for temperature and SOC, normalised to sum to one.
pub fn relevance(model: &GpModel) -> Result<Relevance> {
    let (st, ss) = input_spans(&model.inputs);
    relevance_from(&model.h, st, ss)
}

pub fn relevance_from(h: &Hyperparameters, span_t: f64, span_soc: f64) -> Result<Relevance> {
    if span_t <= 0.0 && span_soc <= 0.0 {
        return Err(Error::UndefinedRelevance);
    }
    let rt = span_t / h.theta_t;
    let rs = span_soc / h.theta_soc;
    let total = rt + rs;
    Ok(Relevance {
        temperature: rt / total,
        soc: rs / total,
    })
}

#[derive(Serialize, Deserialize)]
struct HyperFields {
    theta_t: f64,
    theta_soc: f64,
    theta_dt: f64,
    sigma_f2: f64,
    sigma_n2: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    hyperparameters: HyperFields,
    pinned: Vec<HyperParam>,
    training_rows: Vec<TrainingRow>,
    jitter_used: f64,
    log_marginal_likelihood: f64,
    fit_seed: Option<u64>,
}

impl GpModel {
    pub fn to_json(&self) -> String {
        let h = &self.h;
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            hyperparameters: HyperFields {
                theta_t: h.theta_t,
                theta_soc: h.theta_soc,
                theta_dt: h.theta_dt,
                sigma_f2: h.sigma_f2,
                sigma_n2: h.sigma_n2,
            },
            pinned: h.pinned.iter().copied().collect(),
            training_rows: self.rows.clone(),
            jitter_used: self.fact.jitter,
            log_marginal_likelihood: self.lml,
            fit_seed: self.fit_seed,
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serialises");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<GpModel> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let hf = file.hyperparameters;
        let h = Hyperparameters {
            theta_t: hf.theta_t,
            theta_soc: hf.theta_soc,
            theta_dt: hf.theta_dt,
            sigma_f2: hf.sigma_f2,
            sigma_n2: hf.sigma_n2,
            pinned: file.pinned.into_iter().collect(),
        };
        Self::build(
            file.training_rows,
            h,
            Some(file.jitter_used),
            FitConfig::default().jitter,
            file.fit_seed,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GpModel> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
