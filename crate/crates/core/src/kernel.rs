//! Tensor-product covariance over (1/T, SOC, Δt):
//! `σ_f² · M52(|Δx1|; θ_T) · M52(|Δx2|; θ_SOC) · (x3·x3' + θ_Δt²)`, with
//! `σ_n²` added on the diagonal of a training covariance only.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputVector {
    /// 1/K.
    pub inv_temp: f64,
    /// Percent.
    pub soc: f64,
    /// Days.
    pub dt: f64,
}

impl InputVector {
    pub fn new(inv_temp: f64, soc: f64, dt: f64) -> Self {
        InputVector { inv_temp, soc, dt }
    }

    pub fn from_celsius(temp_c: f64, soc: f64, dt: f64) -> Self {
        InputVector::new(1.0 / (temp_c + crate::dataset::KELVIN_OFFSET), soc, dt)
    }

    pub(crate) fn bits(&self) -> [u64; 3] {
        [
            self.inv_temp.to_bits(),
            self.soc.to_bits(),
            self.dt.to_bits(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    ThetaT,
    ThetaSoc,
    ThetaDt,
    SigmaF2,
    SigmaN2,
}

impl HyperParam {
    pub const ALL: [HyperParam; 5] = [
        HyperParam::ThetaT,
        HyperParam::ThetaSoc,
        HyperParam::ThetaDt,
        HyperParam::SigmaF2,
        HyperParam::SigmaN2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HyperParam::ThetaT => "theta_t",
            HyperParam::ThetaSoc => "theta_soc",
            HyperParam::ThetaDt => "theta_dt",
            HyperParam::SigmaF2 => "sigma_f2",
            HyperParam::SigmaN2 => "sigma_n2",
        }
    }
}

impl fmt::Display for HyperParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HyperParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HyperParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown hyperparameter {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Length-scale over 1/T, 1/K.
    pub theta_t: f64,
    /// Length-scale over SOC, percent.
    pub theta_soc: f64,
    /// Offset of the linear Δt factor, days.
    pub theta_dt: f64,
    /// Signal variance, percent².
    pub sigma_f2: f64,
    /// Noise variance, percent².
    pub sigma_n2: f64,
    #[serde(default)]
    pub pinned: BTreeSet<HyperParam>,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.theta_t,
            self.theta_soc,
            self.theta_dt,
            self.sigma_f2,
            self.sigma_n2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Parameter(format!(
                "non-finite hyperparameters {self:?}"
            )));
        }
        if self.theta_t <= 0.0 || self.theta_soc <= 0.0 {
            return Err(Error::Parameter(format!(
                "length-scales must be positive (theta_t={}, theta_soc={})",
                self.theta_t, self.theta_soc
            )));
        }
        if self.sigma_f2 < 0.0 || self.sigma_n2 < 0.0 {
            return Err(Error::Parameter(format!(
                "variances must be non-negative (sigma_f2={}, sigma_n2={})",
                self.sigma_f2, self.sigma_n2
            )));
        }
        Ok(())
    }

    pub fn get(&self, p: HyperParam) -> f64 {
        match p {
            HyperParam::ThetaT => self.theta_t,
            HyperParam::ThetaSoc => self.theta_soc,
            HyperParam::ThetaDt => self.theta_dt,
            HyperParam::SigmaF2 => self.sigma_f2,
            HyperParam::SigmaN2 => self.sigma_n2,
        }
    }

    pub fn set(&mut self, p: HyperParam, value: f64) {
        match p {
            HyperParam::ThetaT => self.theta_t = value,
            HyperParam::ThetaSoc => self.theta_soc = value,
            HyperParam::ThetaDt => self.theta_dt = value,
            HyperParam::SigmaF2 => self.sigma_f2 = value,
            HyperParam::SigmaN2 => self.sigma_n2 = value,
        }
    }

    /// Optimizer coordinates: logs of θ_T, θ_SOC, θ_Δt², σ_f², σ_n².
    pub fn to_log(&self) -> [f64; 5] {
        let floor = |v: f64| v.max(f64::MIN_POSITIVE).ln();
        [
            floor(self.theta_t),
            floor(self.theta_soc),
            floor(self.theta_dt * self.theta_dt),
            floor(self.sigma_f2),
            floor(self.sigma_n2),
        ]
    }

    /// Inverse of [`Hyperparameters::to_log`]; pinned values are taken from `self`.
    pub fn with_log(&self, phi: &[f64; 5]) -> Hyperparameters {
        let mut h = self.clone();
        for p in HyperParam::ALL {
            if self.pinned.contains(&p) {
                continue;
            }
            let v = phi[p.index()].exp();
            h.set(
                p,
                if p == HyperParam::ThetaDt {
                    v.sqrt()
                } else {
                    v
                },
            );
        }
        h
    }

    pub fn is_pinned(&self, p: HyperParam) -> bool {
        self.pinned.contains(&p)
    }
}

/// Matérn-5/2 correlation at distance `r` with length-scale `ell`.
pub fn matern52(r: f64, ell: f64) -> Result<f64> {
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(Error::Parameter(format!(
            "length-scale must be positive, got {ell}"
        )));
    }
    if !(r >= 0.0) {
        return Err(Error::Parameter(format!(
            "distance must be non-negative, got {r}"
        )));
    }
    Ok(matern52_unchecked(r, ell))
}

#[inline]
fn matern52_unchecked(r: f64, ell: f64) -> f64 {
    let a = SQRT_5 * r / ell;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

/// `d M52 / d ln(ell)`.
#[inline]
fn matern52_dlog_ell(r: f64, ell: f64) -> f64 {
    let a = SQRT_5 * r / ell;
    a * a / 3.0 * (1.0 + a) * (-a).exp()
}

/// The three factors of the covariance, kept apart for gradients.
#[derive(Clone, Copy, Debug)]
struct Factors {
    temp: f64,
    soc: f64,
    linear: f64,
}

#[inline]
fn factors(x: &InputVector, xp: &InputVector, h: &Hyperparameters) -> Factors {
    Factors {
        temp: matern52_unchecked((x.inv_temp - xp.inv_temp).abs(), h.theta_t),
        soc: matern52_unchecked((x.soc - xp.soc).abs(), h.theta_soc),
        linear: x.dt * xp.dt + h.theta_dt * h.theta_dt,
    }
}

#[inline]
fn kernel_value(x: &InputVector, xp: &InputVector, h: &Hyperparameters) -> f64 {
    let f = factors(x, xp, h);
    h.sigma_f2 * f.temp * f.soc * f.linear
}

/// Covariance between two inputs; `same_index` adds the noise variance.
pub fn composed_kernel(
    x: &InputVector,
    xp: &InputVector,
    h: &Hyperparameters,
    same_index: bool,
) -> Result<f64> {
    h.validate()?;
    let k = kernel_value(x, xp, h);
    Ok(if same_index { k + h.sigma_n2 } else { k })
}

/// Noise-free cross-covariance `K(X, X')`.
pub fn cross_covariance(
    x: &[InputVector],
    xp: &[InputVector],
    h: &Hyperparameters,
) -> Result<DMatrix<f64>> {
    h.validate()?;
    Ok(DMatrix::from_fn(x.len(), xp.len(), |i, j| {
        kernel_value(&x[i], &xp[j], h)
    }))
}

/// Symmetric covariance `K(X, X)`, optionally with `σ_n²` on the diagonal.
pub fn gram_matrix(
    x: &[InputVector],
    h: &Hyperparameters,
    with_noise: bool,
) -> Result<DMatrix<f64>> {
    h.validate()?;
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_value(&x[i], &x[j], h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        if with_noise {
            k[(i, i)] += h.sigma_n2;
        }
    }
    Ok(k)
}

/// `K(X, X')`; noise enters only when `x` and `xp` are the same slice.
pub fn kernel_matrix(
    x: &[InputVector],
    xp: &[InputVector],
    h: &Hyperparameters,
    with_noise: bool,
) -> Result<DMatrix<f64>> {
    if std::ptr::eq(x, xp) {
        gram_matrix(x, h, with_noise)
    } else {
        cross_covariance(x, xp, h)
    }
}

/// Coordinates in which [`kernel_gradients`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientSpace {
    /// With respect to θ_T, θ_SOC, θ_Δt, σ_f², σ_n² directly.
    Linear,
    /// With respect to the optimizer's log coordinates (see [`Hyperparameters::to_log`]).
    Log,
}

/// `∂K/∂p` of the noisy training covariance for every hyperparameter, indexed
/// by [`HyperParam::index`].
pub fn kernel_gradients(
    x: &[InputVector],
    h: &Hyperparameters,
    space: GradientSpace,
) -> Result<[DMatrix<f64>; 5]> {
    h.validate()?;
    let n = x.len();
    let mut grads: [DMatrix<f64>; 5] = std::array::from_fn(|_| DMatrix::zeros(n, n));
    let log = space == GradientSpace::Log;
    for i in 0..n {
        for j in 0..=i {
            let f = factors(&x[i], &x[j], h);
            let r_t = (x[i].inv_temp - x[j].inv_temp).abs();
            let r_s = (x[i].soc - x[j].soc).abs();
            let dlog_t = matern52_dlog_ell(r_t, h.theta_t);
            let dlog_s = matern52_dlog_ell(r_s, h.theta_soc);
            let base = f.temp * f.soc * f.linear;
            let values = if log {
                [
                    h.sigma_f2 * dlog_t * f.soc * f.linear,
                    h.sigma_f2 * f.temp * dlog_s * f.linear,
                    h.sigma_f2 * f.temp * f.soc * h.theta_dt * h.theta_dt,
                    h.sigma_f2 * base,
                ]
            } else {
                [
                    h.sigma_f2 * dlog_t / h.theta_t * f.soc * f.linear,
                    h.sigma_f2 * f.temp * dlog_s / h.theta_soc * f.linear,
                    h.sigma_f2 * f.temp * f.soc * 2.0 * h.theta_dt,
                    base,
                ]
            };
            for (g, v) in grads.iter_mut().zip(values) {
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        grads[HyperParam::SigmaN2.index()][(i, i)] = if log { h.sigma_n2 } else { 1.0 };
    }
    Ok(grads)
}
