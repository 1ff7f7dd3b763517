//! Voxel-wise inversion of the compartment model for a known input function.
//!
//! Two estimators are provided:
//!
//! * a linearized least-squares fit (LLS). Integrating the tissue ODE twice and
//!   mixing in the blood fraction gives
//!
//!   ```text
//!   C_PET(t) = β0·C_A + β1·∫C_A + β2·∫∫C_A + β3·∫C_PET
//!   β0 = Vb,  β1 = (1−Vb)·K1 + (k2+k3)·Vb,  β2 = (1−Vb)·K1·k3,  β3 = −(k2+k3)
//!   ```
//!
//!   which is linear in β. The rate constants are recovered algebraically.
//! * a Levenberg–Marquardt refinement (NLS) of the weighted frame residuals,
//!   run in a log/logit parameterization that keeps the constants positive and
//!   Vb inside its bounds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aif::SampledCurve;
use crate::error::{Error, Result};
use crate::kinetics::{self, DynamicImage, ForwardModel, GridInput, KineticParams, ParametricMaps};
use crate::lm::{self, LeastSquares, LmOptions};
use crate::timegrid::{FrameMode, FrameSchedule, DEFAULT_DT_S};

/// Smallest rate constant representable in the log parameterization.
pub const RATE_FLOOR: f64 = 1e-6;

/// Relative singular-value cutoff below which the LLS design is rank deficient.
const LLS_RANK_TOL: f64 = 1e-10;
/// Model-based corrections of the `∫C_PET` column after the first LLS solve.
const LLS_CORRECTION_PASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    /// `w_i = duration_i / Σ durations`
    #[default]
    FrameDuration,
}

impl Weighting {
    pub fn weights(self, schedule: &FrameSchedule) -> Vec<f64> {
        let d = schedule.durations();
        match self {
            Weighting::Uniform => vec![1.0 / d.len() as f64; d.len()],
            Weighting::FrameDuration => {
                let total: f64 = d.iter().sum();
                d.iter().map(|x| x / total).collect()
            }
        }
    }
}

/// Per-parameter `(lower, upper)` bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    #[serde(rename = "K1")]
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub k3: (f64, f64),
    #[serde(rename = "Vb")]
    pub vb: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            k1: (0.0, 5.0),
            k2: (0.0, 5.0),
            k3: (0.0, 5.0),
            vb: (0.0, 1.0),
        }
    }
}

impl Bounds {
    fn as_array(&self) -> [(f64, f64); 4] {
        [self.k1, self.k2, self.k3, self.vb]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in ["K1", "k2", "k3", "Vb"].iter().zip(self.as_array()) {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::invalid(
                    "bounds",
                    format!("{name}: need 0 <= lower <= upper, got ({lo}, {hi})"),
                ));
            }
        }
        if self.vb.1 > 1.0 {
            return Err(Error::invalid("bounds", "Vb upper bound exceeds 1"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &KineticParams) -> bool {
        self.as_array()
            .iter()
            .zip(p.to_array())
            .all(|(&(lo, hi), v)| v >= lo && v <= hi)
    }

    /// Clamp into the box; the flag reports whether anything moved.
    pub fn clamp(&self, p: &KineticParams) -> (KineticParams, bool) {
        let mut out = p.to_array();
        let mut moved = false;
        for (v, (lo, hi)) in out.iter_mut().zip(self.as_array()) {
            let c = if v.is_nan() { lo } else { v.clamp(lo, hi) };
            if c != *v {
                moved = true;
            }
            *v = c;
        }
        (KineticParams::from_array(out), moved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub weights: Weighting,
    pub bounds: Bounds,
    pub max_iter: usize,
    /// Relative parameter step below which NLS stops.
    pub tol: f64,
    /// Fine-grid spacing in seconds.
    pub dt: f64,
    pub mode: FrameMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: Weighting::FrameDuration,
            bounds: Bounds::default(),
            max_iter: 100,
            tol: 1e-6,
            dt: DEFAULT_DT_S,
            mode: FrameMode::FrameAverage,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.max_iter < 1 {
            return Err(Error::invalid("fit config", "max_iter must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("fit config", "tol must be > 0"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("fit config", "dt must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    Clamped,
    Degenerate,
    NoSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: KineticParams,
    pub ki: f64,
    /// Weighted RMS of `tac − model` (weights normalized to sum 1).
    pub residual_rms: f64,
    pub status: FitStatus,
    pub lls_coeffs: Option<[f64; 4]>,
    /// LM Jacobian evaluations; zero for LLS.
    pub iterations: usize,
}

impl FitResult {
    fn empty(status: FitStatus, lls_coeffs: Option<[f64; 4]>) -> Self {
        Self {
            params: KineticParams::default(),
            ki: 0.0,
            residual_rms: 0.0,
            status,
            lls_coeffs,
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMethod {
    #[serde(rename = "lls")]
    Lls,
    #[serde(rename = "lls+nls")]
    LlsNls,
}

impl std::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lls" => Ok(FitMethod::Lls),
            "lls+nls" => Ok(FitMethod::LlsNls),
            other => Err(Error::invalid("fit method", format!("`{other}` (expected lls or lls+nls)"))),
        }
    }
}

/// LLS coefficients `β` generated by a parameter set.
pub fn lls_coefficients(p: &KineticParams) -> [f64; 4] {
    let alpha = p.k2 + p.k3;
    [
        p.vb,
        (1.0 - p.vb) * p.k1 + alpha * p.vb,
        (1.0 - p.vb) * p.k1 * p.k3,
        -alpha,
    ]
}

/// Invert [`lls_coefficients`]. Values are not clamped; they may be negative
/// or non-finite for noisy `β`.
pub fn params_from_coefficients(beta: &[f64; 4]) -> KineticParams {
    let vb = beta[0];
    let alpha = -beta[3];
    let mix = 1.0 - beta[0];
    let k1 = (beta[1] + beta[3] * beta[0]) / mix;
    let k3 = beta[2] / (mix * k1);
    KineticParams::new(k1, alpha - k3, k3, vb)
}

/// Precomputed per-input state for fitting many voxels against one AIF.
#[derive(Debug, Clone)]
pub struct VoxelFitter {
    model: ForwardModel,
    schedule: FrameSchedule,
    cfg: FitConfig,
    weights: Vec<f64>,
    /// Frame-discretized `∫∫C_A` in kBq·min²/mL.
    double_integral_frames: Vec<f64>,
}

impl VoxelFitter {
    pub fn new(ca: &SampledCurve, schedule: &FrameSchedule, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = schedule.fine_grid(cfg.dt)?;
        Self::with_input(GridInput::from_curve(ca, grid), schedule, cfg)
    }

    pub fn with_input(input: GridInput, schedule: &FrameSchedule, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ForwardModel::new(input, schedule, cfg.mode)?;
        let dt_min = model.input().grid().dt / 60.0;
        let single = model.input().integral();
        let mut double = Vec::with_capacity(single.len());
        let mut acc = 0.0;
        double.push(0.0);
        for w in single.windows(2) {
            acc += 0.5 * dt_min * (w[0] + w[1]);
            double.push(acc);
        }
        let double_integral_frames = model.frame_operator().apply(&double);
        Ok(Self {
            weights: cfg.weights.weights(schedule),
            model,
            schedule: schedule.clone(),
            cfg: *cfg,
            double_integral_frames,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_tac(&self, tac: &[f64]) -> Result<()> {
        if tac.len() != self.schedule.len() {
            return Err(Error::invalid(
                "TAC",
                format!("{} values for a {}-frame schedule", tac.len(), self.schedule.len()),
            ));
        }
        if tac.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("TAC", "non-finite value"));
        }
        Ok(())
    }

    /// Weighted RMS residual of `p` against `tac`.
    pub fn residual_rms(&self, tac: &[f64], p: &KineticParams) -> Result<f64> {
        let model = self.model.frames(p)?;
        Ok(weighted_rms(&self.weights, tac, &model))
    }

    /// `∫C_PET` at frame level, estimated from the TAC alone.
    ///
    /// Cumulative frame integrals give the exact integral at frame boundaries
    /// (frame-average mode); inside a frame the curve is taken as linear with
    /// slope from a non-uniform three-point difference of neighbouring frames.
    fn tac_integral_frames(&self, tac: &[f64]) -> Vec<f64> {
        let n = tac.len();
        let dur: Vec<f64> = self.schedule.durations().iter().map(|d| d / 60.0).collect();
        let mid: Vec<f64> = self.schedule.mid_times().iter().map(|m| m / 60.0).collect();
        let slope = |i: usize| -> f64 {
            if n < 2 {
                return 0.0;
            }
            if i == 0 {
                return (tac[1] - tac[0]) / (mid[1] - mid[0]);
            }
            if i == n - 1 {
                return (tac[n - 1] - tac[n - 2]) / (mid[n - 1] - mid[n - 2]);
            }
            let h1 = mid[i] - mid[i - 1];
            let h2 = mid[i + 1] - mid[i];
            (h1 * h1 * tac[i + 1] - h2 * h2 * tac[i - 1] + (h2 * h2 - h1 * h1) * tac[i])
                / (h1 * h2 * (h1 + h2))
        };
        let mut boundary = 0.0;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let d = dur[i];
            let g = slope(i);
            let inside = match self.cfg.mode {
                FrameMode::FrameAverage => tac[i] * d / 2.0 - g * d * d / 12.0,
                FrameMode::Midpoint => tac[i] * d / 2.0 - g * d * d / 8.0,
            };
            out.push(boundary + inside);
            boundary += tac[i] * d;
        }
        out
    }

    /// Exact frame-level `∫C_PET` of the model at `p` minus the TAC-only
    /// estimate applied to that model's frames. Adding it to the data estimate
    /// removes the within-frame interpolation error for curves close to `p`.
    fn integral_correction(&self, p: &KineticParams) -> Result<Vec<f64>> {
        let input = self.model.input();
        let tissue = kinetics::tissue_curve(p, input)?;
        let dt_min = input.grid().dt / 60.0;
        let mut acc = 0.0;
        let mut prev = None;
        let integral: Vec<f64> = input
            .values()
            .iter()
            .zip(&tissue)
            .map(|(ca, ct)| {
                let c = p.vb * ca + (1.0 - p.vb) * ct;
                if let Some(q) = prev {
                    acc += 0.5 * dt_min * (q + c);
                }
                prev = Some(c);
                acc
            })
            .collect();
        let exact = self.model.frame_operator().apply(&integral);
        let approx = self.tac_integral_frames(&self.model.frames(p)?);
        Ok(exact.iter().zip(&approx).map(|(e, a)| e - a).collect())
    }

    fn recover(&self, beta: &[f64; 4]) -> (KineticParams, bool) {
        let (mut params, mut clamped) = self.cfg.bounds.clamp(&params_from_coefficients(beta));
        if params.k1 > 0.0 && params.k2 + params.k3 <= 0.0 {
            params.k2 = RATE_FLOOR.max(self.cfg.bounds.k2.0);
            clamped = true;
        }
        (params, clamped)
    }

    /// Linearized least-squares fit. The `∫C_PET` column starts from the TAC
    /// alone and is then corrected against the model at the current estimate.
    pub fn lls(&self, tac: &[f64]) -> Result<FitResult> {
        self.check_tac(tac)?;
        let t = tac.len();
        if t < 5 {
            return Err(Error::invalid("TAC", format!("LLS needs at least 5 frames, got {t}")));
        }
        if tac.iter().all(|&v| v == 0.0) {
            return Ok(FitResult::empty(FitStatus::NoSignal, None));
        }
        let data_integral = self.tac_integral_frames(tac);
        let mut cols = [
            self.model.input_frames().to_vec(),
            self.model.input_integral_frames().to_vec(),
            self.double_integral_frames.clone(),
            data_integral.clone(),
        ];
        let Some(mut beta) = weighted_lstsq(&cols, tac, &self.weights) else {
            return Ok(FitResult::empty(FitStatus::Degenerate, None));
        };
        let (mut params, mut clamped) = self.recover(&beta);
        for _ in 0..LLS_CORRECTION_PASSES {
            let correction = self.integral_correction(&params)?;
            for ((c, d), e) in cols[3].iter_mut().zip(&data_integral).zip(&correction) {
                *c = d + e;
            }
            let Some(b) = weighted_lstsq(&cols, tac, &self.weights) else { break };
            beta = b;
            (params, clamped) = self.recover(&beta);
        }
        let residual_rms = self.residual_rms(tac, &params)?;
        Ok(FitResult {
            params,
            ki: kinetics::ki(&params)?,
            residual_rms,
            status: if clamped { FitStatus::Clamped } else { FitStatus::Ok },
            lls_coeffs: Some(beta),
            iterations: 0,
        })
    }

    /// Bounded Levenberg–Marquardt refinement starting from `init`.
    pub fn nls(&self, tac: &[f64], init: &KineticParams) -> Result<FitResult> {
        self.check_tac(tac)?;
        init.validate()?;
        if !self.cfg.bounds.contains(init) {
            return Err(Error::invalid(
                "NLS init",
                format!("{init:?} lies outside the configured bounds"),
            ));
        }
        let init_rms = self.residual_rms(tac, init)?;
        let problem = NlsProblem::new(self, tac);
        let z0 = problem.to_internal(init);
        let scale: f64 = tac.iter().zip(&self.weights).map(|(y, w)| w * y * y).sum();
        let opts = LmOptions {
            max_iter: self.cfg.max_iter,
            step_tol: self.cfg.tol,
            cost_floor: 1e-28 * scale,
        };
        let report = match lm::minimize(&problem, &z0, opts) {
            Ok(r) => r,
            Err(Error::Numeric(_)) => return Ok(FitResult::empty(FitStatus::Degenerate, None)),
            Err(e) => return Err(e),
        };
        let params = problem.to_params(&report.z);
        let rms = (report.cost.max(0.0)).sqrt();
        // The log/logit map can move an on-bound init slightly; never return
        // something worse than the starting point.
        let (params, rms, at_bound) = if rms > init_rms {
            (*init, init_rms, false)
        } else {
            (params, rms, problem.at_upper_bound(&report.z))
        };
        Ok(FitResult {
            params,
            ki: kinetics::ki(&params)?,
            residual_rms: rms,
            status: if at_bound { FitStatus::Clamped } else { FitStatus::Ok },
            lls_coeffs: None,
            iterations: report.iterations,
        })
    }

    /// LLS, optionally followed by NLS started from the (clamped) LLS estimate.
    pub fn fit(&self, tac: &[f64], method: FitMethod) -> Result<FitResult> {
        let lls = self.lls(tac)?;
        if method == FitMethod::Lls || matches!(lls.status, FitStatus::Degenerate | FitStatus::NoSignal) {
            return Ok(lls);
        }
        let mut refined = self.nls(tac, &lls.params)?;
        refined.lls_coeffs = lls.lls_coeffs;
        Ok(refined)
    }
}

fn weighted_rms(w: &[f64], data: &[f64], model: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let sse: f64 = w
        .iter()
        .zip(data.iter().zip(model))
        .map(|(w, (y, m))| w * (y - m) * (y - m))
        .sum();
    (sse / total).sqrt()
}

/// Weighted least squares via SVD of the column-scaled design; `None` when the
/// design is numerically rank deficient.
fn weighted_lstsq(cols: &[Vec<f64>; 4], y: &[f64], w: &[f64]) -> Option<[f64; 4]> {
    let t = y.len();
    let mut a = DMatrix::<f64>::zeros(t, 4);
    let mut b = DVector::<f64>::zeros(t);
    for i in 0..t {
        let sw = w[i].sqrt();
        for (c, col) in cols.iter().enumerate() {
            a[(i, c)] = sw * col[i];
        }
        b[i] = sw * y[i];
    }
    let mut norms = [0.0; 4];
    for (c, norm) in norms.iter_mut().enumerate() {
        *norm = a.column(c).norm();
        if !(norm.is_finite() && *norm > 0.0) {
            return None;
        }
        a.column_mut(c).scale_mut(1.0 / *norm);
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > LLS_RANK_TOL * smax) {
        return None;
    }
    let x = svd.solve(&b, 0.0).ok()?;
    let beta = [x[0] / norms[0], x[1] / norms[1], x[2] / norms[2], x[3] / norms[3]];
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

/// NLS in internal coordinates: `z_k = ln p_k` for the rate constants and a
/// logit of Vb rescaled to its bounds.
struct NlsProblem<'a> {
    fitter: &'a VoxelFitter,
    tac: &'a [f64],
    sqrt_w: Vec<f64>,
    rate_z: [(f64, f64); 3],
    vb_bounds: (f64, f64),
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> NlsProblem<'a> {
    fn new(fitter: &'a VoxelFitter, tac: &'a [f64]) -> Self {
        let b = fitter.cfg.bounds;
        let zr = |(lo, hi): (f64, f64)| {
            let lo = lo.max(RATE_FLOOR);
            let hi = hi.max(lo);
            (lo.ln(), hi.ln())
        };
        Self {
            fitter,
            tac,
            sqrt_w: fitter.weights.iter().map(|w| w.sqrt()).collect(),
            rate_z: [zr(b.k1), zr(b.k2), zr(b.k3)],
            vb_bounds: b.vb,
        }
    }

    fn to_internal(&self, p: &KineticParams) -> [f64; 4] {
        let (lo, hi) = self.vb_bounds;
        let span = hi - lo;
        let vb_z = if span > 0.0 {
            let eps = 1e-6;
            let s = ((p.vb - lo) / span).clamp(eps, 1.0 - eps);
            (s / (1.0 - s)).ln()
        } else {
            0.0
        };
        [
            p.k1.max(RATE_FLOOR).ln(),
            p.k2.max(RATE_FLOOR).ln(),
            p.k3.max(RATE_FLOOR).ln(),
            vb_z,
        ]
    }

    fn to_params(&self, z: &[f64]) -> KineticParams {
        let (lo, hi) = self.vb_bounds;
        KineticParams::new(
            z[0].exp(),
            z[1].exp(),
            z[2].exp(),
            lo + (hi - lo) * sigmoid(z[3]),
        )
    }

    fn at_upper_bound(&self, z: &[f64]) -> bool {
        (0..3).any(|k| z[k] >= self.rate_z[k].1)
    }
}

impl LeastSquares for NlsProblem<'_> {
    fn n_params(&self) -> usize {
        4
    }

    fn n_residuals(&self) -> usize {
        self.tac.len()
    }

    fn residuals(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let model = self.fitter.model.frames(&self.to_params(z))?;
        for i in 0..out.len() {
            out[i] = self.sqrt_w[i] * (model[i] - self.tac[i]);
        }
        Ok(())
    }

    fn residuals_and_jacobian(&self, z: &[f64], out: &mut [f64], jac: &mut DMatrix<f64>) -> Result<()> {
        let p = self.to_params(z);
        let fj = self.fitter.model.frames_with_jacobian(&p)?;
        let (lo, hi) = self.vb_bounds;
        let s = sigmoid(z[3]);
        let chain = [p.k1, p.k2, p.k3, (hi - lo) * s * (1.0 - s)];
        for i in 0..out.len() {
            out[i] = self.sqrt_w[i] * (fj.values[i] - self.tac[i]);
            for k in 0..4 {
                jac[(i, k)] = self.sqrt_w[i] * fj.jacobian[k][i] * chain[k];
            }
        }
        Ok(())
    }

    fn project(&self, z: &mut [f64]) {
        for k in 0..3 {
            let (lo, hi) = self.rate_z[k];
            z[k] = z[k].clamp(lo, hi);
        }
    }
}

/// Linearized least-squares fit of one TAC.
pub fn lls_fit(tac: &[f64], ca: &SampledCurve, schedule: &FrameSchedule, cfg: &FitConfig) -> Result<FitResult> {
    VoxelFitter::new(ca, schedule, cfg)?.lls(tac)
}

/// Bounded nonlinear fit of one TAC from `init`.
pub fn nls_fit(
    tac: &[f64],
    ca: &SampledCurve,
    schedule: &FrameSchedule,
    init: &KineticParams,
    cfg: &FitConfig,
) -> Result<FitResult> {
    VoxelFitter::new(ca, schedule, cfg)?.nls(tac, init)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub ok: usize,
    pub clamped: usize,
    pub degenerate: usize,
    pub no_signal: usize,
    /// Voxels outside the mask.
    pub skipped: usize,
}

impl StatusCounts {
    fn record(&mut self, status: FitStatus) {
        match status {
            FitStatus::Ok => self.ok += 1,
            FitStatus::Clamped => self.clamped += 1,
            FitStatus::Degenerate => self.degenerate += 1,
            FitStatus::NoSignal => self.no_signal += 1,
        }
    }

    pub fn fitted(&self) -> usize {
        self.ok + self.clamped + self.degenerate + self.no_signal
    }
}

#[derive(Debug, Clone)]
pub struct VolumeFit {
    pub maps: ParametricMaps,
    pub ki: Vec<f64>,
    pub counts: StatusCounts,
    /// Per-voxel results; `None` outside the mask.
    pub results: Vec<Option<FitResult>>,
}

/// Fit every masked voxel independently. Output does not depend on the number
/// of worker threads.
pub fn fit_volume(
    img: &DynamicImage,
    ca: &SampledCurve,
    method: FitMethod,
    mask: Option<&[bool]>,
    cfg: &FitConfig,
) -> Result<VolumeFit> {
    let fitter = VoxelFitter::new(ca, img.schedule(), cfg)?;
    fit_volume_with(img, &fitter, method, mask)
}

pub fn fit_volume_with(
    img: &DynamicImage,
    fitter: &VoxelFitter,
    method: FitMethod,
    mask: Option<&[bool]>,
) -> Result<VolumeFit> {
    let n = img.n_voxels();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::invalid(
                "mask",
                format!("{} entries for {} voxels", m.len(), n),
            ));
        }
    }
    let selected = |i: usize| mask.map_or(true, |m| m[i]);
    let results: Vec<Option<FitResult>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !selected(i) {
                return None;
            }
            let tac = img.tac(i);
            Some(
                fitter
                    .fit(&tac, method)
                    .unwrap_or_else(|_| FitResult::empty(FitStatus::Degenerate, None)),
            )
        })
        .collect();

    let mut maps = ParametricMaps::zeros(img.dims());
    let mut ki = vec![0.0; n];
    let mut counts = StatusCounts::default();
    for (i, r) in results.iter().enumerate() {
        match r {
            None => counts.skipped += 1,
            Some(r) => {
                counts.record(r.status);
                let valid = matches!(r.status, FitStatus::Ok | FitStatus::Clamped);
                maps.set(i, r.params, valid);
                ki[i] = r.ki;
            }
        }
    }
    Ok(VolumeFit {
        maps,
        ki,
        counts,
        results,
    })
}
