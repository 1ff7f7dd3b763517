//! Irreversible two-tissue compartment forward model.
//!
//! ```text
//! C_PET(t) = Vb·C_A(t) + (1 − Vb)·C_T(t)
//! C_T(t)   = h ⊗ C_A,   h(t) = K1/(k2+k3)·[k3 + k2·e^{−(k2+k3)t}]
//! ```
//!
//! Rate constants are per minute; every curve lives on a seconds-based
//! [`FineGrid`] and the conversion happens here. The convolution is the
//! trapezoid rule on the fine grid. Because the kernel is a constant plus one
//! exponential, the trapezoid sum is evaluated with a first-order recursion
//! instead of the O(n²) direct sum; both produce the same quadrature.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aif::SampledCurve;
use crate::error::{Error, Result};
use crate::timegrid::{FineGrid, FrameMode, FrameOperator, FrameSchedule, DEFAULT_DT_S};

/// Canonical channel order of parameter maps.
pub const CHANNEL_NAMES: [&str; 4] = ["K1", "k2", "k3", "Vb"];

/// Rate constants of one voxel. `k1` in mL/min/mL, `k2`/`k3` in 1/min.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KineticParams {
    #[serde(rename = "K1")]
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    #[serde(rename = "Vb")]
    pub vb: f64,
}

impl KineticParams {
    pub const fn new(k1: f64, k2: f64, k3: f64, vb: f64) -> Self {
        Self { k1, k2, k3, vb }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { k1, k2, k3, vb } = *self;
        if ![k1, k2, k3, vb].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("kinetic parameters", "non-finite value"));
        }
        if k1 < 0.0 || k2 < 0.0 || k3 < 0.0 {
            return Err(Error::invalid(
                "kinetic parameters",
                format!("rate constants must be >= 0, got K1={k1} k2={k2} k3={k3}"),
            ));
        }
        if !(0.0..=1.0).contains(&vb) {
            return Err(Error::invalid(
                "kinetic parameters",
                format!("Vb must lie in [0, 1], got {vb}"),
            ));
        }
        if k1 > 0.0 && k2 + k3 <= 0.0 {
            return Err(Error::DegenerateKernel { k1 });
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.k1, self.k2, self.k3, self.vb]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Net influx rate `K1·k3/(k2+k3)` in 1/min.
    pub fn ki(&self) -> Result<f64> {
        ki(self)
    }
}

/// Net influx rate `K1·k3/(k2+k3)`.
pub fn ki(p: &KineticParams) -> Result<f64> {
    let alpha = p.k2 + p.k3;
    if alpha > 0.0 {
        Ok(p.k1 * p.k3 / alpha)
    } else if p.k1 == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::DegenerateKernel { k1: p.k1 })
    }
}

/// Impulse response `h(t)` (1/min) at `t` seconds.
pub fn impulse_response(p: &KineticParams, t: f64) -> Result<f64> {
    p.validate()?;
    if p.k1 == 0.0 {
        return Ok(0.0);
    }
    let alpha = p.k2 + p.k3;
    let t_min = t / 60.0;
    Ok(p.k1 / alpha * (p.k3 + p.k2 * (-alpha * t_min).exp()))
}

/// An input curve resampled on a fine grid, with its running trapezoid integral
/// in kBq·min/mL.
#[derive(Debug, Clone)]
pub struct GridInput {
    grid: FineGrid,
    values: Vec<f64>,
    integral: Vec<f64>,
    extrapolated: usize,
}

impl GridInput {
    /// Resample `curve` at the grid nodes (hold-last past its final sample).
    pub fn from_curve(curve: &SampledCurve, grid: FineGrid) -> Self {
        let r = curve.resample(&grid.times());
        let mut input = Self::from_grid_values(grid, r.values);
        input.extrapolated = r.extrapolated;
        input
    }

    /// Wrap values already sampled at the grid nodes. Values may be signed
    /// (derivative curves are fed through here).
    pub fn from_grid_values(grid: FineGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n, "grid input length mismatch");
        let dt_min = grid.dt / 60.0;
        let mut integral = Vec::with_capacity(grid.n);
        let mut acc = 0.0;
        integral.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * dt_min * (w[0] + w[1]);
            integral.push(acc);
        }
        Self {
            grid,
            values,
            integral,
            extrapolated: 0,
        }
    }

    pub fn grid(&self) -> FineGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> &[f64] {
        &self.integral
    }

    /// Grid nodes that lay past the source curve's last sample.
    pub fn extrapolated(&self) -> usize {
        self.extrapolated
    }
}

/// Trapezoid convolution of `e^{−α t}` (t in minutes) with the input, and its
/// derivative with respect to α when requested.
fn exp_convolution(input: &GridInput, alpha: f64, out: &mut [f64], mut d_alpha: Option<&mut [f64]>) {
    let dt = input.grid.dt / 60.0;
    let ca = &input.values;
    let r = (-alpha * dt).exp();
    let ca0 = ca[0];
    let mut s = 0.0; // Σ_i e^{−α(t_j − t_i)} ca_i
    let mut lag = 0.0; // Σ_i (t_j − t_i) e^{−α(t_j − t_i)} ca_i
    let mut q = 1.0; // e^{−α t_j}
    for j in 0..ca.len() {
        if j > 0 {
            lag = r * (lag + dt * s);
            s *= r;
            q *= r;
        }
        s += ca[j];
        out[j] = dt * (s - 0.5 * q * ca0 - 0.5 * ca[j]);
        if let Some(d) = d_alpha.as_deref_mut() {
            let tj = j as f64 * dt;
            d[j] = -dt * (lag - 0.5 * tj * q * ca0);
        }
    }
}

/// Tissue curve `C_T = h ⊗ C_A` on the grid nodes.
pub fn tissue_curve(p: &KineticParams, input: &GridInput) -> Result<Vec<f64>> {
    p.validate()?;
    let n = input.grid.n;
    if p.k1 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let alpha = p.k2 + p.k3;
    let mut e = vec![0.0; n];
    exp_convolution(input, alpha, &mut e, None);
    let scale = p.k1 / alpha;
    Ok(input
        .integral
        .iter()
        .zip(&e)
        .map(|(i, e)| scale * (p.k3 * i + p.k2 * e))
        .collect())
}

/// `C_T` for a sampled input, returned as a curve on the grid times.
pub fn tissue_response(p: &KineticParams, ca: &SampledCurve, grid: FineGrid) -> Result<SampledCurve> {
    let input = GridInput::from_curve(ca, grid);
    let ct = tissue_curve(p, &input)?;
    SampledCurve::new(grid.times(), ct.into_iter().map(|v| v.max(0.0)).collect())
}

/// Frame-level forward operator for one input curve and schedule.
///
/// Everything that does not depend on the voxel parameters (the discretized
/// input and its integral) is precomputed, so a voxel evaluation costs one
/// recursion over the grid plus one sparse frame reduction.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    input: GridInput,
    frames: FrameOperator,
    ca_frames: Vec<f64>,
    integral_frames: Vec<f64>,
}

/// Frame values and their partial derivatives with respect to `(K1, k2, k3, Vb)`.
#[derive(Debug, Clone)]
pub struct FramesWithJacobian {
    pub values: Vec<f64>,
    pub jacobian: [Vec<f64>; 4],
}

impl ForwardModel {
    pub fn new(input: GridInput, schedule: &FrameSchedule, mode: FrameMode) -> Result<Self> {
        let frames = FrameOperator::new(schedule, input.grid, mode)?;
        let ca_frames = frames.apply(&input.values);
        let integral_frames = frames.apply(&input.integral);
        Ok(Self {
            input,
            frames,
            ca_frames,
            integral_frames,
        })
    }

    pub fn from_curve(ca: &SampledCurve, schedule: &FrameSchedule, mode: FrameMode, dt: f64) -> Result<Self> {
        let grid = schedule.fine_grid(dt)?;
        Self::new(GridInput::from_curve(ca, grid), schedule, mode)
    }

    pub fn input(&self) -> &GridInput {
        &self.input
    }

    pub fn frame_operator(&self) -> &FrameOperator {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.ca_frames.len()
    }

    /// The input curve reduced to frames.
    pub fn input_frames(&self) -> &[f64] {
        &self.ca_frames
    }

    /// The running input integral reduced to frames (kBq·min/mL).
    pub fn input_integral_frames(&self) -> &[f64] {
        &self.integral_frames
    }

    /// `C_PET` reduced to frames.
    pub fn frames(&self, p: &KineticParams) -> Result<Vec<f64>> {
        p.validate()?;
        let t = self.n_frames();
        if p.k1 == 0.0 {
            return Ok(self.ca_frames.iter().map(|c| p.vb * c).collect());
        }
        let alpha = p.k2 + p.k3;
        let mut e = vec![0.0; self.input.grid.n];
        exp_convolution(&self.input, alpha, &mut e, None);
        let mut e_frames = vec![0.0; t];
        self.frames.apply_into(&e, &mut e_frames);
        let scale = p.k1 / alpha;
        Ok((0..t)
            .map(|i| {
                let ct = scale * (p.k3 * self.integral_frames[i] + p.k2 * e_frames[i]);
                p.vb * self.ca_frames[i] + (1.0 - p.vb) * ct
            })
            .collect())
    }

    /// `C_PET` frames and the exact derivatives of this discrete model.
    pub fn frames_with_jacobian(&self, p: &KineticParams) -> Result<FramesWithJacobian> {
        p.validate()?;
        let alpha = p.k2 + p.k3;
        if alpha <= 0.0 {
            return Err(Error::DegenerateKernel { k1: p.k1 });
        }
        let t = self.n_frames();
        let n = self.input.grid.n;
        let mut e = vec![0.0; n];
        let mut de = vec![0.0; n];
        exp_convolution(&self.input, alpha, &mut e, Some(&mut de));
        let e_f = self.frames.apply(&e);
        let de_f = self.frames.apply(&de);
        let i_f = &self.integral_frames;

        let mut values = vec![0.0; t];
        let mut jac = [vec![0.0; t], vec![0.0; t], vec![0.0; t], vec![0.0; t]];
        let inv_a = 1.0 / alpha;
        for f in 0..t {
            let g = p.k3 * i_f[f] + p.k2 * e_f[f];
            let ct = p.k1 * g * inv_a;
            let common = -g * inv_a * inv_a + p.k2 * de_f[f] * inv_a;
            let d_k1 = g * inv_a;
            let d_k2 = p.k1 * (e_f[f] * inv_a + common);
            let d_k3 = p.k1 * (i_f[f] * inv_a + common);
            let mix = 1.0 - p.vb;
            values[f] = p.vb * self.ca_frames[f] + mix * ct;
            jac[0][f] = mix * d_k1;
            jac[1][f] = mix * d_k2;
            jac[2][f] = mix * d_k3;
            jac[3][f] = self.ca_frames[f] - ct;
        }
        Ok(FramesWithJacobian { values, jacobian: jac })
    }
}

/// Single-voxel forward model: frame values of `C_PET`.
pub fn forward_model(
    p: &KineticParams,
    ca: &SampledCurve,
    schedule: &FrameSchedule,
    mode: FrameMode,
    dt: f64,
) -> Result<Vec<f64>> {
    ForwardModel::from_curve(ca, schedule, mode, dt)?.frames(p)
}

/// Spatial dimensions `(z, y, x)`.
pub type Dims3 = [usize; 3];

/// Four-channel parameter volume in canonical order `(K1, k2, k3, Vb)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    dims: Dims3,
    channels: [Vec<f64>; 4],
    mask: Vec<bool>,
}

impl ParametricMaps {
    pub fn zeros(dims: Dims3) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            mask: vec![false; n],
        }
    }

    pub fn from_channels(dims: Dims3, channels: [Vec<f64>; 4], mask: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::invalid("maps", "zero-sized dimensions"));
        }
        if channels.iter().any(|c| c.len() != n) || mask.len() != n {
            return Err(Error::invalid(
                "maps",
                format!("channel or mask length differs from {dims:?}"),
            ));
        }
        Ok(Self { dims, channels, mask })
    }

    /// Uniform maps with every voxel masked.
    pub fn uniform(dims: Dims3, p: KineticParams) -> Self {
        let n = dims.iter().product();
        let a = p.to_array();
        Self {
            dims,
            channels: [vec![a[0]; n], vec![a[1]; n], vec![a[2]; n], vec![a[3]; n]],
            mask: vec![true; n],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; 4] {
        &self.channels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_voxels() {
            return Err(Error::invalid("mask", "length differs from map size"));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn params(&self, idx: usize) -> KineticParams {
        KineticParams::new(
            self.channels[0][idx],
            self.channels[1][idx],
            self.channels[2][idx],
            self.channels[3][idx],
        )
    }

    pub fn set(&mut self, idx: usize, p: KineticParams, masked: bool) {
        for (c, v) in p.to_array().into_iter().enumerate() {
            self.channels[c][idx] = v;
        }
        self.mask[idx] = masked;
    }

    /// Voxel-wise net influx rate; zero outside the mask.
    pub fn ki_volume(&self) -> Result<Vec<f64>> {
        (0..self.n_voxels())
            .map(|i| if self.mask[i] { ki(&self.params(i)) } else { Ok(0.0) })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_voxels() {
            if self.mask[i] {
                self.params(i).validate().map_err(|e| Error::Voxel {
                    index: i,
                    source: Box::new(e),
                })?;
            }
        }
        Ok(())
    }
}

/// 4D activity volume `(t, z, y, x)`, C-order with time slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicImage {
    schedule: FrameSchedule,
    dims: Dims3,
    values: Vec<f64>,
}

impl DynamicImage {
    pub fn new(schedule: FrameSchedule, dims: Dims3, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::invalid("dynamic image", "zero-sized dimensions"));
        }
        if values.len() != n * schedule.len() {
            return Err(Error::invalid(
                "dynamic image",
                format!(
                    "{} values for {} frames × {:?}",
                    values.len(),
                    schedule.len(),
                    dims
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dynamic image", "non-finite value"));
        }
        Ok(Self { schedule, dims, values })
    }

    /// Assemble from per-voxel TACs (voxel-major).
    pub fn from_tacs(schedule: FrameSchedule, dims: Dims3, tacs: &[Vec<f64>]) -> Result<Self> {
        let n: usize = dims.iter().product();
        let t = schedule.len();
        if tacs.len() != n || tacs.iter().any(|c| c.len() != t) {
            return Err(Error::invalid("dynamic image", "TAC count or length mismatch"));
        }
        let mut values = vec![0.0; n * t];
        for (v, tac) in tacs.iter().enumerate() {
            for (f, &x) in tac.iter().enumerate() {
                values[f * n + v] = x;
            }
        }
        Self::new(schedule, dims, values)
    }

    pub fn schedule(&self) -> &FrameSchedule {
        &self.schedule
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tac(&self, voxel: usize) -> Vec<f64> {
        let n = self.n_voxels();
        (0..self.schedule.len()).map(|f| self.values[f * n + voxel]).collect()
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.values[f * n..(f + 1) * n]
    }
}

/// Discretization settings shared by simulation and fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardOptions {
    pub mode: FrameMode,
    pub dt: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            mode: FrameMode::FrameAverage,
            dt: DEFAULT_DT_S,
        }
    }
}

/// Apply the forward model independently to every masked voxel.
pub fn forward_volume(
    maps: &ParametricMaps,
    ca: &SampledCurve,
    schedule: &FrameSchedule,
    opts: ForwardOptions,
) -> Result<DynamicImage> {
    maps.validate()?;
    let model = ForwardModel::from_curve(ca, schedule, opts.mode, opts.dt)?;
    forward_volume_with(maps, &model, schedule)
}

pub(crate) fn forward_volume_with(
    maps: &ParametricMaps,
    model: &ForwardModel,
    schedule: &FrameSchedule,
) -> Result<DynamicImage> {
    let t = schedule.len();
    let tacs: Vec<Vec<f64>> = (0..maps.n_voxels())
        .into_par_iter()
        .map(|i| {
            if maps.mask()[i] {
                model.frames(&maps.params(i)).map_err(|e| Error::Voxel {
                    index: i,
                    source: Box::new(e),
                })
            } else {
                Ok(vec![0.0; t])
            }
        })
        .collect::<Result<_>>()?;
    DynamicImage::from_tacs(schedule.clone(), maps.dims(), &tacs)
}
