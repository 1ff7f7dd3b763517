//! Simultaneous estimation of the input function and the parameter maps from
//! the dynamic image alone.
//!
//! The pooled weighted SSE `Σ_v ‖F(p_v, C_A) − tac_v‖²_w` over a seeded voxel
//! subsample is lowered by alternating two half-steps, each of which only
//! accepts descent:
//!
//! * (a) with `C_A` fixed, every voxel keeps the best of its previous
//!   parameters, an NLS refinement of them and a fresh LLS+NLS fit;
//! * (b) with the voxel parameters fixed, the seven Feng parameters are
//!   updated by Levenberg–Marquardt.
//!
//! Scaling `C_A` by `c` is compensated exactly by `Vb → Vb/c`,
//! `K1 → (1−Vb)·K1 / ((1−Vb/c)·c)`, so the image alone cannot fix the
//! amplitude. After the alternation the scale is pinned by an anchor, and the
//! final maps come from a full-volume fit against the anchored curve.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aif::{FengAif, SampledCurve, FENG_PARAMS};
use crate::error::{Error, Result};
use crate::fitting::{fit_volume_with, FitConfig, FitMethod, VolumeFit, VoxelFitter};
use crate::kinetics::{DynamicImage, ForwardModel, GridInput, KineticParams};
use crate::lm::{self, LeastSquares, LmOptions};
use crate::timegrid::{FineGrid, FrameSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AifModel {
    #[default]
    Feng,
    /// Free samples with a smoothness penalty. Reserved; rejected by
    /// [`SimeConfig::validate`].
    SampledWithSmoothness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    /// Scale so the frame-level AIF peak equals the peak of the hottest
    /// voxel's TAC.
    PeakNormalization,
    /// Scale so the mean fitted Vb over a blood-pool ROI equals
    /// `blood_fraction`.
    BloodRoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Subsample {
    Count(usize),
    /// Fraction of eligible voxels in `(0, 1]`.
    Fraction(f64),
}

impl Subsample {
    fn resolve(self, available: usize) -> usize {
        match self {
            Subsample::Count(n) => n,
            Subsample::Fraction(f) => ((f * available as f64).ceil() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimeConfig {
    pub aif_model: AifModel,
    pub n_outer: usize,
    pub voxel_subsample: Subsample,
    /// `None` picks blood-roi when an ROI is given, else peak-normalization.
    pub anchor: Option<AnchorKind>,
    /// Expected mean Vb inside the blood ROI.
    pub blood_fraction: f64,
    pub init_aif: FengAif,
    pub fit_cfg: FitConfig,
    pub seed: u64,
    /// When false the input function stays at `init_aif` and only the voxel
    /// fits run.
    pub update_aif: bool,
}

impl Default for SimeConfig {
    fn default() -> Self {
        Self {
            aif_model: AifModel::Feng,
            n_outer: 10,
            voxel_subsample: Subsample::Count(500),
            anchor: None,
            blood_fraction: 1.0,
            init_aif: FengAif::default(),
            fit_cfg: FitConfig::default(),
            seed: 0,
            update_aif: true,
        }
    }
}

impl SimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aif_model != AifModel::Feng {
            return Err(Error::invalid("SIME config", "only the feng AIF model is supported"));
        }
        if self.n_outer < 1 {
            return Err(Error::invalid("SIME config", "n_outer must be >= 1"));
        }
        match self.voxel_subsample {
            Subsample::Count(0) => return Err(Error::invalid("SIME config", "voxel_subsample must be > 0")),
            Subsample::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::invalid("SIME config", "voxel_subsample fraction must lie in (0, 1]"))
            }
            _ => {}
        }
        if !(self.blood_fraction > 0.0 && self.blood_fraction <= 1.0) {
            return Err(Error::invalid("SIME config", "blood_fraction must lie in (0, 1]"));
        }
        self.init_aif.validate()?;
        self.fit_cfg.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SimeResult {
    pub aif: FengAif,
    /// Estimated input function on the fine grid.
    pub aif_curve: SampledCurve,
    /// Estimated input function at the frame mid-times.
    pub aif_mid: SampledCurve,
    pub fit: VolumeFit,
    /// Pooled objective after each outer iteration.
    pub trace: Vec<f64>,
    /// Voxels used by the alternation (subsample plus ROI), ascending.
    pub active_voxels: Vec<usize>,
    pub anchor: Option<AnchorKind>,
    /// Amplitude factor applied by the anchor.
    pub anchor_scale: f64,
}

/// Everything that depends only on the current input function.
struct Stage {
    aif: FengAif,
    fitter: VoxelFitter,
}

struct Context<'a> {
    schedule: &'a FrameSchedule,
    grid: FineGrid,
    times: Vec<f64>,
    cfg: &'a SimeConfig,
    tacs: Vec<Vec<f64>>,
    sqrt_w: Vec<f64>,
}

impl Context<'_> {
    fn curve(&self, aif: &FengAif) -> Result<SampledCurve> {
        aif.sample(&self.times)
    }

    fn stage(&self, aif: FengAif) -> Result<Stage> {
        let fitter = VoxelFitter::new(&self.curve(&aif)?, self.schedule, &self.cfg.fit_cfg)?;
        Ok(Stage { aif, fitter })
    }

    fn voxel_sse(&self, model: &ForwardModel, v: usize, p: &KineticParams) -> Result<f64> {
        let m = model.frames(p)?;
        let mut s = 0.0;
        for ((mi, yi), wi) in m.iter().zip(&self.tacs[v]).zip(&self.sqrt_w) {
            let r = wi * (mi - yi);
            s += r * r;
        }
        Ok(s)
    }

    /// Pooled objective, reduced in voxel order.
    fn objective(&self, model: &ForwardModel, params: &[KineticParams]) -> Result<f64> {
        let per: Vec<f64> = (0..params.len())
            .into_par_iter()
            .map(|v| self.voxel_sse(model, v, &params[v]))
            .collect::<Result<_>>()?;
        Ok(per.iter().sum())
    }
}

/// Seeded choice of `n` out of `candidates` (kept in ascending order).
fn subsample(candidates: &[usize], n: usize, seed: u64) -> Vec<usize> {
    if n >= candidates.len() {
        return candidates.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Half-step (a): per-voxel best of previous, refined previous and fresh fit.
fn update_voxels(ctx: &Context, stage: &Stage, prev: Option<&[KineticParams]>) -> Result<Vec<KineticParams>> {
    let fitter = &stage.fitter;
    let bounds = ctx.cfg.fit_cfg.bounds;
    (0..ctx.tacs.len())
        .into_par_iter()
        .map(|v| {
            let tac = &ctx.tacs[v];
            let mut candidates = Vec::with_capacity(3);
            if let Some(prev) = prev {
                let p = bounds.clamp(&prev[v]).0;
                candidates.push(prev[v]);
                if let Ok(r) = fitter.nls(tac, &p) {
                    candidates.push(r.params);
                }
            }
            if let Ok(r) = fitter.fit(tac, FitMethod::LlsNls) {
                if r.params.validate().is_ok() {
                    candidates.push(r.params);
                }
            }
            let mut best: Option<(f64, KineticParams)> = None;
            for p in candidates {
                let Ok(sse) = ctx.voxel_sse(fitter.model(), v, &p) else { continue };
                if best.map_or(true, |(b, _)| sse < b) {
                    best = Some((sse, p));
                }
            }
            best.map(|(_, p)| p)
                .ok_or_else(|| Error::Numeric(format!("no valid fit for subsample voxel {v}")))
        })
        .collect()
}

/// Feng parameters in an unconstrained form:
/// `z = (τ, ln A1, ln A2, ln A3, ln(λ2−λ1), ln(λ3−λ2), ln(−λ3))`.
const AMPLITUDE_FLOOR: f64 = 1e-9;

fn feng_to_z(a: &FengAif) -> [f64; FENG_PARAMS] {
    [
        a.tau,
        a.a1.max(AMPLITUDE_FLOOR).ln(),
        a.a2.max(AMPLITUDE_FLOOR).ln(),
        a.a3.max(AMPLITUDE_FLOOR).ln(),
        (a.l2 - a.l1).ln(),
        (a.l3 - a.l2).ln(),
        (-a.l3).ln(),
    ]
}

fn z_to_feng(z: &[f64]) -> FengAif {
    let l3 = -z[6].exp();
    let l2 = l3 - z[5].exp();
    let l1 = l2 - z[4].exp();
    FengAif {
        tau: z[0],
        a1: z[1].exp(),
        a2: z[2].exp(),
        a3: z[3].exp(),
        l1,
        l2,
        l3,
    }
}

/// Half-step (b) as a least-squares problem in `z`.
struct AifProblem<'a> {
    ctx: &'a Context<'a>,
    params: &'a [KineticParams],
    tau_max: f64,
}

impl AifProblem<'_> {
    fn model(&self, aif: &FengAif) -> Result<ForwardModel> {
        let input = GridInput::from_curve(&self.ctx.curve(aif)?, self.ctx.grid);
        ForwardModel::new(input, self.ctx.schedule, self.ctx.cfg.fit_cfg.mode)
    }

    fn fill_residuals(&self, model: &ForwardModel, out: &mut [f64]) -> Result<()> {
        let t = self.ctx.schedule.len();
        let rows: Vec<Vec<f64>> = (0..self.params.len())
            .into_par_iter()
            .map(|v| model.frames(&self.params[v]))
            .collect::<Result<_>>()?;
        for (v, m) in rows.iter().enumerate() {
            for i in 0..t {
                out[v * t + i] = self.ctx.sqrt_w[i] * (m[i] - self.ctx.tacs[v][i]);
            }
        }
        Ok(())
    }
}

impl LeastSquares for AifProblem<'_> {
    fn n_params(&self) -> usize {
        FENG_PARAMS
    }

    fn n_residuals(&self) -> usize {
        self.params.len() * self.ctx.schedule.len()
    }

    fn residuals(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let model = self.model(&z_to_feng(z))?;
        self.fill_residuals(&model, out)
    }

    fn residuals_and_jacobian(&self, z: &[f64], out: &mut [f64], jac: &mut DMatrix<f64>) -> Result<()> {
        let aif = z_to_feng(z);
        self.fill_residuals(&self.model(&aif)?, out)?;

        // dC_A/dθ on the grid, chained to z.
        let n = self.ctx.grid.n;
        let mut dz = vec![vec![0.0; n]; FENG_PARAMS];
        let (e4, e5, e6) = (z[4].exp(), z[5].exp(), z[6].exp());
        for (j, &t) in self.ctx.times.iter().enumerate() {
            let (_, g) = aif.eval_with_gradient(t);
            dz[0][j] = g[0];
            dz[1][j] = g[1] * aif.a1;
            dz[2][j] = g[2] * aif.a2;
            dz[3][j] = g[3] * aif.a3;
            dz[4][j] = -g[4] * e4;
            dz[5][j] = -(g[4] + g[5]) * e5;
            dz[6][j] = -(g[4] + g[5] + g[6]) * e6;
        }
        // The model is linear in C_A, so each column is the forward model
        // driven by a derivative curve.
        let t = self.ctx.schedule.len();
        let models: Vec<ForwardModel> = dz
            .into_iter()
            .map(|g| {
                ForwardModel::new(
                    GridInput::from_grid_values(self.ctx.grid, g),
                    self.ctx.schedule,
                    self.ctx.cfg.fit_cfg.mode,
                )
            })
            .collect::<Result<_>>()?;
        let cols: Vec<Vec<Vec<f64>>> = (0..self.params.len())
            .into_par_iter()
            .map(|v| models.iter().map(|m| m.frames(&self.params[v])).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        for (v, per) in cols.iter().enumerate() {
            for (k, col) in per.iter().enumerate() {
                for i in 0..t {
                    jac[(v * t + i, k)] = self.ctx.sqrt_w[i] * col[i];
                }
            }
        }
        Ok(())
    }

    fn project(&self, z: &mut [f64]) {
        z[0] = z[0].clamp(0.0, self.tau_max);
        for v in &mut z[1..4] {
            *v = v.max(AMPLITUDE_FLOOR.ln());
        }
        for v in &mut z[4..7] {
            *v = v.clamp(-30.0, 30.0);
        }
    }
}

/// Transform voxel parameters for `C_A → c·C_A` so the model output is kept.
pub fn rescale_params(p: &KineticParams, c: f64) -> KineticParams {
    let vb = p.vb / c;
    let k1 = if p.k1 == 0.0 { 0.0 } else { (1.0 - p.vb) * p.k1 / ((1.0 - vb) * c) };
    KineticParams::new(k1, p.k2, p.k3, vb)
}

/// Joint estimation of the input function and the parameter maps.
///
/// `mask` restricts both the subsample and the final fit. `blood_roi`
/// selects the blood-pool voxels used by the blood-roi anchor.
pub fn sime_estimate(
    img: &DynamicImage,
    mask: Option<&[bool]>,
    blood_roi: Option<&[bool]>,
    cfg: &SimeConfig,
) -> Result<SimeResult> {
    cfg.validate()?;
    let n = img.n_voxels();
    for (what, m) in [("mask", mask), ("blood ROI", blood_roi)] {
        if let Some(m) = m {
            if m.len() != n {
                return Err(Error::invalid(what, format!("{} entries for {n} voxels", m.len())));
            }
        }
    }
    let anchor = if cfg.update_aif {
        Some(match (cfg.anchor, blood_roi) {
            (Some(a), _) => a,
            (None, Some(_)) => AnchorKind::BloodRoi,
            (None, None) => AnchorKind::PeakNormalization,
        })
    } else {
        None
    };

    let schedule = img.schedule();
    let grid = schedule.fine_grid(cfg.fit_cfg.dt)?;
    let has_signal = |v: usize| img.tac(v).iter().any(|&x| x != 0.0);
    let selected = |v: usize| mask.map_or(true, |m| m[v]);
    let candidates: Vec<usize> = (0..n).filter(|&v| selected(v) && has_signal(v)).collect();
    let wanted = cfg.voxel_subsample.resolve(candidates.len());
    if candidates.len() < wanted {
        return Err(Error::invalid(
            "SIME input",
            format!("{} voxels with signal in the mask, subsample needs {wanted}", candidates.len()),
        ));
    }
    let mut active = subsample(&candidates, wanted, cfg.seed);
    let roi: Vec<usize> = match (anchor, blood_roi) {
        (Some(AnchorKind::BloodRoi), Some(r)) => (0..n).filter(|&v| r[v] && has_signal(v)).collect(),
        (Some(AnchorKind::BloodRoi), None) => {
            return Err(Error::invalid("SIME input", "blood-roi anchor needs a blood ROI mask"))
        }
        _ => Vec::new(),
    };
    if anchor == Some(AnchorKind::BloodRoi) && roi.is_empty() {
        return Err(Error::invalid("SIME input", "blood ROI contains no voxels with signal"));
    }
    active.extend(&roi);
    active.sort_unstable();
    active.dedup();

    let ctx = Context {
        schedule,
        grid,
        times: grid.times(),
        cfg,
        tacs: active.iter().map(|&v| img.tac(v)).collect(),
        sqrt_w: cfg.fit_cfg.weights.weights(schedule).iter().map(|w| w.sqrt()).collect(),
    };
    let signal: f64 = ctx
        .tacs
        .iter()
        .flat_map(|tac| tac.iter().zip(&ctx.sqrt_w).map(|(y, w)| (w * y).powi(2)))
        .sum();
    let floor = 1e-16 * signal;

    let mut stage = ctx.stage(cfg.init_aif)?;
    let mut params: Option<Vec<KineticParams>> = None;
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.n_outer);
    for _ in 0..cfg.n_outer {
        let p = update_voxels(&ctx, &stage, params.as_deref())?;
        let mut obj = ctx.objective(stage.fitter.model(), &p)?;

        if cfg.update_aif && obj > floor {
            let problem = AifProblem {
                ctx: &ctx,
                params: &p,
                tau_max: schedule.end_time(),
            };
            let opts = LmOptions {
                max_iter: cfg.fit_cfg.max_iter,
                step_tol: cfg.fit_cfg.tol,
                cost_floor: floor,
            };
            if let Ok(rep) = lm::minimize(&problem, &feng_to_z(&stage.aif), opts) {
                let cand = z_to_feng(&rep.z);
                if cand.validate().is_ok() {
                    let next = ctx.stage(cand)?;
                    let cand_obj = ctx.objective(next.fitter.model(), &p)?;
                    if cand_obj < obj {
                        stage = next;
                        obj = cand_obj;
                    }
                }
            }
        }

        if let Some(&last) = trace.last() {
            if obj > last {
                return Err(Error::Numeric(format!("SIME objective increased from {last} to {obj}")));
            }
        }
        let stalled = trace.last().is_some_and(|&last| last - obj <= 1e-10 * last);
        trace.push(obj);
        params = Some(p);
        if obj <= floor || stalled {
            break;
        }
    }
    let params = params.expect("at least one outer iteration");

    let mut anchor_scale = 1.0;
    if let Some(kind) = anchor {
        let c = match kind {
            AnchorKind::BloodRoi => {
                let vb: f64 = active
                    .iter()
                    .zip(&params)
                    .filter(|(v, _)| roi.binary_search(v).is_ok())
                    .map(|(_, p)| p.vb)
                    .sum::<f64>()
                    / roi.len() as f64;
                vb / cfg.blood_fraction
            }
            AnchorKind::PeakNormalization => {
                let hottest = ctx
                    .tacs
                    .iter()
                    .map(|tac| tac.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .fold(f64::NEG_INFINITY, f64::max);
                let ca_peak = stage
                    .fitter
                    .model()
                    .input_frames()
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                hottest / ca_peak
            }
        };
        if c.is_finite() && c > 0.0 {
            anchor_scale = c;
            stage = ctx.stage(stage.aif.scale_amplitudes(c))?;
        } else {
            return Err(Error::Numeric(format!("anchor produced scale {c}")));
        }
    }

    let aif_curve = ctx.curve(&stage.aif)?;
    let fit = fit_volume_with(img, &stage.fitter, FitMethod::LlsNls, mask)?;
    Ok(SimeResult {
        aif: stage.aif,
        aif_mid: stage.aif.sample(&schedule.mid_times())?,
        aif_curve,
        fit,
        trace,
        active_voxels: active,
        anchor,
        anchor_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::fit_volume;
    use crate::metrics::aif_metrics;
    use crate::phantom::{build_phantom, dense_aif, simulate_scan, Phantom, PhantomSpec};

    fn scan(dims: [usize; 3]) -> (Phantom, DynamicImage) {
        let s = FrameSchedule::standard();
        let ph = build_phantom(&PhantomSpec::mouse(dims), &s).unwrap();
        let img = simulate_scan(&ph, &s, 0.0, 0).unwrap();
        (ph, img)
    }

    #[test]
    fn feng_z_round_trip() {
        let a = FengAif::default();
        let b = z_to_feng(&feng_to_z(&a));
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn rescaling_keeps_model_output() {
        let s = FrameSchedule::standard();
        let grid = s.fine_grid(0.5).unwrap();
        let aif = FengAif::default();
        let p = KineticParams::new(0.5, 0.3, 0.1, 0.05);
        let base = ForwardModel::from_curve(&aif.sample(&grid.times()).unwrap(), &s, Default::default(), 0.5).unwrap();
        let c = 0.8;
        let scaled = ForwardModel::from_curve(&aif.scale_amplitudes(c).sample(&grid.times()).unwrap(), &s, Default::default(), 0.5).unwrap();
        let a = base.frames(&p).unwrap();
        let b = scaled.frames(&rescale_params(&p, c)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimeConfig::default().validate().is_ok());
        let bad = SimeConfig { n_outer: 0, ..SimeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimeConfig { voxel_subsample: Subsample::Count(0), ..SimeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimeConfig { aif_model: AifModel::SampledWithSmoothness, ..SimeConfig::default() };
        assert!(bad.validate().is_err());
        let cfg: SimeConfig = serde_json::from_str(r#"{"voxel_subsample": 0.25, "anchor": "blood-roi"}"#).unwrap();
        assert_eq!(cfg.voxel_subsample, Subsample::Fraction(0.25));
        assert_eq!(cfg.anchor, Some(AnchorKind::BloodRoi));
        let cfg: SimeConfig = serde_json::from_str(r#"{"voxel_subsample": 40}"#).unwrap();
        assert_eq!(cfg.voxel_subsample, Subsample::Count(40));
    }

    #[test]
    fn single_voxel_mask_is_rejected() {
        let (_, img) = scan([8, 8, 8]);
        let mut mask = vec![false; img.n_voxels()];
        let v = (0..img.n_voxels()).find(|&v| img.tac(v).iter().any(|&x| x != 0.0)).unwrap();
        mask[v] = true;
        let cfg = SimeConfig { voxel_subsample: Subsample::Count(2), ..SimeConfig::default() };
        assert!(sime_estimate(&img, Some(&mask), None, &cfg).unwrap_err().is_validation());
    }

    #[test]
    fn seeded_subsample_is_reproducible() {
        let c: Vec<usize> = (0..1000).map(|i| 3 * i).collect();
        assert_eq!(subsample(&c, 50, 9), subsample(&c, 50, 9));
        assert_ne!(subsample(&c, 50, 9), subsample(&c, 50, 10));
        assert!(subsample(&c, 50, 9).windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn frozen_truth_matches_fit_volume() {
        let (ph, img) = scan([10, 10, 10]);
        let s = FrameSchedule::standard();
        let mask = ph.foreground();
        let cfg = SimeConfig { update_aif: false, n_outer: 1, voxel_subsample: Subsample::Count(20), ..SimeConfig::default() };
        let res = sime_estimate(&img, Some(&mask), None, &cfg).unwrap();
        let ca = dense_aif(&ph.spec, &s).unwrap();
        let direct = fit_volume(&img, &ca, FitMethod::LlsNls, Some(&mask), &cfg.fit_cfg).unwrap();
        assert_eq!(res.fit.maps, direct.maps);
        assert_eq!(res.aif, ph.spec.aif);
    }

    #[test]
    fn truth_init_is_a_fixed_point() {
        let (ph, img) = scan([10, 10, 10]);
        let mask = ph.foreground();
        let roi = ph.region_mask("heart");
        let cfg = SimeConfig { voxel_subsample: Subsample::Count(40), blood_fraction: 0.9, ..SimeConfig::default() };
        let res = sime_estimate(&img, Some(&mask), Some(&roi), &cfg).unwrap();
        let m = aif_metrics(&res.aif_mid, &ph.truth_aif).unwrap();
        assert!(m.nrmse < 1e-3, "{m:?}");
        assert!(res.trace.len() <= 2, "{:?}", res.trace);
    }

    #[test]
    fn scaled_init_recovered_with_blood_roi() {
        let (ph, img) = scan([12, 12, 12]);
        let mask = ph.foreground();
        let roi = ph.region_mask("heart");
        let cfg = SimeConfig {
            init_aif: FengAif::default().scale_amplitudes(1.2),
            voxel_subsample: Subsample::Count(60),
            blood_fraction: 0.9,
            ..SimeConfig::default()
        };
        let res = sime_estimate(&img, Some(&mask), Some(&roi), &cfg).unwrap();
        let m = aif_metrics(&res.aif_mid, &ph.truth_aif).unwrap();
        assert!(m.nrmse < 0.05, "{m:?}");
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        let again = sime_estimate(&img, Some(&mask), Some(&roi), &cfg).unwrap();
        assert_eq!(again.aif, res.aif);
        assert_eq!(again.fit.maps, res.fit.maps);
    }
}
