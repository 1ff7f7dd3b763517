//! Image-quality scores for parameter maps and error summaries for input
//! functions.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::aif::SampledCurve;
use crate::error::{Error, Result};
use crate::kinetics::{Dims3, ParametricMaps, CHANNEL_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WindowKind {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    /// Odd side length of the square window.
    pub window: usize,
    pub window_kind: WindowKind,
    pub k1: f64,
    pub k2: f64,
    /// `L` in the stabilizers `C1 = (k1·L)²`, `C2 = (k2·L)²`. `None` uses the
    /// maximum of the reference volume, or 1 when that is not positive.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            window_kind: WindowKind::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid("SSIM config", format!("window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("SSIM config", "k1 and k2 must be > 0"));
        }
        if let WindowKind::Gaussian { sigma } = self.window_kind {
            if !(sigma > 0.0) {
                return Err(Error::invalid("SSIM config", "gaussian sigma must be > 0"));
            }
        }
        if let Some(l) = self.dynamic_range {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::invalid("SSIM config", "dynamic_range must be > 0"));
            }
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let w = self.window;
        let half = (w / 2) as f64;
        let mut out = Vec::with_capacity(w * w);
        for y in 0..w {
            for x in 0..w {
                out.push(match self.window_kind {
                    WindowKind::Uniform => 1.0,
                    WindowKind::Gaussian { sigma } => {
                        let (dy, dx) = (y as f64 - half, x as f64 - half);
                        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                    }
                });
            }
        }
        let total: f64 = out.iter().sum();
        out.iter().map(|v| v / total).collect()
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid("volumes", format!("size mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("volumes", "empty"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs are equal.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    same_len(a, b)?;
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::invalid("PSNR", "max_val must be > 0"));
    }
    let mse = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))) / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_val / mse.sqrt()).log10())
}

/// Neumaier summation, so that uniform differences give the textbook dB values.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

fn default_range(reference: &[f64]) -> f64 {
    let m = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Mean SSIM over all valid window positions of every axial (`z`) slice.
pub fn ssim(est: &[f64], reference: &[f64], dims: Dims3, cfg: &SsimConfig) -> Result<f64> {
    same_len(est, reference)?;
    cfg.validate()?;
    let [nz, ny, nx] = dims;
    if nz * ny * nx != est.len() {
        return Err(Error::invalid("SSIM", format!("dims {dims:?} do not match {} values", est.len())));
    }
    let w = cfg.window;
    if ny < w || nx < w {
        return Err(Error::invalid("SSIM", format!("slice {ny}×{nx} smaller than window {w}")));
    }
    let l = cfg.dynamic_range.unwrap_or_else(|| default_range(reference));
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let weights = cfg.weights();

    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        let base = z * ny * nx;
        for y0 in 0..=(ny - w) {
            for x0 in 0..=(nx - w) {
                let idx = |k: usize| base + (y0 + k / w) * nx + x0 + k % w;
                let (mut ma, mut mb) = (0.0, 0.0);
                for (k, wk) in weights.iter().enumerate() {
                    ma += wk * est[idx(k)];
                    mb += wk * reference[idx(k)];
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (k, wk) in weights.iter().enumerate() {
                    let da = est[idx(k)] - ma;
                    let db = reference[idx(k)] - mb;
                    va += wk * da * da;
                    vb += wk * db * db;
                    cov += wk * da * db;
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AifMetrics {
    pub rmse: f64,
    pub nrmse: f64,
    pub peak_rel_err: f64,
    pub peak_time_diff_s: f64,
    pub auc_rel_err: f64,
}

/// Compare `est` against `reference` at the reference sample times.
pub fn aif_metrics(est: &SampledCurve, reference: &SampledCurve) -> Result<AifMetrics> {
    let t = reference.times();
    let r = reference.values();
    let (ref_peak_i, ref_peak) = argmax(r);
    if ref_peak <= 0.0 {
        return Err(Error::invalid("reference AIF", "all-zero values"));
    }
    let e = est.resample(t).values;
    let (est_peak_i, est_peak) = argmax(&e);
    let n = t.len() as f64;
    let rmse = (e.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
    let auc = |v: &[f64]| -> f64 { t.windows(2).zip(v.windows(2)).map(|(tt, vv)| 0.5 * (tt[1] - tt[0]) * (vv[0] + vv[1])).sum() };
    let auc_ref = auc(r);
    Ok(AifMetrics {
        rmse,
        nrmse: rmse / ref_peak,
        peak_rel_err: (est_peak - ref_peak) / ref_peak,
        peak_time_diff_s: t[est_peak_i] - t[ref_peak_i],
        auc_rel_err: (auc(&e) - auc_ref) / auc_ref,
    })
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// PSNR in JSON: infinite values are written as the string `"+inf"`.
pub mod inf_as_string {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected PSNR value `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub ssim: f64,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    #[serde(rename = "K1")]
    pub k1: ChannelScore,
    pub k2: ChannelScore,
    pub k3: ChannelScore,
    #[serde(rename = "Vb")]
    pub vb: ChannelScore,
    #[serde(rename = "Ki")]
    pub ki: ChannelScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsReport {
    pub channels: ChannelScores,
    /// Unweighted mean over `K1, k2, k3, Vb`.
    pub mean: ChannelScore,
    pub ssim_config: SsimConfig,
}

fn score_channel(est: &[f64], reference: &[f64], dims: Dims3, cfg: &SsimConfig) -> Result<ChannelScore> {
    let l = cfg.dynamic_range.unwrap_or_else(|| default_range(reference));
    Ok(ChannelScore {
        ssim: ssim(est, reference, dims, cfg)?,
        psnr: psnr(est, reference, l)?,
    })
}

/// Score every channel of `est` against `reference`, plus the derived Ki map.
pub fn score_maps(est: &ParametricMaps, reference: &ParametricMaps, cfg: &SsimConfig) -> Result<MapsReport> {
    if est.dims() != reference.dims() {
        return Err(Error::invalid(
            "maps",
            format!("dims differ: {:?} vs {:?}", est.dims(), reference.dims()),
        ));
    }
    let dims = est.dims();
    let mut per = Vec::with_capacity(CHANNEL_NAMES.len());
    for c in 0..CHANNEL_NAMES.len() {
        per.push(score_channel(est.channel(c), reference.channel(c), dims, cfg)?);
    }
    let ki = score_channel(&est.ki_volume()?, &reference.ki_volume()?, dims, cfg)?;
    let n = per.len() as f64;
    let mean = ChannelScore {
        ssim: per.iter().map(|s| s.ssim).sum::<f64>() / n,
        psnr: per.iter().map(|s| s.psnr).sum::<f64>() / n,
    };
    Ok(MapsReport {
        channels: ChannelScores {
            k1: per[0],
            k2: per[1],
            k3: per[2],
            vb: per[3],
            ki,
        },
        mean,
        ssim_config: *cfg,
    })
}
