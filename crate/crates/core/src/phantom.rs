//! Ellipsoid digital phantoms and noisy scan synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aif::{FengAif, SampledCurve};
use crate::error::{Error, Result};
use crate::kinetics::{forward_volume_with, Dims3, DynamicImage, ForwardModel, ForwardOptions, GridInput, KineticParams, ParametricMaps};
use crate::timegrid::FrameSchedule;

/// Activity floor (kBq/mL) in the noise variance.
pub const NOISE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    /// Ellipsoid centre `(z, y, x)` in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes `(z, y, x)` in voxels.
    pub semi_axes: [f64; 3],
    pub params: KineticParams,
}

impl Region {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let s: f64 = (0..3)
            .map(|k| {
                let d = (p[k] - self.center[k]) / self.semi_axes[k];
                d * d
            })
            .sum();
        s <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(Z, Y, X)`
    pub dims: Dims3,
    /// Later regions overwrite earlier ones where they overlap.
    pub regions: Vec<Region>,
    #[serde(default)]
    pub aif: FengAif,
    #[serde(default)]
    pub noise_sigma0: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub forward: ForwardOptions,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::mouse([32, 32, 32])
    }
}

/// `(name, centre, semi-axes, params)` with geometry as fractions of the volume.
const MOUSE: [(&str, [f64; 3], [f64; 3], KineticParams); 6] = [
    ("muscle", [0.5, 0.5, 0.5], [0.46, 0.40, 0.40], KineticParams::new(0.1, 0.25, 0.03, 0.05)),
    ("liver", [0.55, 0.56, 0.36], [0.12, 0.14, 0.14], KineticParams::new(0.6, 0.9, 0.05, 0.2)),
    ("kidney", [0.66, 0.42, 0.66], [0.08, 0.09, 0.09], KineticParams::new(0.8, 1.2, 0.02, 0.25)),
    ("heart", [0.32, 0.5, 0.5], [0.09, 0.12, 0.12], KineticParams::new(0.1, 0.1, 0.01, 0.9)),
    ("brain", [0.11, 0.5, 0.5], [0.06, 0.14, 0.14], KineticParams::new(0.3, 0.5, 0.06, 0.04)),
    ("tumor", [0.78, 0.64, 0.62], [0.07, 0.08, 0.08], KineticParams::new(0.5, 0.4, 0.12, 0.1)),
];

impl PhantomSpec {
    /// Mouse-like layout scaled to `dims`: a muscle body containing liver,
    /// kidney, heart blood pool, brain and a tumor.
    pub fn mouse(dims: Dims3) -> Self {
        let regions = MOUSE
            .iter()
            .map(|(name, c, s, p)| Region {
                name: (*name).to_string(),
                center: [0, 1, 2].map(|k| c[k] * (dims[k] as f64 - 1.0)),
                semi_axes: [0, 1, 2].map(|k| s[k] * dims[k] as f64),
                params: *p,
            })
            .collect();
        Self {
            dims,
            regions,
            aif: FengAif::default(),
            noise_sigma0: 0.0,
            seed: 0,
            forward: ForwardOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("phantom", "dims must be positive"));
        }
        if !(self.noise_sigma0 >= 0.0 && self.noise_sigma0.is_finite()) {
            return Err(Error::invalid("phantom", "noise_sigma0 must be >= 0"));
        }
        self.aif.validate()?;
        for r in &self.regions {
            r.params.validate()?;
            for k in 0..3 {
                let (c, s) = (r.center[k], r.semi_axes[k]);
                if !(c.is_finite() && s.is_finite() && s > 0.0) {
                    return Err(Error::invalid("phantom", format!("region {}: bad geometry", r.name)));
                }
                if c - s < -0.5 || c + s > self.dims[k] as f64 - 0.5 {
                    return Err(Error::invalid(
                        "phantom",
                        format!("region {} extends outside dims {:?}", r.name, self.dims),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    /// 0 = background, `i + 1` = `spec.regions[i]`.
    pub labels: Vec<u32>,
    pub maps: ParametricMaps,
    /// Ground-truth input function at the frame mid-times.
    pub truth_aif: SampledCurve,
}

impl Phantom {
    pub fn region_mask(&self, name: &str) -> Vec<bool> {
        match self.spec.regions.iter().position(|r| r.name == name) {
            Some(i) => self.labels.iter().map(|&l| l as usize == i + 1).collect(),
            None => vec![false; self.labels.len()],
        }
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }
}

pub fn build_phantom(spec: &PhantomSpec, schedule: &FrameSchedule) -> Result<Phantom> {
    spec.validate()?;
    let [nz, ny, nx] = spec.dims;
    let mut labels = vec![0u32; nz * ny * nx];
    let mut maps = ParametricMaps::zeros(spec.dims);
    for (ri, r) in spec.regions.iter().enumerate() {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if r.contains(z, y, x) {
                        let i = (z * ny + y) * nx + x;
                        labels[i] = ri as u32 + 1;
                        maps.set(i, r.params, true);
                    }
                }
            }
        }
    }
    let truth_aif = spec.aif.sample(&schedule.mid_times())?;
    Ok(Phantom {
        spec: spec.clone(),
        labels,
        maps,
        truth_aif,
    })
}

/// Dense samples of the phantom's input function on the fine grid used by
/// the forward model.
pub fn dense_aif(spec: &PhantomSpec, schedule: &FrameSchedule) -> Result<SampledCurve> {
    let grid = schedule.fine_grid(spec.forward.dt)?;
    spec.aif.sample(&grid.times())
}

/// Noiseless scan plus Gaussian noise with
/// `σ = σ0·sqrt(max(x, ε) / duration_min)` per voxel and frame. Each voxel
/// draws from its own stream of the seeded generator, so the output does not
/// depend on thread count.
pub fn simulate_scan(phantom: &Phantom, schedule: &FrameSchedule, noise_sigma0: f64, seed: u64) -> Result<DynamicImage> {
    if !(noise_sigma0 >= 0.0 && noise_sigma0.is_finite()) {
        return Err(Error::invalid("noise", "noise_sigma0 must be >= 0"));
    }
    let opts = phantom.spec.forward;
    let grid = schedule.fine_grid(opts.dt)?;
    let ca = phantom.spec.aif.sample(&grid.times())?;
    let model = ForwardModel::new(GridInput::from_curve(&ca, grid), schedule, opts.mode)?;
    phantom.maps.validate()?;
    let clean = forward_volume_with(&phantom.maps, &model, schedule)?;
    if noise_sigma0 == 0.0 {
        return Ok(clean);
    }
    let n = clean.n_voxels();
    let dur_min: Vec<f64> = schedule.durations().iter().map(|d| d / 60.0).collect();
    let tacs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64);
            clean
                .tac(v)
                .iter()
                .zip(&dur_min)
                .map(|(&x, &d)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + noise_sigma0 * (x.max(NOISE_FLOOR) / d).sqrt() * z
                })
                .collect()
        })
        .collect();
    DynamicImage::from_tacs(schedule.clone(), clean.dims(), &tacs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::forward_volume;

    fn small_spec() -> PhantomSpec {
        PhantomSpec::mouse([12, 12, 12])
    }

    #[test]
    fn empty_region_list_is_background() {
        let spec = PhantomSpec { regions: vec![], ..small_spec() };
        let ph = build_phantom(&spec, &FrameSchedule::standard()).unwrap();
        assert!(ph.labels.iter().all(|&l| l == 0));
        assert!(ph.maps.channels().iter().all(|c| c.iter().all(|&v| v == 0.0)));
        assert!(ph.maps.mask().iter().all(|&m| !m));
    }

    #[test]
    fn single_voxel_region() {
        let spec = PhantomSpec {
            dims: [3, 4, 5],
            regions: vec![Region {
                name: "dot".into(),
                center: [1.0, 2.0, 3.0],
                semi_axes: [0.4, 0.4, 0.4],
                params: KineticParams::new(0.5, 0.3, 0.1, 0.05),
            }],
            ..small_spec()
        };
        let ph = build_phantom(&spec, &FrameSchedule::standard()).unwrap();
        let hits: Vec<usize> = (0..ph.labels.len()).filter(|&i| ph.labels[i] == 1).collect();
        assert_eq!(hits, vec![(1 * 4 + 2) * 5 + 3]);
    }

    #[test]
    fn region_outside_dims_rejected() {
        let mut spec = small_spec();
        spec.regions[0].center[2] = 11.0;
        assert!(build_phantom(&spec, &FrameSchedule::standard()).unwrap_err().is_validation());
    }

    #[test]
    fn mouse_counts_match_bruteforce() {
        let spec = PhantomSpec::default();
        let ph = build_phantom(&spec, &FrameSchedule::standard()).unwrap();
        let [nz, ny, nx] = spec.dims;
        // Independent recount: last region whose normalized radius is <= 1 wins.
        let mut counts = vec![0usize; spec.regions.len() + 1];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut label = 0;
                    for (i, r) in spec.regions.iter().enumerate() {
                        let q = [z as f64, y as f64, x as f64];
                        let rr: f64 = (0..3).map(|k| ((q[k] - r.center[k]) / r.semi_axes[k]).powi(2)).sum();
                        if rr <= 1.0 {
                            label = i + 1;
                        }
                    }
                    counts[label] += 1;
                }
            }
        }
        for (l, &c) in counts.iter().enumerate() {
            assert_eq!(ph.labels.iter().filter(|&&x| x as usize == l).count(), c);
        }
        assert!(counts[1..].iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn zero_noise_equals_forward_volume() {
        let s = FrameSchedule::standard();
        let spec = small_spec();
        let ph = build_phantom(&spec, &s).unwrap();
        let img = simulate_scan(&ph, &s, 0.0, 3).unwrap();
        let ca = dense_aif(&spec, &s).unwrap();
        let clean = forward_volume(&ph.maps, &ca, &s, spec.forward).unwrap();
        assert_eq!(img, clean);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let s = FrameSchedule::standard();
        let ph = build_phantom(&small_spec(), &s).unwrap();
        let a = simulate_scan(&ph, &s, 0.1, 5).unwrap();
        let b = simulate_scan(&ph, &s, 0.1, 5).unwrap();
        let c = simulate_scan(&ph, &s, 0.1, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pure_blood_region_equals_frame_averaged_aif() {
        let s = FrameSchedule::standard();
        let mut spec = PhantomSpec::mouse([6, 6, 6]);
        spec.regions = vec![Region {
            name: "blood".into(),
            center: [2.5, 2.5, 2.5],
            semi_axes: [3.0, 3.0, 3.0],
            params: KineticParams::new(0.0, 0.0, 0.0, 1.0),
        }];
        let ph = build_phantom(&spec, &s).unwrap();
        let img = simulate_scan(&ph, &s, 0.0, 0).unwrap();
        let centre = (2 * 6 + 2) * 6 + 2;
        assert_eq!(ph.labels[centre], 1);
        // Independent frame average: fine midpoint quadrature of the Feng curve.
        for (f, (&st, &d)) in s.starts().iter().zip(s.durations()).enumerate() {
            let m = 4000;
            let avg: f64 = (0..m).map(|k| spec.aif.eval(st + d * (k as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64;
            let got = img.frame(f)[centre];
            assert!((got - avg).abs() <= 2e-3 * avg.abs().max(1.0), "frame {f}: {got} vs {avg}");
        }
    }

    #[test]
    fn noise_matches_law() {
        let s = FrameSchedule::standard();
        let mut spec = PhantomSpec::mouse([16, 16, 16]);
        spec.regions = vec![Region {
            name: "block".into(),
            center: [7.5, 7.5, 7.5],
            semi_axes: [8.0, 8.0, 8.0],
            params: KineticParams::new(0.5, 0.3, 0.1, 0.05),
        }];
        let ph = build_phantom(&spec, &s).unwrap();
        let inside: Vec<usize> = (0..ph.labels.len()).filter(|&i| ph.labels[i] == 1).collect();
        assert!(inside.len() >= 1000);
        let clean = simulate_scan(&ph, &s, 0.0, 0).unwrap();
        let noisy = simulate_scan(&ph, &s, 0.1, 11).unwrap();
        for f in [5, 30, 40] {
            let x = clean.frame(f)[inside[0]];
            let expect = 0.1 * (x.max(NOISE_FLOOR) / (s.durations()[f] / 60.0)).sqrt();
            let d: Vec<f64> = inside.iter().map(|&i| noisy.frame(f)[i] - clean.frame(f)[i]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((sd / expect - 1.0).abs() < 0.1, "frame {f}: {sd} vs {expect}");
        }
    }

    #[test]
    fn longer_frames_halve_variance() {
        // Zero activity everywhere, so both frames sit at the variance floor.
        let s = FrameSchedule::from_segments(&[(1, 10.0), (1, 20.0)]).unwrap();
        let spec = PhantomSpec { regions: vec![], ..PhantomSpec::mouse([25, 20, 20]) };
        let ph = build_phantom(&spec, &s).unwrap();
        let noisy = simulate_scan(&ph, &s, 1.0, 1).unwrap();
        let var = |f: usize| noisy.frame(f).iter().map(|v| v * v).sum::<f64>() / noisy.n_voxels() as f64;
        assert!(noisy.n_voxels() >= 10_000);
        let ratio = var(1) / var(0);
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<PhantomSpec>(&json).unwrap(), spec);
        let minimal: PhantomSpec = serde_json::from_str(r#"{"dims":[4,4,4],"regions":[]}"#).unwrap();
        assert_eq!(minimal.aif, FengAif::default());
    }
}
