//! `petkin`: simulate dynamic PET phantoms, fit parametric maps, estimate the
//! input function jointly, score results and draw figures.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use petkin::fitting::{fit_volume, FitConfig, FitMethod, FitStatus, VolumeFit};
use petkin::kinetics::{Dims3, CHANNEL_NAMES};
use petkin::metrics::{aif_metrics, score_maps, SsimConfig};
use petkin::phantom::{build_phantom, dense_aif, simulate_scan, PhantomSpec};
use petkin::sime::{sime_estimate, SimeConfig};
use petkin::storage::{self, read_json, write_json};
use petkin::{Error, FrameSchedule, Result, SampledCurve};

use plot::{render_plot, PlotSpec};

#[derive(Parser, Debug)]
#[command(name = "petkin", version, about = "Dynamic PET tracer kinetics")]
struct Cli {
    /// Worker threads; 0 picks the number of available cores.
    #[arg(long, global = true, env = "PETKIN_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Build a phantom and synthesize a dynamic scan.
    Simulate {
        /// Phantom spec JSON (default: 32³ mouse phantom).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Frame schedule JSON (default: 1×30 s, 24×5 s, 9×20 s, 8×300 s).
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's noise_sigma0.
        #[arg(long)]
        noise: Option<f64>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Voxel-wise fit with a known input function.
    Fit {
        #[arg(long)]
        image: PathBuf,
        /// Input function CSV (`time_s,value_kbq_ml`).
        #[arg(long)]
        aif: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::LlsNls)]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Labels or scalar volume; non-zero voxels are fitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Expected frame schedule; must match the image.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Joint estimation of the input function and the maps.
    Sime {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Blood-pool ROI (labels or scalar volume).
        #[arg(long)]
        blood_roi: Option<PathBuf>,
        /// Use only this label of a labels volume as the ROI instead of every
        /// nonzero voxel.
        #[arg(long, requires = "blood_roi")]
        blood_label: Option<u32>,
    },
    /// SSIM/PSNR of estimated maps against a reference, plus AIF errors.
    Metrics {
        /// Maps volume, or a run directory containing `maps/`.
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        aif_est: Option<PathBuf>,
        #[arg(long)]
        aif_ref: Option<PathBuf>,
        #[arg(long)]
        ssim_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an SVG figure.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Reference AIF CSV (aif-overlay, identity-scatter).
        #[arg(long)]
        aif_ref: Option<PathBuf>,
        /// Estimated AIF CSV (aif-overlay, identity-scatter).
        #[arg(long)]
        aif_est: Option<PathBuf>,
        /// Maps, scalar or labels volume, or a run directory (map-slice).
        #[arg(long)]
        maps: Option<PathBuf>,
        /// K1, k2, k3, Vb or Ki (map-slice).
        #[arg(long, default_value = "K1")]
        channel: String,
        /// Axial slice index; defaults to the middle slice.
        #[arg(long)]
        slice: Option<usize>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
enum Method {
    #[value(name = "lls")]
    #[serde(rename = "lls")]
    Lls,
    #[value(name = "lls+nls")]
    #[serde(rename = "lls+nls")]
    LlsNls,
}

impl From<Method> for FitMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Lls => FitMethod::Lls,
            Method::LlsNls => FitMethod::LlsNls,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PlotKind {
    AifOverlay,
    IdentityScatter,
    MapSlice,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
            }
            return ExitCode::from(code);
        }
    };
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.threads
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::Numeric(format!("thread pool: {e}"))),
    };
    let run = Run {
        threads_requested: cli.threads,
        threads,
    };
    match pool.install(|| run.dispatch(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    let (kind, code) = if e.is_validation() { ("validation", 2) } else { ("numeric", 3) };
    eprintln!("{}", json!({"error": kind, "message": e.to_string()}));
    ExitCode::from(code)
}

struct Run {
    threads_requested: usize,
    threads: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn status_code(s: FitStatus) -> u32 {
    match s {
        FitStatus::Ok => 1,
        FitStatus::Clamped => 2,
        FitStatus::Degenerate => 3,
        FitStatus::NoSignal => 4,
    }
}

fn read_mask_for(path: &Path, dims: Dims3) -> Result<Vec<bool>> {
    let (mdims, mask) = storage::read_mask(path)?;
    if mdims != dims {
        return Err(Error::invalid(
            "mask",
            format!("{} has dims {mdims:?}, image has {dims:?}", path.display()),
        ));
    }
    Ok(mask)
}

fn read_label_for(path: &Path, dims: Dims3, label: u32) -> Result<Vec<bool>> {
    let (ldims, labels) = storage::read_labels(path)?;
    if ldims != dims {
        return Err(Error::invalid(
            "blood-roi",
            format!("{} has dims {ldims:?}, image has {dims:?}", path.display()),
        ));
    }
    let roi: Vec<bool> = labels.iter().map(|&l| l == label).collect();
    if !roi.contains(&true) {
        return Err(Error::invalid("blood-label", format!("label {label} does not occur in {}", path.display())));
    }
    Ok(roi)
}

/// A maps volume directory, or a run directory with a `maps/` child.
fn maps_dir(path: &Path) -> PathBuf {
    if path.join(storage::META_FILE).exists() {
        path.to_path_buf()
    } else {
        path.join("maps")
    }
}

fn write_fit_outputs(out: &Path, fit: &VolumeFit) -> Result<()> {
    let dims = fit.maps.dims();
    storage::write_maps(out.join("maps"), &fit.maps)?;
    storage::write_scalar(out.join("ki"), dims, &fit.ki, "1/min")?;
    let codes: Vec<u32> = fit
        .results
        .iter()
        .map(|r| r.as_ref().map_or(0, |r| status_code(r.status)))
        .collect();
    storage::write_labels(out.join("status"), dims, &codes)
}

impl Run {
    fn manifest(&self, out: &Path, command: &Command, extra: serde_json::Value) -> Result<()> {
        let m = json!({
            "tool": "petkin",
            "version": env!("CARGO_PKG_VERSION"),
            "threads_requested": self.threads_requested,
            "threads": self.threads,
            "command": command,
            "resolved": extra,
        });
        write_json(out.join("manifest.json"), &m)
    }

    fn dispatch(&self, command: &Command) -> Result<()> {
        match command {
            Command::Simulate { spec, schedule, out, noise, seed } => {
                let mut spec: PhantomSpec = match spec {
                    Some(p) => read_json(p)?,
                    None => PhantomSpec::default(),
                };
                if let Some(n) = noise {
                    spec.noise_sigma0 = *n;
                }
                if let Some(s) = seed {
                    spec.seed = *s;
                }
                let schedule: FrameSchedule = match schedule {
                    Some(p) => read_json(p)?,
                    None => FrameSchedule::standard(),
                };
                let phantom = build_phantom(&spec, &schedule)?;
                let img = simulate_scan(&phantom, &schedule, spec.noise_sigma0, spec.seed)?;
                create_dir(out)?;
                storage::write_dynamic(out.join("image"), &img)?;
                storage::write_maps(out.join("maps"), &phantom.maps)?;
                storage::write_labels(out.join("labels"), spec.dims, &phantom.labels)?;
                storage::write_scalar(out.join("ki"), spec.dims, &phantom.maps.ki_volume()?, "1/min")?;
                dense_aif(&spec, &schedule)?.write_csv(out.join("aif.csv"))?;
                phantom.truth_aif.write_csv(out.join("aif_mid.csv"))?;
                write_json(out.join("schedule.json"), &schedule)?;
                write_json(out.join("spec.json"), &spec)?;
                self.manifest(out, command, json!({ "spec": spec, "schedule": schedule }))
            }
            Command::Fit { image, aif, method, config, out, mask, schedule } => {
                let img = storage::read_dynamic(image)?;
                if let Some(p) = schedule {
                    let s: FrameSchedule = read_json(p)?;
                    if s.len() != img.schedule().len() {
                        return Err(Error::invalid(
                            "schedule",
                            format!("{} frames in {}, image has {}", s.len(), p.display(), img.schedule().len()),
                        ));
                    }
                    if s != *img.schedule() {
                        return Err(Error::invalid("schedule", "frame timing differs from the image header"));
                    }
                }
                let cfg: FitConfig = match config {
                    Some(p) => read_json(p)?,
                    None => FitConfig::default(),
                };
                cfg.validate()?;
                let ca = SampledCurve::read_csv(aif)?;
                let mask = mask.as_deref().map(|m| read_mask_for(m, img.dims())).transpose()?;
                let fit = fit_volume(&img, &ca, (*method).into(), mask.as_deref(), &cfg)?;
                create_dir(out)?;
                write_fit_outputs(out, &fit)?;
                write_json(out.join("summary.json"), &json!({ "counts": fit.counts }))?;
                self.manifest(out, command, json!({ "fit_config": cfg }))
            }
            Command::Sime { image, config, out, mask, blood_roi, blood_label } => {
                let img = storage::read_dynamic(image)?;
                let cfg: SimeConfig = match config {
                    Some(p) => read_json(p)?,
                    None => SimeConfig::default(),
                };
                let mask = mask.as_deref().map(|m| read_mask_for(m, img.dims())).transpose()?;
                let roi = match (blood_roi.as_deref(), blood_label) {
                    (Some(m), Some(label)) => Some(read_label_for(m, img.dims(), *label)?),
                    (Some(m), None) => Some(read_mask_for(m, img.dims())?),
                    _ => None,
                };
                let res = sime_estimate(&img, mask.as_deref(), roi.as_deref(), &cfg)?;
                create_dir(out)?;
                write_fit_outputs(out, &res.fit)?;
                res.aif_curve.write_csv(out.join("aif.csv"))?;
                res.aif_mid.write_csv(out.join("aif_mid.csv"))?;
                write_json(out.join("aif_params.json"), &res.aif)?;
                write_json(
                    out.join("summary.json"),
                    &json!({
                        "counts": res.fit.counts,
                        "trace": res.trace,
                        "anchor": res.anchor,
                        "anchor_scale": res.anchor_scale,
                        "active_voxels": res.active_voxels.len(),
                    }),
                )?;
                self.manifest(out, command, json!({ "sime_config": cfg }))
            }
            Command::Metrics { est, reference, aif_est, aif_ref, ssim_config, out } => {
                let cfg: SsimConfig = match ssim_config {
                    Some(p) => read_json(p)?,
                    None => SsimConfig::default(),
                };
                let e = storage::read_maps(maps_dir(est))?;
                let r = storage::read_maps(maps_dir(reference))?;
                let maps = score_maps(&e, &r, &cfg)?;
                let aif = match (aif_est, aif_ref) {
                    (Some(a), Some(b)) => Some(aif_metrics(&SampledCurve::read_csv(a)?, &SampledCurve::read_csv(b)?)?),
                    (None, None) => None,
                    _ => return Err(Error::invalid("metrics", "--aif-est and --aif-ref go together")),
                };
                let report = json!({
                    "maps": maps,
                    "aif": aif,
                    "config": {
                        "est": est,
                        "ref": reference,
                        "aif_est": aif_est,
                        "aif_ref": aif_ref,
                        "ssim": cfg,
                    },
                });
                if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    create_dir(dir)?;
                }
                write_json(out, &report)
            }
            Command::Plot { kind, out, aif_ref, aif_est, maps, channel, slice } => {
                let spec = match kind {
                    PlotKind::AifOverlay => {
                        let mut curves = Vec::new();
                        if let Some(p) = aif_ref {
                            curves.push(("reference".to_string(), SampledCurve::read_csv(p)?));
                        }
                        if let Some(p) = aif_est {
                            curves.push(("estimate".to_string(), SampledCurve::read_csv(p)?));
                        }
                        PlotSpec::AifOverlay { curves }
                    }
                    PlotKind::IdentityScatter => {
                        let (Some(r), Some(e)) = (aif_ref, aif_est) else {
                            return Err(Error::invalid("plot", "identity-scatter needs --aif-ref and --aif-est"));
                        };
                        PlotSpec::IdentityScatter {
                            reference: SampledCurve::read_csv(r)?,
                            estimate: SampledCurve::read_csv(e)?,
                        }
                    }
                    PlotKind::MapSlice => {
                        let Some(m) = maps else {
                            return Err(Error::invalid("plot", "map-slice needs --maps"));
                        };
                        map_slice(m, channel, *slice)?
                    }
                };
                let svg = render_plot(&spec)?;
                std::fs::write(out, svg).map_err(|e| Error::io(out, e))
            }
        }
    }
}

fn map_slice(path: &Path, channel: &str, slice: Option<usize>) -> Result<PlotSpec> {
    let dir = maps_dir(path);
    let (header, _) = storage::read_volume(&dir)?;
    let (dims, volume): (Dims3, Vec<f64>) = match header.kind {
        storage::VolumeKind::Maps => {
            let m = storage::read_maps(&dir)?;
            let values = if channel == "Ki" {
                m.ki_volume()?
            } else {
                let c = CHANNEL_NAMES
                    .iter()
                    .position(|n| *n == channel)
                    .ok_or_else(|| Error::invalid("plot", format!("unknown channel `{channel}`")))?;
                m.channel(c).to_vec()
            };
            (m.dims(), values)
        }
        storage::VolumeKind::Scalar => storage::read_scalar(&dir)?,
        storage::VolumeKind::Labels => {
            let (d, l) = storage::read_labels(&dir)?;
            (d, l.into_iter().map(f64::from).collect())
        }
        storage::VolumeKind::Dynamic => {
            return Err(Error::invalid("plot", "map-slice needs a maps, scalar or labels volume"))
        }
    };
    let [nz, ny, nx] = dims;
    let z = slice.unwrap_or(nz / 2);
    if z >= nz {
        return Err(Error::invalid("plot", format!("slice {z} outside 0..{nz}")));
    }
    Ok(PlotSpec::MapSlice {
        label: format!("{channel} (slice {z})"),
        values: volume[z * ny * nx..(z + 1) * ny * nx].to_vec(),
        ny,
        nx,
    })
}
