//! Acquisition frame schedules and the uniform fine grid used for convolution.
//!
//! All times here are in seconds. A [`FrameSchedule`] is a contiguous run of
//! frames starting at zero; a [`FineGrid`] is the uniform sampling on which
//! continuous curves are built before a [`FrameOperator`] reduces them to one
//! value per frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default fine-grid spacing in seconds.
pub const DEFAULT_DT_S: f64 = 0.5;

const CONTIGUITY_TOL_S: f64 = 1e-6;

/// Contiguous, ordered acquisition frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleJson", into = "ScheduleJson")]
pub struct FrameSchedule {
    frame_start: Vec<f64>,
    frame_duration: Vec<f64>,
}

/// The 42-frame mouse protocol: 1×30 s, 24×5 s, 9×20 s, 8×300 s.
pub const STANDARD_SEGMENTS: [(usize, f64); 4] = [(1, 30.0), (24, 5.0), (9, 20.0), (8, 300.0)];

impl FrameSchedule {
    /// Expand run-length `(count, duration_s)` segments into contiguous frames.
    pub fn from_segments(segments: &[(usize, f64)]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("schedule", "empty segment list"));
        }
        let mut frame_start = Vec::new();
        let mut frame_duration = Vec::new();
        let mut t = 0.0;
        for (i, &(count, dur)) in segments.iter().enumerate() {
            if count == 0 {
                return Err(Error::invalid("schedule", format!("segment {i} has count 0")));
            }
            if !(dur.is_finite() && dur > 0.0) {
                return Err(Error::invalid(
                    "schedule",
                    format!("segment {i} has non-positive duration {dur}"),
                ));
            }
            for _ in 0..count {
                frame_start.push(t);
                frame_duration.push(dur);
                t += dur;
            }
        }
        Ok(Self {
            frame_start,
            frame_duration,
        })
    }

    /// Build from explicit starts and durations, checking contiguity.
    pub fn from_frames(frame_start: Vec<f64>, frame_duration: Vec<f64>) -> Result<Self> {
        if frame_start.is_empty() {
            return Err(Error::invalid("schedule", "no frames"));
        }
        if frame_start.len() != frame_duration.len() {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "{} frame starts but {} durations",
                    frame_start.len(),
                    frame_duration.len()
                ),
            ));
        }
        if frame_start[0].abs() > CONTIGUITY_TOL_S {
            return Err(Error::invalid("schedule", "first frame must start at 0 s"));
        }
        for (i, &d) in frame_duration.iter().enumerate() {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid(
                    "schedule",
                    format!("frame {i} has non-positive duration {d}"),
                ));
            }
        }
        for i in 1..frame_start.len() {
            let expected = frame_start[i - 1] + frame_duration[i - 1];
            if (frame_start[i] - expected).abs() > CONTIGUITY_TOL_S {
                return Err(Error::invalid(
                    "schedule",
                    format!(
                        "frame {i} starts at {} s, expected {expected} s (gaps and overlaps are not supported)",
                        frame_start[i]
                    ),
                ));
            }
        }
        Ok(Self {
            frame_start,
            frame_duration,
        })
    }

    pub fn standard() -> Self {
        Self::from_segments(&STANDARD_SEGMENTS).expect("static schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.frame_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_start.is_empty()
    }

    pub fn starts(&self) -> &[f64] {
        &self.frame_start
    }

    pub fn durations(&self) -> &[f64] {
        &self.frame_duration
    }

    pub fn end_time(&self) -> f64 {
        let last = self.len() - 1;
        self.frame_start[last] + self.frame_duration[last]
    }

    pub fn min_duration(&self) -> f64 {
        self.frame_duration
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mid_times(&self) -> Vec<f64> {
        self.frame_start
            .iter()
            .zip(&self.frame_duration)
            .map(|(s, d)| s + 0.5 * d)
            .collect()
    }

    /// Run-length compress back into `(count, duration_s)` segments.
    pub fn segments(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for &d in &self.frame_duration {
            match out.last_mut() {
                Some((count, dur)) if *dur == d => *count += 1,
                _ => out.push((1, d)),
            }
        }
        out
    }

    pub fn fine_grid(&self, dt: f64) -> Result<FineGrid> {
        FineGrid::covering(self, dt)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleJson {
    Segments {
        segments: Vec<(usize, f64)>,
    },
    Expanded {
        frame_start_s: Vec<f64>,
        frame_duration_s: Vec<f64>,
    },
}

impl TryFrom<ScheduleJson> for FrameSchedule {
    type Error = Error;

    fn try_from(value: ScheduleJson) -> Result<Self> {
        match value {
            ScheduleJson::Segments { segments } => FrameSchedule::from_segments(&segments),
            ScheduleJson::Expanded {
                frame_start_s,
                frame_duration_s,
            } => FrameSchedule::from_frames(frame_start_s, frame_duration_s),
        }
    }
}

impl From<FrameSchedule> for ScheduleJson {
    fn from(s: FrameSchedule) -> Self {
        ScheduleJson::Segments {
            segments: s.segments(),
        }
    }
}

/// Uniform grid `t_j = j·dt`, `j = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineGrid {
    pub dt: f64,
    pub n: usize,
}

impl FineGrid {
    pub fn new(dt: f64, n: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("fine grid", format!("dt must be positive, got {dt}")));
        }
        if n < 2 {
            return Err(Error::invalid("fine grid", "needs at least two nodes"));
        }
        Ok(Self { dt, n })
    }

    /// Smallest grid reaching the end of `schedule`: `n = ceil(end/dt) + 1`.
    pub fn covering(schedule: &FrameSchedule, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("fine grid", format!("dt must be positive, got {dt}")));
        }
        let min_dur = schedule.min_duration();
        if dt > min_dur {
            return Err(Error::invalid(
                "fine grid",
                format!("dt = {dt} s exceeds the shortest frame ({min_dur} s)"),
            ));
        }
        // Guard against ceil() rounding 5460.000000001 up to 5461.
        let ratio = schedule.end_time() / dt;
        let steps = if (ratio - ratio.round()).abs() < 1e-9 {
            ratio.round()
        } else {
            ratio.ceil()
        };
        Self::new(dt, steps as usize + 1)
    }

    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.time(j)).collect()
    }

    pub fn span(&self) -> f64 {
        self.time(self.n - 1)
    }
}

/// How a continuous curve is reduced to one value per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameMode {
    /// Mean over the frame interval.
    #[default]
    FrameAverage,
    /// Value at the frame mid-time.
    Midpoint,
}

/// Sparse linear map from fine-grid samples to frame values.
///
/// Each row holds the weights of the piecewise-linear interpolant of the grid
/// samples, either integrated over the frame and divided by its duration or
/// evaluated at the mid-time. Applying the operator is a dot product per frame,
/// so the cost of discretizing a curve is linear in the grid size.
#[derive(Debug, Clone)]
pub struct FrameOperator {
    rows: Vec<Vec<(usize, f64)>>,
    grid: FineGrid,
    mode: FrameMode,
}

impl FrameOperator {
    pub fn new(schedule: &FrameSchedule, grid: FineGrid, mode: FrameMode) -> Result<Self> {
        if grid.span() + 1e-9 < schedule.end_time() {
            return Err(Error::invalid(
                "fine grid",
                format!(
                    "grid ends at {} s before the schedule ({} s)",
                    grid.span(),
                    schedule.end_time()
                ),
            ));
        }
        let rows = schedule
            .starts()
            .iter()
            .zip(schedule.durations())
            .map(|(&s, &d)| match mode {
                FrameMode::FrameAverage => average_weights(grid, s, s + d),
                FrameMode::Midpoint => point_weights(grid, s + 0.5 * d),
            })
            .collect();
        Ok(Self { rows, grid, mode })
    }

    pub fn grid(&self) -> FineGrid {
        self.grid
    }

    pub fn mode(&self) -> FrameMode {
        self.mode
    }

    pub fn n_frames(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, curve: &[f64]) -> Vec<f64> {
        debug_assert_eq!(curve.len(), self.grid.n);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * curve[j]).sum())
            .collect()
    }

    pub fn apply_into(&self, curve: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, w)| w * curve[j]).sum();
        }
    }
}

fn point_weights(grid: FineGrid, t: f64) -> Vec<(usize, f64)> {
    let x = t / grid.dt;
    let j = (x.floor() as usize).min(grid.n - 2);
    let s = x - j as f64;
    if s == 0.0 {
        vec![(j, 1.0)]
    } else {
        vec![(j, 1.0 - s), (j + 1, s)]
    }
}

/// Weights of `(1/(b-a)) ∫_a^b f` for the linear interpolant of grid samples.
fn average_weights(grid: FineGrid, a: f64, b: f64) -> Vec<(usize, f64)> {
    let dt = grid.dt;
    let first = ((a / dt).floor() as usize).min(grid.n - 2);
    let last = ((b / dt).ceil() as usize).min(grid.n - 1);
    let mut w = vec![0.0; last - first + 1];
    for j in first..last {
        let t0 = grid.time(j);
        let s0 = ((a - t0) / dt).clamp(0.0, 1.0);
        let s1 = ((b - t0) / dt).clamp(0.0, 1.0);
        if s1 <= s0 {
            continue;
        }
        let half_sq = 0.5 * (s1 * s1 - s0 * s0);
        w[j - first] += dt * ((s1 - s0) - half_sq);
        w[j + 1 - first] += dt * half_sq;
    }
    let inv = 1.0 / (b - a);
    w.into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .map(|(k, v)| (first + k, v * inv))
        .collect()
}
