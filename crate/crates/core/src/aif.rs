//! Arterial input functions: sampled curves and the Feng parametric family.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Curve samples on strictly increasing times (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    times: Vec<f64>,
    values: Vec<f64>,
}

/// Values resampled onto new times plus the number of points that fell past
/// the last sample and were held at the final value.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub values: Vec<f64>,
    pub extrapolated: usize,
}

impl SampledCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::invalid(
                "curve",
                format!("{} times but {} values", times.len(), values.len()),
            ));
        }
        if times.len() < 2 {
            return Err(Error::invalid("curve", "needs at least two samples"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("curve", "non-finite time"));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "curve",
                format!("times not strictly increasing at index {}", i + 1),
            ));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "curve",
                format!("value {} at index {i} is negative or non-finite", values[i]),
            ));
        }
        Ok(Self { times, values })
    }

    /// Sample `f` at the given times.
    pub fn from_fn(times: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.times.clone(),
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Piecewise-linear value at `t`, with a flag set when `t` lies past the
    /// last sample (the final value is held there).
    pub fn interp_flagged(&self, t: f64) -> (f64, bool) {
        let n = self.times.len();
        if t < self.times[0] {
            return (0.0, false);
        }
        if t >= self.times[n - 1] {
            return (self.values[n - 1], t > self.times[n - 1]);
        }
        // first index with times[k] > t; k >= 1 here
        let k = self.times.partition_point(|&x| x <= t);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        if t == t0 {
            return (v0, false);
        }
        let s = (t - t0) / (t1 - t0);
        (v0 + s * (v1 - v0), false)
    }

    pub fn interp(&self, t: f64) -> f64 {
        self.interp_flagged(t).0
    }

    pub fn resample(&self, times: &[f64]) -> Resampled {
        let mut extrapolated = 0;
        let values = times
            .iter()
            .map(|&t| {
                let (v, flagged) = self.interp_flagged(t);
                extrapolated += flagged as usize;
                v
            })
            .collect();
        Resampled {
            values,
            extrapolated,
        }
    }

    /// Running trapezoid integral on the same nodes (kBq·s/mL); starts at 0.
    pub fn cumulative_integral(&self) -> SampledCurve {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        out.push(0.0);
        for k in 1..self.len() {
            acc += 0.5 * (self.times[k] - self.times[k - 1]) * (self.values[k] + self.values[k - 1]);
            out.push(acc);
        }
        SampledCurve {
            times: self.times.clone(),
            values: out,
        }
    }

    /// Sample time of the largest value (first one on ties).
    pub fn peak(&self) -> (f64, f64) {
        let mut best = 0;
        for k in 1..self.len() {
            if self.values[k] > self.values[best] {
                best = k;
            }
        }
        (self.times[best], self.values[best])
    }

    /// Read a `time_s,value_kbq_ml` CSV.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file).map_err(|e| match e {
            Error::Csv { source, .. } => Error::Csv {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: "<reader>".into(),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() != 2 || &headers[0] != "time_s" || &headers[1] != "value_kbq_ml" {
            return Err(Error::invalid(
                "AIF CSV",
                format!("expected header `time_s,value_kbq_ml`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| {
                    Error::invalid("AIF CSV", format!("row {}: cannot parse `{}`", row + 1, &rec[i]))
                })
            };
            times.push(parse(0)?);
            values.push(parse(1)?);
        }
        Self::new(times, values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file).map_err(|e| Error::io(path, e))
    }

    /// Shortest round-trip float formatting, so rereading gives identical values.
    pub fn write_csv_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut buf = String::with_capacity(24 * self.len() + 20);
        buf.push_str("time_s,value_kbq_ml\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            buf.push_str(&format!("{t},{v}\n"));
        }
        w.write_all(buf.as_bytes())
    }
}

/// Feng-type input function:
/// `(A1·u − A2 − A3)·e^{λ1·u} + A2·e^{λ2·u} + A3·e^{λ3·u}` for `u = (t − τ)` in
/// minutes, zero before the onset `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FengAif {
    /// Onset delay in seconds.
    #[serde(rename = "tau_s")]
    pub tau: f64,
    /// kBq/mL/min
    pub a1: f64,
    /// kBq/mL
    pub a2: f64,
    /// kBq/mL
    pub a3: f64,
    /// 1/min
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for FengAif {
    fn default() -> Self {
        Self {
            tau: 30.0,
            a1: 800.0,
            a2: 20.0,
            a3: 20.0,
            l1: -4.0,
            l2: -0.1,
            l3: -0.01,
        }
    }
}

/// Number of Feng parameters, in the order `tau, a1, a2, a3, l1, l2, l3`.
pub const FENG_PARAMS: usize = 7;

impl FengAif {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tau, self.a1, self.a2, self.a3, self.l1, self.l2, self.l3];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Feng AIF", "non-finite parameter"));
        }
        if !(self.l1 < self.l2 && self.l2 < self.l3 && self.l3 < 0.0) {
            return Err(Error::invalid(
                "Feng AIF",
                format!(
                    "need l1 < l2 < l3 < 0, got ({}, {}, {})",
                    self.l1, self.l2, self.l3
                ),
            ));
        }
        if !(self.a1 > 0.0 && self.a2 >= 0.0 && self.a3 >= 0.0) {
            return Err(Error::invalid("Feng AIF", "need a1 > 0, a2 >= 0, a3 >= 0"));
        }
        if self.tau < 0.0 {
            return Err(Error::invalid("Feng AIF", "onset tau_s must be >= 0"));
        }
        Ok(())
    }

    /// Value at `t` seconds with a flag that is set when the formula went
    /// negative and was clamped to zero.
    pub fn eval_flagged(&self, t: f64) -> (f64, bool) {
        let raw = self.eval_raw(t);
        if raw < 0.0 {
            (0.0, true)
        } else {
            (raw, false)
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_flagged(t).0
    }

    fn eval_raw(&self, t: f64) -> f64 {
        if t <= self.tau {
            return 0.0;
        }
        let u = (t - self.tau) / 60.0;
        (self.a1 * u - self.a2 - self.a3) * (self.l1 * u).exp()
            + self.a2 * (self.l2 * u).exp()
            + self.a3 * (self.l3 * u).exp()
    }

    /// Clamped value and its partial derivatives with respect to
    /// `(tau, a1, a2, a3, l1, l2, l3)`. Clamped points have zero gradient.
    pub fn eval_with_gradient(&self, t: f64) -> (f64, [f64; FENG_PARAMS]) {
        if t <= self.tau {
            return (0.0, [0.0; FENG_PARAMS]);
        }
        let u = (t - self.tau) / 60.0;
        let e1 = (self.l1 * u).exp();
        let e2 = (self.l2 * u).exp();
        let e3 = (self.l3 * u).exp();
        let lead = self.a1 * u - self.a2 - self.a3;
        let value = lead * e1 + self.a2 * e2 + self.a3 * e3;
        if value < 0.0 {
            return (0.0, [0.0; FENG_PARAMS]);
        }
        let d_du = self.a1 * e1 + self.l1 * lead * e1 + self.a2 * self.l2 * e2 + self.a3 * self.l3 * e3;
        let grad = [
            -d_du / 60.0,
            u * e1,
            e2 - e1,
            e3 - e1,
            lead * u * e1,
            self.a2 * u * e2,
            self.a3 * u * e3,
        ];
        (value, grad)
    }

    /// Sample on the given times.
    pub fn sample(&self, times: &[f64]) -> Result<SampledCurve> {
        SampledCurve::from_fn(times.to_vec(), |t| self.eval(t))
    }

    pub fn scale_amplitudes(&self, factor: f64) -> Self {
        Self {
            a1: self.a1 * factor,
            a2: self.a2 * factor,
            a3: self.a3 * factor,
            ..*self
        }
    }

    pub fn to_array(&self) -> [f64; FENG_PARAMS] {
        [self.tau, self.a1, self.a2, self.a3, self.l1, self.l2, self.l3]
    }

    pub fn from_array(p: [f64; FENG_PARAMS]) -> Self {
        Self {
            tau: p[0],
            a1: p[1],
            a2: p[2],
            a3: p[3],
            l1: p[4],
            l2: p[5],
            l3: p[6],
        }
    }
}
