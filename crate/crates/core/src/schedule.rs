//! Time-domain input and label streams.
//!
//! Sample `k` occupies a plateau `[t_start + k*P, t_start + k*P + T]` with
//! period `P = T + buffer`; during the following buffer the signal blends into
//! sample `k + 1` (or into zero after the last sample). The label stream is
//! the same construction evaluated at `t - delay`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("time {t} is outside the schedule horizon [{start}, {end}]")]
    Exhausted { t: f64, start: f64, end: f64 },
    #[error("invalid dither ratio: {0}")]
    InvalidRatio(String),
}

/// Blend profile used across buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// `3u^2 - 2u^3`, C1 across buffer boundaries.
    #[default]
    Smoothstep,
    Linear,
}

impl Interpolation {
    #[inline]
    pub fn weight(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Interpolation::Smoothstep => u * u * (3.0 - 2.0 * u),
            Interpolation::Linear => u,
        }
    }
}

/// Default buffer: a tenth of the sample time, at most 5 ms.
pub fn default_buffer_time(sample_time: f64) -> f64 {
    (sample_time / 10.0).min(0.005)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentationSchedule {
    sample_time: f64,
    buffer_time: f64,
    delay: f64,
    t_start: f64,
    interpolation: Interpolation,
    inputs: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
}

impl PresentationSchedule {
    pub fn new(
        sample_time: f64,
        buffer_time: f64,
        delay: f64,
        t_start: f64,
        inputs: Vec<Vec<f64>>,
        labels: Vec<Vec<f64>>,
    ) -> Result<Self, ScheduleError> {
        let invalid = |m: String| Err(ScheduleError::Invalid(m));
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return invalid(format!("sample_time must be positive, got {sample_time}"));
        }
        if !(buffer_time > 0.0 && buffer_time < sample_time) {
            return invalid(format!("need 0 < buffer_time < sample_time, got {buffer_time}"));
        }
        if !delay.is_finite() || !t_start.is_finite() {
            return invalid("delay and t_start must be finite".into());
        }
        if inputs.is_empty() {
            return invalid("schedule needs at least one sample".into());
        }
        if inputs.len() != labels.len() {
            return invalid(format!("{} inputs but {} labels", inputs.len(), labels.len()));
        }
        let din = inputs[0].len();
        let dout = labels[0].len();
        if inputs.iter().any(|x| x.len() != din) || labels.iter().any(|y| y.len() != dout) {
            return invalid("all samples must share one dimension".into());
        }
        Ok(Self { sample_time, buffer_time, delay, t_start, interpolation: Interpolation::Smoothstep, inputs, labels })
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// Same timing, different samples (e.g. a test stream).
    pub fn with_samples(&self, inputs: Vec<Vec<f64>>, labels: Vec<Vec<f64>>) -> Result<Self, ScheduleError> {
        Ok(Self::new(self.sample_time, self.buffer_time, self.delay, self.t_start, inputs, labels)?
            .with_interpolation(self.interpolation))
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }
    pub fn buffer_time(&self) -> f64 {
        self.buffer_time
    }
    pub fn delay(&self) -> f64 {
        self.delay
    }
    pub fn t_start(&self) -> f64 {
        self.t_start
    }
    pub fn period(&self) -> f64 {
        self.sample_time + self.buffer_time
    }
    pub fn len(&self) -> usize {
        self.inputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }
    pub fn label_dim(&self) -> usize {
        self.labels[0].len()
    }
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }
    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    /// End of the whole stream (after the last buffer).
    pub fn t_end(&self) -> f64 {
        self.sample_start(self.len())
    }

    /// Start of sample `k`'s plateau.
    pub fn sample_start(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.period()
    }

    /// End of sample `k`'s plateau, where its prediction is read out.
    pub fn sample_end(&self, k: usize) -> f64 {
        self.sample_start(k) + self.sample_time
    }

    fn check_horizon(&self, t: f64) -> Result<(), ScheduleError> {
        if t < self.t_start || t > self.t_end() || !t.is_finite() {
            return Err(ScheduleError::Exhausted { t, start: self.t_start, end: self.t_end() });
        }
        Ok(())
    }

    pub fn input_at(&self, t: f64) -> Result<Vec<f64>, ScheduleError> {
        self.check_horizon(t)?;
        let mut out = vec![0.0; self.input_dim()];
        self.input_into(t, &mut out);
        Ok(out)
    }

    pub fn label_at(&self, t: f64) -> Result<Vec<f64>, ScheduleError> {
        self.check_horizon(t)?;
        let mut out = vec![0.0; self.label_dim()];
        self.label_into(t, &mut out);
        Ok(out)
    }

    /// Input stream at `t` without horizon checks; zero outside the stream.
    #[inline]
    pub fn input_into(&self, t: f64, out: &mut [f64]) {
        self.stream_into(&self.inputs, t, out);
    }

    /// Label stream at `t` (i.e. sample stream at `t - delay`); zero outside.
    #[inline]
    pub fn label_into(&self, t: f64, out: &mut [f64]) {
        self.stream_into(&self.labels, t - self.delay, out);
    }

    /// Whether the (delayed) label stream has started and not yet ended at `t`.
    #[inline]
    pub fn label_active(&self, t: f64) -> bool {
        let s = t - self.delay;
        s >= self.t_start && s < self.t_end()
    }

    fn stream_into(&self, stream: &[Vec<f64>], s: f64, out: &mut [f64]) {
        let p = self.period();
        let u = s - self.t_start;
        let n = stream.len();
        if !(u >= 0.0) || u >= n as f64 * p {
            out.fill(0.0);
            return;
        }
        let k = ((u / p).floor() as usize).min(n - 1);
        let r = u - k as f64 * p;
        let cur = &stream[k];
        if r <= self.sample_time {
            out.copy_from_slice(cur);
            return;
        }
        let w = self.interpolation.weight((r - self.sample_time) / self.buffer_time);
        match stream.get(k + 1) {
            Some(next) => {
                for ((o, a), b) in out.iter_mut().zip(cur).zip(next) {
                    *o = w * b + (1.0 - w) * a;
                }
            }
            None => {
                for (o, a) in out.iter_mut().zip(cur) {
                    *o = (1.0 - w) * a;
                }
            }
        }
    }

    /// Sorted, deduplicated plateau/buffer boundaries of both streams inside
    /// the open interval `(t0, t1)`.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if !(t0 < t1) {
            return out;
        }
        let p = self.period();
        for shift in [0.0, self.delay] {
            let first = ((t0 - shift - self.t_start) / p).floor() - 1.0;
            let last = ((t1 - shift - self.t_start) / p).ceil() + 1.0;
            let lo = first.clamp(0.0, self.len() as f64) as usize;
            let hi = last.clamp(0.0, self.len() as f64) as usize;
            for k in lo..=hi {
                let start = self.sample_start(k) + shift;
                let end = self.sample_end(k) + shift;
                for b in [start, end] {
                    if b > t0 && b < t1 && (k < self.len() || b == start) {
                        out.push(b);
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        let tol = 1e-9 * self.period();
        out.dedup_by(|a, b| (*a - *b).abs() <= tol);
        out
    }
}

/// A delay ratio `p / q` in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitherRatio {
    pub p: u32,
    pub q: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl DitherRatio {
    pub fn new(p: u32, q: u32) -> Result<Self, ScheduleError> {
        if q == 0 {
            return Err(ScheduleError::InvalidRatio("denominator is zero".into()));
        }
        if p > q {
            return Err(ScheduleError::InvalidRatio(format!("{p}/{q} exceeds 1")));
        }
        let g = gcd(p, q).max(1);
        Ok(Self { p: p / g, q: q / g })
    }

    /// Closest fraction to `r` with denominator at most `max_den`.
    pub fn approximate(r: f64, max_den: u32) -> Result<Self, ScheduleError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(ScheduleError::InvalidRatio(format!("ratio {r} outside [0, 1]")));
        }
        let (mut best_p, mut best_q, mut best_err) = (0u32, 1u32, f64::INFINITY);
        for q in 1..=max_den.max(1) {
            let p = (r * q as f64).round() as u32;
            let err = (r - p as f64 / q as f64).abs();
            if err < best_err - 1e-15 {
                (best_p, best_q, best_err) = (p, q, err);
            }
        }
        Self::new(best_p, best_q)
    }

    pub fn value(&self) -> f64 {
        self.p as f64 / self.q as f64
    }

    /// Whether position `j` within a block of `q` samples uses the previous
    /// label. Mismatches are spread evenly across the block.
    pub fn is_mismatched(&self, j: usize) -> bool {
        let (p, q) = (self.p as usize, self.q as usize);
        let j = j % q;
        (j + 1) * p / q > j * p / q
    }
}

/// Relabels a sample sequence so that exactly `p` of every `q` consecutive
/// samples carry the previous sample's label. Sample 0 wraps to the last
/// label.
pub fn dither_labels(labels: &[usize], ratio: DitherRatio) -> Vec<usize> {
    let n = labels.len();
    (0..n)
        .map(|i| if ratio.is_mismatched(i) { labels[(i + n - 1) % n] } else { labels[i] })
        .collect()
}
