//! Signal-cleaning primitives: IIR notch and Butterworth band-pass filters,
//! kurtosis-based component rejection, per-channel normalisation and
//! overlapping windowing.
//!
//! Filters are cascades of second-order sections run in transposed direct
//! form II. The sampling rate always comes from the signal.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels x samples, with the sampling rate in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelSignal {
    data: Vec<Vec<f64>>,
    fs: f64,
}

impl MultiChannelSignal {
    pub fn new(data: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::Config(format!("sampling rate must be positive, got {fs}")));
        }
        let n = data.first().map_or(0, Vec::len);
        if data.is_empty() || n == 0 {
            return Err(Error::Empty("signal"));
        }
        if data.iter().any(|c| c.len() != n) {
            return Err(Error::shape("channels have different lengths"));
        }
        Ok(Self { data, fs })
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data[0].len()
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.data
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            data: self.data.iter().map(|c| f(c)).collect(),
            fs: self.fs,
        }
    }

    /// One comma-separated row per channel.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for ch in &self.data {
            for (i, v) in ch.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, fs: f64) -> Result<Self> {
        let data = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| crate::metrics::parse_floats(&l.split(',').collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(data, fs)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    fs: f64,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Write `path` (CSV, row per channel) and its `{ "fs": .. }` sidecar.
pub fn write_signal(sig: &MultiChannelSignal, path: &Path) -> Result<()> {
    fs::write(path, sig.to_csv()).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string(&Sidecar { fs: sig.fs })?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_signal(path: &Path) -> Result<MultiChannelSignal> {
    let side = sidecar_path(path);
    let meta: Sidecar = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MultiChannelSignal::from_csv(&text, meta.fs)
}

/// Second-order section, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&xn| {
                let y = self.b0 * xn + s1;
                s1 = self.b1 * xn - self.a1 * y + s2;
                s2 = self.b2 * xn - self.a2 * y;
                y
            })
            .collect()
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    pub fs: f64,
}

impl SosFilter {
    /// Constrained biquad notch at `f0` with bandwidth `f0 / q`.
    pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Self> {
        if !(f0 > 0.0 && f0 < fs / 2.0) {
            return Err(Error::Config(format!(
                "notch frequency {f0} Hz must lie in (0, {})",
                fs / 2.0
            )));
        }
        if !(q > 0.0) {
            return Err(Error::Config(format!("quality factor must be positive, got {q}")));
        }
        let w0 = 2.0 * PI * f0 / fs;
        let bw = w0 / q;
        let gain = 1.0 / (1.0 + (bw / 2.0).tan());
        let c = w0.cos();
        Ok(Self {
            sections: vec![Biquad {
                b0: gain,
                b1: -2.0 * gain * c,
                b2: gain,
                a1: -2.0 * gain * c,
                a2: 2.0 * gain - 1.0,
            }],
            fs,
        })
    }

    /// Butterworth band-pass from an `order`-pole low-pass prototype, giving
    /// `order` biquads (`2 * order` poles) after the band transform and the
    /// prewarped bilinear map. Unity gain at the geometric band centre.
    pub fn butterworth_bandpass(lo: f64, hi: f64, order: usize, fs: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
            return Err(Error::Config(format!(
                "band {lo}-{hi} Hz must satisfy 0 < lo < hi < {}",
                fs / 2.0
            )));
        }
        if order == 0 {
            return Err(Error::Config("filter order must be >= 1".into()));
        }
        let k = 2.0 * fs;
        let w_lo = k * (PI * lo / fs).tan();
        let w_hi = k * (PI * hi / fs).tan();
        let bw = w_hi - w_lo;
        let w0_sq = w_lo * w_hi;

        let mut upper = Vec::new();
        let mut real = Vec::new();
        for i in 0..order {
            let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let disc = (p * p * bw * bw - 4.0 * w0_sq).sqrt();
            for s in [(p * bw + disc) / 2.0, (p * bw - disc) / 2.0] {
                let z = (k + s) / (k - s);
                if z.im > 1e-12 {
                    upper.push(z);
                } else if z.im.abs() <= 1e-12 {
                    real.push(z.re);
                }
            }
        }
        real.sort_by(f64::total_cmp);
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|z| Biquad {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1: -2.0 * z.re,
                a2: z.norm_sqr(),
            })
            .collect();
        for pair in real.chunks(2) {
            let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
            sections.push(Biquad {
                b0: 1.0,
                b1: 0.0,
                b2: -1.0,
                a1: -(r1 + r2),
                a2: r1 * r2,
            });
        }
        debug_assert_eq!(sections.len(), order);
        let mut filter = Self { sections, fs };
        let centre = (w0_sq.sqrt() / k).atan() * fs / PI;
        let g = filter.magnitude(centre);
        let first = &mut filter.sections[0];
        first.b0 /= g;
        first.b1 /= g;
        first.b2 /= g;
        Ok(filter)
    }

    /// Causal filtering of one channel.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.sections.iter().fold(x.to_vec(), |acc, s| s.process(&acc))
    }

    /// Forward then time-reversed pass: zero phase, squared magnitude.
    pub fn apply_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.apply(x);
        y.reverse();
        let mut y = self.apply(&y);
        y.reverse();
        y
    }

    /// `|H(e^{j 2 pi f / fs})|` of the causal cascade.
    pub fn magnitude(&self, freq: f64) -> f64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / self.fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
            .norm()
    }
}

pub fn notch_filter(sig: &MultiChannelSignal, f0: f64, q: f64) -> Result<MultiChannelSignal> {
    let f = SosFilter::notch(f0, q, sig.fs)?;
    Ok(sig.map_channels(|c| f.apply(c)))
}

/// Zero-phase (forward-backward) Butterworth band-pass.
pub fn butterworth_bandpass(sig: &MultiChannelSignal, lo: f64, hi: f64, order: usize) -> Result<MultiChannelSignal> {
    let f = SosFilter::butterworth_bandpass(lo, hi, order, sig.fs)?;
    Ok(sig.map_channels(|c| f.apply_zero_phase(c)))
}

/// Single forward pass of the same Butterworth band-pass.
pub fn butterworth_bandpass_causal(
    sig: &MultiChannelSignal,
    lo: f64,
    hi: f64,
    order: usize,
) -> Result<MultiChannelSignal> {
    let f = SosFilter::butterworth_bandpass(lo, hi, order, sig.fs)?;
    Ok(sig.map_channels(|c| f.apply(c)))
}

fn central_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in x {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    (mean, m2 / n, m4 / n)
}

/// Population excess kurtosis `m4 / m2^2 - 3`.
pub fn excess_kurtosis(x: &[f64]) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::Degenerate(format!(
            "kurtosis needs >= 4 samples, got {}",
            x.len()
        )));
    }
    let (_, m2, m4) = central_moments(x);
    if !(m2 > 0.0) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

/// Zero every component whose kurtosis z-score (across components) exceeds
/// `z_thresh` in absolute value. Returns the cleaned components and the
/// rejected indices.
pub fn reject_by_kurtosis(components: &[Vec<f64>], z_thresh: f64) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if components.len() < 2 {
        return Err(Error::Degenerate("need at least 2 components to z-score".into()));
    }
    let kurt = components
        .iter()
        .map(|c| excess_kurtosis(c))
        .collect::<Result<Vec<_>>>()?;
    let n = kurt.len() as f64;
    let mean = kurt.iter().sum::<f64>() / n;
    let std = (kurt.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut cleaned = components.to_vec();
    let mut rejected = Vec::new();
    if std > 0.0 {
        for (i, k) in kurt.iter().enumerate() {
            if ((k - mean) / std).abs() > z_thresh {
                cleaned[i].iter_mut().for_each(|v| *v = 0.0);
                rejected.push(i);
            }
        }
    }
    Ok((cleaned, rejected))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub chunk: usize,
    pub overlap: usize,
}

impl WindowSpec {
    pub fn new(chunk: usize, overlap: usize) -> Result<Self> {
        if chunk == 0 || overlap >= chunk {
            return Err(Error::Config(format!(
                "need 0 <= overlap < chunk, got {overlap}, {chunk}"
            )));
        }
        Ok(Self { chunk, overlap })
    }

    pub fn stride(&self) -> usize {
        self.chunk - self.overlap
    }

    /// `floor((n - chunk) / stride) + 1`, or 0 when `n < chunk`.
    pub fn count(&self, n: usize) -> usize {
        if n < self.chunk {
            0
        } else {
            (n - self.chunk) / self.stride() + 1
        }
    }
}

/// Overlapping windows starting at `0, stride, 2 * stride, ..`.
pub fn window_segments(sig: &MultiChannelSignal, spec: WindowSpec) -> Result<Vec<MultiChannelSignal>> {
    let spec = WindowSpec::new(spec.chunk, spec.overlap)?;
    let n = sig.n_samples();
    if n < spec.chunk {
        return Err(Error::Empty("signal shorter than one window"));
    }
    Ok((0..spec.count(n))
        .map(|w| {
            let start = w * spec.stride();
            MultiChannelSignal {
                data: sig.data.iter().map(|c| c[start..start + spec.chunk].to_vec()).collect(),
                fs: sig.fs,
            }
        })
        .collect())
}

/// Per-channel zero mean, unit population standard deviation.
pub fn mean_std_normalize(sig: &MultiChannelSignal) -> Result<MultiChannelSignal> {
    let mut data = Vec::with_capacity(sig.n_channels());
    for (i, c) in sig.data.iter().enumerate() {
        let (mean, var, _) = central_moments(c);
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("channel {i} is constant")));
        }
        let std = var.sqrt();
        data.push(c.iter().map(|v| (v - mean) / std).collect());
    }
    Ok(MultiChannelSignal { data, fs: sig.fs })
}
