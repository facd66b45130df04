//! Macro-path signal conditioning: rectified low-pass envelope, μ-law
//! compression and fixed-size overlapping windows.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::signal_model::grid_windows;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub cutoff_hz: f64,
    pub fs: f64,
    pub filter_order: usize,
    pub mu: f64,
    pub window_len: usize,
    pub skip: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cutoff_hz: 1.0,
            fs: 2048.0,
            filter_order: 4,
            mu: 255.0,
            window_len: 512,
            skip: 256,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < self.fs / 2.0) {
            return Err(Error::InvalidParam(format!(
                "cutoff {} Hz must lie in (0, fs/2 = {})",
                self.cutoff_hz,
                self.fs / 2.0
            )));
        }
        if self.filter_order == 0 || !self.filter_order.is_multiple_of(2) {
            return Err(Error::InvalidParam("filter order must be even and positive".into()));
        }
        if self.mu <= 0.0 {
            return Err(Error::InvalidParam(format!("mu = {} must be positive", self.mu)));
        }
        if self.window_len == 0 || self.skip == 0 || self.skip > self.window_len {
            return Err(Error::InvalidParam("need 0 < skip <= window_len".into()));
        }
        Ok(())
    }

    pub fn pad_len(&self) -> usize {
        3 * self.filter_order
    }
}

/// One biquad: numerator b0..b2, denominator 1, a1, a2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Transposed direct-form II state for a constant unit input.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        [self.b[1] - self.a[1] * g + z2, z2]
    }
}

/// Digital Butterworth low-pass as second-order sections (bilinear transform
/// with frequency prewarping, unit DC gain).
pub fn butter_lowpass_sos(order: usize, cutoff_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(Error::InvalidParam("filter order must be even and positive".into()));
    }
    let warped = 2.0 * fs * (PI * cutoff_hz / fs).tan();
    let mut sections = Vec::with_capacity(order / 2);
    for k in 0..order / 2 {
        // Upper-half-plane analog pole; its conjugate completes the section.
        let theta = PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
        let (pr, pi) = (warped * theta.cos(), warped * theta.sin());
        // z = (2fs + p) / (2fs − p)
        let (nr, ni) = (2.0 * fs + pr, pi);
        let (dr, di) = (2.0 * fs - pr, -pi);
        let den = dr * dr + di * di;
        let zr = (nr * dr + ni * di) / den;
        let zi = (ni * dr - nr * di) / den;
        let mag2 = zr * zr + zi * zi;
        if !mag2.is_finite() || mag2.sqrt() >= 1.0 {
            return Err(Error::UnstableFilter(format!(
                "pole magnitude {} for cutoff {cutoff_hz} Hz at fs {fs} Hz",
                mag2.sqrt()
            )));
        }
        let a = [1.0, -2.0 * zr, mag2];
        let g = (a[0] + a[1] + a[2]) / 4.0;
        sections.push(Biquad {
            b: [g, 2.0 * g, g],
            a,
        });
    }
    Ok(sections)
}

/// Level the filter state is initialized to at each end of the padded signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialLevel {
    /// First sample of the padded sequence (the common library convention).
    EdgeSample,
    /// Mean of the padded sequence for the forward pass, then the first
    /// sample of the (already smooth) forward output for the backward pass.
    /// Robust for short, spiky inputs where a single raw sample is a poor
    /// estimate of the local level.
    Mean,
}

fn sosfilt_in_place(sos: &[Biquad], x: &mut [f64], level: f64) {
    let mut gain = 1.0;
    for s in sos {
        let ss = s.steady_state();
        let (mut z1, mut z2) = (ss[0] * gain * level, ss[1] * gain * level);
        gain *= s.dc_gain();
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[1] * y + z2;
            z2 = s.b[2] * xin - s.a[2] * y;
            *v = y;
        }
    }
}

fn forward_level(x: &[f64], mode: InitialLevel) -> f64 {
    match mode {
        InitialLevel::EdgeSample => x[0],
        InitialLevel::Mean => x.iter().sum::<f64>() / x.len() as f64,
    }
}

/// Zero-phase forward-backward filtering with odd reflection of `pad`
/// samples at both ends and steady-state initial conditions.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64], pad: usize, mode: InitialLevel) -> Result<Vec<f64>> {
    let n = x.len();
    if n <= pad {
        return Err(Error::Shape(format!("signal of {n} samples needs more than {pad}")));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * x[n - 1] - x[n - 1 - k]));

    let lv = forward_level(&ext, mode);
    sosfilt_in_place(sos, &mut ext, lv);
    ext.reverse();
    let lv = ext[0];
    sosfilt_in_place(sos, &mut ext, lv);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Per-channel positive envelope of a [C, D] signal: rectify, zero-phase
/// low-pass, clamp filter undershoot at 0.
pub fn envelope(x: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (c, d) = x.dim();
    if d <= cfg.pad_len() {
        return Err(Error::Shape(format!(
            "signal of {d} samples needs more than {} for filtering",
            cfg.pad_len()
        )));
    }
    let sos = butter_lowpass_sos(cfg.filter_order, cfg.cutoff_hz, cfg.fs)?;
    let mut out = Array2::zeros((c, d));
    for (ch, row) in x.axis_iter(Axis(0)).enumerate() {
        let rect: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        let y = sosfiltfilt(&sos, &rect, cfg.pad_len(), InitialLevel::Mean)?;
        for (t, v) in y.into_iter().enumerate() {
            out[[ch, t]] = v.max(0.0);
        }
    }
    Ok(out)
}

/// μ-law companding of a single value already in [−1, 1].
pub fn mu_law(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

/// Rescales by the maximum absolute value, then applies μ-law elementwise.
/// An all-zero input stays all zero.
pub fn mu_law_normalize<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    mu: f64,
) -> Result<ndarray::Array<f64, D>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParam(format!("mu = {mu} must be positive")));
    }
    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return Ok(x.mapv(|_| 0.0));
    }
    Ok(x.mapv(|v| if v == 0.0 { 0.0 } else { mu_law(v / peak, mu) }))
}

/// Overlapping (time, row, col) windows of a 128-channel signal.
pub fn window(x: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Vec<Array3<f64>>> {
    grid_windows(x, cfg.window_len, cfg.skip)
}

/// Macro view of one repetition: envelope, μ-law over the whole repetition,
/// then windowing.
pub fn macro_windows(x: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Vec<Array3<f64>>> {
    let env = envelope(x, cfg)?;
    let norm = mu_law_normalize(&env, cfg.mu)?;
    window(norm.view(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(sos: &[Biquad]) -> Vec<[f64; 6]> {
        sos.iter()
            .map(|s| [s.b[0], s.b[1], s.b[2], s.a[0], s.a[1], s.a[2]])
            .collect()
    }

    fn sorted_by_a2(mut v: Vec<[f64; 6]>) -> Vec<[f64; 6]> {
        v.sort_by(|p, q| p[5].partial_cmp(&q[5]).unwrap());
        v
    }

    /// Denominators from scipy.signal.butter(4, fc, fs=2048, output="sos").
    #[test]
    fn coefficients_match_reference_design() {
        let cases = [
            (1.0, [(-1.9943377917894094, 0.9943471775669982), (-1.9976452397912332, 0.9976546411343754)]),
            (100.0, [(-1.4906853535747362, 0.5637007324750434), (-1.7090881897476977, 0.7928011754889318)]),
        ];
        for (fc, dens) in cases {
            let got = sorted_by_a2(flat(&butter_lowpass_sos(4, fc, 2048.0).unwrap()));
            for (s, (a1, a2)) in got.iter().zip(dens) {
                assert!((s[4] - a1).abs() < 1e-12, "{fc}: a1 {} vs {a1}", s[4]);
                assert!((s[5] - a2).abs() < 1e-12, "{fc}: a2 {} vs {a2}", s[5]);
            }
            // Overall numerator gain: product of section b0 equals the reference.
            let k: f64 = got.iter().map(|s| s[0]).product();
            let reference: f64 = if fc == 1.0 {
                5.5149322355884525e-12
            } else {
                3.8202096079826365e-04
            };
            assert!((k - reference).abs() < 1e-9 * reference);
        }
    }

    /// Samples of scipy.signal.sosfiltfilt(sos, x, padlen=12) for the 100 Hz
    /// design, x[n] = |sin(0.3n)| + 0.1·cos(0.05n), n < 200.
    #[test]
    fn filtfilt_matches_reference_implementation() {
        let x: Vec<f64> = (0..200)
            .map(|n| (0.3 * n as f64).sin().abs() + 0.1 * (0.05 * n as f64).cos())
            .collect();
        let sos = butter_lowpass_sos(4, 100.0, 2048.0).unwrap();
        let y = sosfiltfilt(&sos, &x, 12, InitialLevel::EdgeSample).unwrap();
        let idx = [0, 1, 50, 100, 150, 198, 199];
        let want = [
            0.07705111913084235,
            0.21901265938520384,
            0.5576742474774325,
            0.6679839018050013,
            0.6724026285858409,
            0.06388105839858285,
            -0.04782480501621834,
        ];
        for (&i, w) in idx.iter().zip(want) {
            assert!((y[i] - w).abs() < 1e-9, "y[{i}] = {} vs {w}", y[i]);
        }
    }

    #[test]
    fn nyquist_cutoff_rejected() {
        let cfg = PreprocessConfig {
            cutoff_hz: 1024.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(matches!(
            butter_lowpass_sos(4, 1024.0, 2048.0),
            Err(Error::UnstableFilter(_))
        ));
    }

    #[test]
    fn constant_passes_through() {
        let cfg = PreprocessConfig::default();
        for c in [0.0, 0.5, 3.0] {
            let x = Array2::from_elem((2, 700), c);
            let e = envelope(x.view(), &cfg).unwrap();
            assert!(e.iter().all(|v| (v - c).abs() <= 1e-3 * c + 1e-15));
        }
    }

    #[test]
    fn sine_envelope_is_mean_of_rectified_sine() {
        let cfg = PreprocessConfig::default();
        let n = 4 * 2048;
        let x = Array2::from_shape_fn((1, n), |(_, t)| (2.0 * PI * 50.0 * t as f64 / 2048.0).sin());
        let e = envelope(x.view(), &cfg).unwrap();
        let target = 2.0 / PI;
        for t in (n / 4..3 * n / 4).step_by(97) {
            assert!((e[[0, t]] - target).abs() < 0.02 * target, "{}", e[[0, t]]);
        }
    }

    #[test]
    fn impulse_train_hump_is_centered() {
        let cfg = PreprocessConfig::default();
        let n = 8192;
        let mut x = Array2::zeros((1, n));
        for t in (3000..5001).step_by(50) {
            x[[0, t]] = 1.0;
        }
        let e = envelope(x.view(), &cfg).unwrap();
        let row = e.row(0);
        assert!(row.iter().all(|&v| v >= 0.0));
        let peak = (0..n).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert!((peak as i64 - 4000).abs() <= 1, "peak at {peak}");
    }

    #[test]
    fn envelope_is_nearly_idempotent() {
        // A 1 Hz filter rings for about a second at each edge, so the record
        // has to be long compared with that for the transients to average out.
        let cfg = PreprocessConfig::default();
        let n = 20 * 2048;
        let x = Array2::from_shape_fn((1, n), |(_, t)| {
            let t = t as f64;
            (0.7 * t).sin() * (1.0 + 0.5 * (2.0 * PI * 0.5 * t / 2048.0).sin())
        });
        let e1 = envelope(x.view(), &cfg).unwrap();
        let e2 = envelope(e1.view(), &cfg).unwrap();
        let rms = |a: &Array2<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!(rms(&(&e2 - &e1)) < 0.01 * rms(&e1));
    }

    #[test]
    fn mu_law_fixed_points_and_closed_form() {
        assert_eq!(mu_law(0.0, 255.0), 0.0);
        assert!((mu_law(1.0, 255.0) - 1.0).abs() < 1e-15);
        assert!((mu_law(-1.0, 255.0) + 1.0).abs() < 1e-15);
        let expect = 26.5f64.ln() / 256f64.ln();
        assert!((mu_law(0.1, 255.0) - expect).abs() < 1e-15);
        assert!((expect - 0.590990).abs() < 1e-6);
        assert!(mu_law_normalize(&ndarray::arr1(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn mu_law_rescales_and_handles_zero() {
        let x = ndarray::arr1(&[0.0, 0.2, -2.0]);
        let y = mu_law_normalize(&x, 255.0).unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - mu_law(0.1, 255.0)).abs() < 1e-15);
        assert!((y[2] + 1.0).abs() < 1e-15);
        let z = mu_law_normalize(&ndarray::Array1::<f64>::zeros(4), 255.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mu_law_is_monotone() {
        let ys: Vec<f64> = (0..1000).map(|k| mu_law(-1.0 + 2.0 * k as f64 / 999.0, 255.0)).collect();
        assert!(ys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn window_counts_and_overlap() {
        let cfg = PreprocessConfig::default();
        let x = Array2::from_shape_fn((128, 1024), |(c, t)| (c * 1024 + t) as f64);
        let w = window(x.view(), &cfg).unwrap();
        assert_eq!(w.len(), 3);
        for k in 0..2 {
            let tail = w[k].slice(ndarray::s![256.., .., ..]);
            let head = w[k + 1].slice(ndarray::s![..256, .., ..]);
            assert_eq!(tail, head);
        }
        let x512 = Array2::<f64>::zeros((128, 512));
        assert_eq!(window(x512.view(), &cfg).unwrap().len(), 1);
        let x900 = Array2::<f64>::zeros((128, 900));
        assert_eq!(window(x900.view(), &cfg).unwrap().len(), 2);
        let bad = Array2::<f64>::zeros((64, 1024));
        assert!(window(bad.view(), &cfg).is_err());
    }
}
