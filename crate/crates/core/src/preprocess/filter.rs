//! Second-order IIR sections and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

/// One normalized biquad section (`a0 = 1`), run in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    /// Second-order Butterworth high-pass (bilinear transform, prewarped).
    pub fn butterworth_highpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        Self::normalized(
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
            [1.0 + alpha, -2.0 * cos, 1.0 - alpha],
        )
    }

    /// Second-order Butterworth low-pass (bilinear transform, prewarped).
    pub fn butterworth_lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        Self::normalized(
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            [1.0 + alpha, -2.0 * cos, 1.0 - alpha],
        )
    }

    /// Band-stop at `freq_hz` with quality factor `q`.
    pub fn notch(freq_hz: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * freq_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        Self::normalized([1.0, -2.0 * cos, 1.0], [1.0 + alpha, -2.0 * cos, 1.0 - alpha])
    }

    /// Gain at DC.
    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// `|H(e^{jw})|` at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / fs;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num_re = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let num_im = self.b[1] * s1 + self.b[2] * s2;
        let den_re = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let den_im = self.a[0] * s1 + self.a[1] * s2;
        (num_re.hypot(num_im)) / (den_re.hypot(den_im))
    }

    /// Run over `x` in place starting from the steady state of a constant
    /// input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let g = self.dc_gain();
        let mut s2 = (self.b[2] - self.a[1] * g) * x0;
        let mut s1 = (self.b[1] - self.a[0] * g) * x0 + s2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + s1;
            s1 = self.b[1] * xin - self.a[0] * y + s2;
            s2 = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }
}

/// A cascade of biquads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sos(pub Vec<Biquad>);

impl Sos {
    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        self.0.iter().map(|s| s.magnitude(freq_hz, fs)).product()
    }

    pub fn filter(&self, x: &mut [f64]) {
        for s in &self.0 {
            s.run(x);
        }
    }

    /// Zero-phase filtering with odd extension of `padlen` samples at each
    /// end. The effective magnitude response is `|H|^2`.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 || self.0.is_empty() {
            return x.to_vec();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase filter a trace that may contain NaNs: NaNs are filtered as
/// zeros and restored afterwards so downstream run detection still sees them.
pub(crate) fn filtfilt_nan_aware(sos: &Sos, x: &[f64], padlen: usize) -> Vec<f64> {
    if !x.iter().any(|v| v.is_nan()) {
        return sos.filtfilt(x, padlen);
    }
    let filled: Vec<f64> = x.iter().map(|&v| if v.is_nan() { 0.0 } else { v }).collect();
    let mut y = sos.filtfilt(&filled, padlen);
    for (out, &v) in y.iter_mut().zip(x) {
        if v.is_nan() {
            *out = f64::NAN;
        }
    }
    y
}
