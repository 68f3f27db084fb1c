//! Rational-ratio resampling with a Kaiser-windowed sinc kernel.

use std::collections::HashMap;

/// Zero-crossings of the kernel on each side, measured at the lower rate.
const ZERO_CROSSINGS: usize = 24;
const KAISER_BETA: f64 = 8.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const CUTOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

pub fn output_len(n: usize, from_fs: u32, to_fs: u32) -> usize {
    ((n as f64) * to_fs as f64 / from_fs as f64).round() as usize
}

/// Resample `x` from `from_fs` to `to_fs`. Identity when the rates match.
///
/// Output sample `m` sits at input position `m * down / up` with
/// `up / down = to_fs / from_fs` in lowest terms; the fractional part takes
/// only `up` distinct values, so kernel taps are computed once per phase.
pub fn resample(x: &[f64], from_fs: u32, to_fs: u32) -> Vec<f64> {
    if from_fs == to_fs || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from_fs as u64, to_fs as u64);
    let up = to_fs as u64 / g;
    let down = from_fs as u64 / g;
    let n = x.len() as i64;
    let out_len = output_len(x.len(), from_fs, to_fs);

    // Cutoff relative to the input Nyquist.
    let c = CUTOFF * (up as f64 / down as f64).min(1.0);
    let half = (ZERO_CROSSINGS as f64 / c).ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |d: f64| -> f64 {
        let r = d / half as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        c * sinc(c * d) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
    };
    let reflect = |k: i64| -> f64 {
        if n == 1 {
            return x[0];
        }
        let period = 2 * (n - 1);
        let mut k = k.rem_euclid(period);
        if k >= n {
            k = period - k;
        }
        x[k as usize]
    };

    let mut taps_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len as u64 {
        let num = m * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let frac = phase as f64 / up as f64;
        let taps = taps_cache.entry(phase).or_insert_with(|| {
            (-half + 1..=half)
                .map(|j| kernel(frac - j as f64))
                .collect()
        });
        let norm: f64 = taps.iter().sum();
        let acc: f64 = taps
            .iter()
            .zip(-half + 1..=half)
            .map(|(w, j)| w * reflect(base + j))
            .sum();
        out.push(acc / norm);
    }
    out
}
