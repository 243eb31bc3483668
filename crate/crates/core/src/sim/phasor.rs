//! Single-bin DFT phasor extraction over one fundamental period.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude and principal-range angle of one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phasor {
    pub magnitude: f64,
    pub angle: f64,
}

impl Phasor {
    pub fn from_complex(c: Complex64) -> Self {
        Self { magnitude: c.norm(), angle: principal_angle(c.arg()) }
    }
}

/// Maps an angle into `(-π, π]`.
pub fn principal_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Per-bus, per-phase phasors at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasorFrame {
    /// `[bus][phase]`, p.u.
    pub magnitude: Vec<[f64; 3]>,
    /// `[bus][phase]`, radians in `(-π, π]`.
    pub angle: Vec<[f64; 3]>,
    /// Window start, seconds.
    pub frame_time: f64,
}

/// Samples per fundamental period, or an error when `fs/f0` is not integral.
pub fn samples_per_period(f0: f64, fs: f64) -> Result<usize> {
    if !(f0 > 0.0 && fs > 0.0) {
        return Err(Error::Config(format!("f0 {f0} and fs {fs} must be positive")));
    }
    let ratio = fs / f0;
    let w = ratio.round();
    if w < 2.0 || (ratio - w).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "fs/f0 = {ratio} is not a whole number of samples per period"
        )));
    }
    Ok(w as usize)
}

/// Precomputed twiddles for `C = (2/W) Σ w_n e^{-j2π f0 n/fs}`.
#[derive(Clone, Debug)]
pub struct SingleBinDft {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl SingleBinDft {
    pub fn new(f0: f64, fs: f64) -> Result<Self> {
        let w = samples_per_period(f0, fs)?;
        let step = 2.0 * std::f64::consts::PI / w as f64;
        Ok(Self {
            cos: (0..w).map(|n| (step * n as f64).cos()).collect(),
            sin: (0..w).map(|n| (step * n as f64).sin()).collect(),
        })
    }

    pub fn window_len(&self) -> usize {
        self.cos.len()
    }

    pub fn project(&self, window: &[f64]) -> Result<Complex64> {
        let w = self.cos.len();
        if window.len() != w {
            return Err(Error::Shape(format!("phasor window of {} samples, expected {w}", window.len())));
        }
        let (mut re, mut im) = (0.0, 0.0);
        for ((&x, &c), &s) in window.iter().zip(&self.cos).zip(&self.sin) {
            re += x * c;
            im -= x * s;
        }
        let scale = 2.0 / w as f64;
        Ok(Complex64::new(re * scale, im * scale))
    }

    /// Projects a strided window `series[start], series[start+stride], ...`.
    pub(crate) fn project_strided(&self, series: &[f64], start: usize, stride: usize) -> Complex64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, (&c, &s)) in self.cos.iter().zip(&self.sin).enumerate() {
            let x = series[start + n * stride];
            re += x * c;
            im -= x * s;
        }
        let scale = 2.0 / self.cos.len() as f64;
        Complex64::new(re * scale, im * scale)
    }
}

/// One-period phasor of `window`, angle referenced to the first sample.
pub fn extract_phasor(window: &[f64], f0: f64, fs: f64) -> Result<Phasor> {
    Ok(Phasor::from_complex(SingleBinDft::new(f0, fs)?.project(window)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    const F0: f64 = 60.0;
    const FS: f64 = 12_000.0;

    fn tone(amp: f64, phase: f64) -> Vec<f64> {
        (0..200).map(|n| amp * (2.0 * PI * F0 * n as f64 / FS + phase).cos()).collect()
    }

    #[test]
    fn cosine_projects_onto_itself() {
        let p = extract_phasor(&tone(1.0, 0.0), F0, FS).unwrap();
        assert!((p.magnitude - 1.0).abs() < 1e-9);
        assert!(p.angle.abs() < 1e-9);
    }

    #[test]
    fn sine_is_in_quadrature() {
        let w: Vec<f64> = (0..200).map(|n| (2.0 * PI * F0 * n as f64 / FS).sin()).collect();
        let p = extract_phasor(&w, F0, FS).unwrap();
        assert!((p.magnitude - 1.0).abs() < 1e-9);
        assert!((p.angle + PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_tone_magnitude_monte_carlo() {
        let normal = Normal::new(0.0, 5e-4).unwrap();
        let mut rng = crate::seeds::rng_from(17);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let w: Vec<f64> = tone(0.98, 0.3).into_iter().map(|x| x + normal.sample(&mut rng)).collect();
            let p = extract_phasor(&w, F0, FS).unwrap();
            worst = worst.max((p.magnitude - 0.98).abs());
        }
        assert!(worst < 1e-3, "worst deviation {worst}");
    }

    #[test]
    fn window_length_mismatch() {
        assert!(matches!(extract_phasor(&tone(1.0, 0.0)[..199], F0, FS), Err(Error::Shape(_))));
        assert!(matches!(SingleBinDft::new(60.0, 10_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn angle_stays_in_principal_range() {
        let p = extract_phasor(&tone(1.0, PI), F0, FS).unwrap();
        assert!(p.angle > -PI && p.angle <= PI);
        assert!((p.angle.abs() - PI).abs() < 1e-9);
        assert_eq!(principal_angle(-PI), PI);
        assert!((principal_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }
}
