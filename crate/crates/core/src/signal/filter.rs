//! Butterworth band-pass design (bilinear transform, pre-warped edges) and
//! zero-phase forward-backward filtering over second-order sections.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section in direct form II transposed, `a0 == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Filter state that makes a constant input `x0` start in steady state.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let g = self.dc_gain();
        [(g - self.b[0]) * x0, (self.b[2] - self.a[2] * g) * x0]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Digital Butterworth band-pass with `order` poles per band edge
    /// (`2 * order` poles in total), unit gain at the geometric band center.
    pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Self> {
        let nyq = fs / 2.0;
        if !(lo > 0.0 && lo < hi && hi < nyq) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidBand { lo, hi, fs });
        }
        if order == 0 {
            return Err(Error::Config("filter order must be positive".into()));
        }

        // pre-warped analog edges
        let w_lo = 2.0 * fs * (std::f64::consts::PI * lo / fs).tan();
        let w_hi = 2.0 * fs * (std::f64::consts::PI * hi / fs).tan();
        let bw = w_hi - w_lo;
        let w0_sq = w_lo * w_hi;

        // analog low-pass prototype poles in the upper half plane; each one
        // and its conjugate yield a conjugate pair per band-pass branch
        let fs2 = 2.0 * fs;
        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta =
                std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            if p.im <= 1e-12 {
                continue;
            }
            let half = p * bw / 2.0;
            let disc = (half * half - w0_sq).sqrt();
            for s in [half + disc, half - disc] {
                poles.push((fs2 + s) / (fs2 - s));
            }
        }
        // a real prototype pole (odd order) maps to a pair of band-pass poles
        // that may both be real or complex; handle it as one section
        let mut sections = Vec::with_capacity(order);
        for z in &poles {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * z.re, z.norm_sqr()],
            });
        }
        if order % 2 == 1 {
            let half = Complex64::new(-bw / 2.0, 0.0);
            let disc = (half * half - w0_sq).sqrt();
            let z1 = (fs2 + half + disc) / (fs2 - half - disc);
            let z2 = (fs2 + half - disc) / (fs2 - half + disc);
            let a1 = -(z1 + z2).re;
            let a2 = (z1 * z2).re;
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, a1, a2],
            });
        }
        // each conjugate pair above contributes one zero at z=1 and one at z=-1,
        // exactly `order` of each overall

        let mut filter = SosFilter { sections };
        let center = 2.0 * (w0_sq.sqrt() / fs2).atan();
        let gain = filter.response(center).norm();
        filter.sections[0].b.iter_mut().for_each(|b| *b /= gain);
        Ok(filter)
    }

    /// Complex frequency response at normalized angular frequency `omega`
    /// (radians per sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -omega);
        let z_inv2 = z_inv * z_inv;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            let num = s.b[0] + z_inv * s.b[1] + z_inv2 * s.b[2];
            let den = s.a[0] + z_inv * s.a[1] + z_inv2 * s.a[2];
            acc * num / den
        })
    }

    /// Causal filtering with steady-state initial conditions scaled by `x[0]`.
    fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut level = first;
        for s in &self.sections {
            let zi = s.steady_state(level);
            level *= s.dc_gain();
            s.run(x, zi);
        }
    }

    /// Default edge padding used by [`SosFilter::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Zero-phase filtering: odd-extension padding, forward pass, reverse
    /// pass. The effective magnitude response is `|H|^2`.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}
