//! Minimal complex FFT: iterative radix-2 for power-of-two lengths, direct
//! DFT otherwise.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::{Add, Mul, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        Self::new(r * libm::cos(theta), r * libm::sin(theta))
    }

    pub fn norm(self) -> f64 {
        libm::hypot(self.re, self.im)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
}

impl Add for Complex {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// In-place forward (`inverse = false`) or unnormalised inverse transform.
pub fn fft_in_place(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if !n.is_power_of_two() {
        let out: Vec<Complex> = (0..n)
            .map(|k| {
                buf.iter().enumerate().fold(Complex::default(), |acc, (j, &x)| {
                    let ang = sign * 2.0 * PI * ((j * k) % n) as f64 / n as f64;
                    acc + x * Complex::from_polar(1.0, ang)
                })
            })
            .collect();
        buf.copy_from_slice(&out);
        return;
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let w_len = Complex::from_polar(1.0, sign * 2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w = w * w_len;
            }
        }
        len <<= 1;
    }
}

pub fn fft(signal: &[f64]) -> Vec<Complex> {
    let mut buf: Vec<Complex> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf
}

/// Analytic signal `x + i H(x)` of a real sequence.
pub fn analytic_signal(signal: &[f64]) -> Vec<Complex> {
    let n = signal.len();
    let mut spec = fft(signal);
    if n == 0 {
        return spec;
    }
    // keep DC (and Nyquist for even n), double positive, zero negative frequencies
    let half = n / 2;
    for (k, s) in spec.iter_mut().enumerate().skip(1) {
        let keep_once = n % 2 == 0 && k == half;
        if keep_once {
            continue;
        }
        *s = if k <= (n - 1) / 2 { s.scale(2.0) } else { Complex::default() };
    }
    fft_in_place(&mut spec, true);
    let inv_n = 1.0 / n as f64;
    spec.iter_mut().for_each(|s| *s = s.scale(inv_n));
    spec
}
