//! Real DFT, Hann-windowed STFT and Fourier-based synchrosqueezing.
//!
//! All transforms act on the last axis of a dense tensor and compute in
//! `f64` internally whatever the element type. Normalizations:
//!
//! * DFT: `2/T` times the raw one-sided spectrum.
//! * STFT: `1/E_w` with `E_w = sum_k w(k)^2`, frame-local phase
//!   `coeffs[f, l] = (1/E_w) sum_k x[l*H + k] w(k) exp(-2 pi i f k / K)`.
//! * FrSST: every STFT coefficient is added into the bin of its estimated
//!   instantaneous frequency, so per-frame coefficient sums are conserved.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use spectra_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Real and imaginary parts of a complex array.
#[derive(Debug, Clone)]
pub struct ComplexTensor<E: Element> {
    pub re: Tensor<E>,
    pub im: Tensor<E>,
}

impl<E: Element> ComplexTensor<E> {
    pub fn new(re: Tensor<E>, im: Tensor<E>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::Spectral(format!(
                "real {:?} and imaginary {:?} parts differ in shape",
                re.shape(),
                im.shape()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralKind {
    Dft,
    Stft,
    Frsst,
}

/// Periodic Hann analysis window with its hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    length: usize,
    hop: usize,
}

impl WindowSpec {
    pub fn new(length: usize, hop: usize) -> Result<Self> {
        if length < 2 || hop == 0 || hop > length {
            return Err(Error::Spectral(format!(
                "window length {length} with hop {hop} (need 1 <= hop <= length, length >= 2)"
            )));
        }
        Ok(Self { length, hop })
    }

    /// Default analysis window for a series of length `t`: `K_f` is `2t/3`
    /// rounded to the nearest even integer and the hop is `K_f/2`.
    pub fn for_series(t: usize) -> Result<Self> {
        let k = ((t as f64 * 2.0 / 3.0) / 2.0).round() as usize * 2;
        let k = k.max(2);
        Self::new(k, k / 2)
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `w(k) = 0.5 - 0.5 cos(2 pi k / K)`.
    pub fn coefficients(&self) -> Vec<f64> {
        let k = self.length as f64;
        (0..self.length).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / k).cos()).collect()
    }

    /// `E_w`, recomputed from the window on every call. Squares and partial
    /// sums carry their rounding errors (fma products, Neumaier sums), so
    /// the result is the rounded sum of the exact squares.
    pub fn energy(&self) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for w in self.coefficients() {
            let sq = w * w;
            comp += w.mul_add(w, -sq);
            let t = sum + sq;
            comp += if sum.abs() >= sq.abs() { (sum - t) + sq } else { (sq - t) + sum };
            sum = t;
        }
        sum + comp
    }

    pub fn bins(&self) -> usize {
        self.length / 2 + 1
    }

    /// Number of whole windows that fit in `t` samples.
    pub fn frames(&self, t: usize) -> usize {
        if t < self.length {
            0
        } else {
            (t - self.length) / self.hop + 1
        }
    }
}

/// Complex time-frequency coefficients.
///
/// Shapes are `(..., F)` for the DFT and `(..., F, L)` for STFT and FrSST.
#[derive(Debug, Clone)]
pub struct SpectralGram<E: Element> {
    pub coeffs: ComplexTensor<E>,
    pub kind: SpectralKind,
    pub bins: usize,
    pub frames: Option<usize>,
    pub window: Option<WindowSpec>,
}

fn series_len<E: Element>(x: &Tensor<E>) -> Result<(usize, usize)> {
    let t = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Spectral("input must have a time axis".into()))?;
    let rows = if t == 0 { 0 } else { x.numel() / t };
    Ok((rows, t))
}

fn to_tensor<E: Element>(values: Vec<f64>, shape: &[usize]) -> Result<Tensor<E>> {
    Ok(Tensor::from_f64(&values, shape)?)
}

fn plan(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// One-sided DFT of each series without normalization.
pub fn rdft_raw<E: Element>(x: &Tensor<E>) -> Result<SpectralGram<E>> {
    let (rows, t) = series_len(x)?;
    if t < 2 {
        return Err(Error::Spectral(format!("DFT needs at least 2 samples, got {t}")));
    }
    let bins = t / 2 + 1;
    let fft = plan(t);
    let mut buf = vec![Complex64::new(0.0, 0.0); t];
    let (mut re, mut im) = (Vec::with_capacity(rows * bins), Vec::with_capacity(rows * bins));
    for row in x.data().chunks(t) {
        for (b, v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v.to_f64_lossy(), 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            re.push(c.re);
            im.push(c.im);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = bins;
    Ok(SpectralGram {
        coeffs: ComplexTensor::new(to_tensor(re, &shape)?, to_tensor(im, &shape)?)?,
        kind: SpectralKind::Dft,
        bins,
        frames: None,
        window: None,
    })
}

/// One-sided DFT scaled by `2/T`.
pub fn rdft<E: Element>(x: &Tensor<E>) -> Result<SpectralGram<E>> {
    let t = *x.shape().last().unwrap_or(&0);
    let mut gram = rdft_raw(x)?;
    let scale = E::from_f64_lossy(2.0 / t as f64);
    gram.coeffs = ComplexTensor::new(gram.coeffs.re.scale(scale), gram.coeffs.im.scale(scale))?;
    Ok(gram)
}

/// Per-series STFT as `(re, im)` laid out `[F][L]`, normalized by `1/E_w`.
fn stft_series(row: &[f64], win: &WindowSpec, fft: &dyn Fft<f64>, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (k, hop, bins) = (win.length(), win.hop(), win.bins());
    let frames = win.frames(row.len());
    let inv_energy = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let mut re = vec![0.0; bins * frames];
    let mut im = vec![0.0; bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); k];
    for l in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(row[l * hop + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            re[f * frames + l] = buf[f].re * inv_energy;
            im[f * frames + l] = buf[f].im * inv_energy;
        }
    }
    (re, im)
}

fn stft_f64<E: Element>(x: &Tensor<E>, win: &WindowSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let (_, t) = series_len(x)?;
    if win.length() > t {
        return Err(Error::Spectral(format!(
            "window length {} exceeds series length {t}",
            win.length()
        )));
    }
    let fft = plan(win.length());
    let w = win.coefficients();
    let (bins, frames) = (win.bins(), win.frames(t));
    let mut re = Vec::new();
    let mut im = Vec::new();
    let mut row = vec![0.0; t];
    for src in x.data().chunks(t) {
        for (d, v) in row.iter_mut().zip(src) {
            *d = v.to_f64_lossy();
        }
        let (r, i) = stft_series(&row, win, fft.as_ref(), &w);
        re.extend(r);
        im.extend(i);
    }
    let mut shape = x.shape().to_vec();
    shape.pop();
    shape.extend([bins, frames]);
    Ok((re, im, shape))
}

/// Hann-windowed STFT over whole frames, normalized by `1/E_w`.
pub fn stft<E: Element>(x: &Tensor<E>, win: &WindowSpec) -> Result<SpectralGram<E>> {
    let (re, im, shape) = stft_f64(x, win)?;
    let frames = shape[shape.len() - 1];
    Ok(SpectralGram {
        coeffs: ComplexTensor::new(to_tensor(re, &shape)?, to_tensor(im, &shape)?)?,
        kind: SpectralKind::Stft,
        bins: win.bins(),
        frames: Some(frames),
        window: Some(*win),
    })
}

/// Relative magnitude floor below which a coefficient keeps its own bin.
pub const REASSIGN_MAG_FLOOR: f64 = 1e-8;

/// Target bin of every coefficient of one `[F][L]` STFT series.
///
/// The instantaneous frequency is `Re(d_tau X / (i X))` with `d_tau` a
/// central difference across frames (one-sided at the first and last frame)
/// divided by the hop. The difference is taken on the bin-demodulated
/// coefficients `X[f, l] exp(-i w_f l H)` and the bin centre `w_f` added
/// back: with `H = K/2` the raw frame-to-frame phase advance of bin `f` is
/// `pi f` and would alias every integer-bin tone onto bin 0.
pub fn reassign_bins<E: Element>(re: &[E], im: &[E], win: &WindowSpec, frames: usize) -> Vec<usize> {
    let bins = win.bins();
    let hop = win.hop() as f64;
    let k = win.length() as f64;
    let mut target: Vec<usize> = (0..bins * frames).map(|i| i / frames.max(1)).collect();
    if frames < 2 {
        return target;
    }
    // Frame RMS of coefficient magnitudes sets the reassignment floor.
    let floors: Vec<f64> = (0..frames)
        .map(|l| {
            let ms = (0..bins)
                .map(|f| {
                    let (a, b) = (re[f * frames + l].to_f64_lossy(), im[f * frames + l].to_f64_lossy());
                    a * a + b * b
                })
                .sum::<f64>()
                / bins as f64;
            REASSIGN_MAG_FLOOR * (ms.sqrt() + 1e-12)
        })
        .collect();
    for f in 0..bins {
        let w_f = 2.0 * PI * f as f64 / k;
        let demod = |l: usize| {
            let c = Complex64::new(re[f * frames + l].to_f64_lossy(), im[f * frames + l].to_f64_lossy());
            c * Complex64::from_polar(1.0, -w_f * hop * l as f64)
        };
        for l in 0..frames {
            let x = demod(l);
            if x.norm() < floors[l] {
                continue;
            }
            let dx = if l == 0 {
                (demod(1) - demod(0)) / hop
            } else if l == frames - 1 {
                (demod(l) - demod(l - 1)) / hop
            } else {
                (demod(l + 1) - demod(l - 1)) / (2.0 * hop)
            };
            // Re(dx / (i x)) = Im(dx * conj(x)) / |x|^2
            let offset = (dx * x.conj()).im / x.norm_sqr();
            let omega = w_f + offset;
            let xi = (k / (2.0 * PI) * omega).round();
            let xi = if xi.is_finite() { xi.clamp(0.0, (bins - 1) as f64) } else { f as f64 };
            target[f * frames + l] = xi as usize * frames + l;
        }
    }
    target
}

/// Synchrosqueezed STFT: each coefficient is accumulated into the bin of its
/// instantaneous frequency. Needs at least two frames.
pub fn frsst<E: Element>(x: &Tensor<E>, win: &WindowSpec) -> Result<SpectralGram<E>> {
    let (re, im, shape) = stft_f64(x, win)?;
    let frames = shape[shape.len() - 1];
    if frames < 2 {
        return Err(Error::Spectral(format!(
            "synchrosqueezing needs at least 2 frames, got {frames}"
        )));
    }
    let per = win.bins() * frames;
    let mut out_re = vec![0.0; re.len()];
    let mut out_im = vec![0.0; im.len()];
    for s in 0..re.len() / per {
        let range = s * per..(s + 1) * per;
        let target = reassign_bins(&re[range.clone()], &im[range.clone()], win, frames);
        for (i, &dst) in target.iter().enumerate() {
            out_re[s * per + dst] += re[s * per + i];
            out_im[s * per + dst] += im[s * per + i];
        }
    }
    Ok(SpectralGram {
        coeffs: ComplexTensor::new(to_tensor(out_re, &shape)?, to_tensor(out_im, &shape)?)?,
        kind: SpectralKind::Frsst,
        bins: win.bins(),
        frames: Some(frames),
        window: Some(*win),
    })
}

/// Dispatches on `kind`; `win` is ignored for the DFT.
pub fn transform<E: Element>(
    x: &Tensor<E>,
    kind: SpectralKind,
    win: &WindowSpec,
) -> Result<SpectralGram<E>> {
    match kind {
        SpectralKind::Dft => rdft(x),
        SpectralKind::Stft => stft(x, win),
        SpectralKind::Frsst => frsst(x, win),
    }
}

/// Flattened `(frame, bin, re, im)` rows for the first series of a gram.
pub fn gram_rows<E: Element>(gram: &SpectralGram<E>) -> Vec<(usize, usize, f64, f64)> {
    let frames = gram.frames.unwrap_or(1);
    let n = gram.bins * frames;
    let (re, im) = (gram.coeffs.re.data(), gram.coeffs.im.data());
    let mut rows = Vec::with_capacity(n);
    for l in 0..frames {
        for f in 0..gram.bins {
            let i = f * frames + l;
            rows.push((l, f, re[i].to_f64_lossy(), im[i].to_f64_lossy()));
        }
    }
    rows
}
