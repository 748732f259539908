//! 3D Fourier styles.
//!
//! A volume's *style* is the amplitude of its 3D DFT restricted to a small
//! centred low-frequency band. Spectra are kept in the shifted layout: the DC
//! bin of an axis of length `n` sits at index `n / 2`. The band of half-width
//! `floor(beta * n)` around DC always contains DC and always has odd length
//! `2 * floor(beta * n) + 1`.
//!
//! Styles carry no phase and no high frequencies, so a stored style cannot be
//! inverted back into the volume it came from.

use std::cell::RefCell;
use std::f64::consts::PI;

use ndarray::{Array3, ArrayView3};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Result};
use crate::volume::SubVolume;

/// Band fractions `(beta_h, beta_w, beta_d)`.
pub type Beta = [f32; 3];

pub const DEFAULT_BETA: Beta = [0.01, 0.01, 0.05];

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Amplitude/phase decomposition of a real volume, zero frequency centred.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum3D {
    pub amplitude: Array3<f64>,
    /// Phase in `(-pi, pi]`.
    pub phase: Array3<f64>,
}

impl Spectrum3D {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.amplitude.shape();
        [s[0], s[1], s[2]]
    }
}

/// Centred low-frequency amplitude block shared between clients.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSpectrum {
    pub block: Array3<f32>,
    pub beta: Beta,
    pub source_shape: [usize; 3],
}

impl StyleSpectrum {
    pub fn block_shape(&self) -> [usize; 3] {
        let s = self.block.shape();
        [s[0], s[1], s[2]]
    }
}

/// Half-width of the band along one axis, `floor(beta * n)`.
///
/// The product is formed in f32 so that e.g. `0.7 * 10` lands on 7 rather
/// than on the f64 image of the rounded f32 fraction.
pub fn band_half_width(beta: f32, n: usize) -> usize {
    (beta * n as f32).floor().max(0.0) as usize
}

/// Block shape `2 * floor(beta * n) + 1` per axis, validated against `shape`.
pub fn block_shape(beta: Beta, shape: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !(beta[a].is_finite() && beta[a] > 0.0) {
            return Err(invalid(format!("beta {beta:?} must be positive")));
        }
        let len = 2 * band_half_width(beta[a], shape[a]) + 1;
        if len > shape[a] {
            return Err(invalid(format!(
                "beta {beta:?} gives a band of {len} bins on an axis of length {}",
                shape[a]
            )));
        }
        out[a] = len;
    }
    Ok(out)
}

/// The indicator of the centred band, `M_beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandMask {
    pub beta: Beta,
    pub shape: [usize; 3],
    half: [usize; 3],
}

impl BandMask {
    pub fn new(beta: Beta, shape: [usize; 3]) -> Result<Self> {
        block_shape(beta, shape)?;
        let half = [0, 1, 2].map(|a| band_half_width(beta[a], shape[a]));
        Ok(BandMask { beta, shape, half })
    }

    /// Whether a shifted-layout index lies in the band.
    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let c = self.shape[a] / 2;
            idx[a] + self.half[a] >= c && idx[a] <= c + self.half[a]
        })
    }

    pub fn ones_count(&self) -> usize {
        self.half.iter().map(|h| 2 * h + 1).product()
    }

    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_fn(self.shape, |(i, j, k)| if self.contains([i, j, k]) { 1.0 } else { 0.0 })
    }
}

fn shift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

fn unshift_index(s: usize, n: usize) -> usize {
    (s + n - n / 2) % n
}

/// In-place 3D DFT over a row-major `(h, w, d)` buffer. The inverse is unnormalised.
fn transform(buf: &mut [Complex64], shape: [usize; 3], direction: FftDirection) {
    let [h, w, d] = shape;
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        // d axis: contiguous rows
        let fft = planner.plan_fft(d, direction);
        fft.process(buf);

        let fft = planner.plan_fft(w, direction);
        let mut line = vec![Complex64::default(); w];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for i in 0..h {
            for k in 0..d {
                for j in 0..w {
                    line[j] = buf[(i * w + j) * d + k];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for j in 0..w {
                    buf[(i * w + j) * d + k] = line[j];
                }
            }
        }

        let fft = planner.plan_fft(h, direction);
        let mut line = vec![Complex64::default(); h];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for j in 0..w {
            for k in 0..d {
                for i in 0..h {
                    line[i] = buf[(i * w + j) * d + k];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for i in 0..h {
                    buf[(i * w + j) * d + k] = line[i];
                }
            }
        }
    });
}

fn forward_complex(data: ArrayView3<'_, f32>) -> Vec<Complex64> {
    let sh = data.shape();
    let shape = [sh[0], sh[1], sh[2]];
    let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x as f64, 0.0)).collect();
    transform(&mut buf, shape, FftDirection::Forward);
    buf
}

fn inverse_real(mut buf: Vec<Complex64>, shape: [usize; 3]) -> Array3<f32> {
    transform(&mut buf, shape, FftDirection::Inverse);
    let n = buf.len() as f64;
    let real: Vec<f32> = buf.iter().map(|c| (c.re / n) as f32).collect();
    Array3::from_shape_vec(shape, real).expect("buffer length matches shape")
}

fn phase_of(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let p = c.im.atan2(c.re);
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Forward 3D DFT of a real volume, split into centred amplitude and phase.
pub fn fft3(data: ArrayView3<'_, f32>) -> Spectrum3D {
    let sh = data.shape();
    let shape = [sh[0], sh[1], sh[2]];
    let buf = forward_complex(data);
    let [h, w, d] = shape;
    let mut amplitude = Array3::zeros(shape);
    let mut phase = Array3::zeros(shape);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let c = buf[(i * w + j) * d + k];
                let s = [shift_index(i, h), shift_index(j, w), shift_index(k, d)];
                amplitude[s] = c.norm();
                phase[s] = phase_of(c);
            }
        }
    }
    Spectrum3D { amplitude, phase }
}

/// Real part of the inverse transform of `amplitude * exp(i * phase)`.
pub fn ifft3(spec: &Spectrum3D) -> Result<Array3<f32>> {
    if spec.amplitude.shape() != spec.phase.shape() {
        return Err(invalid("amplitude and phase shapes differ"));
    }
    let shape = spec.shape();
    let [h, w, d] = shape;
    let mut buf = vec![Complex64::default(); h * w * d];
    for ((si, sj, sk), &a) in spec.amplitude.indexed_iter() {
        let p = spec.phase[[si, sj, sk]];
        let (i, j, k) = (unshift_index(si, h), unshift_index(sj, w), unshift_index(sk, d));
        buf[(i * w + j) * d + k] = Complex64::from_polar(a, p);
    }
    Ok(inverse_real(buf, shape))
}

/// Centre-crops the amplitude to the `beta` band. Phase is dropped.
pub fn extract_style(spec: &Spectrum3D, beta: Beta) -> Result<StyleSpectrum> {
    let shape = spec.shape();
    let bs = block_shape(beta, shape)?;
    let lo = [0, 1, 2].map(|a| shape[a] / 2 - bs[a] / 2);
    let block = Array3::from_shape_fn(bs, |(i, j, k)| spec.amplitude[[lo[0] + i, lo[1] + j, lo[2] + k]] as f32);
    Ok(StyleSpectrum { block, beta, source_shape: shape })
}

/// Style of a raw block of voxels.
pub fn style_of(data: ArrayView3<'_, f32>, beta: Beta) -> Result<StyleSpectrum> {
    extract_style(&fft3(data), beta)
}

/// Writes a style block back into an otherwise zero centred amplitude array.
pub fn embed_style(style: &StyleSpectrum) -> Array3<f64> {
    let shape = style.source_shape;
    let bs = style.block_shape();
    let lo = [0, 1, 2].map(|a| shape[a] / 2 - bs[a] / 2);
    let mut out = Array3::zeros(shape);
    for ((i, j, k), &v) in style.block.indexed_iter() {
        out[[lo[0] + i, lo[1] + j, lo[2] + k]] = v as f64;
    }
    out
}

fn check_alpha(alpha: f32) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(invalid(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// Element-wise `alpha * source + (1 - alpha) * target`.
pub fn mix_styles(source: &StyleSpectrum, target: &StyleSpectrum, alpha: f32) -> Result<StyleSpectrum> {
    check_alpha(alpha)?;
    if source.block.shape() != target.block.shape() {
        return Err(invalid(format!(
            "style block shapes differ: {:?} vs {:?}",
            source.block.shape(),
            target.block.shape()
        )));
    }
    let a = alpha as f64;
    let mut block = source.block.clone();
    block.zip_mut_with(&target.block, |s, &t| *s = (a * *s as f64 + (1.0 - a) * t as f64) as f32);
    Ok(StyleSpectrum { block, beta: source.beta, source_shape: source.source_shape })
}

/// Frequency-domain style MixUp.
///
/// Inside the `beta` band the amplitude becomes `alpha * A + (1 - alpha) * target`;
/// outside the band the amplitude and everywhere the phase are left untouched.
/// After reconstruction, voxels that were below `tau_air` get their original
/// value back so that air artefacts cannot leak into the body contour.
pub fn apply_style(sv: &SubVolume, target: &StyleSpectrum, alpha: f32, beta: Beta, tau_air: f32) -> Result<SubVolume> {
    apply_style_with(sv, target, alpha, beta, Some(tau_air))
}

/// [`apply_style`] with optional air restoration (`None` skips it).
pub fn apply_style_with(
    sv: &SubVolume,
    target: &StyleSpectrum,
    alpha: f32,
    beta: Beta,
    tau_air: Option<f32>,
) -> Result<SubVolume> {
    check_alpha(alpha)?;
    let shape = sv.shape();
    if target.source_shape != shape {
        return Err(invalid(format!(
            "style was extracted from shape {:?}, sub-volume has shape {shape:?}",
            target.source_shape
        )));
    }
    if target.beta != beta {
        return Err(invalid(format!("style beta {:?} differs from {beta:?}", target.beta)));
    }
    let bs = block_shape(beta, shape)?;
    if target.block_shape() != bs {
        return Err(invalid(format!("style block shape {:?}, expected {bs:?}", target.block_shape())));
    }

    let [h, w, d] = shape;
    let half = [bs[0] / 2, bs[1] / 2, bs[2] / 2];
    let mut buf = forward_complex(sv.data.view());
    let a = alpha as f64;
    // Only band bins change; the rest of the complex spectrum is untouched,
    // so out-of-band amplitude and all phases are preserved exactly.
    for ((bi, bj, bk), &t) in target.block.indexed_iter() {
        let wrap = |b: usize, hw: usize, n: usize| (b + n - hw) % n;
        let (i, j, k) = (wrap(bi, half[0], h), wrap(bj, half[1], w), wrap(bk, half[2], d));
        let c = &mut buf[(i * w + j) * d + k];
        let amp = c.norm();
        let mixed = a * amp + (1.0 - a) * t as f64;
        *c = Complex64::from_polar(mixed, phase_of(*c));
    }
    let mut out = inverse_real(buf, shape);
    if let Some(tau) = tau_air {
        out.zip_mut_with(&sv.data, |o, &orig| {
            if orig < tau {
                *o = orig;
            }
        });
    }
    Ok(SubVolume { data: out, origin: sv.origin, slice_score: sv.slice_score })
}
