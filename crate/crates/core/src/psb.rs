//! Phonon-sideband model for a linearly coupled symmetric mode.
//!
//! The bandshape is `I = e^{-S} I0 ⊗ [δ + Σ S^n/n! I_n]` where `I_n` is the
//! n-fold self-convolution of the one-phonon band `I1`. Energies are phonon
//! energies in meV measured from the ZPL (positive towards the sideband).
//!
//! All bands share one grid step and have grid points on integer multiples
//! of it, so convolution reduces to index arithmetic. Norms use the
//! rectangle rule `h Σ v`, which discrete convolution preserves exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const ALIGN_TOL: f64 = 1e-6;

/// Uniformly sampled spectrum: `values[i]` at `start + i * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBand {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl SpectralBand {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        let b = Self {
            start,
            step,
            values,
        };
        b.validate()?;
        Ok(b)
    }

    /// Band sampled from a function at `start + i * step`.
    pub fn from_fn(start: f64, step: f64, len: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(start, step, (0..len).map(|i| f(start + i as f64 * step)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite() && self.start.is_finite()) {
            return Err(invalid("grid step must be positive and finite"));
        }
        if self.values.is_empty() {
            return Err(invalid("empty band"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite band values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn energy(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.energy(i))
    }

    pub fn end(&self) -> f64 {
        self.energy(self.len() - 1)
    }

    pub fn norm(&self) -> f64 {
        self.step * self.values.iter().sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        self.step
            * self
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| v * self.energy(i))
                .sum::<f64>()
            / self.norm()
    }

    /// `sqrt(h Σ v^2)`.
    pub fn l2(&self) -> f64 {
        (self.step * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::Degenerate("band has no positive area".into()));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            ..self.clone()
        })
    }

    /// Integer grid index of `start` (the grid must contain multiples of `step`).
    pub fn offset(&self) -> Result<i64> {
        let o = self.start / self.step;
        let r = o.round();
        if (o - r).abs() > ALIGN_TOL {
            return Err(invalid("band grid is not aligned to multiples of its step"));
        }
        Ok(r as i64)
    }

    /// Integrated area between two energies (inclusive grid points).
    pub fn area_between(&self, lo: f64, hi: f64) -> f64 {
        self.step
            * self
                .energies()
                .zip(&self.values)
                .filter(|(e, _)| *e >= lo - 1e-9 * self.step && *e <= hi + 1e-9 * self.step)
                .map(|(_, v)| v)
                .sum::<f64>()
    }

    /// Copy onto the aligned window `[offset, offset + len)` in grid units,
    /// zero outside the original support.
    pub fn window(&self, offset: i64, len: usize) -> Result<Self> {
        let own = self.offset()?;
        let values = (0..len as i64)
            .map(|i| {
                let j = offset + i - own;
                if j >= 0 && (j as usize) < self.len() {
                    self.values[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            start: offset as f64 * self.step,
            step: self.step,
            values,
        })
    }

    /// Linear interpolation, zero outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        let t = (x - self.start) / self.step;
        if t < -1e-9 || t > (self.len() - 1) as f64 + 1e-9 {
            return 0.0;
        }
        let t = t.clamp(0.0, (self.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.len().saturating_sub(2));
        if self.len() == 1 {
            return self.values[0];
        }
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    fn check_step(&self, other: &Self) -> Result<()> {
        if ((self.step - other.step) / self.step).abs() > 1e-9 {
            return Err(invalid("bands have different grid steps"));
        }
        Ok(())
    }
}

fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

fn fft_linear_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    let len = n.next_power_of_two();
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(len, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(len, Complex64::new(0.0, 0.0));
    let fwd = fft_plan(len, false);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_plan(len, true).process(&mut fa);
    fa.truncate(n);
    fa.iter().map(|z| z.re / len as f64).collect()
}

/// Linear convolution `∫ a(ω - x) b(x) dx` via zero-padded FFT.
pub fn convolve(a: &SpectralBand, b: &SpectralBand) -> Result<SpectralBand> {
    a.check_step(b)?;
    let h = a.step;
    let values = fft_linear_convolve(&a.values, &b.values)
        .into_iter()
        .map(|v| v * h)
        .collect();
    Ok(SpectralBand {
        start: a.start + b.start,
        step: h,
        values,
    })
}

/// Same as [`convolve`] by direct O(N^2) quadrature.
pub fn quadrature_convolve(a: &SpectralBand, b: &SpectralBand) -> Result<SpectralBand> {
    a.check_step(b)?;
    let h = a.step;
    let mut values = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.values.iter().enumerate() {
        for (j, y) in b.values.iter().enumerate() {
            values[i + j] += h * x * y;
        }
    }
    Ok(SpectralBand {
        start: a.start + b.start,
        step: h,
        values,
    })
}

/// Convolution restricted to a window of `len` points starting at grid
/// index `offset`. Exact inside the window.
fn convolve_window(a: &SpectralBand, b: &SpectralBand, offset: i64, len: usize) -> Result<SpectralBand> {
    convolve(a, b)?.window(offset, len)
}

/// `I_1 .. I_{n_max}`, each the convolution of the previous with `I_1`.
pub fn n_phonon_bands(i1: &SpectralBand, n_max: usize) -> Result<Vec<SpectralBand>> {
    if n_max == 0 {
        return Err(invalid("n_max must be at least 1"));
    }
    i1.offset()?;
    let mut out = vec![i1.clone()];
    for _ in 1..n_max {
        let next = convolve(out.last().unwrap(), i1)?;
        out.push(next);
    }
    Ok(out)
}

/// Smallest `n` with Poisson tail `P(N > n) < tol` for mean `s`, and that tail.
pub fn poisson_cutoff(s: f64, tol: f64) -> (usize, f64) {
    if s <= 0.0 {
        return (0, 0.0);
    }
    let mut term = (-s).exp();
    let mut cdf = term;
    let mut n = 0;
    while 1.0 - cdf >= tol && n < 10_000 {
        n += 1;
        term *= s / n as f64;
        cdf += term;
    }
    // 1 - cdf loses precision near tol; sum the next terms directly.
    let mut tail = 0.0;
    let mut t = term;
    for k in n + 1..n + 200 {
        t *= s / k as f64;
        tail += t;
        if t < tail * 1e-17 {
            break;
        }
    }
    (n, tail)
}

/// Output of [`synthesize_band`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedBand {
    pub band: SpectralBand,
    pub n_max: usize,
    /// Poisson weight of the omitted orders, `Σ_{n > n_max} e^{-S} S^n/n!`.
    pub truncation_bound: f64,
    /// Weight of the zero-phonon term inside the window.
    pub zpl_weight: f64,
    /// `1 - norm` of the windowed band (truncation plus mass beyond the window).
    pub missing_mass: f64,
}

/// Grid on which a synthesized band (or band to be deconvolved) lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// Grid index of the first point (usually negative to hold the ZPL).
    pub offset: i64,
    pub len: usize,
}

impl Window {
    pub fn of(band: &SpectralBand) -> Result<Self> {
        Ok(Self {
            offset: band.offset()?,
            len: band.len(),
        })
    }
}

fn pn_series(
    i1: &SpectralBand,
    s: f64,
    i0: &SpectralBand,
    n_max: usize,
    w: Window,
    skip_first_order: bool,
) -> Result<(Vec<f64>, f64)> {
    let mut term = i0.window(w.offset, w.len)?;
    let zpl_weight = (-s).exp() * term.norm();
    let mut acc: Vec<f64> = term.values.iter().map(|v| v * (-s).exp()).collect();
    if skip_first_order {
        acc.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut coef = (-s).exp();
    for n in 1..=n_max {
        term = convolve_window(&term, i1, w.offset, w.len)?;
        coef *= s / n as f64;
        if skip_first_order && n == 1 {
            continue;
        }
        for (a, t) in acc.iter_mut().zip(&term.values) {
            *a += coef * t;
        }
    }
    Ok((acc, zpl_weight))
}

/// `e^{-S} I0 ⊗ [δ + Σ_{n=1}^{n_max} S^n/n! I_n]` on the given window.
/// `n_max = None` picks the smallest order with Poisson tail below 1e-8.
pub fn synthesize_band(
    i1: &SpectralBand,
    s: f64,
    i0: &SpectralBand,
    n_max: Option<usize>,
    window: Window,
) -> Result<SynthesizedBand> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(invalid("Huang-Rhys factor must be non-negative"));
    }
    i1.check_step(i0)?;
    let (auto_n, _) = poisson_cutoff(s, 1e-8);
    let n_max = n_max.unwrap_or(auto_n);
    let truncation_bound = if s == 0.0 {
        0.0
    } else {
        let mut t = (-s).exp();
        let mut kept = t;
        for n in 1..=n_max {
            t *= s / n as f64;
            kept += t;
        }
        (1.0 - kept).max(0.0)
    };
    let (values, zpl_weight) = pn_series(i1, s, i0, n_max, window, false)?;
    let band = SpectralBand {
        start: window.offset as f64 * i1.step,
        step: i1.step,
        values,
    };
    let missing_mass = 1.0 - band.norm();
    Ok(SynthesizedBand {
        band,
        n_max,
        truncation_bound,
        zpl_weight,
        missing_mass,
    })
}

/// Band shape in phonon energy from an emission spectrum on a photon-energy
/// grid (meV): origin moved to the ZPL, intensity divided by the cube of the
/// photon energy, resampled on a grid aligned to zero with the emission step
/// and normalized. `margin` keeps grid points on the anti-Stokes side for
/// the ZPL width.
pub fn bandshape_from_emission(
    emission: &SpectralBand,
    omega0: f64,
    margin: f64,
) -> Result<SpectralBand> {
    emission.validate()?;
    if omega0 < emission.start || omega0 > emission.end() {
        return Err(invalid("ZPL energy lies outside the emission grid"));
    }
    if emission.values.iter().any(|v| *v < 0.0) {
        return Err(invalid("emission values must be non-negative"));
    }
    let h = emission.step;
    let lo = -(margin.max(0.0) / h).floor() as i64;
    let hi = ((omega0 - emission.start) / h + 1e-9).floor() as i64;
    let values = (lo..=hi)
        .map(|j| {
            let e_photon = omega0 - j as f64 * h;
            if e_photon <= 0.0 {
                0.0
            } else {
                emission.interpolate(e_photon) / e_photon.powi(3)
            }
        })
        .collect();
    SpectralBand::new(lo as f64 * h, h, values)?.normalized()
}

/// Inverse of [`bandshape_from_emission`] onto a photon-energy grid,
/// normalized to unit area.
pub fn emission_from_bandshape(
    band: &SpectralBand,
    omega0: f64,
    photon_grid_start: f64,
    len: usize,
) -> Result<SpectralBand> {
    let h = band.step;
    let values = (0..len)
        .map(|i| {
            let e = photon_grid_start + i as f64 * h;
            band.interpolate(omega0 - e) * e.powi(3)
        })
        .collect();
    SpectralBand::new(photon_grid_start, h, values)?.normalized()
}

/// Huang-Rhys factor from the ZPL fraction of a band. The ZPL area is the
/// integral over `zpl_window` (phonon energies) above a straight baseline
/// joining the window edges.
pub fn estimate_huang_rhys(band: &SpectralBand, zpl_window: (f64, f64)) -> Result<f64> {
    let (lo, hi) = zpl_window;
    if !(hi > lo) {
        return Err(invalid("empty ZPL window"));
    }
    let total = band.norm();
    if !(total > 0.0) {
        return Err(Error::Degenerate("band has no area".into()));
    }
    let idx: Vec<usize> = (0..band.len())
        .filter(|&i| {
            let e = band.energy(i);
            e >= lo - 1e-9 * band.step && e <= hi + 1e-9 * band.step
        })
        .collect();
    if idx.is_empty() {
        return Err(invalid("ZPL window contains no grid points"));
    }
    let (i_lo, i_hi) = (idx[0], *idx.last().unwrap());
    let (e_lo, e_hi) = (band.energy(i_lo), band.energy(i_hi));
    let (v_lo, v_hi) = (band.values[i_lo], band.values[i_hi]);
    let baseline = |e: f64| {
        if i_hi == i_lo {
            0.0
        } else {
            v_lo + (v_hi - v_lo) * (e - e_lo) / (e_hi - e_lo)
        }
    };
    let zpl: f64 = band.step
        * idx
            .iter()
            .map(|&i| band.values[i] - baseline(band.energy(i)))
            .sum::<f64>();
    let frac = zpl / total;
    if (frac - 1.0).abs() <= 1e-9 {
        return Ok(0.0);
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "ZPL fraction {frac} outside (0, 1)"
        )));
    }
    Ok(-frac.ln())
}

/// Restricts to `[0, omega]`, zeroes negatives and renormalizes.
fn project_one_phonon(values: &[f64], start_index: i64, step: f64, omega: f64) -> Result<SpectralBand> {
    let n_omega = (omega / step + 1e-9).floor() as usize;
    let out: Vec<f64> = (0..=n_omega as i64)
        .map(|j| {
            let k = j - start_index;
            if k >= 0 && (k as usize) < values.len() {
                values[k as usize].max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    SpectralBand::new(0.0, step, out)?.normalized()
}

/// Circular arrangement of an aligned band on `len` points with energy zero
/// at index 0 (negative energies wrap to the end), scaled by the step so the
/// zero-frequency component is the band's norm.
fn circular_spectrum(b: &SpectralBand, len: usize) -> Result<Vec<Complex64>> {
    let off = b.offset()?;
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (i, v) in b.values.iter().enumerate() {
        let j = (off + i as i64).rem_euclid(len as i64) as usize;
        buf[j] += Complex64::new(v * b.step, 0.0);
    }
    fft_plan(len, false).process(&mut buf);
    Ok(buf)
}

/// Inverse of [`circular_spectrum`]; returns values indexed by energy index
/// `0..len` (circular).
fn inverse_spectrum(mut x: Vec<Complex64>, step: f64) -> Vec<f64> {
    let len = x.len();
    fft_plan(len, true).process(&mut x);
    x.iter().map(|z| z.re / (len as f64 * step)).collect()
}

fn transform_len(band: &SpectralBand, i0: &SpectralBand) -> Result<usize> {
    let span = band.len() as i64 + band.offset()?.abs() + i0.len() as i64 + i0.offset()?.abs();
    Ok((2 * span as usize).next_power_of_two())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub i1: SpectralBand,
    /// Frequency bins where the transform magnitude hit the floor.
    pub floored_bins: usize,
    /// First frequency bin treated as beyond the ZPL bandwidth.
    pub cutoff_bin: usize,
}

/// One-phonon band by inverting the transform-domain relation
/// `S Ĩ1 = log(Ĩ / Ĩ0) + S`, with the phase of the logarithm unwrapped
/// along frequency. Transform magnitudes are floored at 1e-12 of their
/// maximum, and bins where the ZPL transform has fallen below 1e-9 of its
/// peak are treated as carrying no one-phonon signal. Sensitive to noise;
/// intended as a starting point for [`iterative_deconvolve`].
pub fn direct_fourier_deconvolve(
    band: &SpectralBand,
    s: f64,
    i0: &SpectralBand,
    omega: f64,
) -> Result<DirectEstimate> {
    if !(s > 0.0) {
        return Err(invalid("Huang-Rhys factor must be positive"));
    }
    band.check_step(i0)?;
    let len = transform_len(band, i0)?;
    let x = circular_spectrum(&band.normalized()?, len)?;
    let z = circular_spectrum(&i0.normalized()?, len)?;
    let zmax = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let half = len / 2;
    let cutoff_bin = (0..=half)
        .find(|&k| z[k].norm() < 1e-9 * zmax)
        .unwrap_or(half + 1);
    let ratio: Vec<Complex64> = (0..=half).map(|k| x[k] / z[k]).collect();
    let rmax = ratio[..cutoff_bin.min(half + 1)]
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    let floor = 1e-12 * rmax;
    let mut floored_bins = 0;
    let mut y = vec![Complex64::new(0.0, 0.0); len];
    let mut prev_phase = 0.0;
    for k in 0..=half {
        let val = if k >= cutoff_bin {
            Complex64::new(0.0, 0.0)
        } else {
            let r = ratio[k];
            let mag = if r.norm() < floor {
                floored_bins += 1;
                floor
            } else {
                r.norm()
            };
            let mut phase = r.arg();
            // unwrap relative to the previous bin
            phase += 2.0 * PI * ((prev_phase - phase) / (2.0 * PI)).round();
            prev_phase = phase;
            Complex64::new(mag.ln() / s + 1.0, phase / s)
        };
        y[k] = val;
        if k > 0 && k < half {
            y[len - k] = val.conj();
        }
    }
    if half < len {
        y[half] = Complex64::new(y[half].re, 0.0);
    }
    let values = inverse_spectrum(y, band.step);
    let i1 = project_one_phonon(&values, 0, band.step, omega)?;
    Ok(DirectEstimate {
        i1,
        floored_bins,
        cutoff_bin,
    })
}

/// Update rule for [`iterative_deconvolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IterativeScheme {
    /// `S I1^k = e^S I - I0 - Σ_{n≥2} S^n/n! I0 ⊗ I_n^{k-1}`. Treats the
    /// first-order term as `S I1` (a delta-like ZPL) and, because the mean
    /// phonon energy maps as `μ_k = c - (e^S - 1) μ_{k-1}`, is only stable
    /// for `S < ln 2`.
    Plain,
    /// Residual correction in the transform domain,
    /// `Ĩ1 += (Ĩ - F̃) / (S F̃)` with `F̃` the transform of the model band
    /// (a Newton step on `log Ĩ`). Same fixed point, stable for any S, and
    /// without the ZPL-width bias of `Plain`.
    #[default]
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeOptions {
    pub max_iter: usize,
    /// Stop when the L2 change of the iterate drops below this.
    pub tol: f64,
    pub omega: f64,
    pub scheme: IterativeScheme,
    pub n_max: Option<usize>,
    /// Newton damping: the update divides by `|F̃|^2 + (λ max|F̃|)^2`.
    /// Frequencies where the model transform is below `λ` of its peak are
    /// corrected only partially, so noise there is not amplified.
    pub regularization: f64,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-8,
            omega: crate::constants::DIAMOND_PHONON_CUTOFF_MEV,
            scheme: IterativeScheme::Newton,
            n_max: None,
            regularization: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// L2 norm of the change from the previous iterate.
    pub step: f64,
    /// L2 norm of input minus the re-synthesized band.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeResult {
    pub i1: SpectralBand,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the residual stopped falling near its best value, which is
    /// where inconsistent or noisy input leaves the iteration; `i1` is then
    /// the best iterate.
    pub stalled: bool,
    pub trace: Vec<IterationRecord>,
}

fn l2_diff(a: &SpectralBand, b: &SpectralBand) -> f64 {
    let n = a.len().max(b.len());
    let a = a.window(0, n).unwrap_or_else(|_| a.clone());
    let b = b.window(0, n).unwrap_or_else(|_| b.clone());
    (a.step
        * a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>())
    .sqrt()
}

/// Three successive residual rises end the iteration; it is reported as
/// diverged when the residual has also grown past this multiple of its best.
const DIVERGENCE_FACTOR: f64 = 2.0;

/// Refines a one-phonon band so that the synthesized sideband matches
/// `band`. `i1_init` should be smooth and supported on `[0, Ω]`.
pub fn iterative_deconvolve(
    band: &SpectralBand,
    s: f64,
    i0: &SpectralBand,
    i1_init: &SpectralBand,
    opts: &IterativeOptions,
) -> Result<IterativeResult> {
    if !(s > 0.0) {
        return Err(invalid("Huang-Rhys factor must be positive"));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    band.check_step(i0)?;
    band.check_step(i1_init)?;
    let w = Window::of(band)?;
    let h = band.step;
    let target = band.normalized()?;
    let (auto_n, _) = poisson_cutoff(s, 1e-8);
    let n_max = opts.n_max.unwrap_or(auto_n).max(2);
    let i0n = i0.normalized()?;
    let mut i1 = project_one_phonon(&i1_init.values, i1_init.offset()?, h, opts.omega)?;

    let residual_of = |i1: &SpectralBand| -> Result<f64> {
        let model = synthesize_band(i1, s, &i0n, Some(n_max), w)?.band;
        Ok(l2_diff(&model, &target))
    };
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut best = (residual_of(&i1)?, i1.clone());
    let mut last_residual = best.0;
    let mut rises = 0;
    let len = transform_len(band, i0)?;

    for k in 1..=opts.max_iter {
        let next_values: Vec<f64> = match opts.scheme {
            IterativeScheme::Plain => {
                let (higher, _) = pn_series(&i1, s, &i0n, n_max, w, true)?;
                let i0w = i0n.window(w.offset, w.len)?;
                let es = s.exp();
                target
                    .values
                    .iter()
                    .zip(&i0w.values)
                    .zip(&higher)
                    .map(|((b, z), hi)| (es * b - z - es * hi) / s)
                    .collect()
            }
            IterativeScheme::Newton => {
                let model = synthesize_band(&i1, s, &i0n, Some(n_max), w)?.band;
                let resid = SpectralBand {
                    values: target
                        .values
                        .iter()
                        .zip(&model.values)
                        .map(|(a, b)| a - b)
                        .collect(),
                    ..target.clone()
                };
                let r = circular_spectrum(&resid, len)?;
                let f = circular_spectrum(&model, len)?;
                let fmax = f.iter().map(|v| v.norm()).fold(0.0, f64::max);
                let eps2 = (opts.regularization.max(1e-10) * fmax).powi(2);
                let delta: Vec<Complex64> = r
                    .iter()
                    .zip(&f)
                    .map(|(r, f)| r * f.conj() / (s * (f.norm_sqr() + eps2)))
                    .collect();
                let d = inverse_spectrum(delta, h);
                let shift = i1.offset()?;
                (0..len)
                    .map(|j| {
                        let base = if (j as i64) >= shift && ((j as i64 - shift) as usize) < i1.len() {
                            i1.values[(j as i64 - shift) as usize]
                        } else {
                            0.0
                        };
                        base + d[j]
                    })
                    .collect()
            }
        };
        let start_index = match opts.scheme {
            IterativeScheme::Plain => w.offset,
            IterativeScheme::Newton => 0,
        };
        let next = project_one_phonon(&next_values, start_index, h, opts.omega)?;
        let step = l2_diff(&next, &i1);
        let residual = residual_of(&next)?;
        trace.push(IterationRecord {
            iteration: k,
            step,
            residual,
        });
        i1 = next;
        if residual < best.0 {
            best = (residual, i1.clone());
        }
        if residual > last_residual {
            rises += 1;
            if rises >= 3 {
                if residual > DIVERGENCE_FACTOR * best.0 {
                    return Err(Error::Diverged {
                        iteration: k,
                        best_residual: best.0,
                        best: best.1.values,
                    });
                }
                return Ok(IterativeResult {
                    i1: best.1,
                    iterations: k,
                    converged: false,
                    stalled: true,
                    trace,
                });
            }
        } else {
            rises = 0;
        }
        last_residual = residual;
        if step < opts.tol {
            return Ok(IterativeResult {
                i1,
                iterations: k,
                converged: true,
                stalled: false,
                trace,
            });
        }
    }
    Ok(IterativeResult {
        i1: best.1,
        iterations: opts.max_iter,
        converged: false,
        stalled: false,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothOptions {
    /// Moving-average window in grid points (odd values keep it centred).
    pub window_points: usize,
    /// Width of the raised-cosine ramps at 0 and Ω, meV.
    pub taper_mev: f64,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self {
            window_points: 5,
            taper_mev: 8.0,
        }
    }
}

/// Moving-average smoothing, raised-cosine taper to zero at 0 and `omega`,
/// clip to non-negative and renormalize on `[0, omega]`.
pub fn smooth_and_taper(raw: &SpectralBand, omega: f64, opts: &SmoothOptions) -> Result<SpectralBand> {
    raw.validate()?;
    let w = opts.window_points.max(1);
    let half = (w / 2) as i64;
    let n = raw.len() as i64;
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = (i - half).max(0);
            let hi = (i + half).min(n - 1);
            raw.values[lo as usize..=hi as usize].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let src = SpectralBand {
        values: smoothed,
        ..raw.clone()
    };
    let h = raw.step;
    let n_omega = (omega / h + 1e-9).floor() as usize;
    let tw = opts.taper_mev.max(h);
    let values: Vec<f64> = (0..=n_omega)
        .map(|j| {
            let e = j as f64 * h;
            let ramp = |d: f64| if d >= tw { 1.0 } else { 0.5 * (1.0 - (PI * d / tw).cos()) };
            (src.interpolate(e) * ramp(e) * ramp(omega - e)).max(0.0)
        })
        .collect();
    SpectralBand::new(0.0, h, values)?.normalized()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub energy: f64,
    pub height: f64,
    pub prominence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakMatch {
    pub peak: Peak,
    pub dos_energy: Option<f64>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub peaks: Vec<PeakMatch>,
    pub dos_peaks: Vec<Peak>,
    /// Fraction of the band's area above `omega`.
    pub mass_above_cutoff: f64,
    /// Raised when more than 1% of the area lies above `omega`.
    pub local_mode_flag: bool,
    /// Rows of (energy, band, DOS scaled to the band's maximum).
    pub overlay: Vec<[f64; 3]>,
}

/// Local maxima whose prominence is at least `threshold` of the band's
/// maximum, refined by a parabola through the three nearest points.
pub fn find_peaks(band: &SpectralBand, threshold: f64) -> Vec<Peak> {
    let v = &band.values;
    let n = v.len();
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n < 3 || !(vmax > 0.0) {
        return Vec::new();
    }
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if v[i] > v[i - 1] {
            // walk across a flat top
            let mut j = i;
            while j + 1 < n && v[j + 1] == v[i] {
                j += 1;
            }
            if j + 1 < n && v[j + 1] < v[i] {
                let top = (i + j) / 2;
                let height = v[top];
                let mut left_min = height;
                let mut k = i;
                while k > 0 {
                    k -= 1;
                    left_min = left_min.min(v[k]);
                    if v[k] > height {
                        break;
                    }
                }
                let mut right_min = height;
                let mut k = j;
                while k + 1 < n {
                    k += 1;
                    right_min = right_min.min(v[k]);
                    if v[k] > height {
                        break;
                    }
                }
                let prominence = height - left_min.max(right_min);
                if prominence >= threshold * vmax {
                    let (a, b, c) = (v[top - 1], v[top], v[top + 1]);
                    let denom = a - 2.0 * b + c;
                    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
                    peaks.push(Peak {
                        energy: band.energy(top) + shift.clamp(-0.5, 0.5) * band.step,
                        height,
                        prominence,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

/// Prominence threshold for peak detection, as a fraction of the maximum.
pub const PEAK_PROMINENCE: f64 = 0.05;

/// Compares the one-phonon band's features with a phonon density of states.
pub fn critical_point_report(band: &SpectralBand, dos: &SpectralBand, omega: f64) -> Result<CriticalPointReport> {
    band.validate()?;
    dos.validate()?;
    if dos.start > 1e-9 || dos.end() < omega - dos.step {
        return Err(invalid("DOS must cover [0, omega]"));
    }
    let peaks = find_peaks(band, PEAK_PROMINENCE);
    let dos_peaks = find_peaks(dos, PEAK_PROMINENCE);
    let matches = peaks
        .into_iter()
        .map(|p| {
            let nearest = dos_peaks
                .iter()
                .min_by(|a, b| (a.energy - p.energy).abs().total_cmp(&(b.energy - p.energy).abs()));
            PeakMatch {
                dos_energy: nearest.map(|d| d.energy),
                distance: nearest.map(|d| (d.energy - p.energy).abs()),
                peak: p,
            }
        })
        .collect();
    let total = band.norm();
    let above = band.step
        * band
            .energies()
            .zip(&band.values)
            .filter(|(e, _)| *e > omega + 1e-9)
            .map(|(_, v)| v)
            .sum::<f64>();
    let mass_above_cutoff = if total > 0.0 { above / total } else { 0.0 };
    let bmax = band.values.iter().copied().fold(0.0, f64::max);
    let dmax = dos.values.iter().copied().fold(0.0, f64::max);
    let scale = if dmax > 0.0 { bmax / dmax } else { 0.0 };
    let overlay = band
        .energies()
        .zip(&band.values)
        .map(|(e, v)| [e, *v, dos.interpolate(e) * scale])
        .collect();
    Ok(CriticalPointReport {
        peaks: matches,
        dos_peaks,
        mass_above_cutoff,
        local_mode_flag: mass_above_cutoff > 0.01,
        overlay,
    })
}

/// Unit-area Gaussian ZPL centred at zero on `[-half_width, half_width]`.
pub fn gaussian_zpl(sigma: f64, step: f64, half_width: f64) -> Result<SpectralBand> {
    if !(sigma > 0.0) {
        return Err(invalid("ZPL width must be positive"));
    }
    let m = (half_width / step).ceil() as i64;
    let values = (-m..=m)
        .map(|j| (-(j as f64 * step).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    SpectralBand::new(-m as f64 * step, step, values)?.normalized()
}

/// Measured ZPL re-centred on its maximum and normalized; the window spans
/// `half_width` around the peak.
pub fn zpl_from_measurement(line: &SpectralBand, half_width: f64) -> Result<SpectralBand> {
    line.validate()?;
    let (imax, _) = line
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| invalid("empty ZPL"))?;
    let m = (half_width / line.step).ceil() as i64;
    let values = (-m..=m)
        .map(|j| {
            let i = imax as i64 + j;
            if i >= 0 && (i as usize) < line.len() {
                line.values[i as usize].max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    SpectralBand::new(-m as f64 * line.step, line.step, values)?.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_band(center: f64, width: f64, step: f64, omega: f64) -> SpectralBand {
        let n = (omega / step).round() as usize + 1;
        SpectralBand::from_fn(0.0, step, n, |e| {
            let taper = (PI * e / omega).sin().powi(2);
            (-(e - center).powi(2) / (2.0 * width * width)).exp() * taper
        })
        .unwrap()
        .normalized()
        .unwrap()
    }

    fn delta(at: f64, step: f64) -> SpectralBand {
        SpectralBand::new(at, step, vec![1.0 / step]).unwrap()
    }

    #[test]
    fn fft_matches_quadrature() {
        let a = gaussian_band(60.0, 12.0, 0.5, 168.0);
        let b = SpectralBand::from_fn(-3.0, 0.5, 400, |e| (e * 0.37).sin().abs() + 0.1).unwrap();
        let f = convolve(&a, &b).unwrap();
        let q = quadrature_convolve(&a, &b).unwrap();
        let err = f
            .values
            .iter()
            .zip(&q.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert_eq!(f.start, q.start);
    }

    #[test]
    fn n_phonon_moments() {
        let i1 = gaussian_band(60.0, 15.0, 0.5, 168.0);
        let bands = n_phonon_bands(&i1, 6).unwrap();
        let mu = i1.mean();
        for (k, b) in bands.iter().enumerate() {
            let n = (k + 1) as f64;
            assert!((b.norm() - 1.0).abs() < 1e-6);
            assert!((b.mean() - n * mu).abs() < 1e-6 * n * mu);
            assert!(b.start >= 0.0 && b.end() <= n * 168.0 + 1e-9);
        }
    }

    #[test]
    fn box_convolves_to_triangle() {
        let step = 1.0;
        let omega = 100.0;
        let i1 = SpectralBand::from_fn(0.0, step, 100, |_| 1.0).unwrap().normalized().unwrap();
        let i2 = &n_phonon_bands(&i1, 2).unwrap()[1];
        let peak = i2.values.iter().copied().fold(0.0, f64::max);
        let (imax, _) = i2.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert!((i2.energy(imax) - (omega - step)).abs() < 1e-9);
        assert!((peak - 1.0 / omega).abs() < 1e-12);
    }

    #[test]
    fn deltas_give_peaks_at_multiples() {
        let i1 = delta(40.0, 0.5);
        let bands = n_phonon_bands(&i1, 4).unwrap();
        for (k, b) in bands.iter().enumerate() {
            assert!((b.start - 40.0 * (k + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn synthesis_limits() {
        let step = 0.5;
        let i0 = gaussian_zpl(1.0, step, 6.0).unwrap();
        let i1 = gaussian_band(60.0, 12.0, step, 168.0);
        let w = Window { offset: -12, len: 2048 };
        let s0 = synthesize_band(&i1, 0.0, &i0, None, w).unwrap();
        let i0w = i0.window(-12, 2048).unwrap();
        assert!(s0.band.values.iter().zip(&i0w.values).all(|(a, b)| (a - b).abs() < 1e-15));

        // Poisson comb for a delta-like one-phonon band and ZPL
        let comb = synthesize_band(&delta(30.0, step), 2.0, &delta(0.0, step), None, Window { offset: 0, len: 2048 }).unwrap();
        for n in 0..=8usize {
            let idx = (n as f64 * 30.0 / step) as usize;
            let weight = comb.band.values[idx] * step;
            let want = (-2.0f64).exp() * 2f64.powi(n as i32) / (1..=n).product::<usize>() as f64;
            assert!((weight - want).abs() < 1e-12, "{n}: {weight} vs {want}");
        }
        assert!(comb.truncation_bound < 1e-8);
    }

    #[test]
    fn norm_and_zpl_weight() {
        let step = 1.0;
        let i0 = gaussian_zpl(1.0, step, 8.0).unwrap();
        let i1 = gaussian_band(65.0, 20.0, step, 168.0);
        for s in [0.1, 1.0, 3.0, 10.0] {
            let out = synthesize_band(&i1, s, &i0, None, Window { offset: -8, len: 4096 }).unwrap();
            assert!((out.zpl_weight - (-s).exp()).abs() < 1e-6);
            assert!(out.missing_mass.abs() <= out.truncation_bound + 1e-9, "{s}: {}", out.missing_mass);
            // mean sideband energy: Σ over n of P(n) n μ / (1 - e^-S)
            let psb: f64 = out.band.energies().zip(&out.band.values).map(|(e, v)| e * v * step).sum::<f64>();
            // ZPL is symmetric about 0 so only the sideband contributes
            assert!((psb - s * i1.mean()).abs() < 1e-6 * s * i1.mean());
        }
    }

    #[test]
    fn huang_rhys_estimates() {
        let step = 0.5;
        let i0 = gaussian_zpl(0.8, step, 6.0).unwrap();
        let i1 = gaussian_band(60.0, 12.0, step, 168.0);
        let w = Window { offset: -12, len: 3000 };
        let band = synthesize_band(&i1, 3.2, &i0, None, w).unwrap().band;
        let s = estimate_huang_rhys(&band, (-5.0, 5.0)).unwrap();
        assert!((s - 3.2).abs() < 1e-3, "{s}");
        let zpl_only = i0.window(-12, 100).unwrap();
        assert!(estimate_huang_rhys(&zpl_only, (-5.0, 5.0)).unwrap() < 1e-6);
        let one = synthesize_band(&i1, 1.0, &i0, None, w).unwrap().band;
        assert!((estimate_huang_rhys(&one, (-5.0, 5.0)).unwrap() - 1.0).abs() < 1e-3);
        assert!(estimate_huang_rhys(&band, (100.0, 101.0)).is_err());
    }

    #[test]
    fn bandshape_roundtrip_and_cubic_factor() {
        let step = 0.5;
        let omega0 = 2230.0;
        let flat = SpectralBand::from_fn(omega0 - 400.0, step, 801, |_| 1.0).unwrap();
        let b = bandshape_from_emission(&flat, omega0, 0.0).unwrap();
        for i in [0usize, 100, 500] {
            let e = omega0 - b.energy(i);
            let ratio = b.values[i] * e.powi(3) / (b.values[0] * omega0.powi(3));
            assert!((ratio - 1.0).abs() < 1e-12);
        }

        let truth = gaussian_band(70.0, 15.0, step, 168.0)
            .window(-10, 800)
            .unwrap();
        let emission = emission_from_bandshape(&truth, omega0, omega0 - 399.5 + 0.0, 800).unwrap();
        let back = bandshape_from_emission(&emission, omega0, 5.0).unwrap();
        for (e, v) in back.energies().zip(&back.values) {
            let want = truth.interpolate(e) / truth.norm();
            assert!((v - want).abs() < 1e-9, "{e}: {v} vs {want}");
        }
        assert!(bandshape_from_emission(&flat, 10.0, 0.0).is_err());
    }

    #[test]
    fn direct_deconvolution_roundtrip() {
        let step = 1.0;
        let i0 = gaussian_zpl(1.0, step, 8.0).unwrap();
        let truth = gaussian_band(60.0, 14.0, step, 168.0);
        let band = synthesize_band(&truth, 2.5, &i0, None, Window { offset: -8, len: 2048 }).unwrap().band;
        let est = direct_fourier_deconvolve(&band, 2.5, &i0, 168.0).unwrap();
        let err = l2_diff(&est.i1, &truth) / truth.l2();
        assert!(err < 1e-3, "{err}");

        let comb = synthesize_band(&delta(40.0, step), 1.5, &delta(0.0, step), None, Window { offset: 0, len: 1024 }).unwrap().band;
        let est = direct_fourier_deconvolve(&comb, 1.5, &delta(0.0, step), 168.0).unwrap();
        let (imax, _) = est.i1.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert!((est.i1.energy(imax) - 40.0).abs() < 1e-9);
        assert!(est.i1.values[imax] * step > 0.99);
    }

    #[test]
    fn iterative_fixed_point_and_recovery() {
        let step = 1.0;
        let i0 = gaussian_zpl(1.0, step, 8.0).unwrap();
        let truth = gaussian_band(70.0, 18.0, step, 168.0);
        let w = Window { offset: -8, len: 2048 };
        let band = synthesize_band(&truth, 4.0, &i0, None, w).unwrap().band;
        let opts = IterativeOptions::default();
        let r = iterative_deconvolve(&band, 4.0, &i0, &truth, &opts).unwrap();
        assert!(r.converged && r.iterations <= 1, "{:?}", r.trace);

        let init = smooth_and_taper(&gaussian_band(50.0, 30.0, step, 168.0), 168.0, &SmoothOptions::default()).unwrap();
        let r = iterative_deconvolve(&band, 4.0, &i0, &init, &opts).unwrap();
        let err = l2_diff(&r.i1, &truth) / truth.l2();
        assert!(err < 1e-2, "{err} {:?}", r.trace);
    }

    #[test]
    fn plain_scheme_converges_for_weak_coupling_and_diverges_otherwise() {
        let step = 1.0;
        let i0 = delta(0.0, step);
        let truth = gaussian_band(70.0, 18.0, step, 168.0);
        let w = Window { offset: 0, len: 2048 };
        let init = gaussian_band(60.0, 25.0, step, 168.0);
        let plain = IterativeOptions {
            scheme: IterativeScheme::Plain,
            max_iter: 200,
            ..Default::default()
        };
        let weak = synthesize_band(&truth, 0.4, &i0, None, w).unwrap().band;
        let r = iterative_deconvolve(&weak, 0.4, &i0, &init, &plain).unwrap();
        assert!(l2_diff(&r.i1, &truth) / truth.l2() < 1e-3);
        let strong = synthesize_band(&truth, 3.0, &i0, None, w).unwrap().band;
        let out = iterative_deconvolve(&strong, 3.0, &i0, &init, &plain);
        assert!(matches!(out, Err(Error::Diverged { .. })));
    }

    #[test]
    fn smoothing_contracts() {
        let step = 0.5;
        let omega = 168.0;
        let smooth = gaussian_band(70.0, 15.0, step, omega);
        let out = smooth_and_taper(&smooth, omega, &SmoothOptions::default()).unwrap();
        assert!(l2_diff(&out, &smooth) / smooth.l2() < 0.02);

        let wide = SpectralBand::from_fn(0.0, step, 500, |e| (-(e - 150.0f64).powi(2) / 800.0).exp()).unwrap();
        let out = smooth_and_taper(&wide, omega, &SmoothOptions::default()).unwrap();
        assert!(out.end() <= omega + 1e-9);
        assert_eq!(*out.values.last().unwrap(), 0.0);

        // deterministic pseudo-noise
        let mut state = 12345u64;
        let noisy = SpectralBand {
            values: smooth
                .values
                .iter()
                .map(|v| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    v + 0.002 * (((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5)
                })
                .collect(),
            ..smooth.clone()
        };
        let tv = |b: &SpectralBand| b.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        let out = smooth_and_taper(&noisy, omega, &SmoothOptions::default()).unwrap();
        let noisy_n = noisy.normalized().unwrap();
        assert!(tv(&out) < 0.5 * tv(&noisy_n), "{} vs {}", tv(&out), tv(&noisy_n));
    }

    #[test]
    fn critical_points() {
        let step = 0.5;
        let omega = 168.0;
        let g = SpectralBand::from_fn(0.0, step, 337, |e| (-(e - 60.0f64).powi(2) / 200.0).exp()).unwrap().normalized().unwrap();
        let dos = SpectralBand::from_fn(0.0, step, 337, |e| {
            (-(e - 62.0f64).powi(2) / 20.0).exp() + 0.8 * (-(e - 150.0f64).powi(2) / 10.0).exp()
        })
        .unwrap();
        let rep = critical_point_report(&g, &dos, omega).unwrap();
        assert_eq!(rep.peaks.len(), 1);
        assert!((rep.peaks[0].peak.energy - 60.0).abs() < 1.0);
        assert!(!rep.local_mode_flag);

        let same = critical_point_report(&dos, &dos, omega).unwrap();
        assert_eq!(same.peaks.len(), 2);
        assert!(same.peaks.iter().all(|p| p.distance == Some(0.0)));

        let ext = g.window(0, 500).unwrap();
        let mut with_mode = ext.clone();
        let i_mode = (1.1 * omega / step).round() as usize;
        with_mode.values[i_mode] += 0.05 / 0.95 / step;
        let rep = critical_point_report(&with_mode, &dos, omega).unwrap();
        assert!(rep.local_mode_flag);
        assert!((rep.mass_above_cutoff - 0.05).abs() < 1e-3);
    }
}
