//! Five-level singlet/triplet rate model: steady state, photon statistics and
//! the inversion from fitted g2 parameters back to rates.
//!
//! Populations are ordered `S0, S1, T+, T-, T0`. `k_isc` is the total rate out
//! of `S1` into the triplet, split equally over the three sublevels. With
//! excited-state absorption, an extra `beta * k_ex` channel carries `S1`
//! population into `T0` only.
//!
//! Rates are in 1/s, delays in ns.

use nalgebra::{DMatrix, DVector, SMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::photons_per_joule;
use crate::error::{invalid, Error, Result};
use crate::g2_processing::G2Fit;
use crate::lsq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub k_ex: f64,
    pub k_f: f64,
    pub k_isc: f64,
    pub k0: f64,
    pub km: f64,
    pub kp: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "unit")]
    pub eta: f64,
}

fn unit() -> f64 {
    1.0
}

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.k_ex, self.k_f, self.k_isc, self.k0, self.km, self.kp, self.beta,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(invalid("rates and beta must be finite and non-negative"));
        }
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(invalid("collection efficiency must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Feed rates from S1 into (T0, T-, T+).
    fn feeds(&self) -> [f64; 3] {
        let q = self.k_isc / 3.0;
        [q + self.beta * self.k_ex, q, q]
    }

    fn triplet(&self) -> [f64; 3] {
        [self.k0, self.km, self.kp]
    }

    /// Total loss rate of S1.
    fn s1_loss(&self) -> f64 {
        self.k_ex * (1.0 + self.beta) + self.k_f + self.k_isc
    }

    /// Rate matrix `M` with `dp/dt = M p`, columns summing to zero.
    pub fn rate_matrix(&self) -> SMatrix<f64, 5, 5> {
        let [q0, qm, qp] = self.feeds();
        let mut m = SMatrix::<f64, 5, 5>::zeros();
        m[(0, 0)] = -self.k_ex;
        m[(1, 0)] = self.k_ex;
        m[(0, 1)] = self.k_f;
        m[(1, 1)] = -(self.k_f + self.k_isc + self.beta * self.k_ex);
        m[(2, 1)] = qp;
        m[(3, 1)] = qm;
        m[(4, 1)] = q0;
        m[(0, 2)] = self.kp;
        m[(2, 2)] = -self.kp;
        m[(0, 3)] = self.km;
        m[(3, 3)] = -self.km;
        m[(0, 4)] = self.k0;
        m[(4, 4)] = -self.k0;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Populations {
    pub s0: f64,
    pub s1: f64,
    pub t_plus: f64,
    pub t_minus: f64,
    pub t0: f64,
}

impl Populations {
    pub fn as_array(&self) -> [f64; 5] {
        [self.s0, self.s1, self.t_plus, self.t_minus, self.t0]
    }

    fn from_slice(p: &[f64]) -> Self {
        Self {
            s0: p[0],
            s1: p[1],
            t_plus: p[2],
            t_minus: p[3],
            t0: p[4],
        }
    }
}

pub fn steady_state(r: &RateParams) -> Result<Populations> {
    r.validate()?;
    let m = r.rate_matrix();
    if m.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("all rates are zero".into()));
    }
    let mut a = DMatrix::from_iterator(5, 5, m.iter().copied());
    for j in 0..5 {
        a[(0, j)] = 1.0;
    }
    let mut b = DVector::zeros(5);
    b[0] = 1.0;
    let p = a
        .lu()
        .solve(&b)
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Degenerate("rate matrix has no unique steady state".into()))?;
    let resid = (m * nalgebra::Vector5::from_iterator(p.iter().copied())).norm();
    if resid > 1e-10 * m.norm() {
        return Err(Error::Degenerate("steady state is ill-determined".into()));
    }
    let clipped: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
    Ok(Populations::from_slice(&clipped))
}

/// Monic quartic `x^4 + B x^3 + C x^2 + D x + E` whose roots are the
/// negated relaxation rates of the reduced (population-conserving) system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharPoly {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl CharPoly {
    pub fn monic(b: f64, c: f64, d: f64, e: f64) -> Self {
        Self {
            a: 1.0,
            b,
            c,
            d,
            e,
        }
    }

    pub fn eval(&self, x: Complex64) -> Complex64 {
        (((x * self.a + self.b) * x + self.c) * x + self.d) * x + self.e
    }
}

/// Elementary symmetric polynomials (e1, e2, e3) of three values.
fn elementary3(k: [f64; 3]) -> [f64; 3] {
    [
        k[0] + k[1] + k[2],
        k[0] * k[1] + k[0] * k[2] + k[1] * k[2],
        k[0] * k[1] * k[2],
    ]
}

/// Coefficients of the characteristic quartic. With `beta = 0` and per-sublevel
/// feed `k_isc / 3` these are
///
/// ```text
/// B = a + e1
/// C = a e1 + e2 + k_ex k_isc
/// D = a e2 + e3 + (2/3) k_ex k_isc e1
/// E = a e3 + (1/3) k_ex k_isc e2
/// ```
///
/// with `a = k_ex + k_f + k_isc` and `e_n` the elementary symmetric
/// polynomials of `(k0, k-, k+)`.
pub fn characteristic_coefficients(r: &RateParams) -> CharPoly {
    let k = r.triplet();
    let q = r.feeds();
    let [e1, e2, e3] = elementary3(k);
    let a = r.s1_loss();
    let kx = r.k_ex;
    let sum_q: f64 = q.iter().sum();
    let d_feed: f64 = (0..3).map(|i| q[i] * (e1 - k[i])).sum();
    let e_feed: f64 = (0..3)
        .map(|i| q[i] * k[(i + 1) % 3] * k[(i + 2) % 3])
        .sum();
    CharPoly::monic(
        a + e1,
        a * e1 + e2 + kx * sum_q,
        a * e2 + e3 + kx * d_feed,
        a * e3 + kx * e_feed,
    )
}

/// Detected photon rate `eta k_f k_ex k0 k- k+ / E`.
pub fn detected_rate(r: &RateParams) -> Result<f64> {
    r.validate()?;
    let e = characteristic_coefficients(r).e;
    if e == 0.0 {
        return Err(Error::Degenerate("constant coefficient E is zero".into()));
    }
    let [_, _, e3] = elementary3(r.triplet());
    Ok(r.eta * r.k_f * r.k_ex * e3 / e)
}

fn horner(coeffs: &[f64], x: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs {
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp)
}

/// Newton steps for isolated roots. A close pair is re-solved from the
/// quadratic Taylor expansion about its midpoint, which is well conditioned
/// where single-root Newton is not.
fn polish(full: &[f64], roots: &mut [Complex64], scale: f64) {
    let n = roots.len();
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let close: Vec<usize> = (0..n)
            .filter(|&j| {
                j != i
                    && !done[j]
                    && (roots[j] - roots[i]).norm() < 1e-3 * roots[i].norm().max(1e-12 * scale)
            })
            .collect();
        match close.as_slice() {
            [] => {
                let z = &mut roots[i];
                for _ in 0..8 {
                    let (p, dp) = horner(full, *z);
                    if dp.norm() == 0.0 || p.norm() == 0.0 {
                        break;
                    }
                    let next = *z - p / dp;
                    if horner(full, next).0.norm() < p.norm() {
                        *z = next;
                    } else {
                        break;
                    }
                }
                done[i] = true;
            }
            [j] => {
                let j = *j;
                let m = (roots[i] + roots[j]) * 0.5;
                let (p0, p1, p2) = taylor2(full, m);
                if p2.norm() > 0.0 {
                    // p0 + p1 d + p2 d^2 = 0
                    let disc = (p1 * p1 - p0 * p2 * 4.0).sqrt();
                    let (d1, d2) = ((-p1 + disc) / (p2 * 2.0), (-p1 - disc) / (p2 * 2.0));
                    let (a, b) = (m + d1, m + d2);
                    let old = horner(full, roots[i]).0.norm() + horner(full, roots[j]).0.norm();
                    let new = horner(full, a).0.norm() + horner(full, b).0.norm();
                    if new <= old {
                        // keep the pairing closest to the eigen-solve output
                        if (roots[i] - a).norm() + (roots[j] - b).norm()
                            <= (roots[i] - b).norm() + (roots[j] - a).norm()
                        {
                            roots[i] = a;
                            roots[j] = b;
                        } else {
                            roots[i] = b;
                            roots[j] = a;
                        }
                    }
                }
                done[i] = true;
                done[j] = true;
            }
            _ => done[i] = true,
        }
    }
}

/// Value, first and half second derivative of the polynomial at `x`.
fn taylor2(full: &[f64], x: Complex64) -> (Complex64, Complex64, Complex64) {
    let zero = Complex64::new(0.0, 0.0);
    let (mut p, mut d1, mut d2) = (zero, zero, zero);
    for &c in full {
        d2 = d2 * x + d1;
        d1 = d1 * x + p;
        p = p * x + c;
    }
    (p, d1, d2)
}

/// Roots of the monic polynomial `x^n + c[0] x^{n-1} + ... + c[n-1]` from
/// companion-matrix eigenvalues (after scaling), polished by Newton steps.
pub fn monic_roots(c: &[f64]) -> Vec<Complex64> {
    let n = c.len();
    if n == 0 {
        return Vec::new();
    }
    let scale = c
        .iter()
        .enumerate()
        .map(|(k, v)| v.abs().powf(1.0 / (k + 1) as f64))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return vec![Complex64::new(0.0, 0.0); n];
    }
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        comp[(0, k)] = -c[k] / scale.powi(k as i32 + 1);
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    let mut full = Vec::with_capacity(n + 1);
    full.push(1.0);
    full.extend_from_slice(c);
    let mut roots: Vec<Complex64> = comp
        .complex_eigenvalues()
        .iter()
        .map(|z| z * scale)
        .collect();
    polish(&full, &mut roots, scale);
    roots
}

/// Roots sorted by real part, descending (least negative first).
pub fn quartic_roots(c: &CharPoly) -> [Complex64; 4] {
    let a = if c.a == 0.0 { 1.0 } else { c.a };
    let mut roots = monic_roots(&[c.b / a, c.c / a, c.d / a, c.e / a]);
    roots.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    [roots[0], roots[1], roots[2], roots[3]]
}

/// Largest relative mismatch between the coefficients and Vieta's sums of
/// the roots.
pub fn vieta_residual(c: &CharPoly, roots: &[Complex64; 4]) -> f64 {
    let [l1, l2, l3, l4] = *roots;
    let s1 = l1 + l2 + l3 + l4;
    let s2 = l1 * l2 + l1 * l3 + l1 * l4 + l2 * l3 + l2 * l4 + l3 * l4;
    let s3 = l1 * l2 * l3 + l1 * l2 * l4 + l1 * l3 * l4 + l2 * l3 * l4;
    let s4 = l1 * l2 * l3 * l4;
    let rel = |got: Complex64, want: f64| {
        (got - want).norm() / want.abs().max(f64::MIN_POSITIVE)
    };
    [rel(-s1, c.b), rel(s2, c.c), rel(-s3, c.d), rel(s4, c.e)]
    .into_iter()
    .fold(0.0, f64::max)
}

/// A sampled g2 curve; `numeric_fallback` marks curves computed by direct
/// propagation because two relaxation rates collided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Curve {
    pub tau_ns: Vec<f64>,
    pub values: Vec<f64>,
    pub numeric_fallback: bool,
}

const COLLISION_TOL: f64 = 1e-9;

/// Relaxation rates (positive real parts) and their g2 amplitudes
/// `alpha_i = (L_j L_k L_l / (k0 k- k+)) prod_m (L_i - k_m) / prod_{j!=i}(L_i - L_j)`,
/// so that `g2 = 1 - sum alpha_i exp(-L_i tau)`.
fn components(r: &RateParams) -> Result<Option<[(Complex64, Complex64); 4]>> {
    r.validate()?;
    let k = r.triplet();
    let [_, _, e3] = elementary3(k);
    if e3 == 0.0 {
        return Err(Error::Degenerate("a triplet depopulation rate is zero".into()));
    }
    let lam = quartic_roots(&characteristic_coefficients(r)).map(|z| -z);
    let scale = lam.iter().map(|z| z.norm()).fold(0.0, f64::max);
    for i in 0..4 {
        for j in 0..i {
            if (lam[i] - lam[j]).norm() < COLLISION_TOL * scale {
                return Ok(None);
            }
        }
    }
    let mut out = [(Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)); 4];
    for i in 0..4 {
        let mut num = Complex64::new(1.0 / e3, 0.0);
        let mut den = Complex64::new(1.0, 0.0);
        for j in 0..4 {
            if j != i {
                num *= lam[j];
                den *= lam[i] - lam[j];
            }
        }
        for km in k {
            num *= lam[i] - km;
        }
        out[i] = (lam[i], num / den);
    }
    Ok(Some(out))
}

/// Analytic `S1(tau) / S1(inf)` after a photon detection (system in S0).
pub fn g2_analytic(r: &RateParams, tau_ns: &[f64]) -> Result<G2Curve> {
    if tau_ns.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("delays must be non-negative"));
    }
    match components(r)? {
        Some(comp) => {
            let values = tau_ns
                .iter()
                .map(|&t| {
                    let ts = t * 1e-9;
                    1.0 - comp
                        .iter()
                        .map(|(l, a)| a * (-l * ts).exp())
                        .sum::<Complex64>()
                        .re
                })
                .collect();
            Ok(G2Curve {
                tau_ns: tau_ns.to_vec(),
                values,
                numeric_fallback: false,
            })
        }
        None => {
            let values = g2_numeric(r, tau_ns)?;
            Ok(G2Curve {
                tau_ns: tau_ns.to_vec(),
                values,
                numeric_fallback: true,
            })
        }
    }
}

/// Exact `(alpha_i, tau_i)` of the model curve as a four-component fit
/// (rho = 1). Fails when the relaxation rates are complex or collide.
pub fn g2_components(r: &RateParams) -> Result<G2Fit> {
    let comp = components(r)?
        .ok_or_else(|| Error::Degenerate("relaxation rates collide".into()))?;
    let mut pairs = Vec::with_capacity(4);
    for (l, a) in comp {
        if l.im.abs() > 1e-9 * l.norm() || l.re <= 0.0 {
            return Err(Error::Unsupported(
                "relaxation rates are not real and positive".into(),
            ));
        }
        pairs.push((a.re, 1e9 / l.re));
    }
    pairs.sort_by(|x, y| x.1.total_cmp(&y.1));
    Ok(G2Fit {
        alphas: pairs.iter().map(|p| p.0).collect(),
        taus_ns: pairs.iter().map(|p| p.1).collect(),
        rho: 1.0,
    })
}

/// Brute-force g2 by propagating the five-level system from `S0 = 1`.
///
/// Each delay is propagated independently with the matrix exponential of
/// `M tau` (scaling and squaring with Pade approximants), so there is no
/// step-size error to accumulate; the result is normalized by the
/// steady-state `S1`.
pub fn g2_numeric(r: &RateParams, tau_ns: &[f64]) -> Result<Vec<f64>> {
    if tau_ns.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("delays must be non-negative"));
    }
    let s1_inf = steady_state(r)?.s1;
    if s1_inf <= 0.0 {
        return Err(Error::Degenerate("steady-state S1 is zero".into()));
    }
    let m = DMatrix::from_iterator(5, 5, r.rate_matrix().iter().copied());
    Ok(tau_ns
        .iter()
        .map(|&t| {
            if t == 0.0 {
                return 0.0;
            }
            let prop = (&m * (t * 1e-9)).exp();
            prop[(1, 0)] / s1_inf
        })
        .collect())
}

/// Which root of the `k_ex` quadratic to take. The two roots are `k_ex` and
/// `k_f + k_isc (+ beta k_ex)`; `Minus` is correct when `k_ex` is the smaller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KexBranch {
    #[default]
    Minus,
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ExtractOptions {
    pub branch: KexBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    /// Recovered rates. Triplet rates are labelled by size:
    /// `k0 < k- < k+`. `k_isc` is the apparent rate, i.e. it includes any
    /// excited-state-absorption channel; `beta` is reported as zero.
    pub rates: RateParams,
    /// Per-sublevel feed `k_ex q_i` for (T0, T-, T+), 1/s^2.
    pub sublevel_feed: [f64; 3],
    /// Largest relative mismatch between the coefficients rebuilt from the
    /// recovered rates and Vieta's sums of the fitted rates.
    pub vieta_residual: f64,
    /// `|sum alpha - 1|`; zero for a curve that vanishes at zero delay.
    pub alpha_sum_residual: f64,
    pub discriminant: f64,
    /// Set when a slightly negative rate was clamped to zero.
    pub clamped: bool,
}

fn elementary4(l: [f64; 4]) -> [f64; 4] {
    let mut e = [0.0; 5];
    e[0] = 1.0;
    for &x in &l {
        for k in (1..5).rev() {
            e[k] += e[k - 1] * x;
        }
    }
    [e[1], e[2], e[3], e[4]]
}

/// Inverts a four-component g2 fit plus the detected rate `R` (counts/s)
/// and collection efficiency into the six rates.
pub fn extract_rates(
    fit: &G2Fit,
    detected: f64,
    eta: f64,
    opts: &ExtractOptions,
) -> Result<Extraction> {
    fit.validate()?;
    if fit.taus_ns.len() != 4 {
        return Err(invalid("exactly four components are required"));
    }
    if !(detected > 0.0) {
        return Err(invalid("detected rate must be positive"));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid("collection efficiency must lie in (0, 1]"));
    }
    let lam: [f64; 4] = std::array::from_fn(|i| 1e9 / fit.taus_ns[i]);
    let alpha: [f64; 4] = std::array::from_fn(|i| fit.alphas[i]);
    let [b, c, d, e] = elementary4(lam);

    // The Lagrange interpolant through (L_i, alpha_i L_i / E) is
    // (x - k0)(x - k-)(x - k+) / (k0 k- k+).
    let w_sum: f64 = (0..4).map(|i| alpha[i] * lam[i]).sum();
    if !(w_sum > 0.0) {
        return Err(Error::InvalidFit("sum of alpha_i / tau_i must be positive".into()));
    }
    let e3 = e / w_sum;
    let (mut s_e1, mut s_e2) = (0.0, 0.0);
    for i in 0..4 {
        let others: Vec<f64> = (0..4).filter(|&j| j != i).map(|j| lam[j]).collect();
        let [o1, o2, _] = elementary3([others[0], others[1], others[2]]);
        let w = alpha[i] * lam[i] / e;
        s_e1 += w * o1;
        s_e2 += w * o2;
    }
    let e1 = e3 * s_e1;
    let e2 = e3 * s_e2;
    let alpha_sum_residual = (alpha.iter().sum::<f64>() - 1.0).abs();

    let cubic = monic_roots(&[-e1, e2, -e3]);
    let mut k = Vec::with_capacity(3);
    for z in cubic {
        if z.im.abs() > 1e-7 * z.norm() || z.re <= 0.0 {
            return Err(Error::InvalidFit(
                "implied triplet rates are not real and positive".into(),
            ));
        }
        k.push(z.re);
    }
    k.sort_by(f64::total_cmp);
    let k = [k[0], k[1], k[2]];

    // p(-k_m) = prod_i (L_i - k_m) = k_ex q_m prod_{j != m} (k_j - k_m)
    let mut feed = [0.0; 3];
    for m in 0..3 {
        let num: f64 = lam.iter().map(|l| l - k[m]).product();
        let den: f64 = (0..3).filter(|&j| j != m).map(|j| k[j] - k[m]).product();
        if den == 0.0 {
            return Err(Error::InvalidFit("implied triplet rates coincide".into()));
        }
        feed[m] = num / den;
    }
    let c_n: f64 = feed.iter().sum();
    let b_n = b - (k[0] + k[1] + k[2]);
    let r_n = detected * e / (e3 * eta);
    let mut disc = b_n * b_n - 4.0 * (c_n + r_n);
    if disc < 0.0 {
        if disc > -1e-10 * b_n * b_n {
            disc = 0.0;
        } else {
            return Err(Error::InconsistentFit(format!(
                "negative discriminant {disc:e} in the excitation-rate quadratic"
            )));
        }
    }
    let root = disc.sqrt();
    let k_ex = match opts.branch {
        KexBranch::Minus if b_n + root > 0.0 => 2.0 * (c_n + r_n) / (b_n + root),
        KexBranch::Minus => 0.5 * (b_n - root),
        KexBranch::Plus => 0.5 * (b_n + root),
    };
    if !(k_ex > 0.0) {
        return Err(Error::InconsistentFit("non-positive excitation rate".into()));
    }
    let mut clamped = false;
    let mut nonneg = |v: f64, scale: f64| -> Result<f64> {
        if v >= 0.0 {
            Ok(v)
        } else if v > -1e-6 * scale {
            clamped = true;
            Ok(0.0)
        } else {
            Err(Error::InconsistentFit(format!("negative rate {v:e}")))
        }
    };
    let k_f = nonneg(r_n / k_ex, b_n)?;
    let k_isc = nonneg(c_n / k_ex, b_n)?;
    let rates = RateParams {
        k_ex,
        k_f,
        k_isc,
        k0: k[0],
        km: k[1],
        kp: k[2],
        beta: 0.0,
        eta,
    };
    let rebuilt = characteristic_coefficients(&rates);
    let vieta_residual = [
        (rebuilt.b - b).abs() / b.abs(),
        (rebuilt.c - c).abs() / c.abs(),
        (rebuilt.d - d).abs() / d.abs(),
        (rebuilt.e - e).abs() / e.abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(Extraction {
        rates,
        sublevel_feed: feed,
        vieta_residual,
        alpha_sum_residual,
        discriminant: disc,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionFit {
    pub sigma_cm2: f64,
    /// Excitation rate at zero irradiance, 1/s.
    pub intercept: f64,
    pub slope: f64,
    pub residual_rms: f64,
}

fn affine_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let a = DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let sx = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let spread = x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - x.iter().copied().fold(f64::INFINITY, f64::min);
    if !(spread > 1e-12 * sx) {
        return Err(Error::Degenerate("abscissae are not distinct".into()));
    }
    let sol = lsq::linear_least_squares(&a, &DVector::from_column_slice(y))?;
    let rms = (x
        .iter()
        .zip(y)
        .map(|(x, y)| (y - sol[0] - sol[1] * x).powi(2))
        .sum::<f64>()
        / x.len() as f64)
        .sqrt();
    Ok((sol[0], sol[1], rms))
}

/// Absorption cross-section from excitation rates measured at several pump
/// powers: `k_ex = (lambda / hc) sigma I` with `I = P / A`.
/// Points are `(power_W, k_ex)`.
pub fn absorption_cross_section(
    points: &[(f64, f64)],
    wavelength_nm: f64,
    focal_area_cm2: f64,
) -> Result<CrossSectionFit> {
    if !(focal_area_cm2 > 0.0) {
        return Err(invalid("focal area must be positive"));
    }
    if !(wavelength_nm > 0.0) {
        return Err(invalid("wavelength must be positive"));
    }
    if points.len() < 2 {
        return Err(invalid("at least two points are required"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0 / focal_area_cm2).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (intercept, slope, residual_rms) = affine_fit(&x, &y)?;
    Ok(CrossSectionFit {
        sigma_cm2: slope / photons_per_joule(wavelength_nm),
        intercept,
        slope,
        residual_rms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsaFit {
    /// Power-independent part of the apparent ISC rate, 1/s.
    pub k_isc0: f64,
    pub beta: f64,
    /// Set when a negative slope was clamped to zero.
    pub beta_clamped: bool,
    pub residual_rms: f64,
}

/// Fits apparent ISC rates against excitation rate, `k_isc = k_isc0 + beta k_ex`.
/// Points are `(k_ex, k_isc)`.
pub fn esa_fit(points: &[(f64, f64)]) -> Result<EsaFit> {
    if points.len() < 3 {
        return Err(invalid("at least three points are required"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (k_isc0, beta, residual_rms) = affine_fit(&x, &y)?;
    Ok(EsaFit {
        k_isc0,
        beta: beta.max(0.0),
        beta_clamped: beta < 0.0,
        residual_rms,
    })
}

/// Excited-state absorption cross-section implied by `beta` for a ground-state
/// cross-section `sigma` (both channels share the pump photon flux).
pub fn esa_cross_section(beta: f64, sigma_cm2: f64) -> f64 {
    beta * sigma_cm2
}

/// Excitation rate for a pump power, 1/s.
pub fn excitation_rate(power_w: f64, sigma_cm2: f64, wavelength_nm: f64, focal_area_cm2: f64) -> f64 {
    photons_per_joule(wavelength_nm) * sigma_cm2 * power_w / focal_area_cm2
}

/// Triplet sublevel mixed with T0 by the microwave drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DrivenSublevel {
    Minus,
    #[default]
    Plus,
}

/// ODMR contrast `(R_mw - R) / R` for a saturating drive between T0 and one
/// other sublevel. Under infinite mixing both sublevels decay at the mean of
/// their rates `(k0 + k_d) / 2`, which is what replaces both rates here.
pub fn odmr_contrast(r: &RateParams, driven: DrivenSublevel) -> Result<f64> {
    let base = detected_rate(r)?;
    if base == 0.0 {
        return Ok(0.0);
    }
    let mut mixed = *r;
    match driven {
        DrivenSublevel::Minus => {
            let k = 0.5 * (r.k0 + r.km);
            mixed.k0 = k;
            mixed.km = k;
        }
        DrivenSublevel::Plus => {
            let k = 0.5 * (r.k0 + r.kp);
            mixed.k0 = k;
            mixed.kp = k;
        }
    }
    Ok((detected_rate(&mixed)? - base) / base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSeriesPoint {
    pub power_w: f64,
    pub k_ex: f64,
    /// Apparent ISC rate `k_isc + beta k_ex`.
    pub k_isc: f64,
    pub fluorescence: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpCalibration {
    pub sigma_cm2: f64,
    pub wavelength_nm: f64,
    pub focal_area_cm2: f64,
}

/// Fluorescence and contrast of the extended model over a set of pump powers.
pub fn power_sweep_model(
    base: &RateParams,
    beta: f64,
    powers_w: &[f64],
    cal: &PumpCalibration,
    driven: DrivenSublevel,
) -> Result<Vec<PowerSeriesPoint>> {
    if !(cal.sigma_cm2 >= 0.0 && cal.wavelength_nm > 0.0 && cal.focal_area_cm2 > 0.0) {
        return Err(invalid("invalid pump calibration"));
    }
    powers_w
        .iter()
        .map(|&p| {
            if !(p > 0.0) {
                return Err(invalid("powers must be positive"));
            }
            let k_ex = excitation_rate(p, cal.sigma_cm2, cal.wavelength_nm, cal.focal_area_cm2);
            let r = RateParams { k_ex, beta, ..*base };
            Ok(PowerSeriesPoint {
                power_w: p,
                k_ex,
                k_isc: base.k_isc + beta * k_ex,
                fluorescence: detected_rate(&r)?,
                contrast: odmr_contrast(&r, driven)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn example() -> RateParams {
        RateParams {
            k_ex: 1e6,
            k_f: 1e8,
            k_isc: 1e6,
            k0: 1e9 / 2120.0,
            km: 1e9 / 440.0,
            kp: 1e9 / 250.0,
            beta: 0.0,
            eta: 0.01,
        }
    }

    /// Eliminates S0 by conservation; state (S1, T+, T-, T0).
    fn reduced_matrix(r: &RateParams) -> Matrix4<f64> {
        let m = r.rate_matrix();
        Matrix4::from_fn(|i, j| m[(i + 1, j + 1)] - m[(i + 1, 0)])
    }

    fn sorted_eigs(m: Matrix4<f64>) -> Vec<Complex64> {
        let mut e: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
        e.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
        e
    }

    #[test]
    fn two_level_reduction() {
        let r = RateParams {
            k_isc: 0.0,
            ..example()
        };
        let p = steady_state(&r).unwrap();
        assert_eq!(p.t0 + p.t_minus + p.t_plus, 0.0);
        assert_relative_eq!(p.s1 / p.s0, r.k_ex / r.k_f, max_relative = 1e-12);
        let rate = detected_rate(&r).unwrap();
        assert_relative_eq!(rate, r.eta * r.k_f * r.k_ex / (r.k_ex + r.k_f), max_relative = 1e-12);
    }

    #[test]
    fn dark_system() {
        let r = RateParams {
            k_ex: 0.0,
            ..example()
        };
        let p = steady_state(&r).unwrap();
        assert_eq!(p.as_array(), [1.0, 0.0, 0.0, 0.0, 0.0]);
        let zero = RateParams {
            k_ex: 0.0,
            k_f: 0.0,
            k_isc: 0.0,
            k0: 0.0,
            km: 0.0,
            kp: 0.0,
            beta: 0.0,
            eta: 1.0,
        };
        assert!(matches!(steady_state(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn steady_state_matches_dense_solve() {
        for beta in [0.0, 0.3] {
            let r = RateParams { beta, ..example() };
            let p = steady_state(&r).unwrap();
            // Oracle: solve the reduced 4x4 system M' x = -m0 directly.
            let m = r.rate_matrix();
            let red = reduced_matrix(&r);
            let rhs = nalgebra::Vector4::from_fn(|i, _| -m[(i + 1, 0)]);
            let x = red.lu().solve(&rhs).unwrap();
            assert_relative_eq!(p.s1, x[0], max_relative = 1e-10);
            assert_relative_eq!(p.t_plus, x[1], max_relative = 1e-10);
            assert_relative_eq!(p.t_minus, x[2], max_relative = 1e-10);
            assert_relative_eq!(p.t0, x[3], max_relative = 1e-10);
            assert!((p.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rate = detected_rate(&r).unwrap();
            assert_relative_eq!(rate, r.eta * r.k_f * p.s1, max_relative = 1e-9);
        }
        assert_eq!(detected_rate(&RateParams { eta: 0.0, ..example() }).unwrap(), 0.0);
    }

    #[test]
    fn coefficients_equal_triplet_closed_form() {
        // Hand-derived with k0 = k- = k+ = t, beta = 0:
        // p(s) = (s + t)^2 [(s + a)(s + t) + k_ex k_isc]
        let t = 3e6;
        let r = RateParams {
            k0: t,
            km: t,
            kp: t,
            ..example()
        };
        let a = r.k_ex + r.k_f + r.k_isc;
        let g = r.k_ex * r.k_isc;
        // (s^2 + 2ts + t^2)(s^2 + (a+t)s + (at + g))
        let (p1, p0) = (a + t, a * t + g);
        let want = [
            2.0 * t + p1,
            t * t + 2.0 * t * p1 + p0,
            t * t * p1 + 2.0 * t * p0,
            t * t * p0,
        ];
        let c = characteristic_coefficients(&r);
        for (got, w) in [c.b, c.c, c.d, c.e].iter().zip(want) {
            assert_relative_eq!(*got, w, max_relative = 1e-12);
        }
    }

    #[test]
    fn coefficients_match_reduced_eigenvalues() {
        for beta in [0.0, 0.5] {
            let r = RateParams { beta, ..example() };
            let roots = quartic_roots(&characteristic_coefficients(&r));
            let eigs = sorted_eigs(reduced_matrix(&r));
            for (z, e) in roots.iter().zip(&eigs) {
                assert!((z - e).norm() < 1e-6 * e.norm(), "{z} vs {e}");
            }
        }
    }

    #[test]
    fn decoupled_triplet_roots() {
        let r = RateParams {
            k_isc: 0.0,
            ..example()
        };
        let roots = quartic_roots(&characteristic_coefficients(&r));
        for k in [r.k0, r.km, r.kp] {
            assert!(roots.iter().any(|z| (z.re + k).abs() < 1e-9 * k && z.im.abs() < 1e-6));
        }
    }

    #[test]
    fn quartic_textbook_cases() {
        let roots = quartic_roots(&CharPoly::monic(10.0, 35.0, 50.0, 24.0));
        for (z, w) in roots.iter().zip([-1.0, -2.0, -3.0, -4.0]) {
            assert!((z.re - w).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
        // (x+1)^2 (x+2)^2 = x^4 + 6x^3 + 13x^2 + 12x + 4
        let c = CharPoly::monic(6.0, 13.0, 12.0, 4.0);
        let roots = quartic_roots(&c);
        for (z, w) in roots.iter().zip([-1.0, -1.0, -2.0, -2.0]) {
            assert!((z - w).norm() < 1e-6, "{z}");
        }
        assert!(vieta_residual(&c, &roots) < 1e-8, "{roots:?} {}", vieta_residual(&c, &roots));
    }

    #[test]
    fn generator_spectrum_and_vieta() {
        let c = characteristic_coefficients(&example());
        let roots = quartic_roots(&c);
        let max_rate = example().k_f;
        assert!(roots.iter().all(|z| z.re <= 1e-9 * max_rate));
        assert!(vieta_residual(&c, &roots) < 1e-8);
    }

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    #[test]
    fn analytic_matches_numeric() {
        for beta in [0.0, 0.2] {
            let r = RateParams { beta, ..example() };
            let tau = log_grid(1.0, 1e5, 200);
            let a = g2_analytic(&r, &tau).unwrap();
            assert!(!a.numeric_fallback);
            let n = g2_numeric(&r, &tau).unwrap();
            for (x, y) in a.values.iter().zip(&n) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
            let zero = g2_analytic(&r, &[0.0]).unwrap().values[0];
            assert!(zero.abs() < 1e-9);
        }
    }

    #[test]
    fn g2_stationary_limit_and_two_level() {
        let r = example();
        let comp = g2_components(&r).unwrap();
        let slowest = comp.taus_ns.iter().copied().fold(0.0, f64::max);
        let g = g2_analytic(&r, &[30.0 * slowest]).unwrap().values[0];
        assert!((g - 1.0).abs() < 1e-6);

        let two = RateParams {
            k_isc: 0.0,
            ..example()
        };
        let tau = [0.0, 1.0, 5.0, 20.0];
        let n = g2_numeric(&two, &tau).unwrap();
        for (t, v) in tau.iter().zip(n) {
            let want = 1.0 - (-(two.k_ex + two.k_f) * t * 1e-9).exp();
            assert!((v - want).abs() < 1e-10);
        }
    }

    #[test]
    fn collision_falls_back_to_numeric() {
        let r = RateParams {
            k_isc: 0.0,
            k0: 1e6,
            km: 1e6,
            kp: 2e6,
            ..example()
        };
        let curve = g2_analytic(&r, &[0.0, 10.0, 100.0]).unwrap();
        assert!(curve.numeric_fallback);
        assert!(curve.values[0].abs() < 1e-12);
    }

    #[test]
    fn extraction_roundtrip_example() {
        let r = example();
        let fit = g2_components(&r).unwrap();
        let rate = detected_rate(&r).unwrap();
        let ex = extract_rates(&fit, rate, r.eta, &ExtractOptions::default()).unwrap();
        let got = ex.rates;
        for (a, b) in [
            (got.k_ex, r.k_ex),
            (got.k_f, r.k_f),
            (got.k_isc, r.k_isc),
            (got.k0, r.k0),
            (got.km, r.km),
            (got.kp, r.kp),
        ] {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
        assert!(ex.vieta_residual < 1e-8);
        assert!(ex.alpha_sum_residual < 1e-9);
    }

    #[test]
    fn extraction_without_shelving() {
        let r = RateParams {
            k_isc: 0.0,
            ..example()
        };
        // Triplet components have zero amplitude; the fit still carries
        // their time constants.
        let fit = g2_components(&r).unwrap();
        let ex = extract_rates(&fit, detected_rate(&r).unwrap(), r.eta, &Default::default()).unwrap();
        assert!(ex.rates.k_isc < 1e-6 * ex.rates.k_f);
    }

    #[test]
    fn extraction_errors() {
        let r = example();
        let fit = g2_components(&r).unwrap();
        let rate = detected_rate(&r).unwrap();
        // far too many detected photons for the fitted dynamics
        assert!(matches!(
            extract_rates(&fit, rate * 1e6, r.eta, &Default::default()),
            Err(Error::InconsistentFit(_))
        ));
        let bad = G2Fit {
            alphas: vec![-1.0, -1.0, 0.5, 0.5],
            ..fit.clone()
        };
        assert!(matches!(
            extract_rates(&bad, rate, r.eta, &Default::default()),
            Err(Error::InvalidFit(_))
        ));
        assert!(extract_rates(&fit, 0.0, r.eta, &Default::default()).is_err());
    }

    #[test]
    fn cross_section_fits() {
        let sigma = 1e-17;
        let area = 1e-8;
        let pts: Vec<(f64, f64)> = (1..=10)
            .map(|i| {
                let p = i as f64 * 1e-4;
                (p, excitation_rate(p, sigma, 532.0, area))
            })
            .collect();
        let fit = absorption_cross_section(&pts, 532.0, area).unwrap();
        assert_relative_eq!(fit.sigma_cm2, sigma, max_relative = 1e-9);
        let doubled = absorption_cross_section(&pts, 532.0, 2.0 * area).unwrap();
        assert_relative_eq!(doubled.sigma_cm2, 2.0 * sigma, max_relative = 1e-9);
        let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, 5e6)).collect();
        assert!(absorption_cross_section(&flat, 532.0, area).unwrap().sigma_cm2.abs() < 1e-30);
        assert!(absorption_cross_section(&pts, 532.0, 0.0).is_err());
    }

    #[test]
    fn esa_fit_roundtrip() {
        let beta = 0.04;
        let pts: Vec<(f64, f64)> = (1..=8).map(|i| {
            let kx = i as f64 * 2e6;
            (kx, 1e6 + beta * kx)
        }).collect();
        let fit = esa_fit(&pts).unwrap();
        assert_relative_eq!(fit.beta, beta, max_relative = 1e-9);
        assert_relative_eq!(fit.k_isc0, 1e6, max_relative = 1e-9);
        let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, 1e6)).collect();
        let fit = esa_fit(&flat).unwrap();
        assert!(fit.beta < 1e-6 * 1e6 / 16e6);
        assert!(esa_fit(&pts[..2]).is_err());
        assert!(esa_fit(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
        assert_relative_eq!(esa_cross_section(0.1, 1e-17), 1e-18, max_relative = 1e-12);
    }

    #[test]
    fn contrast_signs() {
        let equal = RateParams {
            k0: 1e6,
            km: 1e6,
            kp: 1e6,
            ..example()
        };
        assert!(odmr_contrast(&equal, DrivenSublevel::Plus).unwrap().abs() < 1e-12);
        let c = odmr_contrast(&example(), DrivenSublevel::Minus).unwrap();
        assert!(c > 0.0);
    }

    #[test]
    fn saturating_without_esa() {
        let cal = PumpCalibration {
            sigma_cm2: 1e-17,
            wavelength_nm: 532.0,
            focal_area_cm2: 1e-8,
        };
        let powers = log_grid(1e-6, 1e-1, 30);
        let pts = power_sweep_model(&example(), 0.0, &powers, &cal, DrivenSublevel::Plus).unwrap();
        assert!(pts.windows(2).all(|w| w[1].fluorescence >= w[0].fluorescence));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rates() -> impl Strategy<Value = RateParams> {
            (
                (4.0..9.0f64, 4.0..9.0f64, 4.0..9.0f64),
                (4.0..9.0f64, 4.0..9.0f64, 4.0..9.0f64),
                0.0..0.5f64,
            )
                .prop_map(|((a, b, c), (d, e, f), beta)| RateParams {
                    k_ex: 10f64.powf(a),
                    k_f: 10f64.powf(b),
                    k_isc: 10f64.powf(c),
                    k0: 10f64.powf(d),
                    km: 10f64.powf(e),
                    kp: 10f64.powf(f),
                    beta,
                    eta: 0.5,
                })
        }

        proptest! {
            #[test]
            fn populations_conserved(r in rates()) {
                let p = steady_state(&r).unwrap();
                prop_assert!((p.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let rate = detected_rate(&r).unwrap();
                prop_assert!((rate - r.eta * r.k_f * p.s1).abs() <= 1e-9 * rate);
            }

            #[test]
            fn roots_in_left_half_plane(r in rates()) {
                let c = characteristic_coefficients(&r);
                let roots = quartic_roots(&c);
                let max_rate = [r.k_ex * (1.0 + r.beta), r.k_f, r.k_isc, r.k0, r.km, r.kp]
                    .into_iter().fold(0.0, f64::max);
                prop_assert!(roots.iter().all(|z| z.re <= 1e-9 * max_rate));
                prop_assert!(vieta_residual(&c, &roots) < 1e-8);
            }

            #[test]
            fn propagation_conserves_population(r in rates(), t in 0.1..1e5f64) {
                let m = DMatrix::from_iterator(5, 5, r.rate_matrix().iter().copied());
                let p = (&m * (t * 1e-9)).exp();
                let col: f64 = (0..5).map(|i| p[(i, 0)]).sum();
                prop_assert!((col - 1.0).abs() < 1e-9);
            }
        }
    }
}
