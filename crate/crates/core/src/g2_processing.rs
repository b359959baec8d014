//! Coincidence-histogram normalization, background correction and
//! multi-exponential fitting of g2(tau).
//!
//! The fitted form is `g2(t) = 1 - sum_i alpha_i exp(-t / tau_i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lsq::{self, LevenbergMarquardt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_centers_ns: Vec<f64>,
    pub counts: Vec<u64>,
    pub bin_width_ns: f64,
    /// Total accumulation time, s.
    pub accumulation_s: f64,
    /// Detector count rates, 1/s.
    pub n1: f64,
    pub n2: f64,
}

impl CoincidenceHistogram {
    pub fn validate(&self) -> Result<()> {
        if self.bin_centers_ns.len() != self.counts.len() {
            return Err(invalid("bin centres and counts differ in length"));
        }
        if self.bin_centers_ns.len() >= 2 {
            let w = self.bin_width_ns;
            for pair in self.bin_centers_ns.windows(2) {
                if ((pair[1] - pair[0]) - w).abs() > 1e-9 * w.abs().max(1e-300) * 1e3 {
                    return Err(invalid("bins are not uniform"));
                }
            }
        }
        Ok(())
    }
}

/// A sampled correlation curve with per-point standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub tau_ns: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Curve {
    /// Curve with unit uncertainties.
    pub fn new(tau_ns: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if tau_ns.len() != values.len() {
            return Err(invalid("tau and values differ in length"));
        }
        let sigma = vec![1.0; values.len()];
        Ok(Self {
            tau_ns,
            values,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `C_N(t) = c(t) / (N1 N2 w T)`; uncertainties from Poisson counting with a
/// floor of one count.
pub fn normalize(h: &CoincidenceHistogram) -> Result<Curve> {
    h.validate()?;
    let norm = h.n1 * h.n2 * h.bin_width_ns * 1e-9 * h.accumulation_s;
    if !(h.n1 > 0.0 && h.n2 > 0.0 && h.bin_width_ns > 0.0 && h.accumulation_s > 0.0) {
        return Err(invalid("N1, N2, bin width and accumulation time must be positive"));
    }
    Ok(Curve {
        tau_ns: h.bin_centers_ns.clone(),
        values: h.counts.iter().map(|&c| c as f64 / norm).collect(),
        sigma: h
            .counts
            .iter()
            .map(|&c| (c.max(1) as f64).sqrt() / norm)
            .collect(),
    })
}

/// `g2 = (C_N - (1 - rho^2)) / rho^2`.
pub fn background_correct(cn: &Curve, rho: f64) -> Result<Curve> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid("rho must lie in (0, 1]"));
    }
    let r2 = rho * rho;
    Ok(Curve {
        tau_ns: cn.tau_ns.clone(),
        values: cn.values.iter().map(|v| (v - (1.0 - r2)) / r2).collect(),
        sigma: cn.sigma.iter().map(|s| s / r2).collect(),
    })
}

/// Inverse of [`background_correct`].
pub fn add_background(g2: &Curve, rho: f64) -> Result<Curve> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid("rho must lie in (0, 1]"));
    }
    let r2 = rho * rho;
    Ok(Curve {
        tau_ns: g2.tau_ns.clone(),
        values: g2.values.iter().map(|v| v * r2 + 1.0 - r2).collect(),
        sigma: g2.sigma.iter().map(|s| s * r2).collect(),
    })
}

/// Estimates rho from the zero-delay dip relative to the long-delay plateau,
/// assuming an ideal single emitter (`g2(0) = 0`). The plateau is the mean
/// of the last `tail_fraction` of the points.
pub fn estimate_rho(cn: &Curve, tail_fraction: f64) -> Result<f64> {
    if cn.is_empty() || !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(invalid("need a non-empty curve and tail fraction in (0, 1]"));
    }
    let n_tail = ((cn.len() as f64 * tail_fraction).ceil() as usize).max(1);
    let plateau = cn.values[cn.len() - n_tail..].iter().sum::<f64>() / n_tail as f64;
    let i0 = (0..cn.len())
        .min_by(|&a, &b| cn.tau_ns[a].abs().total_cmp(&cn.tau_ns[b].abs()))
        .unwrap_or(0);
    if plateau <= 0.0 {
        return Err(Error::Degenerate("non-positive plateau".into()));
    }
    let r2 = ((plateau - cn.values[i0]) / plateau).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(r2.sqrt())
}

/// Amplitudes and time constants of `1 - sum alpha_i exp(-t/tau_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Fit {
    pub alphas: Vec<f64>,
    pub taus_ns: Vec<f64>,
    pub rho: f64,
}

impl G2Fit {
    pub fn eval(&self, t_ns: f64) -> f64 {
        1.0 - self
            .alphas
            .iter()
            .zip(&self.taus_ns)
            .map(|(a, tau)| a * (-t_ns.abs() / tau).exp())
            .sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.taus_ns.len() {
            return Err(invalid("alphas and taus differ in length"));
        }
        if self.taus_ns.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(invalid("time constants must be positive"));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(invalid("non-finite amplitude"));
        }
        Ok(())
    }

    fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.taus_ns.len()).collect();
        idx.sort_by(|&a, &b| self.taus_ns[a].total_cmp(&self.taus_ns[b]));
        self.alphas = idx.iter().map(|&i| self.alphas[i]).collect();
        self.taus_ns = idx.iter().map(|&i| self.taus_ns[i]).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    /// Uses the curve's per-point sigma.
    #[default]
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum InitStrategy {
    /// Log-spaced time constants over the data range, amplitudes by linear
    /// least squares.
    #[default]
    LogSpaced,
    /// User-supplied time constants (ns); amplitudes by linear least squares.
    Taus(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitG2Options {
    pub n_exp: usize,
    pub init: InitStrategy,
    pub weighting: Weighting,
    pub rho: f64,
    pub max_iterations: usize,
    /// A component is dropped when removing it raises chi-square by less
    /// than this fraction (plus an absolute floor).
    pub prune_tolerance: f64,
}

impl Default for FitG2Options {
    fn default() -> Self {
        Self {
            n_exp: 4,
            init: InitStrategy::LogSpaced,
            weighting: Weighting::Poisson,
            rho: 1.0,
            max_iterations: 2000,
            prune_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2FitReport {
    pub fit: G2Fit,
    pub alpha_sigma: Vec<f64>,
    pub tau_sigma_ns: Vec<f64>,
    pub residual_rms: f64,
    pub initial_residual_rms: f64,
    pub chi2: f64,
    pub condition_number: f64,
    /// Set when the Jacobian condition number exceeds 1e12.
    pub ill_conditioned: bool,
    /// Number of components left after dropping redundant ones.
    pub active_components: usize,
}

struct Data<'a> {
    t: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
}

impl Data<'_> {
    fn basis(&self, taus: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.t.len(), taus.len(), |i, j| {
            self.w[i] * (-self.t[i].abs() / taus[j]).exp()
        })
    }

    /// Weighted targets for `1 - y = sum alpha_i e_i(t)`.
    fn target(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.t.len(),
            self.y.iter().zip(&self.w).map(|(y, w)| w * (1.0 - y)),
        )
    }

    fn linear_amplitudes(&self, taus: &[f64]) -> Result<Vec<f64>> {
        let a = lsq::linear_least_squares(&self.basis(taus), &self.target())?;
        Ok(a.iter().copied().collect())
    }

    fn full_residuals(&self, alphas: &[f64], taus: &[f64]) -> Vec<f64> {
        self.t
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((t, y), w)| {
                let model = 1.0
                    - alphas
                        .iter()
                        .zip(taus)
                        .map(|(a, tau)| a * (-t.abs() / tau).exp())
                        .sum::<f64>();
                w * (y - model)
            })
            .collect()
    }

    fn chi2(&self, alphas: &[f64], taus: &[f64]) -> f64 {
        self.full_residuals(alphas, taus).iter().map(|r| r * r).sum()
    }
}

/// Variable projection: parameters are log time constants; amplitudes are
/// eliminated by linear least squares.
struct Projected<'a> {
    data: &'a Data<'a>,
    n: usize,
}

impl lsq::Problem for Projected<'_> {
    fn n_params(&self) -> usize {
        self.n
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let taus: Vec<f64> = p.iter().map(|v| v.exp()).collect();
        match self.data.linear_amplitudes(&taus) {
            Ok(a) => self.data.full_residuals(&a, &taus),
            Err(_) => vec![f64::NAN; self.data.t.len()],
        }
    }
}

/// Full problem over (alpha_i, ln tau_i) with an analytic Jacobian.
struct Full<'a> {
    data: &'a Data<'a>,
    n: usize,
}

impl lsq::Problem for Full<'_> {
    fn n_params(&self) -> usize {
        2 * self.n
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let (a, lt) = p.split_at(self.n);
        let taus: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
        self.data.full_residuals(a, &taus)
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (a, lt) = p.split_at(self.n);
        let d = self.data;
        DMatrix::from_fn(d.t.len(), 2 * self.n, |i, j| {
            let t = d.t[i].abs();
            let k = j % self.n;
            let tau = lt[k].exp();
            let e = (-t / tau).exp();
            if j < self.n {
                d.w[i] * e
            } else {
                // d/d(ln tau) of alpha e^{-t/tau} = alpha e^{-t/tau} t/tau
                d.w[i] * a[k] * e * t / tau
            }
        })
    }
}

fn log_spaced_seeds(t: &[f64], n: usize) -> Vec<f64> {
    let positive: Vec<f64> = t.iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(0.0, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (1.0, 10.0)
    };
    // Seeds strictly inside the sampled span.
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (l0 + (l1 - l0) * (i as f64 + 0.5) / n as f64).exp())
        .collect()
}

fn fit_components(data: &Data, seeds: &[f64], max_iterations: usize) -> Result<(Vec<f64>, Vec<f64>, lsq::Report)> {
    let n = seeds.len();
    let solver = LevenbergMarquardt {
        max_iterations,
        ..Default::default()
    };
    let x0: Vec<f64> = seeds.iter().map(|t| t.ln()).collect();
    let projected = Projected { data, n };
    let lt = match solver.minimize(&projected, &x0) {
        Ok(r) => r.params,
        Err(Error::NotConverged { last, .. }) => last,
        Err(e) => return Err(e),
    };
    let taus: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
    let alphas = data.linear_amplitudes(&taus)?;
    let mut x1 = alphas.clone();
    x1.extend(lt);
    let full = Full { data, n };
    let report = solver.minimize(&full, &x1)?;
    let (a, lt) = report.params.split_at(n);
    Ok((a.to_vec(), lt.iter().map(|v| v.exp()).collect(), report))
}

/// Fits from the given seeds, and also from seeds grown one component at a
/// time (each new time constant picked from a log grid by projected
/// chi-square). Keeps whichever optimum is lower.
fn best_start(
    data: &Data,
    seeds: &[f64],
    max_iterations: usize,
) -> Result<(Vec<f64>, Vec<f64>, lsq::Report)> {
    let direct = fit_components(data, seeds, max_iterations);
    let n = seeds.len();
    let grid = log_spaced_seeds(data.t, 24);
    let projected_cost = |taus: &[f64]| -> f64 {
        data.linear_amplitudes(taus)
            .map(|a| data.chi2(&a, taus))
            .unwrap_or(f64::INFINITY)
    };
    let mut grown: Vec<f64> = Vec::with_capacity(n);
    let solver = LevenbergMarquardt {
        max_iterations: max_iterations.min(200),
        cost_tolerance: 1e-10,
        ..Default::default()
    };
    for _ in 0..n {
        let best = grid
            .iter()
            .filter(|&&cand| grown.iter().all(|t| (t / cand).ln().abs() > 0.05))
            .map(|&cand| {
                let mut trial = grown.clone();
                trial.push(cand);
                (projected_cost(&trial), trial)
            })
            .filter(|(c, _)| c.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((_, trial)) = best else { break };
        let x0: Vec<f64> = trial.iter().map(|t| t.ln()).collect();
        let projected = Projected {
            data,
            n: trial.len(),
        };
        let lt = match solver.minimize(&projected, &x0) {
            Ok(r) => r.params,
            Err(Error::NotConverged { last, .. }) => last,
            Err(_) => x0,
        };
        grown = lt.iter().map(|v| v.exp()).collect();
    }
    let greedy = if grown.len() == n {
        fit_components(data, &grown, max_iterations)
    } else {
        Err(Error::FitDegenerate("greedy initialization failed".into()))
    };
    match (direct, greedy) {
        (Ok(a), Ok(b)) => Ok(if b.2.cost < a.2.cost { b } else { a }),
        (Ok(a), Err(_)) | (Err(_), Ok(a)) => Ok(a),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Fits `1 - sum alpha_i exp(-t/tau_i)` with `n_exp` components. The data
/// should span at least three decades of delay for four components to be
/// identifiable. Components that do not improve chi-square are reported
/// with zero amplitude.
pub fn fit_g2(curve: &Curve, opts: &FitG2Options) -> Result<G2FitReport> {
    let n = opts.n_exp;
    if n == 0 {
        return Err(invalid("n_exp must be positive"));
    }
    if curve.len() < 8 * n {
        return Err(invalid(format!(
            "need at least {} points for {n} components",
            8 * n
        )));
    }
    if curve.tau_ns.len() != curve.len() || curve.sigma.len() != curve.len() {
        return Err(invalid("curve arrays differ in length"));
    }
    let w: Vec<f64> = match opts.weighting {
        Weighting::Uniform => vec![1.0; curve.len()],
        Weighting::Poisson => curve
            .sigma
            .iter()
            .map(|s| if *s > 0.0 { 1.0 / s } else { 1.0 })
            .collect(),
    };
    let data = Data {
        t: &curve.tau_ns,
        y: &curve.values,
        w,
    };
    let seeds = match &opts.init {
        InitStrategy::LogSpaced => log_spaced_seeds(&curve.tau_ns, n),
        InitStrategy::Taus(t) => {
            if t.len() != n || t.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("initial taus must be n_exp positive values"));
            }
            t.clone()
        }
    };
    let init_alphas = data.linear_amplitudes(&seeds)?;
    let initial_chi2 = data.chi2(&init_alphas, &seeds);

    let (mut alphas, mut taus, mut report) = best_start(&data, &seeds, opts.max_iterations)?;
    let mut active: Vec<usize> = (0..n).collect();

    // Drop components whose removal leaves chi-square unchanged.
    loop {
        if active.len() <= 1 {
            break;
        }
        let chi2 = report.cost;
        let floor = 1e-24 * data.y.len() as f64;
        let mut best: Option<(usize, Vec<f64>, Vec<f64>, lsq::Report)> = None;
        for drop in 0..active.len() {
            let sub: Vec<f64> = (0..active.len())
                .filter(|&k| k != drop)
                .map(|k| taus[k])
                .collect();
            if let Ok((a, t, r)) = fit_components(&data, &sub, opts.max_iterations) {
                if r.cost <= chi2 * (1.0 + opts.prune_tolerance) + floor
                    && best.as_ref().map_or(true, |b| r.cost < b.3.cost)
                {
                    best = Some((drop, a, t, r));
                }
            }
        }
        match best {
            Some((drop, a, t, r)) => {
                active.remove(drop);
                alphas = a;
                taus = t;
                report = r;
            }
            None => break,
        }
    }

    let cov = report.covariance(true);
    let k = active.len();
    let sig = |idx: usize| cov.as_ref().map_or(f64::NAN, |c| c[(idx, idx)].max(0.0).sqrt());
    let mut full_alphas = vec![0.0; n];
    let mut full_taus = seeds.clone();
    let mut alpha_sigma = vec![0.0; n];
    let mut tau_sigma = vec![0.0; n];
    for (slot, &orig) in active.iter().enumerate() {
        full_alphas[orig] = alphas[slot];
        full_taus[orig] = taus[slot];
        alpha_sigma[orig] = sig(slot);
        // sigma of tau from sigma of ln tau
        tau_sigma[orig] = sig(k + slot) * taus[slot];
    }
    let mut fit = G2Fit {
        alphas: full_alphas,
        taus_ns: full_taus,
        rho: opts.rho,
    };
    // Keep uncertainties aligned with the sorted order.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| fit.taus_ns[a].total_cmp(&fit.taus_ns[b]));
    let alpha_sigma = idx.iter().map(|&i| alpha_sigma[i]).collect();
    let tau_sigma_ns = idx.iter().map(|&i| tau_sigma[i]).collect();
    fit.sort();

    let m = data.y.len() as f64;
    let chi2 = data.chi2(&fit.alphas, &fit.taus_ns);
    Ok(G2FitReport {
        fit,
        alpha_sigma,
        tau_sigma_ns,
        residual_rms: (chi2 / m).sqrt(),
        initial_residual_rms: (initial_chi2 / m).sqrt(),
        chi2,
        condition_number: report.condition_number,
        ill_conditioned: report.condition_number > 1e12,
        active_components: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    fn synthetic(fit: &G2Fit, t: &[f64]) -> Curve {
        Curve::new(t.to_vec(), t.iter().map(|&x| fit.eval(x)).collect()).unwrap()
    }

    #[test]
    fn flat_histogram_normalizes_to_one() {
        let (n1, n2, w, tt) = (2e4, 3e4, 1.0, 100.0);
        let expected = (n1 * n2 * w * 1e-9 * tt) as u64;
        let h = CoincidenceHistogram {
            bin_centers_ns: (0..10).map(|i| i as f64).collect(),
            counts: vec![expected; 10],
            bin_width_ns: w,
            accumulation_s: tt,
            n1,
            n2,
        };
        let c = normalize(&h).unwrap();
        assert!(c.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let half = CoincidenceHistogram {
            accumulation_s: tt / 2.0,
            ..h.clone()
        };
        let c2 = normalize(&half).unwrap();
        assert!(c2.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let bad = CoincidenceHistogram { n1: 0.0, ..h };
        assert!(normalize(&bad).is_err());
    }

    #[test]
    fn background_roundtrip() {
        let c = Curve::new(vec![0.0, 1.0, 2.0], vec![0.3, 1.0, 1.7]).unwrap();
        assert_eq!(background_correct(&c, 1.0).unwrap().values, c.values);
        let g = background_correct(&c, 0.8).unwrap();
        let back = add_background(&g, 0.8).unwrap();
        for (a, b) in back.values.iter().zip(&c.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let ones = Curve::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        assert!(background_correct(&ones, 0.37)
            .unwrap()
            .values
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-12));
        assert!(background_correct(&c, 0.0).is_err());
    }

    #[test]
    fn synthetic_histogram_matches_planted_curve() {
        let planted = G2Fit {
            alphas: vec![1.3, -0.3],
            taus_ns: vec![5.0, 400.0],
            rho: 0.9,
        };
        let t: Vec<f64> = (0..400).map(|i| i as f64 * 2.0).collect();
        let (n1, n2, w, tt) = (5e4, 5e4, 2.0, 3600.0);
        let norm = n1 * n2 * w * 1e-9 * tt;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cn_true: Vec<f64> = t
            .iter()
            .map(|&x| planted.rho.powi(2) * planted.eval(x) + 1.0 - planted.rho.powi(2))
            .collect();
        let counts = cn_true
            .iter()
            .map(|c| Poisson::new(c * norm).unwrap().sample(&mut rng) as u64)
            .collect();
        let h = CoincidenceHistogram {
            bin_centers_ns: t.clone(),
            counts,
            bin_width_ns: w,
            accumulation_s: tt,
            n1,
            n2,
        };
        let cn = normalize(&h).unwrap();
        let within = cn
            .values
            .iter()
            .zip(&cn_true)
            .zip(&cn.sigma)
            .filter(|((v, c), s)| ((*v - *c) / *s).abs() < 4.0)
            .count();
        assert_eq!(within, t.len());
        let rho = estimate_rho(&cn, 0.1).unwrap();
        assert!((rho - 0.9).abs() < 0.05, "{rho}");
    }

    #[test]
    fn noiseless_four_exponential_recovery() {
        let planted = G2Fit {
            alphas: vec![1.6, -0.25, -0.2, -0.15],
            taus_ns: vec![3.0, 60.0, 900.0, 12000.0],
            rho: 1.0,
        };
        let t = log_grid(0.1, 1e5, 300);
        let c = synthetic(&planted, &t);
        let rep = fit_g2(
            &c,
            &FitG2Options {
                weighting: Weighting::Uniform,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..4 {
            let ra = (rep.fit.alphas[i] - planted.alphas[i]).abs() / planted.alphas[i].abs();
            let rt = (rep.fit.taus_ns[i] - planted.taus_ns[i]).abs() / planted.taus_ns[i];
            assert!(ra < 1e-4 && rt < 1e-4, "{:?}", rep.fit);
        }
        assert!(rep.residual_rms <= rep.initial_residual_rms);
    }

    #[test]
    fn single_exponential_nested_model() {
        let planted = G2Fit {
            alphas: vec![1.0],
            taus_ns: vec![25.0],
            rho: 1.0,
        };
        let t = log_grid(0.1, 1e4, 200);
        let rep = fit_g2(
            &synthetic(&planted, &t),
            &FitG2Options {
                weighting: Weighting::Uniform,
                ..Default::default()
            },
        )
        .unwrap();
        let big: Vec<usize> = (0..4).filter(|&i| rep.fit.alphas[i].abs() >= 1e-6).collect();
        assert_eq!(big.len(), 1, "{:?}", rep.fit);
        let i = big[0];
        assert!((rep.fit.alphas[i] - 1.0).abs() < 1e-6);
        assert!((rep.fit.taus_ns[i] - 25.0).abs() < 1e-5);
        assert_eq!(rep.active_components, 1);
    }

    #[test]
    fn rejects_short_curves() {
        let c = Curve::new(vec![1.0; 10], vec![1.0; 10]).unwrap();
        assert!(fit_g2(&c, &FitG2Options::default()).is_err());
    }

    #[test]
    fn poisson_noise_recovers_time_constants() {
        let planted = G2Fit {
            alphas: vec![1.4, -0.4],
            taus_ns: vec![8.0, 600.0],
            rho: 1.0,
        };
        let t: Vec<f64> = (0..600).map(|i| 0.5 + i as f64 * 5.0).collect();
        let norm = 2000.0;
        let mut errors = [Vec::new(), Vec::new()];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let counts: Vec<f64> = t
                .iter()
                .map(|&x| Poisson::new(planted.eval(x) * norm).unwrap().sample(&mut rng))
                .collect();
            let c = Curve {
                tau_ns: t.clone(),
                values: counts.iter().map(|v| v / norm).collect(),
                sigma: counts.iter().map(|v| v.max(1.0).sqrt() / norm).collect(),
            };
            let rep = fit_g2(
                &c,
                &FitG2Options {
                    n_exp: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            for k in 0..2 {
                errors[k].push((rep.fit.taus_ns[k] - planted.taus_ns[k]).abs() / planted.taus_ns[k]);
            }
        }
        for e in &mut errors {
            e.sort_by(f64::total_cmp);
            assert!(e[e.len() / 2] < 0.1, "{e:?}");
        }
    }
}
