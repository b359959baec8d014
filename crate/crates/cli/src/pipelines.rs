//! The eight pipelines. Each takes its parsed configuration and returns the
//! files to write; the caller writes them with a manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use spindefect::constants::DIAMOND_BOND_LENGTH_ANGSTROM;
use spindefect::constants::DIAMOND_PHONON_CUTOFF_MEV;
use spindefect::defect_model::{self as dm, Constraints, PointGroup, VacancyGeometry};
use spindefect::g2_processing::{self as g2, FitG2Options, InitStrategy, Weighting};
use spindefect::nalgebra::{Matrix3, Vector3};
use spindefect::photodynamics::{self as pd, DrivenSublevel, ExtractOptions, KexBranch, PumpCalibration, RateParams};
use spindefect::psb::{self, IterativeOptions, IterativeScheme, SmoothOptions, SpectralBand, Window};
use spindefect::spin_hamiltonian::{self as sh, OdmrFitConfig, OrientationModel, ZfsParams};

use crate::error::{CliError, CliResult, Context};
use crate::ingest::{self, DatasetDescriptor, DatasetKind, Spectrum};
use crate::manifest::{digest_file, FileDigest, Output};

/// State shared by a pipeline run.
pub struct Run {
    /// Directory that relative input paths are resolved against.
    pub base: PathBuf,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
}

impl Run {
    pub fn new(base: PathBuf, seed: u64) -> Self {
        Self {
            base,
            seed,
            inputs: Vec::new(),
        }
    }

    /// Resolves a descriptor, checks its kind and records the input digest.
    fn input(&mut self, desc: &DatasetDescriptor, kind: DatasetKind) -> CliResult<DatasetDescriptor> {
        ingest::expect_kind(desc, kind)?;
        let d = desc.resolved(&self.base);
        self.inputs.push(digest_file(&d.path)?);
        if kind == DatasetKind::G2Histogram {
            self.inputs.push(digest_file(&d.sidecar_path())?);
        }
        Ok(d)
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn normal(sd: f64) -> CliResult<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| CliError::usage(format!("noise level: {e}")))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

fn band_csv(name: &str, column: &str, band: &SpectralBand) -> Output {
    let rows = band
        .energies()
        .zip(&band.values)
        .map(|(e, v)| vec![format!("{e:.6}"), v.to_string()]);
    Output::text(name, csv_text(&["energy_mev", column], rows))
}

fn matrix_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn angle_grid(start: f64, stop: f64, step: f64) -> CliResult<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(CliError::usage("angle grid needs step > 0 and stop >= start"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

fn orientation(index: usize) -> CliResult<sh::Triad> {
    sh::orientations_110()
        .get(index)
        .copied()
        .ok_or_else(|| CliError::usage(format!("orientation index {index} out of range (0..6)")))
}

// ---------------------------------------------------------------- odmr-sim

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdmrSimConfig {
    pub d_mhz: f64,
    pub e_mhz: f64,
    pub g: f64,
    pub field_gauss: f64,
    pub plane_normal: [f64; 3],
    pub angle_start_deg: f64,
    pub angle_stop_deg: f64,
    pub angle_step_deg: f64,
    /// Index into the six [110]-type orientations used for `observations.csv`.
    pub orientation: usize,
    pub noise_mhz: f64,
    pub sigma_mhz: f64,
}

impl Default for OdmrSimConfig {
    fn default() -> Self {
        Self {
            d_mhz: 1135.0,
            e_mhz: 139.0,
            g: 2.0,
            field_gauss: 120.0,
            plane_normal: [0.0, 0.0, 1.0],
            angle_start_deg: 0.0,
            angle_stop_deg: 180.0,
            angle_step_deg: 5.0,
            orientation: 0,
            noise_mhz: 0.0,
            sigma_mhz: 1.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ZeroField {
    d_mhz: f64,
    e_mhz: f64,
    lines_mhz: [f64; 3],
    assignments: [(usize, usize); 3],
}

pub fn odmr_sim(cfg: &OdmrSimConfig, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline odmr-sim";
    let axes = orientation(cfg.orientation)?;
    let p = ZfsParams::new(cfg.d_mhz, cfg.e_mhz, cfg.g, axes).context(ctx)?;
    let zero = sh::zero_field_lines(&p);
    let angles = angle_grid(cfg.angle_start_deg, cfg.angle_stop_deg, cfg.angle_step_deg)?;
    let normal_vec = vec3(cfg.plane_normal);
    let table = sh::angular_sweep(&p, cfg.field_gauss, &normal_vec, &angles, &sh::orientations_110()).context(ctx)?;
    let clean = sh::synthesize_sweep(&p, cfg.field_gauss, &normal_vec, &angles, cfg.sigma_mhz).context(ctx)?;
    let noise = normal(cfg.noise_mhz)?;
    let mut rng = run.rng();
    let rows: Vec<Vec<String>> = clean
        .iter()
        .map(|o| {
            let f = if cfg.noise_mhz > 0.0 {
                o.freq_mhz + noise.sample(&mut rng)
            } else {
                o.freq_mhz
            };
            vec![o.angle_deg.to_string(), format!("{f:.6}"), o.sigma_mhz.to_string()]
        })
        .collect();
    Ok(vec![
        Output::json(
            "zero_field.json",
            &ZeroField {
                d_mhz: p.d,
                e_mhz: p.e,
                lines_mhz: zero.frequencies,
                assignments: zero.assignments,
            },
        ),
        Output::text("sweep.csv", table.to_delimited()),
        Output::text("observations.csv", csv_text(&["angle_deg", "freq_mhz", "sigma_mhz"], rows)),
    ])
}

// ---------------------------------------------------------------- odmr-fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrientationChoice {
    Fixed,
    #[default]
    MinorTilt,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdmrFitPipeline {
    pub data: DatasetDescriptor,
    #[serde(default = "one")]
    pub default_sigma_mhz: f64,
    #[serde(default = "default_field")]
    pub field_gauss: f64,
    #[serde(default = "z_axis")]
    pub plane_normal: [f64; 3],
    #[serde(default = "init_d")]
    pub init_d_mhz: f64,
    #[serde(default = "init_e")]
    pub init_e_mhz: f64,
    #[serde(default = "two")]
    pub g: f64,
    #[serde(default)]
    pub orientation: usize,
    #[serde(default)]
    pub orientation_model: OrientationChoice,
    #[serde(default = "odmr_iterations")]
    pub max_iterations: usize,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn default_field() -> f64 {
    120.0
}
fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn init_d() -> f64 {
    1110.0
}
fn init_e() -> f64 {
    125.0
}
fn odmr_iterations() -> usize {
    200
}

#[derive(Debug, Serialize)]
struct OdmrFitOut {
    d_mhz: f64,
    e_mhz: f64,
    g: f64,
    axes: [[f64; 3]; 3],
    tilt_rad: Option<f64>,
    param_names: Vec<&'static str>,
    covariance: Vec<Vec<f64>>,
    chi2: f64,
    residual_rms_mhz: f64,
    orientation_identified: bool,
    iterations: usize,
}

pub fn odmr_fit(cfg: &OdmrFitPipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline odmr-fit";
    let desc = run.input(&cfg.data, DatasetKind::OdmrTable)?;
    let obs = ingest::odmr_table(&desc, cfg.default_sigma_mhz)?;
    let init = ZfsParams::new(cfg.init_d_mhz, cfg.init_e_mhz, cfg.g, orientation(cfg.orientation)?).context(ctx)?;
    let fc = OdmrFitConfig {
        magnitude_gauss: cfg.field_gauss,
        plane_normal: vec3(cfg.plane_normal),
        orientation: match cfg.orientation_model {
            OrientationChoice::Fixed => OrientationModel::Fixed,
            OrientationChoice::MinorTilt => OrientationModel::MinorTilt,
            OrientationChoice::Full => OrientationModel::Full,
        },
        max_iterations: cfg.max_iterations,
    };
    let fit = sh::fit_odmr(&obs, &init, &fc).context(ctx)?;
    let a = &fit.params.axes;
    let out = OdmrFitOut {
        d_mhz: fit.params.d,
        e_mhz: fit.params.e,
        g: fit.params.g,
        axes: [a.x(), a.y(), a.z()].map(|v| [v.x, v.y, v.z]),
        tilt_rad: fit.tilt_rad,
        param_names: fit.param_names.clone(),
        covariance: fit
            .covariance
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        chi2: fit.chi2,
        residual_rms_mhz: fit.residual_rms,
        orientation_identified: fit.orientation_identified,
        iterations: fit.iterations,
    };
    let rows = obs.iter().zip(&fit.residuals).zip(&fit.branches).map(|((o, r), b)| {
        vec![o.angle_deg.to_string(), o.freq_mhz.to_string(), b.to_string(), format!("{r:.6}")]
    });
    Ok(vec![
        Output::json("fit.json", &out),
        Output::text(
            "residuals.csv",
            csv_text(&["angle_deg", "freq_mhz", "branch", "residual_mhz"], rows),
        ),
    ])
}

// ---------------------------------------------------------------- g2-fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingChoice {
    #[default]
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2FitPipeline {
    pub data: DatasetDescriptor,
    /// Signal fraction `S/(S+B)`; estimated from the long-delay tail when absent.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "tail_fraction")]
    pub tail_fraction: f64,
    #[serde(default = "four")]
    pub n_exp: usize,
    #[serde(default)]
    pub init_taus_ns: Option<Vec<f64>>,
    #[serde(default)]
    pub weighting: WeightingChoice,
    #[serde(default = "g2_iterations")]
    pub max_iterations: usize,
    #[serde(default = "prune")]
    pub prune_tolerance: f64,
}

fn tail_fraction() -> f64 {
    0.1
}
fn four() -> usize {
    4
}
fn g2_iterations() -> usize {
    2000
}
fn prune() -> f64 {
    1e-6
}

#[derive(Debug, Serialize)]
struct G2FitOut<'a> {
    rho: f64,
    rho_estimated: bool,
    report: &'a g2::G2FitReport,
}

pub fn g2_fit(cfg: &G2FitPipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline g2-fit";
    let desc = run.input(&cfg.data, DatasetKind::G2Histogram)?;
    let hist = ingest::g2_histogram(&desc)?;
    let cn = g2::normalize(&hist).context(ctx)?;
    let rho = match cfg.rho {
        Some(r) => r,
        None => g2::estimate_rho(&cn, cfg.tail_fraction).context(ctx)?,
    };
    let curve = g2::background_correct(&cn, rho).context(ctx)?;
    let opts = FitG2Options {
        n_exp: cfg.n_exp,
        init: match &cfg.init_taus_ns {
            Some(t) => InitStrategy::Taus(t.clone()),
            None => InitStrategy::LogSpaced,
        },
        weighting: match cfg.weighting {
            WeightingChoice::Poisson => Weighting::Poisson,
            WeightingChoice::Uniform => Weighting::Uniform,
        },
        rho,
        max_iterations: cfg.max_iterations,
        prune_tolerance: cfg.prune_tolerance,
    };
    let report = g2::fit_g2(&curve, &opts).context(ctx)?;
    let rows = (0..curve.len()).map(|i| {
        let t = curve.tau_ns[i];
        vec![
            t.to_string(),
            cn.values[i].to_string(),
            curve.values[i].to_string(),
            curve.sigma[i].to_string(),
            report.fit.eval(t).to_string(),
        ]
    });
    // rates-extract input, so the two pipelines chain
    let chained = RatesInput::Fit {
        alphas: report.fit.alphas.clone(),
        taus_ns: report.fit.taus_ns.clone(),
        detected_rate: None,
        eta: None,
    };
    Ok(vec![
        Output::json(
            "fit.json",
            &G2FitOut {
                rho,
                rho_estimated: cfg.rho.is_none(),
                report: &report,
            },
        ),
        Output::text(
            "curve.csv",
            csv_text(&["tau_ns", "g2_raw", "g2", "sigma", "model"], rows),
        ),
        Output::json("components.json", &chained),
    ])
}

// ---------------------------------------------------------------- rates-extract

/// Contents of a `rates_json` dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum RatesInput {
    Fit {
        alphas: Vec<f64>,
        taus_ns: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detected_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eta: Option<f64>,
    },
    Points {
        points: Vec<MeasuredPoint>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredPoint {
    pub power_w: f64,
    pub k_ex: f64,
    pub k_isc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchChoice {
    #[default]
    Minus,
    Plus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesExtractPipeline {
    pub data: DatasetDescriptor,
    /// Overrides the detected rate in the data file, counts/s.
    #[serde(default)]
    pub detected_rate: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub branch: BranchChoice,
    #[serde(default = "digits")]
    pub significant_digits: usize,
}

fn digits() -> usize {
    7
}

/// Rounds to `digits` significant figures so that outputs are stable
/// against last-bit differences.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

/// The six rates plus efficiency, 1/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesOut {
    pub k_ex: f64,
    pub k_f: f64,
    pub k_isc: f64,
    pub k0: f64,
    pub km: f64,
    pub kp: f64,
    pub eta: f64,
}

impl RatesOut {
    pub fn rounded(r: &RateParams, digits: usize) -> Self {
        let f = |x| round_sig(x, digits);
        Self {
            k_ex: f(r.k_ex),
            k_f: f(r.k_f),
            k_isc: f(r.k_isc),
            k0: f(r.k0),
            km: f(r.km),
            kp: f(r.kp),
            eta: f(r.eta),
        }
    }
}

pub fn rates_extract(cfg: &RatesExtractPipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline rates-extract";
    let desc = run.input(&cfg.data, DatasetKind::RatesJson)?;
    let input: RatesInput = ingest::rates_json(&desc)?;
    let (alphas, taus_ns, detected, eta) = match input {
        RatesInput::Fit {
            alphas,
            taus_ns,
            detected_rate,
            eta,
        } => (alphas, taus_ns, cfg.detected_rate.or(detected_rate), cfg.eta.or(eta)),
        RatesInput::Points { .. } => {
            return Err(CliError::usage(format!(
                "{}: expected g2 components, found power-series points",
                desc.path.display()
            )))
        }
    };
    let detected = detected.ok_or_else(|| CliError::usage("detected_rate missing from data and config"))?;
    let eta = eta.ok_or_else(|| CliError::usage("eta missing from data and config"))?;
    let fit = g2::G2Fit {
        alphas,
        taus_ns,
        rho: 1.0,
    };
    let opts = ExtractOptions {
        branch: match cfg.branch {
            BranchChoice::Minus => KexBranch::Minus,
            BranchChoice::Plus => KexBranch::Plus,
        },
    };
    let ex = pd::extract_rates(&fit, detected, eta, &opts).context(ctx)?;
    Ok(vec![
        Output::json("rates.json", &RatesOut::rounded(&ex.rates, cfg.significant_digits)),
        Output::json("diagnostics.json", &ex),
    ])
}

// ---------------------------------------------------------------- power-sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DrivenChoice {
    Minus,
    #[default]
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRates {
    pub k_f: f64,
    pub k_isc: f64,
    pub k0: f64,
    pub km: f64,
    pub kp: f64,
    #[serde(default = "one")]
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSweepPipeline {
    pub rates: BaseRates,
    #[serde(default)]
    pub beta: f64,
    pub powers_w: Vec<f64>,
    pub calibration: PumpCalibration,
    #[serde(default)]
    pub driven: DrivenChoice,
    /// Measured `(power, k_ex, k_isc)` points for the cross-section and ESA fits.
    #[serde(default)]
    pub measured: Option<DatasetDescriptor>,
}

#[derive(Debug, Serialize)]
struct PowerFits {
    cross_section: pd::CrossSectionFit,
    esa: pd::EsaFit,
    esa_cross_section_cm2: f64,
}

pub fn power_sweep(cfg: &PowerSweepPipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline power-sweep";
    let b = cfg.rates;
    let base = RateParams {
        k_ex: 1.0,
        k_f: b.k_f,
        k_isc: b.k_isc,
        k0: b.k0,
        km: b.km,
        kp: b.kp,
        beta: 0.0,
        eta: b.eta,
    };
    let driven = match cfg.driven {
        DrivenChoice::Minus => DrivenSublevel::Minus,
        DrivenChoice::Plus => DrivenSublevel::Plus,
    };
    let points = pd::power_sweep_model(&base, cfg.beta, &cfg.powers_w, &cfg.calibration, driven).context(ctx)?;
    let rows = points.iter().map(|p| {
        vec![
            p.power_w.to_string(),
            p.k_ex.to_string(),
            p.k_isc.to_string(),
            p.fluorescence.to_string(),
            p.contrast.to_string(),
        ]
    });
    let mut out = vec![
        Output::text(
            "sweep.csv",
            csv_text(&["power_w", "k_ex", "k_isc", "fluorescence", "contrast"], rows),
        ),
        Output::json("model.json", &points),
    ];
    if let Some(m) = &cfg.measured {
        let desc = run.input(m, DatasetKind::RatesJson)?;
        let pts = match ingest::rates_json::<RatesInput>(&desc)? {
            RatesInput::Points { points } => points,
            RatesInput::Fit { .. } => {
                return Err(CliError::usage(format!(
                    "{}: expected power-series points",
                    desc.path.display()
                )))
            }
        };
        let xs: Vec<(f64, f64)> = pts.iter().map(|p| (p.power_w, p.k_ex)).collect();
        let cs = pd::absorption_cross_section(&xs, cfg.calibration.wavelength_nm, cfg.calibration.focal_area_cm2)
            .context(ctx)?;
        let esa = pd::esa_fit(&pts.iter().map(|p| (p.k_ex, p.k_isc)).collect::<Vec<_>>()).context(ctx)?;
        out.push(Output::json(
            "fits.json",
            &PowerFits {
                cross_section: cs,
                esa,
                esa_cross_section_cm2: pd::esa_cross_section(esa.beta, cs.sigma_cm2),
            },
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------- psb-deconvolve

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZplSource {
    /// The ZPL cut out of the measured band.
    Measured { half_width_mev: f64 },
    Gaussian { sigma_mev: f64, half_width_mev: f64 },
}

impl Default for ZplSource {
    fn default() -> Self {
        ZplSource::Measured { half_width_mev: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Plain,
    #[default]
    Newton,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsbDeconvolvePipeline {
    pub emission: DatasetDescriptor,
    /// ZPL photon energy; the spectrum maximum when absent.
    #[serde(default)]
    pub zpl_mev: Option<f64>,
    #[serde(default = "psb_step")]
    pub step_mev: f64,
    /// Anti-Stokes side kept for the ZPL width.
    #[serde(default = "margin")]
    pub margin_mev: f64,
    #[serde(default)]
    pub zpl: ZplSource,
    #[serde(default)]
    pub huang_rhys: Option<f64>,
    /// Phonon-energy window holding the ZPL for the Huang-Rhys estimate.
    #[serde(default = "zpl_window")]
    pub zpl_window_mev: [f64; 2],
    #[serde(default = "cutoff")]
    pub omega_mev: f64,
    #[serde(default = "smooth_points")]
    pub smooth_points: usize,
    #[serde(default = "taper")]
    pub taper_mev: f64,
    #[serde(default = "psb_iterations")]
    pub max_iter: usize,
    #[serde(default = "psb_tol")]
    pub tol: f64,
    #[serde(default)]
    pub scheme: SchemeChoice,
    #[serde(default = "regularization")]
    pub regularization: f64,
    #[serde(default)]
    pub dos: Option<DatasetDescriptor>,
}

fn psb_step() -> f64 {
    0.25
}
fn margin() -> f64 {
    10.0
}
fn zpl_window() -> [f64; 2] {
    [-3.0, 3.0]
}
fn cutoff() -> f64 {
    DIAMOND_PHONON_CUTOFF_MEV
}
fn smooth_points() -> usize {
    5
}
fn taper() -> f64 {
    8.0
}
fn psb_iterations() -> usize {
    20
}
fn psb_tol() -> f64 {
    1e-8
}
fn regularization() -> f64 {
    1e-3
}

/// Linear interpolation of a tabulated spectrum, zero outside its range.
fn sample(s: &Spectrum, x: f64) -> f64 {
    let e = &s.energy_mev;
    if x < e[0] || x > e[e.len() - 1] {
        return 0.0;
    }
    let i = e.partition_point(|v| *v <= x).clamp(1, e.len() - 1);
    let (x0, x1) = (e[i - 1], e[i]);
    let f = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    s.values[i - 1] * (1.0 - f) + s.values[i] * f
}

/// Resamples a spectrum on a grid of step `h` passing through `anchor`.
fn resample(s: &Spectrum, anchor: f64, h: f64) -> CliResult<SpectralBand> {
    let lo = ((s.energy_mev[0] - anchor) / h - 1e-9).ceil() as i64;
    let hi = ((s.energy_mev[s.energy_mev.len() - 1] - anchor) / h + 1e-9).floor() as i64;
    if hi - lo < 2 {
        return Err(CliError::usage("spectrum spans fewer than three grid points"));
    }
    let start = anchor + lo as f64 * h;
    SpectralBand::from_fn(start, h, (hi - lo + 1) as usize, |x| sample(s, x).max(0.0))
        .map_err(|e| CliError::usage(format!("resampling: {e}")))
}

#[derive(Debug, Serialize)]
struct PsbReport {
    zpl_mev: f64,
    step_mev: f64,
    huang_rhys: f64,
    huang_rhys_estimated: bool,
    debye_waller: f64,
    zpl: ZplSource,
    floored_bins: usize,
    cutoff_bin: usize,
    iterations: usize,
    converged: bool,
    stalled: bool,
    trace: Vec<psb::IterationRecord>,
    i1_norm: f64,
    i1_mean_mev: f64,
}

pub fn psb_deconvolve(cfg: &PsbDeconvolvePipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline psb-deconvolve";
    let desc = run.input(&cfg.emission, DatasetKind::EmissionSpectrum)?;
    let measured = ingest::emission_spectrum(&desc)?;
    if !(cfg.step_mev > 0.0) {
        return Err(CliError::usage("step_mev must be positive"));
    }
    let omega0 = match cfg.zpl_mev {
        Some(w) => w,
        None => {
            let i = (0..measured.values.len())
                .max_by(|a, b| measured.values[*a].total_cmp(&measured.values[*b]))
                .unwrap_or(0);
            measured.energy_mev[i]
        }
    };
    let emission = resample(&measured, omega0, cfg.step_mev)?;
    let band = psb::bandshape_from_emission(&emission, omega0, cfg.margin_mev).context(ctx)?;
    let i0 = match cfg.zpl {
        ZplSource::Measured { half_width_mev } => {
            let m = (half_width_mev / band.step).round() as i64;
            let line = band.window(-m, (2 * m + 1) as usize).context(ctx)?;
            psb::zpl_from_measurement(&line, half_width_mev).context(ctx)?
        }
        ZplSource::Gaussian {
            sigma_mev,
            half_width_mev,
        } => psb::gaussian_zpl(sigma_mev, band.step, half_width_mev).context(ctx)?,
    };
    let (s, estimated) = match cfg.huang_rhys {
        Some(s) => (s, false),
        None => (
            psb::estimate_huang_rhys(&band, (cfg.zpl_window_mev[0], cfg.zpl_window_mev[1])).context(ctx)?,
            true,
        ),
    };
    let direct = psb::direct_fourier_deconvolve(&band, s, &i0, cfg.omega_mev).context(ctx)?;
    let smooth = SmoothOptions {
        window_points: cfg.smooth_points,
        taper_mev: cfg.taper_mev,
    };
    let init = psb::smooth_and_taper(&direct.i1, cfg.omega_mev, &smooth).context(ctx)?;
    let opts = IterativeOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        omega: cfg.omega_mev,
        scheme: match cfg.scheme {
            SchemeChoice::Plain => IterativeScheme::Plain,
            SchemeChoice::Newton => IterativeScheme::Newton,
        },
        n_max: None,
        regularization: cfg.regularization,
    };
    let res = psb::iterative_deconvolve(&band, s, &i0, &init, &opts).context(ctx)?;
    let report = PsbReport {
        zpl_mev: omega0,
        step_mev: band.step,
        huang_rhys: s,
        huang_rhys_estimated: estimated,
        debye_waller: (-s).exp(),
        zpl: cfg.zpl,
        floored_bins: direct.floored_bins,
        cutoff_bin: direct.cutoff_bin,
        iterations: res.iterations,
        converged: res.converged,
        stalled: res.stalled,
        trace: res.trace.clone(),
        i1_norm: res.i1.norm(),
        i1_mean_mev: res.i1.mean(),
    };
    let mut out = vec![
        band_csv("bandshape.csv", "bandshape", &band),
        band_csv("i1_direct.csv", "i1", &init),
        band_csv("i1.csv", "i1", &res.i1),
        Output::json("report.json", &report),
    ];
    if let Some(d) = &cfg.dos {
        let ddesc = run.input(d, DatasetKind::DosTable)?;
        let dos_raw = ingest::dos_table(&ddesc)?;
        let mut dos = resample(&dos_raw, 0.0, band.step)?;
        if dos.start > 0.0 {
            // the DOS vanishes at zero energy; extend the grid down to it
            let pad = (dos.start / dos.step).round() as usize;
            let mut v = vec![0.0; pad];
            v.extend(dos.values);
            dos = SpectralBand::new(0.0, band.step, v).context(ctx)?;
        }
        let cp = psb::critical_point_report(&res.i1, &dos, cfg.omega_mev).context(ctx)?;
        let rows = cp.overlay.iter().map(|r| r.iter().map(|v| v.to_string()).collect());
        out.push(Output::text(
            "overlay.csv",
            csv_text(&["energy_mev", "i1", "dos_scaled"], rows),
        ));
        out.push(Output::json("critical_points.json", &cp));
    }
    Ok(out)
}

// ---------------------------------------------------------------- psb-synth

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub energy_mev: f64,
    pub width_mev: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionOptions {
    /// Photon energy of the ZPL.
    pub zpl_mev: f64,
    /// Gaussian noise as a fraction of the spectrum maximum.
    #[serde(default)]
    pub noise_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsbSynthPipeline {
    pub modes: Vec<Mode>,
    /// One-phonon band file (`energy_mev`, value); replaces `modes`.
    pub i1: Option<DatasetDescriptor>,
    pub huang_rhys: f64,
    pub zpl_sigma_mev: f64,
    pub step_mev: f64,
    pub len: usize,
    /// Grid index of the first point; negative to hold the ZPL.
    pub offset_points: i64,
    pub omega_mev: f64,
    pub n_max: Option<usize>,
    pub emission: Option<EmissionOptions>,
}

impl Default for PsbSynthPipeline {
    fn default() -> Self {
        Self {
            modes: vec![
                Mode {
                    energy_mev: 40.0,
                    width_mev: 10.0,
                    weight: 1.0,
                },
                Mode {
                    energy_mev: 75.0,
                    width_mev: 8.0,
                    weight: 0.6,
                },
                Mode {
                    energy_mev: 150.0,
                    width_mev: 5.0,
                    weight: 0.3,
                },
            ],
            i1: None,
            huang_rhys: 2.0,
            zpl_sigma_mev: 1.0,
            step_mev: 0.25,
            len: 2048,
            offset_points: -40,
            omega_mev: DIAMOND_PHONON_CUTOFF_MEV,
            n_max: None,
            emission: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    huang_rhys: f64,
    debye_waller: f64,
    n_max: usize,
    truncation_bound: f64,
    zpl_weight: f64,
    missing_mass: f64,
    i1_mean_mev: f64,
}

pub fn psb_synth(cfg: &PsbSynthPipeline, run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline psb-synth";
    let h = cfg.step_mev;
    if !(h > 0.0) || cfg.len == 0 {
        return Err(CliError::usage("step_mev and len must be positive"));
    }
    let n_omega = (cfg.omega_mev / h + 1e-9).floor() as usize + 1;
    let i1 = match &cfg.i1 {
        Some(d) => {
            let desc = run.input(d, DatasetKind::DosTable)?;
            let s = ingest::dos_table(&desc)?;
            SpectralBand::from_fn(0.0, h, n_omega, |x| sample(&s, x).max(0.0)).context(ctx)?
        }
        None => {
            if cfg.modes.is_empty() {
                return Err(CliError::usage("no phonon modes given"));
            }
            SpectralBand::from_fn(0.0, h, n_omega, |x| {
                cfg.modes
                    .iter()
                    .map(|m| m.weight * (-(x - m.energy_mev).powi(2) / (2.0 * m.width_mev.powi(2))).exp())
                    .sum::<f64>()
            })
            .context(ctx)?
        }
    };
    let i1 = i1.normalized().context(ctx)?;
    let i0 = psb::gaussian_zpl(cfg.zpl_sigma_mev, h, 6.0 * cfg.zpl_sigma_mev).context(ctx)?;
    let window = Window {
        offset: cfg.offset_points,
        len: cfg.len,
    };
    let syn = psb::synthesize_band(&i1, cfg.huang_rhys, &i0, cfg.n_max, window).context(ctx)?;
    let summary = SynthSummary {
        huang_rhys: cfg.huang_rhys,
        debye_waller: (-cfg.huang_rhys).exp(),
        n_max: syn.n_max,
        truncation_bound: syn.truncation_bound,
        zpl_weight: syn.zpl_weight,
        missing_mass: syn.missing_mass,
        i1_mean_mev: i1.mean(),
    };
    let mut out = vec![
        band_csv("band.csv", "bandshape", &syn.band),
        band_csv("i1.csv", "i1", &i1),
        Output::json("summary.json", &summary),
    ];
    if let Some(em) = cfg.emission {
        let last = cfg.offset_points + cfg.len as i64 - 1;
        let photon_start = em.zpl_mev - last as f64 * h;
        let spectrum = psb::emission_from_bandshape(&syn.band, em.zpl_mev, photon_start, cfg.len).context(ctx)?;
        let peak = spectrum.values.iter().copied().fold(0.0, f64::max);
        let noise = normal(em.noise_fraction * peak)?;
        let mut rng = run.rng();
        let rows: Vec<Vec<String>> = spectrum
            .energies()
            .zip(&spectrum.values)
            .map(|(e, v)| {
                let v = if em.noise_fraction > 0.0 { v + noise.sample(&mut rng) } else { *v };
                vec![format!("{e:.6}"), v.to_string()]
            })
            .collect();
        out.push(Output::text("emission.csv", csv_text(&["energy_mev", "intensity"], rows)));
    }
    Ok(out)
}

// ---------------------------------------------------------------- defect-classify

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectClassifyPipeline {
    pub group: String,
    pub geometry: Option<VacancyGeometry>,
    /// Observed axes; defaults to both along [110]-type directions.
    pub constraints: Option<Constraints>,
    pub electron_count: Option<u32>,
    pub bond_length_angstrom: f64,
}

impl Default for DefectClassifyPipeline {
    fn default() -> Self {
        Self {
            group: "C1h".into(),
            geometry: None,
            constraints: None,
            electron_count: None,
            bond_length_angstrom: DIAMOND_BOND_LENGTH_ANGSTROM,
        }
    }
}

#[derive(Debug, Serialize)]
struct ClassifiedPair<'a> {
    #[serde(flatten)]
    pair: &'a dm::MoPair,
    tensor_mhz: [[f64; 3]; 3],
    d_mhz: f64,
    e_mhz: f64,
}

#[derive(Debug, Serialize)]
struct Candidates<'a> {
    constraints: &'a Constraints,
    pairs: Vec<(dm::MoLabel, dm::MoLabel)>,
    structures: Option<Vec<dm::StructureCandidate>>,
}

pub fn defect_classify(cfg: &DefectClassifyPipeline, _run: &mut Run) -> CliResult<Vec<Output>> {
    let ctx = "pipeline defect-classify";
    let group = PointGroup::parse(&cfg.group).map_err(|e| CliError::usage(e.to_string()))?;
    let geom = cfg.geometry.clone().unwrap_or_else(VacancyGeometry::ideal);
    let table = dm::classify_pairs(group, &geom).context(ctx)?;
    let mut classified = Vec::with_capacity(table.len());
    for p in &table {
        let t = dm::spinspin_tensor(p.homo, p.lumo, &geom).context(ctx)?.in_mhz(cfg.bond_length_angstrom);
        let pa = dm::principal_axes(&t).context(ctx)?;
        classified.push(ClassifiedPair {
            pair: p,
            tensor_mhz: matrix_rows(&t),
            d_mhz: pa.d,
            e_mhz: pa.e,
        });
    }
    let constraints = cfg.constraints.clone().unwrap_or_else(Constraints::along_110);
    let pairs = dm::candidate_filter(&table, &constraints)
        .into_iter()
        .map(|p| (p.homo, p.lumo))
        .collect();
    let structures = cfg
        .electron_count
        .map(dm::structure_shortlist)
        .transpose()
        .context(ctx)?;
    Ok(vec![
        Output::json("classification.json", &classified),
        Output::text("table.txt", dm::format_table(&table)),
        Output::json(
            "candidates.json",
            &Candidates {
                constraints: &constraints,
                pairs,
                structures,
            },
        ),
    ])
}

/// Resolves the directory relative inputs are taken from.
pub fn config_base(config: Option<&Path>) -> PathBuf {
    config
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}
