//! Loading and validating input datasets.
//!
//! Tables are delimited text with a header row (comma, or tab for `.tsv`),
//! `#` comments allowed. Values are converted to MHz, ns and meV on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spindefect::constants::HC_EV_NM;
use spindefect::g2_processing::CoincidenceHistogram;
use spindefect::spin_hamiltonian::OdmrObservation;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    OdmrTable,
    G2Histogram,
    EmissionSpectrum,
    DosTable,
    RatesJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub path: PathBuf,
    pub kind: DatasetKind,
    /// Metadata file for histograms; defaults to `<path>.json`.
    #[serde(default)]
    pub sidecar: Option<PathBuf>,
}

impl DatasetDescriptor {
    /// Resolves relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Self {
            path: join(&self.path),
            kind: self.kind,
            sidecar: self.sidecar.as_deref().map(join),
        }
    }

    pub fn sidecar_path(&self) -> PathBuf {
        self.sidecar.clone().unwrap_or_else(|| {
            let mut s = self.path.clone().into_os_string();
            s.push(".json");
            PathBuf::from(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Source line of each row.
    pub lines: Vec<u64>,
}

impl Table {
    fn find(&self, names: &[&str]) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| names.iter().any(|n| c.eq_ignore_ascii_case(n)))
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn parse_table(text: &str, path: &Path) -> CliResult<Table> {
    let tab = path.extension().is_some_and(|e| e == "tsv");
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(if tab { b'\t' } else { b',' })
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let where_ = path.display();
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::usage(format!("{where_}: header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::usage(format!("{where_}: line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec
            .iter()
            .zip(&columns)
            .map(|(v, c)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::usage(format!("{where_}: line {line}: column '{c}': not a number: '{v}'")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(CliError::usage(format!("{where_}: no data rows")));
    }
    Ok(Table { columns, rows, lines })
}

fn require(t: &Table, names: &[&str], path: &Path) -> CliResult<usize> {
    t.find(names).ok_or_else(|| {
        CliError::usage(format!(
            "{}: missing column '{}' (found {:?})",
            path.display(),
            names[0],
            t.columns
        ))
    })
}

/// First row (by line) where `x` fails to increase strictly.
fn check_increasing(x: &[f64], t: &Table, what: &str, path: &Path) -> CliResult<()> {
    for (i, w) in x.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(CliError::usage(format!(
                "{}: line {}: {what} must increase strictly",
                path.display(),
                t.lines[i + 1]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSidecar {
    pub accumulation_s: f64,
    pub n1: f64,
    pub n2: f64,
}

/// Energy-axis spectrum, ascending energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub energy_mev: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Odmr(Vec<OdmrObservation>),
    Histogram(CoincidenceHistogram),
    Spectrum(Spectrum),
    Json(serde_json::Value),
}

fn summary(desc: &DatasetDescriptor, n: usize, range: Option<(f64, f64)>) {
    match range {
        Some((a, b)) => eprintln!(
            "ingest {}: {:?}, {n} rows, axis [{a}, {b}]",
            desc.path.display(),
            desc.kind
        ),
        None => eprintln!("ingest {}: {:?}", desc.path.display(), desc.kind),
    }
}

pub fn odmr_table(desc: &DatasetDescriptor, default_sigma_mhz: f64) -> CliResult<Vec<OdmrObservation>> {
    let p = &desc.path;
    let t = parse_table(&read_text(p)?, p)?;
    let angle = require(&t, &["angle_deg"], p)?;
    let (freq, fscale) = match (t.find(&["freq_mhz"]), t.find(&["freq_ghz"])) {
        (Some(i), _) => (i, 1.0),
        (None, Some(i)) => (i, 1e3),
        _ => return Err(CliError::usage(format!("{}: missing column 'freq_mhz'", p.display()))),
    };
    let sigma = t.find(&["sigma_mhz"]).map(|i| (i, 1.0)).or_else(|| t.find(&["sigma_ghz"]).map(|i| (i, 1e3)));
    let mut out = Vec::with_capacity(t.rows.len());
    for (row, line) in t.rows.iter().zip(&t.lines) {
        let s = sigma.map(|(i, k)| row[i] * k).unwrap_or(default_sigma_mhz);
        if !(s > 0.0) {
            return Err(CliError::usage(format!("{}: line {line}: sigma must be positive", p.display())));
        }
        out.push(OdmrObservation {
            angle_deg: row[angle],
            freq_mhz: row[freq] * fscale,
            sigma_mhz: s,
        });
    }
    let lo = out.iter().map(|o| o.angle_deg).fold(f64::INFINITY, f64::min);
    let hi = out.iter().map(|o| o.angle_deg).fold(f64::NEG_INFINITY, f64::max);
    summary(desc, out.len(), Some((lo, hi)));
    Ok(out)
}

pub fn g2_histogram(desc: &DatasetDescriptor) -> CliResult<CoincidenceHistogram> {
    let p = &desc.path;
    let t = parse_table(&read_text(p)?, p)?;
    let (tau, scale) = match (t.find(&["tau_ns"]), t.find(&["tau_ps"]), t.find(&["tau_us"])) {
        (Some(i), _, _) => (i, 1.0),
        (None, Some(i), _) => (i, 1e-3),
        (None, None, Some(i)) => (i, 1e3),
        _ => return Err(CliError::usage(format!("{}: missing column 'tau_ns'", p.display()))),
    };
    let counts_col = require(&t, &["counts"], p)?;
    let taus: Vec<f64> = t.column(tau).iter().map(|v| v * scale).collect();
    check_increasing(&taus, &t, "tau", p)?;
    let mut counts = Vec::with_capacity(t.rows.len());
    for (row, line) in t.rows.iter().zip(&t.lines) {
        let c = row[counts_col];
        if c < 0.0 || c.fract() != 0.0 {
            return Err(CliError::usage(format!(
                "{}: line {line}: column 'counts': expected a non-negative integer",
                p.display()
            )));
        }
        counts.push(c as u64);
    }
    if taus.len() < 2 {
        return Err(CliError::usage(format!("{}: need at least two bins", p.display())));
    }
    let side = desc.sidecar_path();
    let meta: HistogramSidecar = serde_json::from_str(&read_text(&side)?)
        .map_err(|e| CliError::usage(format!("{}: {e}", side.display())))?;
    let h = CoincidenceHistogram {
        bin_width_ns: taus[1] - taus[0],
        bin_centers_ns: taus,
        counts,
        accumulation_s: meta.accumulation_s,
        n1: meta.n1,
        n2: meta.n2,
    };
    h.validate()
        .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
    summary(desc, h.counts.len(), Some((h.bin_centers_ns[0], *h.bin_centers_ns.last().unwrap())));
    Ok(h)
}

/// Emission spectrum on an energy axis. A wavelength axis is converted with
/// `E = hc/λ` and the intensity multiplied by `λ^2/hc` so it stays a density
/// per unit energy; rows come out in ascending energy.
pub fn emission_spectrum(desc: &DatasetDescriptor) -> CliResult<Spectrum> {
    let p = &desc.path;
    let t = parse_table(&read_text(p)?, p)?;
    let value = require(&t, &["intensity", "counts", "value"], p)?;
    let y = t.column(value);
    let (mut e, mut v) = if let Some(i) = t.find(&["wavelength_nm"]) {
        let lam = t.column(i);
        monotone(&lam, &t, "wavelength", p)?;
        if lam.iter().any(|l| !(*l > 0.0)) {
            return Err(CliError::usage(format!("{}: wavelengths must be positive", p.display())));
        }
        let hc_mev_nm = HC_EV_NM * 1e3;
        (
            lam.iter().map(|l| hc_mev_nm / l).collect::<Vec<_>>(),
            lam.iter().zip(&y).map(|(l, v)| v * l * l / hc_mev_nm).collect::<Vec<_>>(),
        )
    } else if let Some(i) = t.find(&["energy_mev"]) {
        let x = t.column(i);
        monotone(&x, &t, "energy", p)?;
        (x, y)
    } else if let Some(i) = t.find(&["energy_ev"]) {
        let x: Vec<f64> = t.column(i).iter().map(|v| v * 1e3).collect();
        monotone(&x, &t, "energy", p)?;
        (x, y)
    } else {
        return Err(CliError::usage(format!(
            "{}: missing axis column 'energy_mev', 'energy_ev' or 'wavelength_nm'",
            p.display()
        )));
    };
    if e.len() >= 2 && e[0] > e[1] {
        e.reverse();
        v.reverse();
    }
    summary(desc, e.len(), Some((e[0], *e.last().unwrap())));
    Ok(Spectrum { energy_mev: e, values: v })
}

fn monotone(x: &[f64], t: &Table, what: &str, p: &Path) -> CliResult<()> {
    if x.len() >= 2 && x[1] < x[0] {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        check_increasing(&neg, t, &format!("{what} (descending)"), p)
    } else {
        check_increasing(x, t, what, p)
    }
}

pub fn dos_table(desc: &DatasetDescriptor) -> CliResult<Spectrum> {
    let p = &desc.path;
    let t = parse_table(&read_text(p)?, p)?;
    let e = t.column(require(&t, &["energy_mev"], p)?);
    let v = t.column(require(&t, &["dos", "value", "intensity"], p)?);
    check_increasing(&e, &t, "energy", p)?;
    summary(desc, e.len(), Some((e[0], *e.last().unwrap())));
    Ok(Spectrum { energy_mev: e, values: v })
}

pub fn rates_json<T: for<'de> Deserialize<'de>>(desc: &DatasetDescriptor) -> CliResult<T> {
    let p = &desc.path;
    let out = serde_json::from_str(&read_text(p)?).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
    summary(desc, 0, None);
    Ok(out)
}

/// Loads any dataset according to its declared kind.
pub fn ingest(desc: &DatasetDescriptor) -> CliResult<Dataset> {
    Ok(match desc.kind {
        DatasetKind::OdmrTable => Dataset::Odmr(odmr_table(desc, 1.0)?),
        DatasetKind::G2Histogram => Dataset::Histogram(g2_histogram(desc)?),
        DatasetKind::EmissionSpectrum => Dataset::Spectrum(emission_spectrum(desc)?),
        DatasetKind::DosTable => Dataset::Spectrum(dos_table(desc)?),
        DatasetKind::RatesJson => Dataset::Json(rates_json(desc)?),
    })
}

/// Checks that a descriptor declares the kind a pipeline needs.
pub fn expect_kind(desc: &DatasetDescriptor, kind: DatasetKind) -> CliResult<()> {
    if desc.kind != kind {
        return Err(CliError::usage(format!(
            "{}: declared kind {:?}, expected {:?}",
            desc.path.display(),
            desc.kind,
            kind
        )));
    }
    Ok(())
}
