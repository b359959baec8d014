//! S = 1 triplet spin Hamiltonian: zero-field splitting plus Zeeman term.
//!
//! Matrices use the standard S = 1 operators in the ordered basis
//! `|+1>, |0>, |-1>` with the quantization axis along the defect `z` axis:
//!
//! ```text
//! H = D (Sz^2 - 2/3) + E (Sx^2 - Sy^2) + g muB/h (S . B_defect)
//! ```
//!
//! Energies are in MHz, fields in gauss. `B_defect` is the crystal-frame
//! field projected onto the defect axis triad.

use nalgebra::{DMatrix, Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::BOHR_MAGNETON_MHZ_PER_GAUSS;
use crate::error::{invalid, Error, Result};
use crate::lsq::{self, LevenbergMarquardt};

const ORTHO_TOL: f64 = 1e-12;

/// Right-handed orthonormal axis triad expressed in crystal coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triad {
    x: Vector3<f64>,
    y: Vector3<f64>,
    z: Vector3<f64>,
}

impl Triad {
    pub fn new(x: Vector3<f64>, y: Vector3<f64>, z: Vector3<f64>) -> Result<Self> {
        let t = Self { x, y, z };
        t.validate()?;
        Ok(t)
    }

    /// Builds a triad from a major axis and an approximate minor `x` axis.
    /// Both are normalized; `x` is orthogonalized against `z`, `y = z × x`.
    pub fn from_major_minor(z: Vector3<f64>, x_hint: Vector3<f64>) -> Result<Self> {
        let z = z
            .try_normalize(1e-300)
            .ok_or_else(|| invalid("zero major axis"))?;
        let x = (x_hint - z * z.dot(&x_hint))
            .try_normalize(1e-12)
            .ok_or_else(|| invalid("minor axis parallel to major axis"))?;
        let y = z.cross(&x);
        Self::new(x, y, z)
    }

    pub fn crystal() -> Self {
        Self {
            x: Vector3::x(),
            y: Vector3::y(),
            z: Vector3::z(),
        }
    }

    pub fn x(&self) -> Vector3<f64> {
        self.x
    }
    pub fn y(&self) -> Vector3<f64> {
        self.y
    }
    pub fn z(&self) -> Vector3<f64> {
        self.z
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            self.x.dot(&self.y),
            self.y.dot(&self.z),
            self.z.dot(&self.x),
        ];
        let norms = [self.x.norm(), self.y.norm(), self.z.norm()];
        if pairs.iter().any(|d| d.abs() > ORTHO_TOL)
            || norms.iter().any(|n| (n - 1.0).abs() > ORTHO_TOL)
        {
            return Err(invalid("axes are not orthonormal"));
        }
        let det = self.x.cross(&self.y).dot(&self.z);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(invalid("axes are not right-handed"));
        }
        Ok(())
    }

    /// Applies a crystal-frame rotation to all three axes.
    pub fn rotated(&self, rotation: &Rotation3<f64>) -> Self {
        Self {
            x: rotation * self.x,
            y: rotation * self.y,
            z: rotation * self.z,
        }
    }

    /// Components of a crystal-frame vector along (x, y, z).
    pub fn project(&self, v: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.x.dot(v), self.y.dot(v), self.z.dot(v))
    }
}

/// The six `<110>` defect orientations. The minor `x` axis is the cubic axis
/// orthogonal to the major axis (e.g. `z || [01-1]`, `x || [100]`).
pub fn orientations_110() -> Vec<Triad> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let majors = [
        (Vector3::new(s, s, 0.0), Vector3::z()),
        (Vector3::new(s, -s, 0.0), Vector3::z()),
        (Vector3::new(s, 0.0, s), Vector3::y()),
        (Vector3::new(s, 0.0, -s), Vector3::y()),
        (Vector3::new(0.0, s, s), Vector3::x()),
        (Vector3::new(0.0, s, -s), Vector3::x()),
    ];
    majors
        .iter()
        .map(|(z, x)| Triad::from_major_minor(*z, *x).expect("<110> triads are orthonormal"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZfsParams {
    /// Axial zero-field splitting, MHz.
    pub d: f64,
    /// Rhombic zero-field splitting, MHz (>= 0 by convention).
    pub e: f64,
    /// Isotropic g-factor.
    pub g: f64,
    pub axes: Triad,
}

impl ZfsParams {
    pub fn new(d: f64, e: f64, g: f64, axes: Triad) -> Result<Self> {
        let p = Self { d, e, g, axes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.e.is_finite() && self.g.is_finite()) {
            return Err(invalid("non-finite zero-field parameters"));
        }
        if self.e < 0.0 {
            return Err(invalid("E must be non-negative"));
        }
        self.axes.validate()
    }

    /// Electron gyromagnetic ratio g muB/h in MHz per gauss.
    pub fn gyromagnetic_mhz_per_gauss(&self) -> f64 {
        self.g * BOHR_MAGNETON_MHZ_PER_GAUSS
    }
}

/// Magnetic field vector in crystal coordinates, gauss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldVec(pub Vector3<f64>);

impl FieldVec {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn along(direction: Vector3<f64>, magnitude_gauss: f64) -> Self {
        Self(direction.normalize() * magnitude_gauss)
    }

    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }
}

/// Three ODMR transition frequencies, ascending, with the level pairs they
/// connect (levels indexed in ascending energy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdmrLineSet {
    pub frequencies: [f64; 3],
    pub assignments: [(usize, usize); 3],
}

impl OdmrLineSet {
    fn from_levels(levels: [f64; 3]) -> Self {
        let mut lines = [
            (levels[1] - levels[0], (0, 1)),
            (levels[2] - levels[1], (1, 2)),
            (levels[2] - levels[0], (0, 2)),
        ];
        lines.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            frequencies: [lines[0].0.max(0.0), lines[1].0.max(0.0), lines[2].0.max(0.0)],
            assignments: [lines[0].1, lines[1].1, lines[2].1],
        }
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Spin-1 operators (Sx, Sy, Sz) in the `|+1>, |0>, |-1>` basis.
pub fn spin_operators() -> [Matrix3<Complex64>; 3] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let z = c(0.0, 0.0);
    let sx = Matrix3::new(z, c(s, 0.0), z, c(s, 0.0), z, c(s, 0.0), z, c(s, 0.0), z);
    let sy = Matrix3::new(z, c(0.0, -s), z, c(0.0, s), z, c(0.0, -s), z, c(0.0, s), z);
    let sz = Matrix3::new(c(1.0, 0.0), z, z, z, z, z, z, z, c(-1.0, 0.0));
    [sx, sy, sz]
}

/// Hamiltonian matrix in MHz.
pub fn build_hamiltonian(p: &ZfsParams, b: &FieldVec) -> Result<Matrix3<Complex64>> {
    p.axes.validate()?;
    let [sx, sy, sz] = spin_operators();
    let identity = Matrix3::<Complex64>::identity();
    let b_def = p.axes.project(&b.0) * p.gyromagnetic_mhz_per_gauss();
    let h = (sz * sz - identity * c(2.0 / 3.0, 0.0)) * c(p.d, 0.0)
        + (sx * sx - sy * sy) * c(p.e, 0.0)
        + sx * c(b_def.x, 0.0)
        + sy * c(b_def.y, 0.0)
        + sz * c(b_def.z, 0.0);
    Ok(h)
}

/// Ascending eigenvalues of the Hamiltonian, MHz.
pub fn energy_levels(p: &ZfsParams, b: &FieldVec) -> Result<[f64; 3]> {
    let h = build_hamiltonian(p, b)?;
    let eig = SymmetricEigen::new(h);
    let mut levels = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    levels.sort_by(f64::total_cmp);
    Ok(levels)
}

/// Zero-field lines {2E, D-E, D+E} (for D >= E >= 0), ascending.
pub fn zero_field_lines(p: &ZfsParams) -> OdmrLineSet {
    let levels_unsorted = [-2.0 * p.d / 3.0, p.d / 3.0 - p.e, p.d / 3.0 + p.e];
    let mut levels = levels_unsorted;
    levels.sort_by(f64::total_cmp);
    OdmrLineSet::from_levels(levels)
}

pub fn transition_frequencies(p: &ZfsParams, b: &FieldVec) -> Result<OdmrLineSet> {
    Ok(OdmrLineSet::from_levels(energy_levels(p, b)?))
}

/// In-plane orthonormal basis (u, v) for a rotation plane with the given
/// normal. For a cubic-axis normal, `u` is the next cubic axis.
pub fn plane_basis(normal: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n = normal
        .try_normalize(1e-300)
        .ok_or_else(|| invalid("zero plane normal"))?;
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let seed = axes
        .iter()
        .min_by(|a, b| a.dot(&n).abs().total_cmp(&b.dot(&n).abs()))
        .copied()
        .unwrap_or_else(Vector3::x);
    let u = (seed - n * n.dot(&seed)).normalize();
    let v = n.cross(&u);
    Ok((u, v))
}

/// Field of the given magnitude at `angle_deg` in the plane (u, v).
pub fn field_in_plane(
    magnitude: f64,
    basis: &(Vector3<f64>, Vector3<f64>),
    angle_deg: f64,
) -> FieldVec {
    let (s, c) = angle_deg.to_radians().sin_cos();
    FieldVec((basis.0 * c + basis.1 * s) * magnitude)
}

/// Lines per orientation (outer) and angle (inner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub angles_deg: Vec<f64>,
    pub lines: Vec<Vec<OdmrLineSet>>,
}

impl SweepTable {
    /// Delimited rows: angle_deg, orientation, f1, f2, f3.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("angle_deg,orientation,f1_mhz,f2_mhz,f3_mhz\n");
        for (o, per_angle) in self.lines.iter().enumerate() {
            for (a, set) in self.angles_deg.iter().zip(per_angle) {
                let f = set.frequencies;
                out.push_str(&format!("{a},{o},{:.6},{:.6},{:.6}\n", f[0], f[1], f[2]));
            }
        }
        out
    }
}

pub fn angular_sweep(
    p: &ZfsParams,
    magnitude: f64,
    plane_normal: &Vector3<f64>,
    angles_deg: &[f64],
    orientations: &[Triad],
) -> Result<SweepTable> {
    if angles_deg.is_empty() {
        return Err(invalid("empty angle grid"));
    }
    if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("angle grid must be strictly increasing"));
    }
    let basis = plane_basis(plane_normal)?;
    let lines = orientations
        .iter()
        .map(|axes| {
            let q = ZfsParams { axes: *axes, ..*p };
            angles_deg
                .iter()
                .map(|&a| transition_frequencies(&q, &field_in_plane(magnitude, &basis, a)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        angles_deg: angles_deg.to_vec(),
        lines,
    })
}

/// One observed ODMR line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdmrObservation {
    pub angle_deg: f64,
    pub freq_mhz: f64,
    pub sigma_mhz: f64,
}

/// Which orientation degrees of freedom are fitted in addition to D and E.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OrientationModel {
    /// Axes held at the initial triad.
    Fixed,
    /// One extra parameter: rotation of the minor axes about the major axis.
    #[default]
    MinorTilt,
    /// Three extra parameters: a rotation vector applied to the initial triad.
    Full,
}

impl OrientationModel {
    fn n_params(self) -> usize {
        match self {
            Self::Fixed => 0,
            Self::MinorTilt => 1,
            Self::Full => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdmrFitConfig {
    pub magnitude_gauss: f64,
    pub plane_normal: Vector3<f64>,
    pub orientation: OrientationModel,
    pub max_iterations: usize,
}

impl Default for OdmrFitConfig {
    fn default() -> Self {
        Self {
            magnitude_gauss: 120.0,
            plane_normal: Vector3::z(),
            orientation: OrientationModel::MinorTilt,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdmrFit {
    pub params: ZfsParams,
    /// Minor-axis tilt about the major axis (radians) when fitted.
    pub tilt_rad: Option<f64>,
    /// Observed minus model, MHz, in input order.
    pub residuals: Vec<f64>,
    /// Branch (0..3, ascending frequency) each observation was matched to.
    pub branches: Vec<usize>,
    pub chi2: f64,
    pub residual_rms: f64,
    /// Parameter names matching the covariance rows.
    pub param_names: Vec<&'static str>,
    /// Pseudo-inverse covariance. Orientation directions the data cannot
    /// constrain to first order (e.g. a tilt starting on a symmetry plane)
    /// show up as zero rows; see `orientation_identified`.
    pub covariance: DMatrix<f64>,
    pub orientation_identified: bool,
    pub iterations: usize,
}

struct OdmrProblem<'a> {
    observed: &'a [OdmrObservation],
    groups: Vec<Vec<usize>>,
    group_angles: Vec<f64>,
    base: ZfsParams,
    basis: (Vector3<f64>, Vector3<f64>),
    config: OdmrFitConfig,
}

impl OdmrProblem<'_> {
    fn params_at(&self, x: &[f64]) -> ZfsParams {
        let axes = match self.config.orientation {
            OrientationModel::Fixed => self.base.axes,
            OrientationModel::MinorTilt => {
                let axis = Unit::new_normalize(self.base.axes.z());
                self.base
                    .axes
                    .rotated(&Rotation3::from_axis_angle(&axis, x[2]))
            }
            OrientationModel::Full => self
                .base
                .axes
                .rotated(&Rotation3::new(Vector3::new(x[2], x[3], x[4]))),
        };
        ZfsParams {
            d: x[0],
            e: x[1],
            g: self.base.g,
            axes,
        }
    }

    /// Model lines per angle group, and the observation→branch matching that
    /// minimizes the weighted squared mismatch.
    fn evaluate(&self, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let p = self.params_at(x);
        let mut resid = vec![0.0; self.observed.len()];
        let mut branch = vec![0; self.observed.len()];
        for (group, &angle) in self.groups.iter().zip(&self.group_angles) {
            let b = field_in_plane(self.config.magnitude_gauss, &self.basis, angle);
            let lines = match transition_frequencies(&p, &b) {
                Ok(l) => l.frequencies,
                Err(_) => [f64::NAN; 3],
            };
            let assignment = match_branches(
                &group.iter().map(|&i| self.observed[i]).collect::<Vec<_>>(),
                &lines,
            );
            for (k, &i) in group.iter().enumerate() {
                let br = assignment[k];
                branch[i] = br;
                resid[i] = self.observed[i].freq_mhz - lines[br];
            }
        }
        (resid, branch)
    }
}

impl lsq::Problem for OdmrProblem<'_> {
    fn n_params(&self) -> usize {
        2 + self.config.orientation.n_params()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let (r, _) = self.evaluate(x);
        r.iter()
            .zip(self.observed)
            .map(|(r, o)| r / o.sigma_mhz)
            .collect()
    }
}

/// Assigns up to three observations at one angle to distinct model branches
/// by minimizing the sum of squared weighted mismatches. Ties go to the
/// frequency-ordered assignment, which keeps branches continuous.
fn match_branches(obs: &[OdmrObservation], lines: &[f64; 3]) -> Vec<usize> {
    let n = obs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| obs[a].freq_mhz.total_cmp(&obs[b].freq_mhz));
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(n);
    fn recurse(
        depth: usize,
        order: &[usize],
        obs: &[OdmrObservation],
        lines: &[f64; 3],
        used: &mut [bool; 3],
        current: &mut Vec<usize>,
        cost: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if depth == order.len() {
            if best.as_ref().map_or(true, |(c, _)| cost < *c - 1e-12 * c.abs()) {
                *best = Some((cost, current.clone()));
            }
            return;
        }
        let o = obs[order[depth]];
        for br in 0..3 {
            if used[br] {
                continue;
            }
            used[br] = true;
            current.push(br);
            let d = (o.freq_mhz - lines[br]) / o.sigma_mhz;
            recurse(depth + 1, order, obs, lines, used, current, cost + d * d, best);
            current.pop();
            used[br] = false;
        }
    }
    if n <= 3 {
        recurse(0, &order, obs, lines, &mut [false; 3], &mut current, 0.0, &mut best);
        let (_, picks) = best.unwrap_or((0.0, vec![0; n]));
        let mut out = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            out[i] = picks[k];
        }
        out
    } else {
        // More observations than branches: plain nearest-line matching.
        obs.iter()
            .map(|o| {
                (0..3)
                    .min_by(|&a, &b| {
                        (o.freq_mhz - lines[a])
                            .abs()
                            .total_cmp(&(o.freq_mhz - lines[b]).abs())
                    })
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Weighted least-squares fit of D, E and (optionally) the defect orientation
/// to an angular ODMR sweep. The initial parameters must lie in the basin of
/// the correct branch assignment.
pub fn fit_odmr(
    observed: &[OdmrObservation],
    init: &ZfsParams,
    config: &OdmrFitConfig,
) -> Result<OdmrFit> {
    if observed.len() < 6 {
        return Err(invalid("at least 6 observations are required"));
    }
    if observed.iter().any(|o| !(o.sigma_mhz > 0.0)) {
        return Err(invalid("uncertainties must be positive"));
    }
    init.axes.validate()?;
    let basis = plane_basis(&config.plane_normal)?;
    let mut group_angles: Vec<f64> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, o) in observed.iter().enumerate() {
        match group_angles
            .iter()
            .position(|&a| (a - o.angle_deg).abs() < 1e-9)
        {
            Some(g) => groups[g].push(i),
            None => {
                group_angles.push(o.angle_deg);
                groups.push(vec![i]);
            }
        }
    }
    let problem = OdmrProblem {
        observed,
        groups,
        group_angles,
        base: *init,
        basis,
        config: *config,
    };
    let mut x0 = vec![init.d, init.e];
    x0.extend(std::iter::repeat(0.0).take(config.orientation.n_params()));
    let solver = LevenbergMarquardt {
        max_iterations: config.max_iterations,
        ..Default::default()
    };
    let report = solver.minimize(&problem, &x0)?;
    let normal = &report.normal_matrix;
    let de_block = normal.view((0, 0), (2, 2)).into_owned();
    let de_sv = de_block.svd(false, false).singular_values;
    if !(de_sv.min() > de_sv.max() * 1e-13) {
        return Err(Error::FitDegenerate("singular normal equations for D, E".into()));
    }
    let orientation_identified = report.covariance(false).is_some();
    let dof = report.residuals.len().saturating_sub(report.params.len()).max(1) as f64;
    let scale = normal.diagonal().max();
    let covariance = normal
        .clone()
        .svd(true, true)
        .pseudo_inverse(scale * 1e-13)
        .map_err(|e| Error::FitDegenerate(e.to_string()))?
        * (report.cost / dof);
    let (residuals, branches) = problem.evaluate(&report.params);
    let mut params = problem.params_at(&report.params);
    if params.e < 0.0 {
        // Swap minor axes: x -> y, y -> -x flips the sign of E.
        params.e = -params.e;
        params.axes = Triad {
            x: params.axes.y,
            y: -params.axes.x,
            z: params.axes.z,
        };
    }
    let tilt_rad = match config.orientation {
        OrientationModel::MinorTilt => Some(report.params[2]),
        _ => None,
    };
    let mut param_names = vec!["D", "E"];
    param_names.extend(match config.orientation {
        OrientationModel::Fixed => &[][..],
        OrientationModel::MinorTilt => &["tilt"][..],
        OrientationModel::Full => &["rot_x", "rot_y", "rot_z"][..],
    });
    let residual_rms =
        (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(OdmrFit {
        params,
        tilt_rad,
        residuals,
        branches,
        chi2: report.cost,
        residual_rms,
        param_names,
        covariance,
        orientation_identified,
        iterations: report.iterations,
    })
}

/// Noise-free observations of all three lines at each angle.
pub fn synthesize_sweep(
    p: &ZfsParams,
    magnitude: f64,
    plane_normal: &Vector3<f64>,
    angles_deg: &[f64],
    sigma_mhz: f64,
) -> Result<Vec<OdmrObservation>> {
    let table = angular_sweep(p, magnitude, plane_normal, angles_deg, &[p.axes])?;
    Ok(table.lines[0]
        .iter()
        .zip(angles_deg)
        .flat_map(|(set, &a)| {
            set.frequencies.map(|f| OdmrObservation {
                angle_deg: a,
                freq_mhz: f,
                sigma_mhz,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reference_params() -> ZfsParams {
        ZfsParams::new(1135.0, 139.0, 2.0, Triad::crystal()).unwrap()
    }

    /// Closed-form eigenvalues of a 3x3 Hermitian matrix via the
    /// trigonometric solution of its characteristic cubic.
    fn hermitian_cubic_eigenvalues(h: &Matrix3<Complex64>) -> [f64; 3] {
        let a = h[(0, 0)].re;
        let b = h[(1, 1)].re;
        let cc = h[(2, 2)].re;
        let (d, e, f) = (h[(0, 1)], h[(1, 2)], h[(0, 2)]);
        let tr = a + b + cc;
        let c1 = a * b + b * cc + a * cc - d.norm_sqr() - e.norm_sqr() - f.norm_sqr();
        let c0 = a * b * cc + 2.0 * (d * e * f.conj()).re
            - a * e.norm_sqr()
            - b * f.norm_sqr()
            - cc * d.norm_sqr();
        // lambda^3 - tr lambda^2 + c1 lambda - c0 = 0
        let p = tr * tr / 3.0 - c1;
        let q = -2.0 * tr.powi(3) / 27.0 + tr * c1 / 3.0 - c0;
        let shift = tr / 3.0;
        if p.abs() < 1e-14 {
            return [shift; 3];
        }
        let m = 2.0 * (p / 3.0).sqrt();
        let arg = (-3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = shift + m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
        }
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn zero_field_eigenvalues() {
        let levels = energy_levels(&reference_params(), &FieldVec::zero()).unwrap();
        assert_abs_diff_eq!(levels[0], -2.0 * 1135.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(levels[1], 1135.0 / 3.0 - 139.0, epsilon = 1e-9);
        assert_abs_diff_eq!(levels[2], 1135.0 / 3.0 + 139.0, epsilon = 1e-9);
    }

    #[test]
    fn trivial_zero_matrix() {
        let p = ZfsParams::new(0.0, 0.0, 2.0, Triad::crystal()).unwrap();
        let h = build_hamiltonian(&p, &FieldVec::zero()).unwrap();
        assert!(h.iter().all(|v| v.norm() == 0.0));
        let lines = transition_frequencies(&p, &FieldVec::zero()).unwrap();
        assert_eq!(lines.frequencies, [0.0; 3]);
    }

    #[test]
    fn axial_field_along_z() {
        let p = ZfsParams::new(1135.0, 0.0, 2.0, Triad::crystal()).unwrap();
        let b = FieldVec::along(Vector3::z(), 100.0);
        let gamma_b = 2.0 * BOHR_MAGNETON_MHZ_PER_GAUSS * 100.0;
        let levels = energy_levels(&p, &b).unwrap();
        let mut expect = [-2.0 * 1135.0 / 3.0, 1135.0 / 3.0 - gamma_b, 1135.0 / 3.0 + gamma_b];
        expect.sort_by(f64::total_cmp);
        for (l, e) in levels.iter().zip(expect) {
            assert_abs_diff_eq!(*l, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_field_line_values() {
        let lines = zero_field_lines(&reference_params()).frequencies;
        assert_abs_diff_eq!(lines[0], 278.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lines[1], 996.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lines[2], 1274.0, epsilon = 1e-9);
        let p = ZfsParams::new(1130.0, 135.0, 2.0, Triad::crystal()).unwrap();
        let lines = zero_field_lines(&p).frequencies;
        assert_eq!(lines.map(|f| (f * 1e6).round() / 1e6), [270.0, 995.0, 1265.0]);
        let p = ZfsParams::new(800.0, 0.0, 2.0, Triad::crystal()).unwrap();
        assert_eq!(zero_field_lines(&p).frequencies, [0.0, 800.0, 800.0]);
        // consistent with diagonalization
        let diag = transition_frequencies(&reference_params(), &FieldVec::zero()).unwrap();
        for (a, b) in diag.frequencies.iter().zip(zero_field_lines(&reference_params()).frequencies) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn field_along_defect_z_matches_cubic_oracle() {
        let p = reference_params();
        let b = FieldVec::along(Vector3::z(), 120.0);
        let h = build_hamiltonian(&p, &b).unwrap();
        let oracle = hermitian_cubic_eigenvalues(&h);
        let levels = energy_levels(&p, &b).unwrap();
        for (l, o) in levels.iter().zip(oracle) {
            assert_abs_diff_eq!(*l, o, epsilon = 1e-8);
        }
        let lines = transition_frequencies(&p, &b).unwrap().frequencies;
        assert_abs_diff_eq!(lines[2], lines[0] + lines[1], epsilon = 1e-9);
    }

    #[test]
    fn rejects_non_orthonormal_axes() {
        let bad = Triad {
            x: Vector3::x(),
            y: Vector3::new(0.1, 1.0, 0.0),
            z: Vector3::z(),
        };
        let p = ZfsParams {
            d: 1.0,
            e: 0.0,
            g: 2.0,
            axes: bad,
        };
        assert!(matches!(
            build_hamiltonian(&p, &FieldVec::zero()),
            Err(Error::InvalidParameter(_))
        ));
        assert!(Triad::new(Vector3::y(), Vector3::x(), Vector3::z()).is_err());
    }

    #[test]
    fn orientation_family_is_valid() {
        let fam = orientations_110();
        assert_eq!(fam.len(), 6);
        for t in &fam {
            t.validate().unwrap();
            let z = t.z();
            let zeros = z.iter().filter(|c| c.abs() < 1e-12).count();
            assert_eq!(zeros, 1);
        }
        // the documented example triad: z || [01-1], x || [100]
        let t = fam[5];
        assert_abs_diff_eq!(t.x(), Vector3::x(), epsilon = 1e-15);
    }

    #[test]
    fn sweep_perpendicular_axial_is_symmetric() {
        // E = 0, field in the (001) plane, defect z along [001]: B is always
        // perpendicular to z, so every angle gives the same lines.
        let p = ZfsParams::new(1135.0, 0.0, 2.0, Triad::crystal()).unwrap();
        let angles: Vec<f64> = (0..=36).map(|i| i as f64 * 5.0).collect();
        let t = angular_sweep(&p, 120.0, &Vector3::z(), &angles, &[p.axes]).unwrap();
        let first = t.lines[0][0].frequencies;
        for set in &t.lines[0] {
            for (a, b) in set.frequencies.iter().zip(first) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        let p = reference_params();
        assert!(angular_sweep(&p, 120.0, &Vector3::z(), &[], &[p.axes]).is_err());
    }

    #[test]
    fn out_of_plane_orientations_pair_up() {
        let p = reference_params();
        let angles: Vec<f64> = (0..=36).map(|i| i as f64 * 5.0).collect();
        let fam = orientations_110();
        let t = angular_sweep(&p, 120.0, &Vector3::z(), &angles, &fam).unwrap();
        // [101] with [10-1], and [011] with [01-1], are indistinguishable
        // for fields in the (001) plane.
        for (a, b) in [(2, 3), (4, 5)] {
            for (sa, sb) in t.lines[a].iter().zip(&t.lines[b]) {
                for (fa, fb) in sa.frequencies.iter().zip(sb.frequencies) {
                    assert_abs_diff_eq!(*fa, fb, epsilon = 1e-8);
                }
            }
        }
        // in-plane orientations are not degenerate with each other
        let diff: f64 = t.lines[0]
            .iter()
            .zip(&t.lines[1])
            .map(|(a, b)| (a.frequencies[2] - b.frequencies[2]).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1.0);
    }

    #[test]
    fn sweep_matches_finer_grid_interpolation() {
        let p = ZfsParams {
            axes: orientations_110()[0],
            ..reference_params()
        };
        let coarse: Vec<f64> = (0..=18).map(|i| i as f64 * 10.0).collect();
        let fine: Vec<f64> = (0..=180).map(|i| i as f64).collect();
        let tc = angular_sweep(&p, 120.0, &Vector3::z(), &coarse, &[p.axes]).unwrap();
        let tf = angular_sweep(&p, 120.0, &Vector3::z(), &fine, &[p.axes]).unwrap();
        for (i, a) in coarse.iter().enumerate() {
            let j = *a as usize;
            for k in 0..3 {
                assert_abs_diff_eq!(
                    tc.lines[0][i].frequencies[k],
                    tf.lines[0][j].frequencies[k],
                    epsilon = 1e-9
                );
            }
            // the midpoint of the fine grid brackets the coarse value smoothly
            if j > 0 && j < 180 {
                for k in 0..3 {
                    let interp = 0.5
                        * (tf.lines[0][j - 1].frequencies[k] + tf.lines[0][j + 1].frequencies[k]);
                    assert!((interp - tc.lines[0][i].frequencies[k]).abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn noiseless_fit_recovers_d_and_e() {
        let truth = ZfsParams {
            axes: orientations_110()[0],
            ..reference_params()
        };
        let angles: Vec<f64> = (0..37).map(|i| i as f64 * 5.0).collect();
        let obs = synthesize_sweep(&truth, 120.0, &Vector3::z(), &angles, 1.0).unwrap();
        let init = ZfsParams {
            d: 1120.0,
            e: 130.0,
            ..truth
        };
        let fit = fit_odmr(&obs, &init, &OdmrFitConfig::default()).unwrap();
        assert!((fit.params.d - 1135.0).abs() < 0.01, "{}", fit.params.d);
        assert!((fit.params.e - 139.0).abs() < 0.01, "{}", fit.params.e);
        assert!(fit.residual_rms < 1e-4);
    }

    #[test]
    fn minor_tilt_fit_recovers_rotation() {
        let base = ZfsParams {
            axes: orientations_110()[0],
            ..reference_params()
        };
        let axis = Unit::new_normalize(base.axes.z());
        let truth = ZfsParams {
            axes: base.axes.rotated(&Rotation3::from_axis_angle(&axis, 0.05)),
            ..base
        };
        let angles: Vec<f64> = (0..37).map(|i| i as f64 * 5.0).collect();
        let obs = synthesize_sweep(&truth, 120.0, &Vector3::z(), &angles, 1.0).unwrap();
        let cfg = OdmrFitConfig {
            orientation: OrientationModel::MinorTilt,
            ..Default::default()
        };
        // start off the symmetry plane, where the tilt gradient vanishes
        let init = ZfsParams {
            axes: base.axes.rotated(&Rotation3::from_axis_angle(&axis, 0.02)),
            ..base
        };
        let fit = fit_odmr(&obs, &init, &cfg).unwrap();
        assert!(fit.orientation_identified);
        let total = 0.02 + fit.tilt_rad.unwrap();
        assert!((total.abs() - 0.05).abs() < 1e-5, "{total}");
    }

    #[test]
    fn zero_splitting_generator_fits_to_zero() {
        let truth = ZfsParams::new(0.0, 0.0, 2.0, orientations_110()[0]).unwrap();
        let angles: Vec<f64> = (0..37).map(|i| i as f64 * 5.0).collect();
        let obs = synthesize_sweep(&truth, 120.0, &Vector3::z(), &angles, 1.0).unwrap();
        let init = ZfsParams { d: 20.0, e: 5.0, ..truth };
        let cfg = OdmrFitConfig {
            orientation: OrientationModel::Fixed,
            ..Default::default()
        };
        let fit = fit_odmr(&obs, &init, &cfg).unwrap();
        assert!(fit.params.d.abs() < 1e-3 && fit.params.e.abs() < 1e-3);
    }

    #[test]
    fn fit_rejects_too_few_points() {
        let p = reference_params();
        let obs = vec![
            OdmrObservation {
                angle_deg: 0.0,
                freq_mhz: 1000.0,
                sigma_mhz: 1.0
            };
            5
        ];
        assert!(fit_odmr(&obs, &p, &OdmrFitConfig::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn triad_from(rv: [f64; 3]) -> Triad {
            Triad::crystal().rotated(&Rotation3::new(Vector3::from(rv)))
        }

        proptest! {
            #[test]
            fn traceless_and_frame_covariant(
                d in -3000.0..3000.0f64, e in 0.0..500.0f64, g in 1.5..2.5f64,
                bx in -500.0..500.0f64, by in -500.0..500.0f64, bz in -500.0..500.0f64,
                r1 in -3.0..3.0f64, r2 in -3.0..3.0f64, r3 in -3.0..3.0f64,
                q1 in -3.0..3.0f64, q2 in -3.0..3.0f64, q3 in -3.0..3.0f64,
            ) {
                let p = ZfsParams::new(d, e, g, triad_from([r1, r2, r3])).unwrap();
                let b = FieldVec(Vector3::new(bx, by, bz));
                let h = build_hamiltonian(&p, &b).unwrap();
                prop_assert!(h.trace().norm() < 1e-9);
                prop_assert!((h - h.adjoint()).norm() < 1e-12);
                let levels = energy_levels(&p, &b).unwrap();
                prop_assert!(levels.iter().sum::<f64>().abs() < 1e-9);
                let lines = transition_frequencies(&p, &b).unwrap().frequencies;
                prop_assert!((lines[2] - lines[0] - lines[1]).abs() < 1e-9);

                let rot = Rotation3::new(Vector3::new(q1, q2, q3));
                let p2 = ZfsParams { axes: p.axes.rotated(&rot), ..p };
                let b2 = FieldVec(rot * b.0);
                let levels2 = energy_levels(&p2, &b2).unwrap();
                for (a, c) in levels.iter().zip(levels2) {
                    prop_assert!((a - c).abs() < 1e-9);
                }
            }

            #[test]
            fn axial_closed_form(d in -3000.0..3000.0f64, bz in -500.0..500.0f64) {
                let p = ZfsParams::new(d, 0.0, 2.0, Triad::crystal()).unwrap();
                let b = FieldVec(Vector3::new(0.0, 0.0, bz));
                let gb = p.gyromagnetic_mhz_per_gauss() * bz;
                let mut expect = [-2.0 * d / 3.0, d / 3.0 + gb, d / 3.0 - gb];
                expect.sort_by(f64::total_cmp);
                let levels = energy_levels(&p, &b).unwrap();
                for (l, e) in levels.iter().zip(expect) {
                    prop_assert!((l - e).abs() < 1e-9);
                }
            }

            #[test]
            fn zero_field_sum_rule(d in 0.0..3000.0f64, e in 0.0..1000.0f64) {
                let p = ZfsParams::new(d, e, 2.0, Triad::crystal()).unwrap();
                let f = zero_field_lines(&p).frequencies;
                prop_assert!((f[2] - f[0] - f[1]).abs() < 1e-9);
                prop_assert!(f[0] <= f[1] && f[1] <= f[2]);
            }
        }
    }
}
