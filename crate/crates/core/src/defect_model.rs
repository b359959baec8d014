//! Vacancy-centred defect-molecule model.
//!
//! Four dangling orbitals `c1..c4` on the vacancy's nearest neighbours are
//! combined into symmetrized molecular orbitals. The defect frame has
//! `z ∥ [110]`, `c1, c2` in the xz-plane (equal ⟨x⟩, opposite ⟨z⟩) and
//! `c3, c4` mirror images across the xz-plane. In this frame `C2v` is
//! generated by the two-fold axis along x and the mirrors `z → -z` and
//! `y → -y`; `C1h` keeps only the `y → -y` mirror.
//!
//! Lengths are in units of the bond length. MO coefficients are the plain
//! `±1` combinations (no normalization), matching the tensor prefactors
//! `A = 4/⟨r_z⟩^3` and `B = 12 Δ_xz/⟨r_z⟩^5`.

use std::fmt;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::constants::{spin_spin_prefactor_mhz_a3, FREE_ELECTRON_G};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointGroup {
    C2v,
    C1h,
}

impl PointGroup {
    pub fn irreps(self) -> &'static [Irrep] {
        match self {
            PointGroup::C2v => &[Irrep::A1, Irrep::A2, Irrep::B1, Irrep::B2],
            PointGroup::C1h => &[Irrep::APrime, Irrep::ADoublePrime],
        }
    }

    /// Symmetry operations as sign flips of (x, y, z).
    fn operations(self) -> &'static [[f64; 3]] {
        match self {
            // E, C2(x), σ(z → -z), σ(y → -y)
            PointGroup::C2v => &[
                [1.0, 1.0, 1.0],
                [1.0, -1.0, -1.0],
                [1.0, 1.0, -1.0],
                [1.0, -1.0, 1.0],
            ],
            // E, σ(y → -y)
            PointGroup::C1h => &[[1.0, 1.0, 1.0], [1.0, -1.0, 1.0]],
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "c2v" => Ok(PointGroup::C2v),
            "c1h" | "cs" => Ok(PointGroup::C1h),
            _ => Err(Error::Unsupported(format!("point group {name}"))),
        }
    }
}

impl fmt::Display for PointGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointGroup::C2v => "C2v",
            PointGroup::C1h => "C1h",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Irrep {
    A1,
    A2,
    B1,
    B2,
    APrime,
    ADoublePrime,
}

impl Irrep {
    /// Characters over the operations of `self.group()`.
    fn characters(self) -> &'static [f64] {
        match self {
            Irrep::A1 => &[1.0, 1.0, 1.0, 1.0],
            Irrep::A2 => &[1.0, 1.0, -1.0, -1.0],
            Irrep::B1 => &[1.0, -1.0, -1.0, 1.0],
            Irrep::B2 => &[1.0, -1.0, 1.0, -1.0],
            Irrep::APrime => &[1.0, 1.0],
            Irrep::ADoublePrime => &[1.0, -1.0],
        }
    }

    pub fn group(self) -> PointGroup {
        match self {
            Irrep::APrime | Irrep::ADoublePrime => PointGroup::C1h,
            _ => PointGroup::C2v,
        }
    }

    fn from_characters(group: PointGroup, chars: &[f64]) -> Option<Self> {
        group
            .irreps()
            .iter()
            .copied()
            .find(|ir| ir.characters().iter().zip(chars).all(|(a, b)| (a - b).abs() < 1e-9))
    }

    /// The same representation in `group` (C2v labels descend to C1h).
    pub fn in_group(self, group: PointGroup) -> Result<Self> {
        match (self.group(), group) {
            (a, b) if a == b => Ok(self),
            (PointGroup::C2v, PointGroup::C1h) => {
                // keep E and σ(y → -y)
                let c = self.characters();
                Ok(Irrep::from_characters(PointGroup::C1h, &[c[0], c[3]]).expect("C1h irreps are complete"))
            }
            _ => Err(invalid(format!("{self} is not a representation of {group}"))),
        }
    }

    pub fn product(self, other: Irrep) -> Result<Self> {
        if self.group() != other.group() {
            return Err(invalid("irreps from different groups"));
        }
        let chars: Vec<f64> = self
            .characters()
            .iter()
            .zip(other.characters())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Irrep::from_characters(self.group(), &chars).expect("abelian product"))
    }
}

impl fmt::Display for Irrep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Irrep::A1 => "A1",
            Irrep::A2 => "A2",
            Irrep::B1 => "B1",
            Irrep::B2 => "B2",
            Irrep::APrime => "A'",
            Irrep::ADoublePrime => "A''",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }

    /// Axis with the largest component of `v`.
    pub fn nearest(v: &Vector3<f64>) -> Axis {
        Axis::ALL
            .into_iter()
            .max_by(|a, b| v[a.index()].abs().total_cmp(&v[b.index()].abs()))
            .unwrap()
    }

    fn irrep(self, group: PointGroup) -> Irrep {
        let chars: Vec<f64> = group.operations().iter().map(|op| op[self.index()]).collect();
        Irrep::from_characters(group, &chars).expect("coordinates span irreps")
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Dipole components allowed in `<A1| d |Γ>`.
pub fn dipole_selection(excited: Irrep, group: PointGroup) -> Result<Vec<Axis>> {
    let g = excited.in_group(group)?;
    Ok(Axis::ALL.into_iter().filter(|a| a.irrep(group) == g).collect())
}

/// Quadratic operators `r_i r_j` (i ≤ j) allowed in `<A1| r_i r_j |Γ>`.
pub fn quadratic_selection(excited: Irrep, group: PointGroup) -> Result<Vec<(Axis, Axis)>> {
    let g = excited.in_group(group)?;
    let mut out = Vec::new();
    for (i, a) in Axis::ALL.into_iter().enumerate() {
        for b in Axis::ALL.into_iter().skip(i) {
            if a.irrep(group).product(b.irrep(group))? == g {
                out.push((a, b));
            }
        }
    }
    Ok(out)
}

/// Orbital centres and bond-axis spreads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VacancyGeometry {
    /// Neighbour sites relative to the vacancy (unit bond length).
    pub sites: [Vector3<f64>; 4],
    /// Mean electron position of each dangling orbital.
    pub mean_positions: [Vector3<f64>; 4],
    /// Variance of each orbital along its bond axis; minor-axis variances are taken as zero.
    pub bond_variance: [f64; 4],
    /// Overlap between neighbouring orbitals, used only when the
    /// zero-overlap dipole vanishes.
    pub overlap: f64,
}

impl VacancyGeometry {
    /// Ideal tetrahedral neighbours with orbitals centred on the sites.
    pub fn ideal() -> Self {
        let x0 = 1.0 / 3f64.sqrt();
        let w = (2.0f64 / 3.0).sqrt();
        let sites = [
            Vector3::new(x0, 0.0, w),
            Vector3::new(x0, 0.0, -w),
            Vector3::new(-x0, w, 0.0),
            Vector3::new(-x0, -w, 0.0),
        ];
        Self {
            sites,
            mean_positions: sites,
            bond_variance: [0.05; 4],
            overlap: 0.1,
        }
    }

    /// Checks the mirror arrangement described in the module docs.
    pub fn validate(&self) -> Result<()> {
        let tol = 1e-9;
        let p = &self.mean_positions;
        if self.sites.iter().chain(p).any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid("non-finite geometry"));
        }
        if self.bond_variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("bond variances must be non-negative"));
        }
        let in_plane = p[0].y.abs() < tol && p[1].y.abs() < tol && (p[0].x - p[1].x).abs() < tol
            && (p[0].z + p[1].z).abs() < tol;
        if !in_plane {
            return Err(invalid("c1 and c2 must lie in the xz-plane with equal x and opposite z"));
        }
        let mirrored = (p[2].x - p[3].x).abs() < tol && (p[2].y + p[3].y).abs() < tol
            && (p[2].z - p[3].z).abs() < tol && p[2].y.abs() > tol;
        if !mirrored {
            return Err(invalid("c3 and c4 must be out-of-plane mirror images"));
        }
        for s in &self.sites {
            if s.norm() < tol {
                return Err(Error::SingularGeometry("site at the vacancy".into()));
            }
        }
        Ok(())
    }

    /// Covariance of orbital `i`: variance along its bond axis only.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let u = self.sites[i].normalize();
        u * u.transpose() * self.bond_variance[i]
    }

    /// Permutation of orbitals induced by a sign-flip operation.
    fn permutation(&self, op: &[f64; 3]) -> Result<[usize; 4]> {
        let mut perm = [0; 4];
        for (i, s) in self.mean_positions.iter().enumerate() {
            let image = Vector3::new(s.x * op[0], s.y * op[1], s.z * op[2]);
            perm[i] = self
                .mean_positions
                .iter()
                .position(|t| (t - image).norm() < 1e-9)
                .ok_or_else(|| Error::SingularGeometry("geometry lacks the group's symmetry".into()))?;
        }
        Ok(perm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoLabel {
    A1,
    A1Prime,
    B1,
    B2,
}

impl MoLabel {
    pub const ALL: [MoLabel; 4] = [MoLabel::A1, MoLabel::A1Prime, MoLabel::B1, MoLabel::B2];

    pub fn coefficients(self) -> [f64; 4] {
        match self {
            MoLabel::A1 => [1.0, 1.0, 0.0, 0.0],
            MoLabel::A1Prime => [0.0, 0.0, 1.0, 1.0],
            MoLabel::B1 => [1.0, -1.0, 0.0, 0.0],
            MoLabel::B2 => [0.0, 0.0, 1.0, -1.0],
        }
    }

    /// Irrep under which the orbital is listed in the C2v MO table.
    /// For `a1'` this is A2 even though `c3 + c4` transforms as A1.
    pub fn listed_irrep(self) -> Irrep {
        match self {
            MoLabel::A1 => Irrep::A1,
            MoLabel::A1Prime => Irrep::A2,
            MoLabel::B1 => Irrep::B1,
            MoLabel::B2 => Irrep::B2,
        }
    }
}

impl fmt::Display for MoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoLabel::A1 => "a1",
            MoLabel::A1Prime => "a1'",
            MoLabel::B1 => "b1",
            MoLabel::B2 => "b2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularOrbital {
    pub label: MoLabel,
    pub coefficients: [f64; 4],
    /// Irrep from the MO listing, carried into `group`.
    pub listed_irrep: Irrep,
    /// Irrep from the orbital's actual transformation under `group`.
    pub irrep: Irrep,
}

/// Irrep of a combination of the four orbitals under `group`.
pub fn orbital_irrep(coefficients: &[f64; 4], group: PointGroup, geom: &VacancyGeometry) -> Result<Irrep> {
    let mut chars = Vec::new();
    for op in group.operations() {
        let perm = geom.permutation(op)?;
        let mut image = [0.0; 4];
        for (i, c) in coefficients.iter().enumerate() {
            image[perm[i]] += c;
        }
        let dot: f64 = image.iter().zip(coefficients).map(|(a, b)| a * b).sum();
        let nn: f64 = coefficients.iter().map(|c| c * c).sum();
        chars.push(dot / nn);
    }
    Irrep::from_characters(group, &chars)
        .ok_or_else(|| invalid("combination is not a symmetry-adapted orbital"))
}

/// The four symmetrized orbitals on the ideal geometry.
pub fn mo_basis(group: PointGroup) -> Result<Vec<MolecularOrbital>> {
    let geom = VacancyGeometry::ideal();
    MoLabel::ALL
        .into_iter()
        .map(|label| {
            let coefficients = label.coefficients();
            Ok(MolecularOrbital {
                label,
                coefficients,
                listed_irrep: label.listed_irrep().in_group(group)?,
                irrep: orbital_irrep(&coefficients, group, &geom)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DipoleSource {
    /// Zero-overlap term `Σ a_i b_i ⟨r⟩_i`.
    Direct,
    /// Overlap term with `⟨c_i|r|c_j⟩ ≈ S (⟨r⟩_i + ⟨r⟩_j)/2`.
    Overlap,
    /// Both estimates vanish on this geometry; direction from selection rules alone.
    Symmetry,
    Forbidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleEstimate {
    /// `<a| r |b>` in units of e times bond length.
    pub vector: Vector3<f64>,
    pub magnitude: f64,
    pub axis: Option<Axis>,
    pub source: DipoleSource,
    pub forbidden: bool,
}

/// Transition dipole `<a|d|b>` for the HOMO/LUMO pair, with overlap
/// integrals neglected except when the zero-overlap value vanishes.
pub fn dipole_estimate(homo: MoLabel, lumo: MoLabel, group: PointGroup, geom: &VacancyGeometry) -> Result<DipoleEstimate> {
    geom.validate()?;
    let a = homo.coefficients();
    let b = lumo.coefficients();
    let excited = orbital_irrep(&a, PointGroup::C2v, geom)?.product(orbital_irrep(&b, PointGroup::C2v, geom)?)?;
    let allowed = dipole_selection(excited, group)?;
    if allowed.is_empty() {
        return Ok(DipoleEstimate {
            vector: Vector3::zeros(),
            magnitude: 0.0,
            axis: None,
            source: DipoleSource::Forbidden,
            forbidden: true,
        });
    }
    let r = &geom.mean_positions;
    let direct: Vector3<f64> = (0..4).map(|i| r[i] * (a[i] * b[i])).sum();
    let mut overlap = Vector3::zeros();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                overlap += (r[i] + r[j]) * (0.5 * geom.overlap * a[i] * b[j]);
            }
        }
    }
    let project = |v: Vector3<f64>| {
        let mut out = Vector3::zeros();
        for ax in &allowed {
            out[ax.index()] = v[ax.index()];
        }
        out
    };
    let scale = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let tol = 1e-9 * scale;
    let (vector, source) = if project(direct).norm() > tol {
        (project(direct), DipoleSource::Direct)
    } else if project(overlap).norm() > tol * geom.overlap.abs().max(1e-300) {
        (project(overlap), DipoleSource::Overlap)
    } else {
        (Vector3::zeros(), DipoleSource::Symmetry)
    };
    let axis = if source == DipoleSource::Symmetry {
        // The mean-position model keeps the C2v arrangement, so use its
        // rule to break a tie between several allowed components.
        let parent = dipole_selection(excited, PointGroup::C2v)?;
        allowed
            .iter()
            .copied()
            .find(|a| parent.contains(a))
            .or_else(|| allowed.first().copied())
    } else {
        Some(Axis::nearest(&vector))
    };
    Ok(DipoleEstimate {
        magnitude: vector.norm(),
        vector,
        axis,
        source,
        forbidden: false,
    })
}

/// Triplet weights `a_i^2 b_j^2 - a_i b_i a_j b_j` over ordered orbital pairs.
pub fn triplet_weights(a: &[f64; 4], b: &[f64; 4]) -> [[f64; 4]; 4] {
    let mut w = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                w[i][j] = a[i] * a[i] * b[j] * b[j] - a[i] * b[i] * a[j] * b[j];
            }
        }
    }
    w
}

/// Semi-classical dipolar kernel between two orbitals with mean offset `r`
/// and relative-position covariance `delta`.
pub fn semiclassical_kernel(r: &Vector3<f64>, delta: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let d = r.norm();
    if d < 1e-9 {
        return Err(Error::SingularGeometry("coincident mean positions".into()));
    }
    Ok(Matrix3::identity() / d.powi(3) - (r * r.transpose() - delta) * (3.0 / d.powi(5)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSpinTensor {
    /// In units of C per bond length cubed.
    pub matrix: Matrix3<f64>,
    /// Trace removed from the summed kernel (the kernel is not traceless once Δ ≠ 0).
    pub removed_trace: f64,
}

impl SpinSpinTensor {
    /// Tensor in MHz for a bond length in angstrom.
    pub fn in_mhz(&self, bond_length_angstrom: f64) -> Matrix3<f64> {
        self.matrix * (spin_spin_prefactor_mhz_a3(FREE_ELECTRON_G) / bond_length_angstrom.powi(3))
    }
}

/// Spin-spin tensor of the `ab` triplet: semi-classical kernel summed over
/// orbital pairs with the triplet weights, then made traceless.
pub fn spinspin_tensor(homo: MoLabel, lumo: MoLabel, geom: &VacancyGeometry) -> Result<SpinSpinTensor> {
    geom.validate()?;
    if homo == lumo {
        return Err(invalid("HOMO and LUMO must differ"));
    }
    let w = triplet_weights(&homo.coefficients(), &lumo.coefficients());
    let mut t = Matrix3::zeros();
    for i in 0..4 {
        for j in 0..4 {
            if w[i][j] == 0.0 {
                continue;
            }
            let r = geom.mean_positions[i] - geom.mean_positions[j];
            let delta = geom.covariance(i) + geom.covariance(j);
            t += semiclassical_kernel(&r, &delta)? * w[i][j];
        }
    }
    let t = (t + t.transpose()) * 0.5;
    let tr = t.trace();
    Ok(SpinSpinTensor {
        matrix: t - Matrix3::identity() * (tr / 3.0),
        removed_trace: tr,
    })
}

/// The `(a1, b1)` tensor in the displayed form
/// `[[A-B, 0, B], [0, A, 0], [B, 0, -2A+B]]`.
pub fn axial_tilted_tensor(a: f64, b: f64) -> Matrix3<f64> {
    Matrix3::new(a - b, 0.0, b, 0.0, a, 0.0, b, 0.0, -2.0 * a + b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAxes {
    pub d: f64,
    /// Non-negative by choice of the minor axis.
    pub e: f64,
    pub major: Vector3<f64>,
    /// Axis x' with `E = (λ_x' - λ_y')/2 ≥ 0`.
    pub minor: Vector3<f64>,
    pub third: Vector3<f64>,
    /// Eigenvalues along (minor, third, major).
    pub eigenvalues: [f64; 3],
    pub axial: bool,
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let k = Axis::nearest(&v).index();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Eigen-decomposition of a symmetric tensor: major axis has the largest
/// |eigenvalue|, `D = 3/2 λ_major`, `E = (λ_mid - λ_min)/2` over the other two.
pub fn principal_axes(t: &Matrix3<f64>) -> Result<PrincipalAxes> {
    let norm = t.norm();
    if !norm.is_finite() {
        return Err(invalid("non-finite tensor"));
    }
    if (t - t.transpose()).norm() > 1e-12 * norm.max(1e-300) {
        return Err(invalid("tensor is not symmetric"));
    }
    let eig = SymmetricEigen::new(*t);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| eig.eigenvalues[i].abs().total_cmp(&eig.eigenvalues[j].abs()));
    let k = idx[2];
    let (mut p, mut q) = (idx[0], idx[1]);
    if eig.eigenvalues[p] < eig.eigenvalues[q] {
        std::mem::swap(&mut p, &mut q);
    }
    let axial = (eig.eigenvalues[p] - eig.eigenvalues[q]).abs() <= 1e-12 * norm.max(1e-300);
    let major = canonical_sign(eig.eigenvectors.column(k).into_owned());
    let minor = canonical_sign(eig.eigenvectors.column(p).into_owned());
    let third = major.cross(&minor);
    Ok(PrincipalAxes {
        d: 1.5 * eig.eigenvalues[k],
        e: if axial { 0.0 } else { 0.5 * (eig.eigenvalues[p] - eig.eigenvalues[q]) },
        major,
        minor,
        third,
        eigenvalues: [eig.eigenvalues[p], eig.eigenvalues[q], eig.eigenvalues[k]],
        axial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltAngle {
    /// `B / (2B - 3A)`; `None` when the denominator vanishes.
    pub first_order: Option<f64>,
    /// Angle of the major axis from z towards x, radians.
    pub exact: f64,
    /// `|first_order - exact| / |exact|`, when both are non-zero.
    pub relative_disagreement: Option<f64>,
}

/// Tilt of the major spin axis in the xz-plane for the tensor of
/// [`axial_tilted_tensor`].
pub fn tilt_angle(a: f64, b: f64) -> Result<TiltAngle> {
    if !(a > 0.0 && b.is_finite()) {
        return Err(invalid("tilt requires A > 0"));
    }
    let axes = principal_axes(&axial_tilted_tensor(a, b))?;
    let m = if axes.major.z < 0.0 { -axes.major } else { axes.major };
    let exact = m.x.atan2(m.z);
    let denom = 2.0 * b - 3.0 * a;
    let first_order = if denom.abs() > 1e-15 * a { Some(b / denom) } else { None };
    let relative_disagreement = match first_order {
        Some(f) if exact != 0.0 => Some((f - exact).abs() / exact.abs()),
        _ => None,
    };
    Ok(TiltAngle {
        first_order,
        exact,
        relative_disagreement,
    })
}

/// One row of the HOMO/LUMO classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoPair {
    pub homo: MoLabel,
    pub lumo: MoLabel,
    pub group: PointGroup,
    /// Excited-state irrep in C2v labels.
    pub excited_irrep: Irrep,
    /// The same irrep in the labels of `group`.
    pub excited_irrep_in_group: Irrep,
    /// `None` when the transition is forbidden in `group`.
    pub dipole_axis: Option<Axis>,
    /// Dipole axis if the C2v restriction is lifted (the y of the `(b1, b2)` row).
    pub dipole_axis_lowered: Option<Axis>,
    pub forbidden_in_c2v: bool,
    pub dipole: DipoleEstimate,
    pub spin_major_axis: Axis,
    pub spin_minor_axis: Axis,
    pub principal: PrincipalAxes,
}

/// HOMO/LUMO pairs in table order.
pub const PAIRS: [(MoLabel, MoLabel); 6] = [
    (MoLabel::A1, MoLabel::A1Prime),
    (MoLabel::A1, MoLabel::B1),
    (MoLabel::A1Prime, MoLabel::B1),
    (MoLabel::A1, MoLabel::B2),
    (MoLabel::A1Prime, MoLabel::B2),
    (MoLabel::B1, MoLabel::B2),
];

pub fn classify_pairs(group: PointGroup, geom: &VacancyGeometry) -> Result<Vec<MoPair>> {
    geom.validate()?;
    PAIRS
        .iter()
        .map(|&(homo, lumo)| {
            let excited = orbital_irrep(&homo.coefficients(), PointGroup::C2v, geom)?
                .product(orbital_irrep(&lumo.coefficients(), PointGroup::C2v, geom)?)?;
            let dipole = dipole_estimate(homo, lumo, group, geom)?;
            let lowered = dipole_estimate(homo, lumo, PointGroup::C1h, geom)?;
            let forbidden_in_c2v = dipole_selection(excited, PointGroup::C2v)?.is_empty();
            let tensor = spinspin_tensor(homo, lumo, geom)?;
            let principal = principal_axes(&tensor.matrix)?;
            Ok(MoPair {
                homo,
                lumo,
                group,
                excited_irrep: excited,
                excited_irrep_in_group: excited.in_group(group)?,
                dipole_axis: dipole.axis,
                dipole_axis_lowered: lowered.axis,
                forbidden_in_c2v,
                dipole,
                spin_major_axis: Axis::nearest(&principal.major),
                spin_minor_axis: Axis::nearest(&principal.minor),
                principal,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Constraints {
    pub dipole_axes: Option<Vec<Axis>>,
    pub spin_axes: Option<Vec<Axis>>,
    /// Require the dipole and the major spin axis to coincide.
    #[serde(default)]
    pub co_aligned: bool,
}

impl Constraints {
    /// Dipole and major spin axis both along a [110]-type direction
    /// (z or y in the defect frame); co-alignment left open.
    pub fn along_110() -> Self {
        Self {
            dipole_axes: Some(vec![Axis::Y, Axis::Z]),
            spin_axes: Some(vec![Axis::Y, Axis::Z]),
            co_aligned: false,
        }
    }
}

pub fn candidate_filter<'a>(table: &'a [MoPair], c: &Constraints) -> Vec<&'a MoPair> {
    table
        .iter()
        .filter(|p| {
            let dipole_ok = match &c.dipole_axes {
                None => true,
                Some(axes) => p.dipole_axis.is_some_and(|a| axes.contains(&a)),
            };
            let spin_ok = match &c.spin_axes {
                None => true,
                Some(axes) => axes.contains(&p.spin_major_axis),
            };
            let aligned_ok = !c.co_aligned || p.dipole_axis == Some(p.spin_major_axis);
            dipole_ok && spin_ok && aligned_ok
        })
        .collect()
}

/// Plain-text rendering of a classification table.
pub fn format_table(table: &[MoPair]) -> String {
    let mut s = String::from("(HOMO, LUMO)   Gamma   dipole   spin\n");
    for p in table {
        let dipole = match (p.dipole_axis, p.dipole_axis_lowered) {
            (Some(a), _) if p.forbidden_in_c2v => format!("{a}*"),
            (Some(a), _) => a.to_string(),
            (None, Some(a)) => format!("({a})*"),
            (None, None) => "-".into(),
        };
        s.push_str(&format!(
            "{:<14} {:<7} {:<8} {}\n",
            format!("({}, {})", p.homo, p.lumo),
            p.excited_irrep.to_string(),
            dipole,
            p.spin_major_axis
        ));
    }
    if table.iter().any(|p| p.forbidden_in_c2v) {
        s.push_str("* not allowed in C2v\n");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureCandidate {
    pub label: String,
    pub group: PointGroup,
}

/// Simplest vacancy structures for a defect with the given electron count.
pub fn structure_shortlist(electron_count: u32) -> Result<Vec<StructureCandidate>> {
    let c = |label: &str, group| StructureCandidate {
        label: label.into(),
        group,
    };
    match electron_count {
        4 => Ok(vec![c("[Si]CV", PointGroup::C1h), c("[Si]V[Si]", PointGroup::C2v)]),
        6 => Ok(vec![
            c("[O]CV", PointGroup::C1h),
            c("[N]-", PointGroup::C1h),
            c("[O]V[Si]", PointGroup::C1h),
        ]),
        n if n % 2 == 1 => Err(invalid(format!(
            "{n} electrons cannot give a singlet ground state"
        ))),
        n => Err(invalid(format!(
            "{n} electrons: the neighbours give four and impurities at most two more"
        ))),
    }
}
