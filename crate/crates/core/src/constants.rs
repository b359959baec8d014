//! Physical constants (CODATA 2018 exact/recommended values) and unit helpers.

/// Planck constant, J s.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Bohr magneton, J/T.
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;

/// Vacuum permeability, N/A^2.
pub const VACUUM_PERMEABILITY: f64 = 1.256_637_062_12e-6;

/// Free-electron g-factor.
pub const FREE_ELECTRON_G: f64 = 2.002_319_304_36;

/// Bohr magneton over Planck constant in MHz per gauss (per unit g).
pub const BOHR_MAGNETON_MHZ_PER_GAUSS: f64 = 1.399_624_49;

/// hc in eV nm; photon energy in eV is `HC_EV_NM / wavelength_nm`.
pub const HC_EV_NM: f64 = 1239.842;

/// Phonon cut-off of diamond in meV (highest optical phonon at zone centre).
pub const DIAMOND_PHONON_CUTOFF_MEV: f64 = 168.0;

/// Carbon-carbon bond length in diamond, angstrom.
pub const DIAMOND_BOND_LENGTH_ANGSTROM: f64 = 1.5445;

/// Dipolar spin-spin prefactor 3 mu0 g^2 muB^2 / (16 pi h) in MHz * angstrom^3.
pub fn spin_spin_prefactor_mhz_a3(g: f64) -> f64 {
    let si = 3.0 * VACUUM_PERMEABILITY * g * g * BOHR_MAGNETON * BOHR_MAGNETON
        / (16.0 * std::f64::consts::PI * PLANCK);
    // Hz m^3 -> MHz A^3
    si * 1e30 * 1e-6
}

/// Photon energy in meV for a vacuum wavelength in nm.
pub fn wavelength_nm_to_mev(wavelength_nm: f64) -> f64 {
    HC_EV_NM / wavelength_nm * 1e3
}

/// Photons per joule at the given wavelength (nm), i.e. lambda / (h c).
pub fn photons_per_joule(wavelength_nm: f64) -> f64 {
    wavelength_nm * 1e-9 / (PLANCK * SPEED_OF_LIGHT)
}
