//! Nonlinear response of one switch arm: Kerr coefficient from the circuit,
//! classical Duffing steady state, 1 dB compression and power/photon-flux
//! conversion.

use std::f64::consts::PI;

use serde::Serialize;

use crate::elements::{ej_from_inductance, ResonatorSpec};
use crate::error::{Error, Result};
use crate::netcore::PhysicalConstants;

/// Lumped equivalent of the half-wave mode seen by the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LumpedModel {
    /// Series LC seen at the line centre (current antinode), where the array
    /// sits: L_geo = πZ0/(2ω_r0), C_eff = 2/(πZ0·ω_r0).
    CurrentAntinode,
    /// Parallel-resonance equivalent C_eff = π/(2ω_r0·Z0), L_geo = 1/(ω_r0²·C_eff).
    ShuntEquivalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KerrEstimate {
    /// K/2π in Hz; negative (softening).
    pub kerr_hz: f64,
    pub participation: f64,
    /// Zero-point phase across one SQUID, rad.
    pub phi_zp: f64,
    pub l_array: f64,
    pub l_total: f64,
    pub c_eff: f64,
    /// Mode frequency at the operating point, Hz.
    pub mode_frequency_hz: f64,
    pub model: LumpedModel,
}

/// Kerr estimate at flux `phi` using the current-antinode lumped model.
pub fn kerr_from_network(spec: &ResonatorSpec, phi: f64) -> Result<KerrEstimate> {
    kerr_with_inductance(spec, spec.squid.array_inductance(phi), LumpedModel::CurrentAntinode)
}

/// Kerr estimate for an explicit array inductance.
pub fn kerr_with_inductance(spec: &ResonatorSpec, l_array: f64, model: LumpedModel) -> Result<KerrEstimate> {
    if !(l_array.is_finite() && l_array > 0.0) {
        return Err(Error::InvalidInput(format!("array inductance must be positive, got {l_array}")));
    }
    let n = spec.squid.loops;
    let z0 = spec.half_line.z0_ohm;
    let w0 = 2.0 * PI * spec.bare_frequency_hz;
    let (l_geo, c_eff) = match model {
        LumpedModel::CurrentAntinode => (PI * z0 / (2.0 * w0), 2.0 / (PI * z0 * w0)),
        LumpedModel::ShuntEquivalent => {
            let c = PI / (2.0 * w0 * z0);
            (1.0 / (w0 * w0 * c), c)
        }
    };
    let mode_frequency_hz = spec.resonance_with_inductance(l_array)?;
    let wr = 2.0 * PI * mode_frequency_hz;
    let l_total = l_geo + l_array;
    let hbar = PhysicalConstants::REDUCED_PLANCK;
    let i_zp = (hbar * wr / (2.0 * l_total)).sqrt();
    let phi_zp = (2.0 * PI / PhysicalConstants::FLUX_QUANTUM) * (l_array / n as f64) * i_zp;
    let ej_hz = ej_from_inductance(n, l_array);
    // K/2π = N·(E_J/h)·φ_zp⁴/2
    let kerr_hz = -(n as f64) * ej_hz * phi_zp.powi(4) / 2.0;
    Ok(KerrEstimate {
        kerr_hz,
        participation: l_array / l_total,
        phi_zp,
        l_array,
        l_total,
        c_eff,
        mode_frequency_hz,
        model,
    })
}

/// Single driven Kerr mode; all rates in rad/s, `input_flux` in photons/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DuffingParams {
    pub omega_r: f64,
    pub kappa: f64,
    pub kappa_in: f64,
    pub kerr: f64,
    pub omega_d: f64,
    pub input_flux: f64,
}

impl DuffingParams {
    /// Symmetric two-port mode (κ_in = κ/2) driven on resonance; inputs in Hz.
    pub fn symmetric(f_r: f64, kappa_hz: f64, kerr_hz: f64, input_flux: f64) -> Result<Self> {
        let p = Self {
            omega_r: 2.0 * PI * f_r,
            kappa: 2.0 * PI * kappa_hz,
            kappa_in: PI * kappa_hz,
            kerr: 2.0 * PI * kerr_hz,
            omega_d: 2.0 * PI * f_r,
            input_flux,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidInput(format!("linewidth must be positive, got {}", self.kappa)));
        }
        if !(self.kappa_in > 0.0 && self.kappa_in <= self.kappa) {
            return Err(Error::InvalidInput("input coupling must lie in (0, κ]".into()));
        }
        if !(self.input_flux >= 0.0) || ![self.omega_r, self.kerr, self.omega_d].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("drive parameters must be finite and flux non-negative".into()));
        }
        Ok(())
    }

    pub fn detuning(&self) -> f64 {
        self.omega_d - self.omega_r
    }

    pub fn kappa_out(&self) -> f64 {
        self.kappa / 2.0
    }

    pub fn with_flux(&self, input_flux: f64) -> Self {
        Self { input_flux, ..*self }
    }

    fn lhs(&self, n: f64) -> f64 {
        let d = self.detuning() - self.kerr * n;
        n * (d * d + 0.25 * self.kappa * self.kappa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DuffingState {
    pub photons: f64,
    /// κ_out·n, photons/s.
    pub transmitted_flux: f64,
    /// Transmitted over input flux (linear-response value at zero drive).
    pub transmission: f64,
}

fn bisect_increasing<F: Fn(f64) -> f64>(g: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Critical points of n·[(δ − K n)² + (κ/2)²] in n > 0, ascending.
fn critical_points(p: &DuffingParams) -> Vec<f64> {
    let (d, k, kap) = (p.detuning(), p.kerr, p.kappa);
    // derivative: 3K²n² − 4δK n + δ² + κ²/4
    let (a, b, c) = (3.0 * k * k, -4.0 * d * k, d * d + 0.25 * kap * kap);
    let disc = b * b - 4.0 * a * c;
    if a == 0.0 || disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    let mut r: Vec<f64> = [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)].into_iter().filter(|&x| x > 0.0).collect();
    r.sort_by(f64::total_cmp);
    r
}

/// All positive real roots of the steady-state cubic, ascending.
pub fn steady_state_roots(p: &DuffingParams) -> Result<Vec<f64>> {
    p.validate()?;
    let target = p.kappa_in * p.input_flux;
    if target == 0.0 {
        return Ok(vec![0.0]);
    }
    let n_max = target / (0.25 * p.kappa * p.kappa);
    let mut edges = vec![0.0];
    edges.extend(critical_points(p).into_iter().filter(|&x| x < n_max));
    edges.push(n_max);
    let mut roots = Vec::new();
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (glo, ghi) = (p.lhs(lo) - target, p.lhs(hi) - target);
        if glo == 0.0 {
            roots.push(lo);
        } else if glo.signum() != ghi.signum() || ghi == 0.0 {
            let root = if glo < 0.0 {
                bisect_increasing(|n| p.lhs(n), target, lo, hi)
            } else {
                bisect_increasing(|n| -p.lhs(n), -target, lo, hi)
            };
            roots.push(root);
        }
    }
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    Ok(roots)
}

/// Low-amplitude steady state (smallest positive root).
pub fn duffing_response(p: &DuffingParams) -> Result<DuffingState> {
    p.validate()?;
    let target = p.kappa_in * p.input_flux;
    let d = p.detuning();
    let photons = if p.kerr == 0.0 {
        target / (d * d + 0.25 * p.kappa * p.kappa)
    } else {
        steady_state_roots(p)?.first().copied().ok_or_else(|| Error::NonConvergence { what: "cubic root".into(), iterations: 200 })?
    };
    let transmitted_flux = p.kappa_out() * photons;
    let transmission = if p.input_flux > 0.0 {
        transmitted_flux / p.input_flux
    } else {
        p.kappa_in * p.kappa_out() / (d * d + 0.25 * p.kappa * p.kappa)
    };
    Ok(DuffingState { photons, transmitted_flux, transmission })
}

/// Detuning beyond which the response is bistable, and the photon number of
/// the critical point: (√3·κ/2, κ/(√3·|K|)).
pub fn bistability_threshold(kappa: f64, kerr: f64) -> (f64, f64) {
    (3f64.sqrt() * kappa / 2.0, kappa / (3f64.sqrt() * kerr.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionPoint {
    /// Device input power, dBm.
    pub power_dbm: f64,
    /// Device input photon flux, photons/s.
    pub input_flux: f64,
    /// Intracavity photons in the compressed arm.
    pub photons: f64,
}

/// Relative |K|/κ below which the mode is treated as linear.
pub const KERR_FLOOR: f64 = 1e-15;

/// 1 dB compression point on resonance. `arm_fraction` is the share of the
/// device input power reaching the nonlinear arm; a quadrature hybrid feeding
/// two identical arms gives 0.5.
pub fn compression_point(p: &DuffingParams, arm_fraction: f64) -> Result<CompressionPoint> {
    p.validate()?;
    if !(arm_fraction > 0.0 && arm_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("arm fraction must lie in (0, 1], got {arm_fraction}")));
    }
    if p.kerr.abs() < KERR_FLOOR * p.kappa {
        return Err(Error::InvalidInput("Kerr coefficient below numeric floor: no compression".into()));
    }
    let base = DuffingParams { omega_d: p.omega_r, ..*p };
    let linear = duffing_response(&base.with_flux(0.0))?.transmission;
    let loss_db = |flux: f64| -> Result<f64> {
        let t = duffing_response(&base.with_flux(flux))?.transmission;
        Ok(10.0 * (linear / t).log10())
    };
    // flux at which K·n reaches κ sets the scale
    let scale = p.kappa.powi(3) / (p.kerr.abs() * p.kappa_in);
    let (mut lo, mut hi) = (scale * 1e-6, scale);
    while loss_db(hi)? < 1.0 {
        lo = hi;
        hi *= 2.0;
        if hi > scale * 1e12 {
            return Err(Error::NonConvergence { what: "compression bracket".into(), iterations: 0 });
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if loss_db(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let arm_flux = (lo * hi).sqrt();
    let input_flux = arm_flux / arm_fraction;
    let power = PhysicalConstants::REDUCED_PLANCK * p.omega_r * input_flux;
    Ok(CompressionPoint {
        power_dbm: watts_to_dbm(power),
        input_flux,
        photons: duffing_response(&base.with_flux(arm_flux))?.photons,
    })
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w / 1e-3).log10()
}

/// Photon flux P/(h·f) in photons per microsecond.
pub fn photons_per_us(power_w: f64, f: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::InvalidInput(format!("frequency must be positive, got {f}")));
    }
    Ok(power_w / (PhysicalConstants::PLANCK * f) * 1e-6)
}

/// Inverse of [`photons_per_us`]: power in watts.
pub fn power_from_photons_per_us(flux_per_us: f64, f: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::InvalidInput(format!("frequency must be positive, got {f}")));
    }
    Ok(flux_per_us * 1e6 * PhysicalConstants::PLANCK * f)
}
