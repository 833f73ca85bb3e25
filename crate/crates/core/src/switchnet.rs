//! The composed four-port switch: two quadrature hybrids joined by two
//! tunable resonator arms, plus operating-point search and the figures of
//! merit computed from its scattering matrix.
//!
//! Device ports: 1 is the input of the first hybrid, 2 its isolated port,
//! 3 the isolated port of the second hybrid and 4 the input of the second
//! hybrid. Resonant arms pass the signal through to port 3; reflecting arms
//! send it back to port 2.

use rayon::prelude::*;
use serde::Serialize;

use crate::elements::{HybridSpec, ResonatorSpec, TransmissionLineSpec};
use crate::error::{Error, Result};
use crate::netcore::{abcd_to_s, block_diagonal, terminate, Abcd, SMatrix, C64, DEFAULT_Z_REF};
use crate::optim::{self, LmOptions};

/// Amplitude floor applied before taking power ratios.
pub const AMPLITUDE_FLOOR: f64 = 1e-12;

/// Reflectance floor (power) reported instead of `-inf` dB.
pub const REFLECTANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchSpec {
    pub hybrid: HybridSpec,
    pub resonator_a: ResonatorSpec,
    pub resonator_b: ResonatorSpec,
    /// Line inserted on both sides of each arm; `None` is zero length.
    pub interconnect: Option<TransmissionLineSpec>,
    /// Port 4 terminated in a matched load. Matched termination leaves the
    /// four-port matrix unchanged; the flag records the measurement setup.
    pub port4_matched: bool,
}

impl SwitchSpec {
    pub fn symmetric(hybrid: HybridSpec, resonator: ResonatorSpec) -> Self {
        Self { hybrid, resonator_a: resonator, resonator_b: resonator, interconnect: None, port4_matched: true }
    }

    /// Branchline hybrids at 7.2 GHz with two identical calibrated resonators.
    pub fn device_default() -> Result<Self> {
        Ok(Self::symmetric(HybridSpec::branchline(7.2e9), ResonatorSpec::device_default()?))
    }

    fn arm(&self, resonator: &ResonatorSpec, inductance: f64, f: f64) -> Result<SMatrix> {
        let core = resonator.abcd_with_inductance(inductance, f);
        let m = match &self.interconnect {
            None => core,
            Some(line) => {
                let l: Abcd = line.abcd(f);
                l.then(&core)?.then(&l)?
            }
        };
        abcd_to_s(&m, DEFAULT_Z_REF)
    }

    /// Four-port matrix with explicit array inductances in the two arms.
    pub fn smatrix_with_inductances(&self, l_a: f64, l_b: f64, f: f64) -> Result<SMatrix> {
        if !(f > 0.0) {
            return Err(Error::InvalidInput(format!("frequency must be positive, got {f}")));
        }
        let h = self.hybrid.smatrix(f);
        let arm_a = self.arm(&self.resonator_a, l_a, f)?;
        let arm_b = self.arm(&self.resonator_b, l_b, f)?;
        // hybrid ports: 0 in, 1 isolated, 2 and 3 outputs; second hybrid offset by 4
        let hybrids = block_diagonal(&[&h, &h])?;
        let arms = block_diagonal(&[&arm_a, &arm_b])?;
        let joined = terminate(&hybrids, &[2, 6, 3, 7], &arms)?;
        // remaining order: [h1.in, h1.iso, h2.in, h2.iso]
        joined.permuted(&[0, 1, 3, 2])
    }

    pub fn smatrix(&self, phi_a: f64, phi_b: f64, f: f64) -> Result<SMatrix> {
        self.smatrix_with_inductances(
            self.resonator_a.squid.array_inductance(phi_a),
            self.resonator_b.squid.array_inductance(phi_b),
            f,
        )
    }

    /// Power branching ratio |S21|² / |S31|².
    pub fn branching_ratio(&self, phi_a: f64, phi_b: f64, f: f64) -> Result<f64> {
        let s = self.smatrix(phi_a, phi_b, f)?;
        let s12 = s.s(2, 1).norm().max(AMPLITUDE_FLOOR);
        let s13 = s.s(3, 1).norm().max(AMPLITUDE_FLOOR);
        Ok((s12 / s13).powi(2))
    }
}

pub fn switch_smatrix(spec: &SwitchSpec, phi_a: f64, phi_b: f64, f: f64) -> Result<SMatrix> {
    spec.smatrix(phi_a, phi_b, f)
}

/// Fundamental resonance of one arm at flux `phi`.
pub fn resonance_frequency(spec: &ResonatorSpec, phi: f64) -> Result<f64> {
    spec.resonance_frequency(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Resonant,
    OffResonant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub phi_a: f64,
    pub phi_b: f64,
    pub kind: PointKind,
    /// Power branching ratio |S12|²/|S13|² at the search frequency.
    pub merit: f64,
}

/// Maps a flux onto `[0, 0.5]`; the arm response depends on flux only
/// through the even, periodic Josephson energy.
pub fn fold_flux(phi: f64) -> f64 {
    (phi - phi.round()).abs()
}

const GRID: usize = 21;
const SIMPLEX_XTOL: f64 = 1e-4;
const SIMPLEX_MAX_ITER: usize = 2000;

/// Grid scan of the branching ratio over one flux period centred on
/// `initial`, followed by simplex refinement of the best and worst cells.
pub fn find_operating_points(
    spec: &SwitchSpec,
    f: f64,
    initial: (f64, f64),
) -> Result<(OperatingPoint, OperatingPoint)> {
    let merit = |p: &[f64]| spec.branching_ratio(p[0], p[1], f).unwrap_or(f64::NAN);
    let step = 1.0 / (GRID - 1) as f64;
    let grid: Vec<(f64, f64, f64)> = (0..GRID * GRID)
        .into_par_iter()
        .map(|k| {
            let pa = initial.0 - 0.5 + step * (k / GRID) as f64;
            let pb = initial.1 - 0.5 + step * (k % GRID) as f64;
            (pa, pb, merit(&[pa, pb]))
        })
        .collect();
    if grid.iter().any(|g| !g.2.is_finite()) {
        return Err(Error::SingularNetwork(format!("branching ratio undefined on flux grid at {f} Hz")));
    }
    let lowest = grid.iter().copied().fold(grid[0], |b, g| if g.2 < b.2 { g } else { b });
    let highest = grid.iter().copied().fold(grid[0], |b, g| if g.2 > b.2 { g } else { b });

    let low = optim::nelder_mead(|p| merit(p), &[lowest.0, lowest.1], step, SIMPLEX_XTOL, SIMPLEX_MAX_ITER)?;
    let high = optim::nelder_mead(|p| -merit(p), &[highest.0, highest.1], step, SIMPLEX_XTOL, SIMPLEX_MAX_ITER)?;
    let point = |x: &[f64], kind| OperatingPoint {
        phi_a: fold_flux(x[0]),
        phi_b: fold_flux(x[1]),
        kind,
        merit: merit(x),
    };
    Ok((point(&low.x, PointKind::Resonant), point(&high.x, PointKind::OffResonant)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OnOffRatios {
    /// 10·log10(|S12 off|² / |S12 on|²).
    pub ratio_12_db: f64,
    /// 10·log10(|S13 on|² / |S13 off|²).
    pub ratio_13_db: f64,
    /// A vanishing amplitude was floored at [`AMPLITUDE_FLOOR`].
    pub ideal_limited: bool,
}

/// Suppression of the unwanted output in each state. "On" is the resonant
/// point (signal to port 3); positive values mean suppression.
pub fn on_off_ratios(spec: &SwitchSpec, on: &OperatingPoint, off: &OperatingPoint, f: f64) -> Result<OnOffRatios> {
    let s_on = spec.smatrix(on.phi_a, on.phi_b, f)?;
    let s_off = spec.smatrix(off.phi_a, off.phi_b, f)?;
    let mut limited = false;
    let mut amp = |z: C64| floored(z, &mut limited);
    let (s12_on, s12_off) = (amp(s_on.s(2, 1)), amp(s_off.s(2, 1)));
    let (s13_on, s13_off) = (amp(s_on.s(3, 1)), amp(s_off.s(3, 1)));
    Ok(OnOffRatios {
        ratio_12_db: 20.0 * (s12_off / s12_on).log10(),
        ratio_13_db: 20.0 * (s13_on / s13_off).log10(),
        ideal_limited: limited,
    })
}

fn floored(z: C64, limited: &mut bool) -> f64 {
    let a = z.norm();
    if a < AMPLITUDE_FLOOR {
        *limited = true;
        AMPLITUDE_FLOOR
    } else {
        a
    }
}

/// 10·log10(1 + 4Δ²/κ²): suppression of a single Lorentzian line detuned by Δ.
pub fn lorentzian_suppression_db(detuning_hz: f64, width_hz: f64) -> f64 {
    10.0 * (1.0 + 4.0 * (detuning_hz / width_hz).powi(2)).log10()
}

/// Single-Lorentzian estimate of the leakage suppression of one arm parked at
/// flux `phi` and probed at `f`. The coupling of the series-capacitor
/// resonator grows with frequency, so the width used is the geometric mean of
/// the arm linewidth when tuned to `f` and at its parked resonance.
pub fn lorentzian_isolation_estimate(resonator: &ResonatorSpec, phi: f64, f: f64) -> Result<f64> {
    let (f_res, w_res) = resonator.linewidth(phi)?;
    let l_probe = inductance_tuned_to(resonator, f)?;
    let (_, w_probe) = resonator.linewidth_with_inductance(l_probe)?;
    Ok(lorentzian_suppression_db(f - f_res, (w_res * w_probe).sqrt()))
}

/// Array inductance that puts the resonance of `resonator` at `f`.
pub fn inductance_tuned_to(resonator: &ResonatorSpec, f: f64) -> Result<f64> {
    let (lo, hi): (f64, f64) = (1e-13, 1e-7);
    // a resonance pushed below the search window counts as below `f`
    let g = |log_l: f64| match resonator.resonance_with_inductance(log_l.exp()) {
        Ok(fr) => fr - f,
        Err(Error::NoPeakInBracket { .. }) => -f,
        Err(_) => f64::NAN,
    };
    if !(g(lo.ln()) > 0.0 && g(hi.ln()) < 0.0) {
        return Err(Error::NoPeakInBracket { lo: f, hi: f });
    }
    let root = optim::bisect(g, lo.ln(), hi.ln(), 1e-12)?;
    Ok(root.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LorentzianFit {
    pub center_hz: f64,
    pub width_hz: f64,
    pub amplitude: f64,
    pub residual_norm: f64,
}

impl LorentzianFit {
    pub fn eval(&self, f: f64) -> f64 {
        lorentzian(self.amplitude, self.center_hz, self.width_hz, f)
    }
}

fn lorentzian(amplitude: f64, center: f64, width: f64, f: f64) -> f64 {
    amplitude / (1.0 + 4.0 * ((f - center) / width).powi(2))
}

/// Least-squares fit of `A / (1 + 4 (f − f0)² / Δf²)` to `(f, |S13|²)` pairs.
pub fn bandwidth_fit(spectrum: &[(f64, f64)]) -> Result<LorentzianFit> {
    if spectrum.len() < 5 {
        return Err(Error::DegenerateData(format!("{} points, need at least 5", spectrum.len())));
    }
    if spectrum.iter().any(|(f, y)| !f.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite spectrum value".into()));
    }
    let (imax, &(f_peak, y_max)) = spectrum
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");
    let y_min = spectrum.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if y_max - y_min <= 1e-12 * y_max.abs().max(1e-300) {
        return Err(Error::DegenerateData("all spectrum values equal".into()));
    }
    let f_lo = spectrum.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let f_hi = spectrum.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    // half-maximum crossings on either side of the peak
    let half = 0.5 * y_max;
    let mut sorted = spectrum.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ipk = sorted.iter().position(|p| p.0 == f_peak && p.1 == y_max).unwrap_or(imax);
    let right = sorted[ipk..].iter().find(|p| p.1 < half).map(|p| p.0).unwrap_or(f_hi);
    let left = sorted[..=ipk].iter().rev().find(|p| p.1 < half).map(|p| p.0).unwrap_or(f_lo);
    let w0 = (right - left).max((f_hi - f_lo) / spectrum.len() as f64);

    let params = |p: &[f64]| (p[0] * y_max, f_peak + p[1] * w0, p[2] * w0);
    let fit = optim::levenberg_marquardt(
        |p| {
            let (a, c, w) = params(p);
            Ok(spectrum.iter().map(|&(f, y)| lorentzian(a, c, w, f) - y).collect())
        },
        &[1.0, 0.0, 1.0],
        &LmOptions { max_iterations: 500, ..LmOptions::default() },
    )?;
    let (amplitude, center_hz, w) = params(&fit.params);
    let width_hz = w.abs();
    if f_hi - f_lo < width_hz {
        return Err(Error::DegenerateData(format!(
            "spectrum spans {:.3e} Hz, less than the fitted width {width_hz:.3e} Hz",
            f_hi - f_lo
        )));
    }
    Ok(LorentzianFit { center_hz, width_hz, amplitude, residual_norm: fit.residual_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumPoint {
    pub f_hz: f64,
    pub s11: (f64, f64),
    pub s21: (f64, f64),
    pub s31: (f64, f64),
    pub s41: (f64, f64),
}

impl SpectrumPoint {
    pub fn power(&self, port: usize) -> f64 {
        let (re, im) = match port {
            1 => self.s11,
            2 => self.s21,
            3 => self.s31,
            4 => self.s41,
            _ => return f64::NAN,
        };
        re * re + im * im
    }
}

/// Column 1 of the switch matrix at each frequency, for a fixed operating point.
pub fn spectrum(spec: &SwitchSpec, point: &OperatingPoint, freqs: &[f64]) -> Result<Vec<SpectrumPoint>> {
    freqs
        .par_iter()
        .map(|&f| {
            let s = spec.smatrix(point.phi_a, point.phi_b, f)?;
            let c = |z: C64| (z.re, z.im);
            Ok(SpectrumPoint { f_hz: f, s11: c(s.s(1, 1)), s21: c(s.s(2, 1)), s31: c(s.s(3, 1)), s41: c(s.s(4, 1)) })
        })
        .collect()
}

/// `(f, 10·log10 |S11|²)` with the power floored at [`REFLECTANCE_FLOOR`].
pub fn reflection_spectrum(spec: &SwitchSpec, point: &OperatingPoint, freqs: &[f64]) -> Result<Vec<(f64, f64)>> {
    Ok(spectrum(spec, point, freqs)?
        .into_iter()
        .map(|p| (p.f_hz, 10.0 * p.power(1).max(REFLECTANCE_FLOOR).log10()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::HybridKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn resonator() -> &'static ResonatorSpec {
        static R: OnceLock<ResonatorSpec> = OnceLock::new();
        R.get_or_init(|| ResonatorSpec::device_default().unwrap())
    }

    fn switch(kind: HybridKind) -> SwitchSpec {
        let h = match kind {
            HybridKind::Ideal => HybridSpec::ideal(7.2e9),
            HybridKind::Branchline => HybridSpec::branchline(7.2e9),
        };
        SwitchSpec::symmetric(h, *resonator())
    }

    fn flux_for(f: f64) -> f64 {
        let r = resonator();
        optim::bisect(|p| r.resonance_frequency(p).unwrap() - f, 0.0, 0.5, 1e-12).unwrap()
    }

    #[test]
    fn resonant_arms_route_to_port_3() {
        let phi = flux_for(7.2e9);
        for kind in [HybridKind::Ideal, HybridKind::Branchline] {
            let s = switch(kind).smatrix(phi, phi, 7.2e9).unwrap();
            assert!(s.s(3, 1).norm_sqr() >= 0.99);
            assert!(s.s(2, 1).norm_sqr() <= 0.01);
        }
    }

    #[test]
    fn detuned_arms_route_to_port_2() {
        let phi = flux_for(5.5e9);
        for kind in [HybridKind::Ideal, HybridKind::Branchline] {
            let s = switch(kind).smatrix(phi, phi, 7.2e9).unwrap();
            assert!(s.s(2, 1).norm_sqr() >= 0.99, "{kind:?}");
        }
    }

    #[test]
    fn ideal_symmetric_interference() {
        let sw = switch(HybridKind::Ideal);
        for (phi, f) in [(0.1, 7.0e9), (0.3, 6.6e9), (0.45, 7.2e9)] {
            let s = sw.smatrix(phi, phi, f).unwrap();
            assert!((s.s(2, 1).norm_sqr() + s.s(3, 1).norm_sqr() - 1.0).abs() < 1e-9);
            assert!(s.s(1, 1).norm() <= 1e-6);
            // arm decomposition: |S13| = |t|, |S12| = |r|
            let arm = resonator().smatrix(phi, f).unwrap();
            assert!((s.s(3, 1).norm() - arm.s(2, 1).norm()).abs() < 1e-9);
            assert!((s.s(2, 1).norm() - arm.s(1, 1).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_pairwise_assembly() {
        // same circuit assembled port by port with named networks
        use crate::netcore::NamedNetwork;
        let sw = switch(HybridKind::Branchline);
        let (pa, pb, f) = (0.21, 0.33, 7.05e9);
        let h = sw.hybrid.smatrix(f);
        let h1 = NamedNetwork::new(h.clone(), &["p1", "p2", "h1.3", "h1.4"]).unwrap();
        let h2 = NamedNetwork::new(h, &["p4", "p3", "h2.3", "h2.4"]).unwrap();
        let a = NamedNetwork::new(resonator().smatrix(pa, f).unwrap(), &["a.in", "a.out"]).unwrap();
        let b = NamedNetwork::new(resonator().smatrix(pb, f).unwrap(), &["b.in", "b.out"]).unwrap();
        let net = h1
            .join("h1.3", &a, "a.in")
            .and_then(|n| n.join("h1.4", &b, "b.in"))
            .and_then(|n| n.join("a.out", &h2, "h2.3"))
            .and_then(|n| n.close("b.out", "h2.4"))
            .and_then(|n| n.ordered(&["p1", "p2", "p3", "p4"]))
            .unwrap();
        assert!(net.max_abs_diff(&sw.smatrix(pa, pb, f).unwrap()) < 1e-12);
    }

    #[test]
    fn interconnect_lines_keep_network_lossless() {
        let mut sw = switch(HybridKind::Branchline);
        sw.interconnect = Some(TransmissionLineSpec::from_electrical_length(50.0, 30.0, 7.2e9).unwrap());
        let s = sw.smatrix(0.2, 0.4, 6.9e9).unwrap();
        assert!(s.unitarity_error() < 1e-9);
        assert!(s.reciprocity_error() < 1e-9);
    }

    #[test]
    fn operating_points_of_symmetric_switch() {
        let sw = switch(HybridKind::Branchline);
        let (on, off) = find_operating_points(&sw, 7.2e9, (0.0, 0.0)).unwrap();
        assert!((on.phi_a - on.phi_b).abs() < 1e-3, "{on:?}");
        assert!(off.merit >= 300.0, "{off:?}");
        assert!(on.merit < off.merit);
        let fit = arm_fit(&sw, &on);
        for phi in [on.phi_a, on.phi_b] {
            let fr = resonator().resonance_frequency(phi).unwrap();
            assert!((fr - 7.2e9).abs() <= fit.width_hz / 10.0, "{fr}");
        }
    }

    fn arm_fit(sw: &SwitchSpec, on: &OperatingPoint) -> LorentzianFit {
        let freqs: Vec<f64> = (0..201).map(|k| 6.4e9 + 8e6 * k as f64).collect();
        let pts: Vec<(f64, f64)> =
            spectrum(sw, on, &freqs).unwrap().iter().map(|p| (p.f_hz, p.power(3))).collect();
        bandwidth_fit(&pts).unwrap()
    }

    #[test]
    fn physical_bandwidth_in_range() {
        let sw = switch(HybridKind::Ideal);
        let phi = flux_for(7.2e9);
        let on = OperatingPoint { phi_a: phi, phi_b: phi, kind: PointKind::Resonant, merit: 0.0 };
        let fit = arm_fit(&sw, &on);
        assert!(fit.width_hz >= 75e6 && fit.width_hz <= 300e6, "{fit:?}");
    }

    #[test]
    fn lorentzian_detuning_oracle() {
        // ideal hybrids, off-resonant arms near 5.5 GHz, probe at 7.2 GHz
        let sw = switch(HybridKind::Ideal);
        let phi_on = flux_for(7.2e9);
        let on = OperatingPoint { phi_a: phi_on, phi_b: phi_on, kind: PointKind::Resonant, merit: 0.0 };
        let off = OperatingPoint { phi_a: 0.5, phi_b: 0.5, kind: PointKind::OffResonant, merit: 0.0 };
        let r = on_off_ratios(&sw, &on, &off, 7.2e9).unwrap();
        let oracle = 10.0 * (1.0 + 4.0 * (1.7e9f64 / 149e6).powi(2)).log10();
        assert!((r.ratio_13_db - oracle).abs() <= 2.0, "{r:?} vs {oracle}");
    }

    #[test]
    fn vanishing_amplitudes_are_floored() {
        let mut flag = false;
        assert_eq!(floored(C64::new(0.0, 0.0), &mut flag), AMPLITUDE_FLOOR);
        assert!(flag);
        let mut flag = false;
        assert_eq!(floored(C64::new(0.6, 0.8), &mut flag), 1.0);
        assert!(!flag);
    }

    #[test]
    fn branchline_isolation_exceeds_25_db() {
        let sw = switch(HybridKind::Branchline);
        let (on, off) = find_operating_points(&sw, 7.2e9, (0.0, 0.0)).unwrap();
        let r = on_off_ratios(&sw, &on, &off, 7.2e9).unwrap();
        assert!(r.ratio_12_db >= 25.0 && r.ratio_13_db >= 25.0, "{r:?}");
    }

    #[test]
    fn lorentzian_estimate_tracks_network() {
        let sw = switch(HybridKind::Ideal);
        for phi in [0.4, 0.45, 0.5] {
            let s = sw.smatrix(phi, phi, 7.2e9).unwrap();
            let network = -10.0 * s.s(3, 1).norm_sqr().log10();
            let est = lorentzian_isolation_estimate(resonator(), phi, 7.2e9).unwrap();
            assert!((network - est).abs() < 2.0, "{phi}: {network} vs {est}");
        }
    }

    #[test]
    fn lorentzian_fit_exact_recovery() {
        let pts: Vec<(f64, f64)> =
            (0..61).map(|k| 6.9e9 + 10e6 * k as f64).map(|f| (f, lorentzian(1.0, 7.2e9, 149e6, f))).collect();
        let fit = bandwidth_fit(&pts).unwrap();
        assert!((fit.center_hz - 7.2e9).abs() < 1e-3);
        assert!((fit.width_hz - 149e6).abs() < 1e-3);
        assert!(fit.residual_norm < 1e-12);
        assert!((fit.eval(7.2e9 + 74.5e6) - 0.5).abs() < 1e-12);
        assert!((fit.eval(7.2e9 - 74.5e6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lorentzian_fit_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<(f64, f64)> = (0..61)
            .map(|k| 6.9e9 + 10e6 * k as f64)
            .map(|f| (f, lorentzian(1.0, 7.2e9, 149e6, f) + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        let fit = bandwidth_fit(&pts).unwrap();
        assert!((fit.center_hz / 7.2e9 - 1.0).abs() < 0.01);
        assert!((fit.width_hz / 149e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn lorentzian_fit_rejects_degenerate() {
        let flat: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 0.3)).collect();
        assert!(matches!(bandwidth_fit(&flat), Err(Error::DegenerateData(_))));
        assert!(matches!(bandwidth_fit(&flat[..3]), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn reflection_bounds() {
        let ideal = switch(HybridKind::Ideal);
        let bl = switch(HybridKind::Branchline);
        let phi = flux_for(7.2e9);
        let on = OperatingPoint { phi_a: phi, phi_b: phi, kind: PointKind::Resonant, merit: 0.0 };
        let band: Vec<f64> = (0..=30).map(|k| 7.125e9 + 5e6 * k as f64).collect();
        for (_, db) in reflection_spectrum(&ideal, &on, &band).unwrap() {
            assert!(db <= -60.0);
        }
        for (f, db) in reflection_spectrum(&bl, &on, &band).unwrap() {
            assert!(db <= -10.0, "{f}: {db}");
        }
    }

    #[test]
    fn network_exact_on_random_samples() {
        let sw = switch(HybridKind::Branchline);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (f, pa, pb) = (rng.random_range(4e9..10e9), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let s = sw.smatrix(pa, pb, f).unwrap();
            assert!(s.unitarity_error() < 1e-9);
            assert!(s.reciprocity_error() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn bandwidth_fit_scale_equivariant(scale in 0.1f64..10.0) {
            let pts: Vec<(f64, f64)> =
                (0..41).map(|k| 6.9e9 + 15e6 * k as f64).map(|f| (f, lorentzian(0.9, 7.21e9, 120e6, f))).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(f, y)| (f, y * scale)).collect();
            let (a, b) = (bandwidth_fit(&pts).unwrap(), bandwidth_fit(&scaled).unwrap());
            prop_assert!((b.amplitude / a.amplitude / scale - 1.0).abs() < 1e-9);
            prop_assert!((a.center_hz - b.center_hz).abs() < 1e-3);
            prop_assert!((a.width_hz - b.width_hz).abs() < 1e-3);
        }

        #[test]
        fn composite_is_lossless_and_reciprocal(f in 3e9f64..11e9, pa in -1.0f64..1.0, pb in -1.0f64..1.0) {
            let s = switch(HybridKind::Branchline).smatrix(pa, pb, f).unwrap();
            for n in s.column_norms() {
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
            prop_assert!((s.s(1, 2) - s.s(2, 1)).norm() < 1e-9);
            prop_assert!((s.s(1, 3) - s.s(3, 1)).norm() < 1e-9);
        }
    }
}
