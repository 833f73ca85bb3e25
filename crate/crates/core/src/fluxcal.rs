//! Coil-voltage to flux calibration.
//!
//! A [`FluxMap`] takes the two coil voltages to the mean flux threading each
//! SQUID array. Loops inside an array see a linear flux gradient `g` across
//! the loop index, which breaks the exact Φ0 periodicity of the resonance.
//! The model is a declared stand-in for the unpublished supplementary fit
//! model; a quadratic gradient or per-loop areas would fit the same role.
//!
//! Fitting works on dip frequencies extracted from |S12|² maps rather than on
//! the maps themselves.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elements::{inductance_from_ej, ResonatorSpec, SquidArraySpec};
use crate::error::{Error, Result};
use crate::optim::{self, LmOptions};
use crate::switchnet::SwitchSpec;

/// Upper bound on |S12|² accepted in a dataset (calibration overshoot).
pub const MAX_S12_SQ: f64 = 1.1;

/// Minimum spacing between the two dips of a row used for fitting.
pub const MIN_DIP_SEPARATION_HZ: f64 = 400e6;

/// Half-width of the window searched for a switch dip around an arm resonance.
const DIP_WINDOW_HZ: f64 = 60e6;
/// Half-width of the warm-started resonance search.
const HINT_WINDOW_HZ: f64 = 150e6;
const MAX_STAGES: usize = 10;
const DIP_SHIFT_TOL_HZ: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxMap {
    /// Φ0 per volt; row = array (a, b), column = coil (1, 2).
    pub crosstalk: [[f64; 2]; 2],
    /// Φ0.
    pub offsets: [f64; 2],
    /// Fractional flux gradient per loop index, one per array.
    pub gradients: [f64; 2],
}

impl FluxMap {
    pub fn new(crosstalk: [[f64; 2]; 2], offsets: [f64; 2], gradients: [f64; 2]) -> Result<Self> {
        let map = Self { crosstalk, offsets, gradients };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.crosstalk.iter().flatten().chain(&self.offsets).chain(&self.gradients).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("flux map entries must be finite".into()));
        }
        if self.determinant().abs() < 1e-12 {
            return Err(Error::InvalidInput("crosstalk matrix is singular".into()));
        }
        Ok(())
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.crosstalk;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Mean flux of each array, Φ = M·V + Φ_off.
    pub fn flux(&self, v: [f64; 2]) -> [f64; 2] {
        let m = &self.crosstalk;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + self.offsets[0],
            m[1][0] * v[0] + m[1][1] * v[1] + self.offsets[1],
        ]
    }

    /// Coil voltages producing the mean fluxes `phi`.
    pub fn voltages_for(&self, phi: [f64; 2]) -> Result<[f64; 2]> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::InvalidInput("crosstalk matrix is singular".into()));
        }
        let m = &self.crosstalk;
        let d = [phi[0] - self.offsets[0], phi[1] - self.offsets[1]];
        Ok([(m[1][1] * d[0] - m[0][1] * d[1]) / det, (m[0][0] * d[1] - m[1][0] * d[0]) / det])
    }
}

pub fn flux_from_voltages(map: &FluxMap, v: [f64; 2]) -> [f64; 2] {
    map.flux(v)
}

/// Per-loop fluxes Φ_k = Φ·(1 + g·(k − (N−1)/2)).
pub fn loop_fluxes(loops: usize, phi: f64, g: f64) -> Vec<f64> {
    let centre = (loops as f64 - 1.0) / 2.0;
    (0..loops).map(|k| phi * (1.0 + g * (k as f64 - centre))).collect()
}

/// Single-junction-equivalent E_J/h of an array whose loops see a linear
/// flux gradient: N / Σ_k 1/E_J(Φ_k).
pub fn effective_ej_with_inhomogeneity(spec: &SquidArraySpec, phi: f64, g: f64) -> Result<f64> {
    if spec.loops == 0 {
        return Err(Error::InvalidInput("array needs at least one loop".into()));
    }
    if g == 0.0 {
        return Ok(spec.ej_of_flux(phi));
    }
    let mut inv = 0.0;
    for p in loop_fluxes(spec.loops, phi, g) {
        let ej = spec.ej_of_flux(p);
        if !(ej > 0.0) {
            return Err(Error::SingularNetwork(format!("E_J vanishes at loop flux {p}")));
        }
        inv += 1.0 / ej;
    }
    Ok(spec.loops as f64 / inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectroscopyPoint {
    #[serde(rename = "V1")]
    pub v1: f64,
    #[serde(rename = "V2")]
    pub v2: f64,
    #[serde(rename = "f_Hz")]
    pub f_hz: f64,
    #[serde(rename = "S12_sq")]
    pub s12_sq: f64,
}

impl SpectroscopyPoint {
    fn check(&self, row: usize) -> Result<()> {
        if !(self.v1.is_finite() && self.v2.is_finite() && self.f_hz.is_finite()) {
            return Err(Error::Schema { row, msg: "voltages and frequency must be finite".into() });
        }
        if !(0.0..=MAX_S12_SQ).contains(&self.s12_sq) {
            return Err(Error::Schema { row, msg: format!("S12_sq = {} outside [0, {MAX_S12_SQ}]", self.s12_sq) });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SpectroscopyDataset {
    pub points: Vec<SpectroscopyPoint>,
}

const COLUMNS: [&str; 4] = ["V1", "V2", "f_Hz", "S12_sq"];

impl SpectroscopyDataset {
    pub fn new(points: Vec<SpectroscopyPoint>) -> Result<Self> {
        let d = Self { points };
        d.validate()?;
        Ok(d)
    }

    /// Row numbers in errors count the header as row 1.
    pub fn validate(&self) -> Result<()> {
        self.points.iter().enumerate().try_for_each(|(i, p)| p.check(i + 2))
    }

    /// Reads CSV with a mandatory header; lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Schema { row: 1, msg: format!("missing column {col}") });
            }
        }
        let mut points = Vec::new();
        for rec in rdr.deserialize::<SpectroscopyPoint>() {
            let p = rec.map_err(|e| {
                let row = e.position().map_or(0, |p| p.line() as usize);
                Error::Schema { row, msg: e.to_string() }
            })?;
            points.push(p);
        }
        let d = Self { points };
        d.validate()?;
        Ok(d)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Points grouped by voltage pair in order of first appearance, each
    /// group sorted by frequency.
    pub fn rows(&self) -> Vec<([f64; 2], Vec<(f64, f64)>)> {
        let mut rows: Vec<([f64; 2], Vec<(f64, f64)>)> = Vec::new();
        for p in &self.points {
            let v = [p.v1, p.v2];
            match rows.iter_mut().rev().find(|(key, _)| *key == v) {
                Some((_, spec)) => spec.push((p.f_hz, p.s12_sq)),
                None => rows.push((v, vec![(p.f_hz, p.s12_sq)])),
            }
        }
        for (_, spec) in &mut rows {
            spec.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        rows
    }
}

/// Array inductances `(L_a, L_b)` at coil voltages `v`.
pub fn arm_inductances(map: &FluxMap, squid: &SquidArraySpec, v: [f64; 2]) -> Result<[f64; 2]> {
    let phi = map.flux(v);
    let la = inductance_from_ej(squid.loops, effective_ej_with_inhomogeneity(squid, phi[0], map.gradients[0])?);
    let lb = inductance_from_ej(squid.loops, effective_ej_with_inhomogeneity(squid, phi[1], map.gradients[1])?);
    Ok([la, lb])
}

/// |S12|² on the grid `v1 × freqs` with coil 2 held at `v2`. Both arms use
/// the array parameters of `spec.resonator_a.squid`.
pub fn simulate_flux_map(
    spec: &SwitchSpec,
    map: &FluxMap,
    v1: &[f64],
    v2: f64,
    freqs: &[f64],
) -> Result<SpectroscopyDataset> {
    map.validate()?;
    let squid = spec.resonator_a.squid;
    let rows: Vec<Vec<SpectroscopyPoint>> = v1
        .par_iter()
        .map(|&v| {
            let l = arm_inductances(map, &squid, [v, v2])?;
            freqs
                .iter()
                .map(|&f| {
                    let s = spec.smatrix_with_inductances(l[0], l[1], f)?;
                    Ok(SpectroscopyPoint { v1: v, v2, f_hz: f, s12_sq: s.s(1, 2).norm_sqr() })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    SpectroscopyDataset::new(rows.into_iter().flatten().collect())
}

/// Dip frequencies observed at one voltage pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipRow {
    pub v: [f64; 2],
    pub dips: Vec<f64>,
}

/// Local minima of |S12|² below half the row maximum, refined by a parabola
/// through the three nearest samples. Invariant under positive rescaling of
/// the spectrum.
pub fn find_dips(spectrum: &[(f64, f64)]) -> Vec<f64> {
    let ymax = spectrum.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut dips = Vec::new();
    for i in 1..spectrum.len().saturating_sub(1) {
        let (x0, y0) = spectrum[i - 1];
        let (x1, y1) = spectrum[i];
        let (x2, y2) = spectrum[i + 1];
        if !(y1 < y0 && y1 <= y2 && y1 < 0.5 * ymax) {
            continue;
        }
        let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
        let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
        let x = if den != 0.0 { x1 - 0.5 * num / den } else { x1 };
        dips.push(if x > x0 && x < x2 { x } else { x1 });
    }
    dips
}

/// Rows of `data` showing exactly two dips at least
/// [`MIN_DIP_SEPARATION_HZ`] apart, which is what the fitter uses.
pub fn extract_dips(data: &SpectroscopyDataset) -> Vec<DipRow> {
    data.rows()
        .into_iter()
        .filter_map(|(v, spectrum)| {
            let dips = find_dips(&spectrum);
            (dips.len() == 2 && dips[1] - dips[0] > MIN_DIP_SEPARATION_HZ).then_some(DipRow { v, dips })
        })
        .collect()
}

/// Adds Gaussian noise with standard deviation `relative_sigma`·f to every dip.
pub fn add_frequency_noise<R: Rng + ?Sized>(rows: &[DipRow], relative_sigma: f64, rng: &mut R) -> Result<Vec<DipRow>> {
    let normal = Normal::new(0.0, relative_sigma)
        .map_err(|e| Error::InvalidInput(format!("noise level {relative_sigma}: {e}")))?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut dips: Vec<f64> = r.dips.iter().map(|&f| f * (1.0 + normal.sample(rng))).collect();
            dips.sort_by(f64::total_cmp);
            DipRow { v: r.v, dips }
        })
        .collect())
}

/// Fit parameters: shared junction energies plus the flux map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxModel {
    pub map: FluxMap,
    pub squid: SquidArraySpec,
}

impl FluxModel {
    fn to_params(self) -> Vec<f64> {
        let m = &self.map;
        vec![
            self.squid.ej1_hz * 1e-12,
            self.squid.ej2_hz * 1e-12,
            m.crosstalk[0][0],
            m.crosstalk[1][0],
            m.offsets[0],
            m.offsets[1],
            m.gradients[0],
            m.gradients[1],
        ]
    }

    fn from_params(p: &[f64], template: &FluxModel) -> Result<Self> {
        if !(p[0] > 0.0 && p[1] > 0.0) {
            return Err(Error::InvalidInput("junction energies must be positive".into()));
        }
        let mut map = template.map;
        map.crosstalk[0][0] = p[2];
        map.crosstalk[1][0] = p[3];
        map.offsets = [p[4], p[5]];
        map.gradients = [p[6], p[7]];
        let squid = SquidArraySpec { loops: template.squid.loops, ej1_hz: p[0] * 1e12, ej2_hz: p[1] * 1e12 };
        Ok(Self { map, squid })
    }

    /// Removes the exact symmetries of the model: Φ → −Φ, g → −g and E_J1 ↔ E_J2.
    pub fn canonical(mut self) -> Self {
        for i in 0..2 {
            if self.map.crosstalk[i][0] < 0.0 {
                self.map.crosstalk[i][0] = -self.map.crosstalk[i][0];
                self.map.crosstalk[i][1] = -self.map.crosstalk[i][1];
                self.map.offsets[i] = -self.map.offsets[i];
            }
            self.map.gradients[i] = self.map.gradients[i].abs();
        }
        if self.squid.ej1_hz > self.squid.ej2_hz {
            std::mem::swap(&mut self.squid.ej1_hz, &mut self.squid.ej2_hz);
        }
        self
    }
}

fn arm_resonance(res: &ResonatorSpec, l: f64, hint: Option<f64>) -> Result<f64> {
    match hint {
        Some(h) => res.peak_near(l, h, HINT_WINDOW_HZ),
        None => res.resonance_with_inductance(l),
    }
}

fn switch_dip(device: &SwitchSpec, l: [f64; 2], near: f64) -> f64 {
    let s12 = |f: f64| {
        device.smatrix_with_inductances(l[0], l[1], f).map_or(f64::INFINITY, |s| s.s(1, 2).norm_sqr())
    };
    optim::brent_min(s12, near - DIP_WINDOW_HZ, near + DIP_WINDOW_HZ, 1.0).0
}

/// Arm resonances and the switch |S12|² dips next to them, per arm.
fn arm_dips(device: &SwitchSpec, model: &FluxModel, v: [f64; 2], hints: [Option<f64>; 2]) -> Result<([f64; 2], [f64; 2])> {
    let l = arm_inductances(&model.map, &model.squid, v)?;
    let fa = arm_resonance(&device.resonator_a, l[0], hints[0])?;
    let fb = arm_resonance(&device.resonator_b, l[1], hints[1])?;
    Ok(([fa, fb], [switch_dip(device, l, fa), switch_dip(device, l, fb)]))
}

/// Modelled |S12|² dip frequencies at coil voltages `v`, ascending.
pub fn model_dips(device: &SwitchSpec, model: &FluxModel, v: [f64; 2]) -> Result<[f64; 2]> {
    let (_, d) = arm_dips(device, model, v, [None, None])?;
    Ok(if d[0] <= d[1] { d } else { [d[1], d[0]] })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluxFit {
    pub model: FluxModel,
    /// Euclidean norm of the dip residuals, Hz.
    pub residual_norm_hz: f64,
    pub rms_hz: f64,
    pub iterations: usize,
    /// Residual norm (Hz) after each accepted step, one list per refinement stage.
    pub stage_histories: Vec<Vec<f64>>,
    /// Flux periods swept by coil 1 in each array.
    pub periods: [f64; 2],
    /// Set when either array is swept over less than one flux period.
    pub rank_warning: bool,
    pub rows_used: usize,
    pub condition_number: f64,
}

/// Fits the flux model to the dips of a measured or simulated map.
pub fn fit_flux_model(data: &SpectroscopyDataset, device: &SwitchSpec, guess: &FluxModel) -> Result<FluxFit> {
    fit_dip_rows(&extract_dips(data), device, guess)
}

/// Levenberg-Marquardt fit of {E_J1, E_J2, coil-1 crosstalk column, offsets,
/// gradients} to observed dip pairs. The coil-2 column stays at the guess.
///
/// The switch dip sits slightly off the bare arm resonance. Each stage freezes
/// that shift per row and fits resonances plus shift; stages repeat until the
/// shifts move by less than 1 kHz, at which point the residual is exact.
pub fn fit_dip_rows(rows: &[DipRow], device: &SwitchSpec, guess: &FluxModel) -> Result<FluxFit> {
    guess.map.validate()?;
    let rows: Vec<&DipRow> = rows.iter().filter(|r| r.dips.len() == 2).collect();
    if rows.len() < 4 {
        return Err(Error::DegenerateData(format!("{} usable dip rows, need at least 4", rows.len())));
    }
    let obs: Vec<[f64; 2]> = rows
        .iter()
        .map(|r| if r.dips[0] <= r.dips[1] { [r.dips[0], r.dips[1]] } else { [r.dips[1], r.dips[0]] })
        .collect();

    let mut p = guess.to_params();
    let mut hints: Vec<[Option<f64>; 2]> = vec![[None, None]; rows.len()];
    let mut shifts: Vec<[f64; 2]> = vec![[0.0; 2]; rows.len()];
    let mut stage_histories = Vec::new();
    let mut iterations = 0;
    let opts = LmOptions {
        max_iterations: 100,
        ftol: 1e-12,
        xtol: 1e-10,
        central_differences: false,
        scales: Some(vec![1.0; 8]),
        ..LmOptions::default()
    };
    let mut converged = false;
    let mut last = None;

    for stage in 0..MAX_STAGES {
        let model = FluxModel::from_params(&p, guess)?;
        let mut change: f64 = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (peaks, dips) = arm_dips(device, &model, r.v, hints[i])?;
            hints[i] = [Some(peaks[0]), Some(peaks[1])];
            for k in 0..2 {
                let s = dips[k] - peaks[k];
                change = change.max((s - shifts[i][k]).abs());
                shifts[i][k] = s;
            }
        }
        if stage > 0 && change < DIP_SHIFT_TOL_HZ {
            converged = true;
            break;
        }
        let residuals = |q: &[f64]| -> Result<Vec<f64>> {
            let model = FluxModel::from_params(q, guess)?;
            let mut out = Vec::with_capacity(2 * rows.len());
            for (i, r) in rows.iter().enumerate() {
                let l = arm_inductances(&model.map, &model.squid, r.v)?;
                let fa = arm_resonance(&device.resonator_a, l[0], hints[i][0])?;
                let fb = arm_resonance(&device.resonator_b, l[1], hints[i][1])?;
                hints[i] = [Some(fa), Some(fb)];
                let (da, db) = (fa + shifts[i][0], fb + shifts[i][1]);
                let d = if da <= db { [da, db] } else { [db, da] };
                out.push((d[0] - obs[i][0]) * 1e-6);
                out.push((d[1] - obs[i][1]) * 1e-6);
            }
            Ok(out)
        };
        let report = optim::levenberg_marquardt(residuals, &p, &opts)?;
        iterations += report.iterations;
        stage_histories.push(report.history.iter().map(|h| h * 1e6).collect());
        p = report.params.clone();
        last = Some(report);
    }
    if !converged {
        return Err(Error::NonConvergence { what: "dip-shift refinement".into(), iterations: MAX_STAGES });
    }
    let report = last.expect("at least one stage runs before convergence");

    let model = FluxModel::from_params(&p, guess)?;
    let mut sum_sq = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let (_, d) = arm_dips(device, &model, r.v, hints[i])?;
        let d = if d[0] <= d[1] { d } else { [d[1], d[0]] };
        sum_sq += (d[0] - obs[i][0]).powi(2) + (d[1] - obs[i][1]).powi(2);
    }
    let (vmin, vmax) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.v[0]), b.max(r.v[0])));
    let span = vmax - vmin;
    let periods = [model.map.crosstalk[0][0].abs() * span, model.map.crosstalk[1][0].abs() * span];
    Ok(FluxFit {
        model: model.canonical(),
        residual_norm_hz: sum_sq.sqrt(),
        rms_hz: (sum_sq / (2 * rows.len()) as f64).sqrt(),
        iterations,
        stage_histories,
        periods,
        rank_warning: periods.iter().any(|&n| n < 1.0),
        rows_used: rows.len(),
        condition_number: report.condition_number(),
    })
}
