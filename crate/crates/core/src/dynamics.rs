//! Time-domain switching with single-mode coupled-mode equations.
//!
//! Each arm is one driven mode with flux-dependent frequency and linewidth
//! taken from the calibrated resonator. Inputs and outputs are routed
//! through ideal quadrature hybrids. Envelopes are baseband in a frame
//! rotating at the probe frequency.

use std::f64::consts::{LN_2, PI};
use std::io::Write;

use serde::Serialize;

use crate::elements::{ej_from_inductance, ideal_hybrid, ResonatorSpec};
use crate::error::{Error, Result};
use crate::netcore::{C64, DEFAULT_Z_REF};
use crate::optim::{self, LmOptions};
use crate::switchnet::{fold_flux, inductance_tuned_to, SwitchSpec};

/// 10 %–90 % time of a unit step through a Gaussian filter of 3 dB bandwidth B
/// is this constant divided by B.
pub const GAUSSIAN_EDGE_FACTOR: f64 = 0.339_6;

const TABLE_POINTS: usize = 1001;

/// Time-domain σ of a Gaussian low-pass whose amplitude response is 3 dB down at `bandwidth`.
pub fn gaussian_sigma(bandwidth: f64) -> f64 {
    LN_2.sqrt() / (2.0 * PI * bandwidth)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Square flux pulse `baseline → baseline + amplitude` on `[t_on, t_off]`,
/// smoothed by a Gaussian low-pass of bandwidth `bandwidth_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluxPulse {
    pub baseline: f64,
    pub amplitude: f64,
    pub t_on_s: f64,
    pub t_off_s: f64,
    pub bandwidth_hz: f64,
}

impl FluxPulse {
    pub fn new(baseline: f64, amplitude: f64, t_on_s: f64, t_off_s: f64, bandwidth_hz: f64) -> Result<Self> {
        let p = Self { baseline, amplitude, t_on_s, t_off_s, bandwidth_hz };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::InvalidInput(format!("pulse bandwidth must be positive, got {}", self.bandwidth_hz)));
        }
        if !(self.t_off_s > self.t_on_s) {
            return Err(Error::InvalidInput("pulse must switch off after it switches on".into()));
        }
        if ![self.baseline, self.amplitude, self.t_on_s, self.t_off_s].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pulse parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn flux(&self, t: f64) -> f64 {
        let s = gaussian_sigma(self.bandwidth_hz);
        self.baseline + self.amplitude * (normal_cdf((t - self.t_on_s) / s) - normal_cdf((t - self.t_off_s) / s))
    }

    /// 10 %–90 % time of each filtered edge.
    pub fn edge_time(&self) -> f64 {
        GAUSSIAN_EDGE_FACTOR / self.bandwidth_hz
    }
}

/// Resonance frequency and linewidth of one arm sampled over half a flux period.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmTable {
    step: f64,
    omega: Vec<f64>,
    kappa: Vec<f64>,
}

impl ArmTable {
    pub fn new(resonator: &ResonatorSpec) -> Result<Self> {
        let step = 0.5 / (TABLE_POINTS - 1) as f64;
        let mut omega = Vec::with_capacity(TABLE_POINTS);
        let mut kappa = Vec::with_capacity(TABLE_POINTS);
        for i in 0..TABLE_POINTS {
            let (f0, w) = resonator.linewidth(step * i as f64)?;
            omega.push(2.0 * PI * f0);
            kappa.push(2.0 * PI * w);
        }
        Ok(Self { step, omega, kappa })
    }

    /// `(ω_r, κ)` in rad/s at flux `phi`, linearly interpolated.
    pub fn at(&self, phi: f64) -> (f64, f64) {
        let x = fold_flux(phi) / self.step;
        let i = (x.floor() as usize).min(TABLE_POINTS - 2);
        let u = x - i as f64;
        (
            self.omega[i] + u * (self.omega[i + 1] - self.omega[i]),
            self.kappa[i] + u * (self.kappa[i + 1] - self.kappa[i]),
        )
    }

    pub fn max_kappa(&self) -> f64 {
        self.kappa.iter().cloned().fold(0.0, f64::max)
    }
}

/// Flux in [0, 0.5] Φ0 that tunes the arm resonance to `f`.
pub fn flux_for_frequency(resonator: &ResonatorSpec, f: f64) -> Result<f64> {
    let l = inductance_tuned_to(resonator, f)?;
    let s = &resonator.squid;
    let ej = ej_from_inductance(s.loops, l);
    let c = (ej * ej - s.ej1_hz * s.ej1_hz - s.ej2_hz * s.ej2_hz) / (2.0 * s.ej1_hz * s.ej2_hz);
    if !(-1.0..=1.0).contains(&c) {
        return Err(Error::InvalidInput(format!("{f} Hz is outside the tuning range")));
    }
    Ok(c.acos() / (2.0 * PI))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchingConfig {
    pub probe_hz: f64,
    pub dt_s: f64,
    pub duration_s: f64,
    /// Start from empty resonators instead of the steady state at t = 0.
    pub start_empty: bool,
}

/// Complex output envelopes at the four device ports for unit input at port 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WaveformRecord {
    pub t: Vec<f64>,
    pub ports: [Vec<C64>; 4],
}

#[derive(Serialize)]
struct WaveformRow {
    t_s: f64,
    re_p2: f64,
    im_p2: f64,
    re_p3: f64,
    im_p3: f64,
}

impl WaveformRecord {
    /// Envelope at device port `port` (1-based).
    pub fn port(&self, port: usize) -> Result<&[C64]> {
        match port {
            1..=4 => Ok(&self.ports[port - 1]),
            _ => Err(Error::PortOutOfRange { index: port, ports: 4 }),
        }
    }

    pub fn power(&self, port: usize) -> Result<Vec<f64>> {
        Ok(self.port(port)?.iter().map(|z| z.norm_sqr()).collect())
    }

    /// Envelopes passed through a unit-DC-gain Gaussian detection filter.
    pub fn detected(&self, bandwidth_hz: f64) -> Result<Self> {
        if !(bandwidth_hz > 0.0) {
            return Err(Error::InvalidInput(format!("detection bandwidth must be positive, got {bandwidth_hz}")));
        }
        if self.t.len() < 2 {
            return Ok(self.clone());
        }
        let dt = self.t[1] - self.t[0];
        let sigma = gaussian_sigma(bandwidth_hz) / dt;
        let half = (6.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|w| *w /= sum);
        let n = self.t.len() as isize;
        let filter = |x: &Vec<C64>| -> Vec<C64> {
            (0..n)
                .map(|i| {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(k, w)| x[(i + k as isize - half).clamp(0, n - 1) as usize] * *w)
                        .sum()
                })
                .collect()
        };
        Ok(Self { t: self.t.clone(), ports: [0, 1, 2, 3].map(|p| filter(&self.ports[p])) })
    }

    /// Columns `t_s,re_p2,im_p2,re_p3,im_p3`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (i, &t) in self.t.iter().enumerate() {
            let (p2, p3) = (self.ports[1][i], self.ports[2][i]);
            w.serialize(WaveformRow { t_s: t, re_p2: p2.re, im_p2: p2.im, re_p3: p3.re, im_p3: p3.im })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Coupled-mode model of the switch at one probe frequency.
#[derive(Debug, Clone)]
pub struct CoupledModeSwitch {
    arms: [ArmTable; 2],
    /// Ideal hybrid, row = output port, column = input port.
    hybrid: [[C64; 4]; 4],
    probe_hz: f64,
}

impl CoupledModeSwitch {
    pub fn new(spec: &SwitchSpec, probe_hz: f64) -> Result<Self> {
        if !(probe_hz > 0.0) {
            return Err(Error::InvalidInput(format!("probe frequency must be positive, got {probe_hz}")));
        }
        let a = ArmTable::new(&spec.resonator_a)?;
        let b = if spec.resonator_b == spec.resonator_a { a.clone() } else { ArmTable::new(&spec.resonator_b)? };
        let h = ideal_hybrid(DEFAULT_Z_REF, probe_hz);
        let mut hybrid = [[C64::new(0.0, 0.0); 4]; 4];
        for (i, row) in hybrid.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = h.get(i, j);
            }
        }
        Ok(Self { arms: [a, b], hybrid, probe_hz })
    }

    pub fn arm(&self, k: usize) -> &ArmTable {
        &self.arms[k]
    }

    /// Incident amplitude on each arm for unit drive at port 1.
    fn drive(&self) -> [C64; 2] {
        [self.hybrid[2][0], self.hybrid[3][0]]
    }

    fn rates(&self, fluxes: [f64; 2]) -> [(C64, f64); 2] {
        let wp = 2.0 * PI * self.probe_hz;
        [0, 1].map(|k| {
            let (w, kappa) = self.arms[k].at(fluxes[k]);
            (C64::new(-kappa / 2.0, w - wp), (kappa / 2.0).sqrt())
        })
    }

    fn outputs(&self, a: [C64; 2], fluxes: [f64; 2]) -> [C64; 4] {
        let s = self.drive();
        let r = self.rates(fluxes);
        let refl = [-s[0] + r[0].1 * a[0], -s[1] + r[1].1 * a[1]];
        let trans = [r[0].1 * a[0], r[1].1 * a[1]];
        let h = &self.hybrid;
        [
            h[0][2] * refl[0] + h[0][3] * refl[1],
            h[1][2] * refl[0] + h[1][3] * refl[1],
            h[1][2] * trans[0] + h[1][3] * trans[1],
            h[0][2] * trans[0] + h[0][3] * trans[1],
        ]
    }

    /// Steady-state outputs at static fluxes.
    pub fn steady_state(&self, fluxes: [f64; 2]) -> [C64; 4] {
        let s = self.drive();
        let r = self.rates(fluxes);
        let a = [0, 1].map(|k| -(r[k].1 * s[k]) / r[k].0);
        self.outputs(a, fluxes)
    }

    /// Largest stable step, 1/(20·max(κ/2π, B)).
    pub fn step_limit(&self, pulses: &[FluxPulse; 2]) -> f64 {
        let kappa_hz = self.arms[0].max_kappa().max(self.arms[1].max_kappa()) / (2.0 * PI);
        let b = pulses[0].bandwidth_hz.max(pulses[1].bandwidth_hz);
        1.0 / (20.0 * kappa_hz.max(b))
    }

    /// Fixed-step RK4 integration of both arm modes.
    pub fn simulate(&self, pulses: &[FluxPulse; 2], cfg: &SwitchingConfig) -> Result<WaveformRecord> {
        pulses.iter().try_for_each(FluxPulse::validate)?;
        if (cfg.probe_hz - self.probe_hz).abs() > 1e-9 * self.probe_hz {
            return Err(Error::FrequencyMismatch(cfg.probe_hz, self.probe_hz));
        }
        let limit = self.step_limit(pulses);
        if !(cfg.dt_s > 0.0) || cfg.dt_s > limit {
            return Err(Error::StepSizeInstability { dt: cfg.dt_s, limit });
        }
        if !(cfg.duration_s > 0.0) {
            return Err(Error::InvalidInput("duration must be positive".into()));
        }
        let steps = (cfg.duration_s / cfg.dt_s).round() as usize;
        let dt = cfg.dt_s;
        let flux = |t: f64| [pulses[0].flux(t), pulses[1].flux(t)];
        let s = self.drive();
        let deriv = |t: f64, a: [C64; 2]| -> [C64; 2] {
            let r = self.rates(flux(t));
            [0, 1].map(|k| r[k].0 * a[k] + r[k].1 * s[k])
        };
        let mut a = if cfg.start_empty {
            [C64::new(0.0, 0.0); 2]
        } else {
            let r = self.rates(flux(0.0));
            [0, 1].map(|k| -(r[k].1 * s[k]) / r[k].0)
        };
        let mut rec = WaveformRecord { t: Vec::with_capacity(steps + 1), ports: Default::default() };
        let push = |t: f64, a: [C64; 2], rec: &mut WaveformRecord| {
            let out = self.outputs(a, flux(t));
            rec.t.push(t);
            for p in 0..4 {
                rec.ports[p].push(out[p]);
            }
        };
        push(0.0, a, &mut rec);
        let add = |a: [C64; 2], k: [C64; 2], h: f64| [a[0] + k[0] * h, a[1] + k[1] * h];
        for n in 0..steps {
            let t = n as f64 * dt;
            let k1 = deriv(t, a);
            let k2 = deriv(t + dt / 2.0, add(a, k1, dt / 2.0));
            let k3 = deriv(t + dt / 2.0, add(a, k2, dt / 2.0));
            let k4 = deriv(t + dt, add(a, k3, dt));
            for k in 0..2 {
                a[k] += (k1[k] + k2[k] * 2.0 + k3[k] * 2.0 + k4[k]) * (dt / 6.0);
            }
            push((n + 1) as f64 * dt, a, &mut rec);
        }
        Ok(rec)
    }
}

/// Builds the coupled-mode model and runs one simulation.
pub fn simulate_switching(spec: &SwitchSpec, pulses: &[FluxPulse; 2], cfg: &SwitchingConfig) -> Result<WaveformRecord> {
    CoupledModeSwitch::new(spec, cfg.probe_hz)?.simulate(pulses, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepFit {
    pub t0_s: f64,
    pub width_s: f64,
    pub level_start: f64,
    pub level_end: f64,
    /// 10 %–90 % time, ln(9)·w.
    pub time_10_90_s: f64,
    pub residual_norm: f64,
}

impl StepFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.level_start + (self.level_end - self.level_start) * 0.5 * (1.0 + ((t - self.t0_s) / self.width_s).tanh())
    }
}

fn edge_level(y: &[f64], head: bool) -> f64 {
    let m = (y.len() / 20).max(1);
    let part = if head { &y[..m] } else { &y[y.len() - m..] };
    part.iter().sum::<f64>() / m as f64
}

/// Least-squares fit of `lo + (hi − lo)·(1 + tanh((t − t0)/w))/2` to a
/// record holding one transition.
pub fn tanh_step_fit(t: &[f64], y: &[f64]) -> Result<StepFit> {
    if t.len() != y.len() || t.len() < 8 {
        return Err(Error::InvalidInput("step fit needs at least 8 matching samples".into()));
    }
    let (start, end) = (edge_level(y, true), edge_level(y, false));
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let span = end - start;
    if !(scale > 0.0) || span.abs() < 1e-6 * scale {
        return Err(Error::Transition("flat record".into()));
    }
    // hysteresis crossing count between 25 % and 75 % of the span
    let mut high = false;
    let mut transitions = 0;
    let mut t_mid = t[0];
    for (ti, yi) in t.iter().zip(y) {
        let u = (yi - start) / span;
        if !high && u > 0.75 {
            high = true;
            transitions += 1;
            t_mid = *ti;
        } else if high && u < 0.25 {
            high = false;
            transitions += 1;
        }
    }
    if transitions != 1 {
        return Err(Error::Transition(format!("{transitions} level crossings")));
    }
    let t_ref = t[0];
    let ns: Vec<f64> = t.iter().map(|v| (v - t_ref) * 1e9).collect();
    let yn: Vec<f64> = y.iter().map(|v| v / scale).collect();
    let model = |p: &[f64], x: f64| p[0] + (p[1] - p[0]) * 0.5 * (1.0 + ((x - p[2]) / p[3]).tanh());
    let residuals = |p: &[f64]| -> Result<Vec<f64>> {
        if p[3] == 0.0 {
            return Err(Error::InvalidInput("zero step width".into()));
        }
        Ok(ns.iter().zip(&yn).map(|(&x, &v)| model(p, x) - v).collect())
    };
    let x0 = [start / scale, end / scale, (t_mid - t_ref) * 1e9, 1.0];
    let opts = LmOptions { max_iterations: 500, scales: Some(vec![1.0; 4]), ..LmOptions::default() };
    let rep = optim::levenberg_marquardt(residuals, &x0, &opts)?;
    let mut p = rep.params.clone();
    if p[3] < 0.0 {
        p[3] = -p[3];
        p.swap(0, 1);
    }
    let width_s = p[3] * 1e-9;
    Ok(StepFit {
        t0_s: t_ref + p[2] * 1e-9,
        width_s,
        level_start: p[0] * scale,
        level_end: p[1] * scale,
        time_10_90_s: 9f64.ln() * width_s,
        residual_norm: rep.residual_norm * scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Edge {
    Rising,
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeReport {
    pub port: usize,
    pub edge: Edge,
    pub time_10_90_s: f64,
    /// Measured value quoted for the device, for reference.
    pub reference_s: f64,
    pub fit: StepFit,
}

/// Parameters of the four-edge switching experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchingExperiment {
    pub probe_hz: f64,
    /// Fluxes with the signal routed to port 2 and to port 3.
    pub off_flux: [f64; 2],
    pub on_flux: [f64; 2],
    pub t_on_s: f64,
    pub t_off_s: f64,
    pub duration_s: f64,
    pub dt_s: f64,
    pub pulse_bandwidth_hz: f64,
    /// Detection-chain bandwidth applied to the envelopes before fitting.
    pub detection_bandwidth_hz: Option<f64>,
    /// Half-width of the fit window around each edge.
    pub window_s: f64,
}

impl SwitchingExperiment {
    /// Both arms parked at Φ0/2 for "off" and tuned to the probe for "on".
    /// 500 MHz pulse bandwidth; the 250 MHz detection bandwidth matches the
    /// intermediate frequency of the downconversion chain, which bounds the
    /// envelope bandwidth it can resolve.
    pub fn device_default(spec: &SwitchSpec, probe_hz: f64) -> Result<Self> {
        let on = [flux_for_frequency(&spec.resonator_a, probe_hz)?, flux_for_frequency(&spec.resonator_b, probe_hz)?];
        Ok(Self {
            probe_hz,
            off_flux: [0.5, 0.5],
            on_flux: on,
            t_on_s: 20e-9,
            t_off_s: 60e-9,
            duration_s: 100e-9,
            dt_s: 2e-12,
            pulse_bandwidth_hz: 500e6,
            detection_bandwidth_hz: Some(250e6),
            window_s: 15e-9,
        })
    }

    pub fn pulses(&self) -> Result<[FluxPulse; 2]> {
        let p = |k: usize| {
            FluxPulse::new(
                self.off_flux[k],
                self.on_flux[k] - self.off_flux[k],
                self.t_on_s,
                self.t_off_s,
                self.pulse_bandwidth_hz,
            )
        };
        Ok([p(0)?, p(1)?])
    }

    pub fn config(&self) -> SwitchingConfig {
        SwitchingConfig { probe_hz: self.probe_hz, dt_s: self.dt_s, duration_s: self.duration_s, start_empty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiseFallReport {
    pub edges: Vec<EdgeReport>,
}

impl RiseFallReport {
    pub fn get(&self, port: usize, edge: Edge) -> Option<&EdgeReport> {
        self.edges.iter().find(|e| e.port == port && e.edge == edge)
    }
}

/// Reference 10 %–90 % times: port 2 rise/fall 5/7 ns, port 3 rise/fall 8/6 ns.
pub fn reference_time(port: usize, edge: Edge) -> f64 {
    match (port, edge) {
        (2, Edge::Rising) => 5e-9,
        (2, Edge::Falling) => 7e-9,
        (3, Edge::Rising) => 8e-9,
        _ => 6e-9,
    }
}

/// Simulates one on/off pulse and fits the rising and falling edges seen at
/// ports 2 and 3.
pub fn rise_fall_report(model: &CoupledModeSwitch, exp: &SwitchingExperiment) -> Result<RiseFallReport> {
    let raw = model.simulate(&exp.pulses()?, &exp.config())?;
    let rec = match exp.detection_bandwidth_hz {
        Some(b) => raw.detected(b)?,
        None => raw,
    };
    let mut edges = Vec::new();
    for port in [2, 3] {
        let power = rec.power(port)?;
        for te in [exp.t_on_s, exp.t_off_s] {
            let idx: Vec<usize> = (0..rec.t.len()).filter(|&i| (rec.t[i] - te).abs() <= exp.window_s).collect();
            let t: Vec<f64> = idx.iter().map(|&i| rec.t[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| power[i]).collect();
            let fit = tanh_step_fit(&t, &y)?;
            let edge = if fit.level_end > fit.level_start { Edge::Rising } else { Edge::Falling };
            edges.push(EdgeReport {
                port,
                edge,
                time_10_90_s: fit.time_10_90_s,
                reference_s: reference_time(port, edge),
                fit,
            });
        }
    }
    Ok(RiseFallReport { edges })
}
