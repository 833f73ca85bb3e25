//! Run configuration. Every physical key carries its unit in the name.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use qswitch::elements::{HybridKind, HybridSpec, ResonatorSpec, SquidArraySpec};
use qswitch::fluxcal::{FluxMap, FluxModel};
use qswitch::quantum::{Amplifier, PhotonExperiment, SourceParams, DEFAULT_DEPHASING};
use qswitch::switchnet::SwitchSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hybrid {
    Ideal,
    Branchline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub format: Format,
    pub device: DeviceConfig,
    pub sweep: SweepConfig,
    pub fluxmap: FluxmapConfig,
    pub fit: FitConfig,
    pub nonlin: NonlinConfig,
    pub dynamics: DynamicsConfig,
    pub quantum: QuantumConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            format: Format::Csv,
            device: DeviceConfig::default(),
            sweep: SweepConfig::default(),
            fluxmap: FluxmapConfig::default(),
            fit: FitConfig::default(),
            nonlin: NonlinConfig::default(),
            dynamics: DynamicsConfig::default(),
            quantum: QuantumConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub hybrid: Hybrid,
    pub hybrid_frequency_hz: f64,
    pub z0_ohm: f64,
    pub loops: usize,
    pub ej1_over_h_hz: f64,
    pub ej2_over_h_hz: f64,
    pub bare_frequency_hz: f64,
    pub bare_bandwidth_hz: f64,
    pub probe_hz: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            hybrid: Hybrid::Branchline,
            hybrid_frequency_hz: 7.2e9,
            z0_ohm: 50.0,
            loops: 5,
            ej1_over_h_hz: 1.06e12,
            ej2_over_h_hz: 1.54e12,
            bare_frequency_hz: 8.30e9,
            bare_bandwidth_hz: 305e6,
            probe_hz: 7.2e9,
        }
    }
}

impl DeviceConfig {
    pub fn squid(&self) -> Result<SquidArraySpec, CliError> {
        Ok(SquidArraySpec::new(self.loops, self.ej1_over_h_hz, self.ej2_over_h_hz)?)
    }

    pub fn switch(&self) -> Result<SwitchSpec, CliError> {
        positive("device.probe_hz", self.probe_hz)?;
        positive("device.hybrid_frequency_hz", self.hybrid_frequency_hz)?;
        positive("device.z0_ohm", self.z0_ohm)?;
        let resonator =
            ResonatorSpec::calibrate(self.squid()?, self.bare_frequency_hz, self.bare_bandwidth_hz, self.z0_ohm)?;
        let kind = match self.hybrid {
            Hybrid::Ideal => HybridKind::Ideal,
            Hybrid::Branchline => HybridKind::Branchline,
        };
        let hybrid = HybridSpec { operating_frequency_hz: self.hybrid_frequency_hz, kind, z0_ohm: self.z0_ohm };
        Ok(SwitchSpec::symmetric(hybrid, resonator))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Explicit frequency list; overrides the start/stop grid when present.
    pub frequencies_hz: Option<Vec<f64>>,
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
    /// Band around the probe over which off-state flatness is reported.
    pub flat_band_hz: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { frequencies_hz: None, start_hz: 6.7e9, stop_hz: 7.7e9, points: 401, flat_band_hz: 150e6 }
    }
}

impl SweepConfig {
    pub fn frequencies(&self) -> Result<Vec<f64>, CliError> {
        let f = match &self.frequencies_hz {
            Some(list) => list.clone(),
            None => linspace(self.start_hz, self.stop_hz, self.points),
        };
        if f.is_empty() {
            return Err(CliError::Config("sweep: empty frequency list".into()));
        }
        if f.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(CliError::Config("sweep: frequencies must be positive and finite".into()));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluxmapConfig {
    pub crosstalk_phi0_per_v: [[f64; 2]; 2],
    pub offsets_phi0: [f64; 2],
    /// Relative flux spread across an array, per flux quantum of mean flux.
    pub gradients: [f64; 2],
    pub v1_start_v: f64,
    pub v1_stop_v: f64,
    pub v1_points: usize,
    pub v2_v: f64,
    pub f_start_hz: f64,
    pub f_stop_hz: f64,
    pub f_step_hz: f64,
}

impl Default for FluxmapConfig {
    fn default() -> Self {
        FluxmapConfig {
            crosstalk_phi0_per_v: [[0.8, 0.1], [0.7, 0.2]],
            offsets_phi0: [0.15, -0.2],
            gradients: [0.05, 0.04],
            v1_start_v: -3.0,
            v1_stop_v: 3.0,
            v1_points: 241,
            v2_v: 0.0,
            f_start_hz: 5.3e9,
            f_stop_hz: 7.7e9,
            f_step_hz: 5e6,
        }
    }
}

impl FluxmapConfig {
    pub fn map(&self) -> Result<FluxMap, CliError> {
        Ok(FluxMap::new(self.crosstalk_phi0_per_v, self.offsets_phi0, self.gradients)?)
    }

    pub fn voltages(&self) -> Result<Vec<f64>, CliError> {
        if self.v1_points < 2 {
            return Err(CliError::Config("fluxmap.v1_points must be at least 2".into()));
        }
        Ok(linspace(self.v1_start_v, self.v1_stop_v, self.v1_points))
    }

    pub fn frequencies(&self) -> Result<Vec<f64>, CliError> {
        positive("fluxmap.f_step_hz", self.f_step_hz)?;
        positive("fluxmap.f_start_hz", self.f_start_hz)?;
        if !(self.f_stop_hz > self.f_start_hz) {
            return Err(CliError::Config("fluxmap: f_stop_hz must exceed f_start_hz".into()));
        }
        let n = ((self.f_stop_hz - self.f_start_hz) / self.f_step_hz + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.f_start_hz + k as f64 * self.f_step_hz).collect())
    }
}

/// Initial guess for the flux-model fit; absent keys take the
/// `device`/`fluxmap` values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub ej1_over_h_hz: Option<f64>,
    pub ej2_over_h_hz: Option<f64>,
    pub crosstalk_phi0_per_v: Option<[[f64; 2]; 2]>,
    pub offsets_phi0: Option<[f64; 2]>,
    pub gradients: Option<[f64; 2]>,
    /// Relative Gaussian noise on simulated dip frequencies (no dataset given).
    pub dip_noise_rel: f64,
}

impl FitConfig {
    pub fn guess(&self, device: &DeviceConfig, fluxmap: &FluxmapConfig) -> Result<FluxModel, CliError> {
        let squid = SquidArraySpec::new(
            device.loops,
            self.ej1_over_h_hz.unwrap_or(device.ej1_over_h_hz),
            self.ej2_over_h_hz.unwrap_or(device.ej2_over_h_hz),
        )?;
        let map = FluxMap::new(
            self.crosstalk_phi0_per_v.unwrap_or(fluxmap.crosstalk_phi0_per_v),
            self.offsets_phi0.unwrap_or(fluxmap.offsets_phi0),
            self.gradients.unwrap_or(fluxmap.gradients),
        )?;
        Ok(FluxModel { map, squid })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinConfig {
    pub resonance_hz: f64,
    pub kappa_hz: f64,
    pub kerr_hz: f64,
    /// Share of the device input power reaching one arm.
    pub arm_fraction: f64,
    pub power_start_dbm: f64,
    pub power_stop_dbm: f64,
    pub power_points: usize,
}

impl Default for NonlinConfig {
    fn default() -> Self {
        NonlinConfig {
            resonance_hz: 7.2e9,
            kappa_hz: 149e6,
            kerr_hz: 28e3,
            arm_fraction: 0.5,
            power_start_dbm: -110.0,
            power_stop_dbm: -70.0,
            power_points: 161,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub pulse_bandwidth_hz: f64,
    /// Detection-chain bandwidth; 0 disables the filter.
    pub detection_bandwidth_hz: f64,
    pub dt_s: f64,
    pub t_on_s: f64,
    pub t_off_s: f64,
    pub duration_s: f64,
    pub window_s: f64,
    /// Keep every n-th sample in the waveform file.
    pub decimate: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            pulse_bandwidth_hz: 500e6,
            detection_bandwidth_hz: 250e6,
            dt_s: 2e-12,
            t_on_s: 20e-9,
            t_off_s: 60e-9,
            duration_s: 100e-9,
            window_s: 15e-9,
            decimate: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantumConfig {
    pub thetas_rad: Vec<f64>,
    pub records: usize,
    pub noise_quanta: f64,
    pub gain: f64,
    pub reference_extra_quanta: f64,
    pub tau_s: f64,
    pub efficiency: f64,
    pub dephasing: f64,
    pub cutoff: usize,
    pub seed: u64,
    pub wigner_extent: f64,
    pub wigner_points: usize,
    /// Also write the raw |1⟩ signal and reference records.
    pub write_records: bool,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        QuantumConfig {
            thetas_rad: (0..13).map(|k| k as f64 * PI / 12.0).collect(),
            records: 100_000,
            noise_quanta: 2.0,
            gain: 1.0,
            reference_extra_quanta: 0.0,
            tau_s: 90e-9,
            efficiency: 0.98,
            dephasing: DEFAULT_DEPHASING,
            cutoff: 5,
            seed: 42,
            wigner_extent: 3.0,
            wigner_points: 61,
            write_records: false,
        }
    }
}

impl QuantumConfig {
    pub fn experiment(&self) -> PhotonExperiment {
        PhotonExperiment {
            thetas: self.thetas_rad.clone(),
            records: self.records,
            amplifier: Amplifier { noise_quanta: self.noise_quanta, gain: self.gain },
            reference_extra_quanta: self.reference_extra_quanta,
            source: SourceParams { theta: 0.0, tau_s: self.tau_s, efficiency: self.efficiency, dephasing: self.dephasing },
            cutoff: self.cutoff,
            seed: self.seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Canonical text of the effective configuration, hashed for provenance.
    /// The output directory is left out so relocated runs hash the same.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        toml::to_string(&c).expect("config serialises")
    }
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} must be positive, got {v}")))
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse("format = \"json\"\n[quantum]\nseed = 9\n").unwrap();
        let back = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(back.quantum.seed, 9);
        assert_eq!(back.format, Format::Json);
    }

    #[test]
    fn output_directory_does_not_change_hash_input() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: PathBuf::from("/elsewhere"), ..RunConfig::default() };
        assert_eq!(a.canonical(), b.canonical());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::parse("[nonlin]\nkerr = 1.0\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("kerr")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn explicit_frequency_list_wins() {
        let cfg = RunConfig::parse("[sweep]\nfrequencies_hz = [7.0e9, 7.1e9]\n").unwrap();
        assert_eq!(cfg.sweep.frequencies().unwrap(), vec![7.0e9, 7.1e9]);
        assert_eq!(RunConfig::default().sweep.frequencies().unwrap().len(), 401);
    }

    #[test]
    fn fluxmap_grid_includes_both_ends() {
        let f = FluxmapConfig::default().frequencies().unwrap();
        assert_eq!(f.len(), 481);
        assert_eq!(f[0], 5.3e9);
        assert!((f[480] - 7.7e9).abs() < 1.0);
    }

    #[test]
    fn device_calibrates_to_bare_resonance() {
        let r = DeviceConfig::default().switch().unwrap().resonator_a;
        let (f0, _) = r.linewidth_with_inductance(0.0).unwrap();
        assert!((f0 - 8.30e9).abs() < 1e6);
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(0.0, 1.0, 0), Vec::<f64>::new());
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
        assert_eq!(linspace(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
    }
}
