use std::f64::consts::PI;
use std::path::Path;

use qswitch::dynamics::{flux_for_frequency, rise_fall_report, CoupledModeSwitch, SwitchingExperiment};
use qswitch::fluxcal::{
    add_frequency_noise, extract_dips, fit_dip_rows, model_dips, simulate_flux_map, FluxModel, SpectroscopyDataset,
};
use qswitch::nonlin::{compression_point, duffing_response, kerr_from_network, DuffingParams};
use qswitch::netcore::PhysicalConstants;
use qswitch::quantum::{
    self, run_photon_experiment, square_grid, sub_seed, synthesize_records, wigner, DensityMatrix, MomentSet,
    StateReport,
};
use qswitch::switchnet::{bandwidth_fit, on_off_ratios, spectrum, OperatingPoint, PointKind, SwitchSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{Emitter, Table};
use crate::CliError;

fn resonant_and_off(spec: &SwitchSpec, probe: f64) -> Result<(OperatingPoint, OperatingPoint), CliError> {
    let phi_a = flux_for_frequency(&spec.resonator_a, probe)?;
    let phi_b = flux_for_frequency(&spec.resonator_b, probe)?;
    let on = OperatingPoint {
        phi_a,
        phi_b,
        kind: PointKind::Resonant,
        merit: spec.branching_ratio(phi_a, phi_b, probe)?,
    };
    let off = OperatingPoint { phi_a: 0.5, phi_b: 0.5, kind: PointKind::OffResonant, merit: spec.branching_ratio(0.5, 0.5, probe)? };
    Ok((on, off))
}

pub fn sweep(cfg: &RunConfig, out: &mut Emitter) -> Result<(), CliError> {
    let freqs = cfg.sweep.frequencies()?;
    let spec = cfg.device.switch()?;
    let probe = cfg.device.probe_hz;
    let (on, off) = resonant_and_off(&spec, probe)?;
    let mut summary = serde_json::Map::new();
    for (name, point) in [("sweep_resonant", &on), ("sweep_off", &off)] {
        let sp = spectrum(&spec, point, &freqs)?;
        let mut t = Table::new(&["f_hz", "s11_sq", "s21_sq", "s31_sq", "s41_sq"]);
        for p in &sp {
            t.push(vec![p.f_hz.into(), p.power(1).into(), p.power(2).into(), p.power(3).into(), p.power(4).into()]);
        }
        out.table(name, &t)?;
        if point.kind == PointKind::Resonant {
            let fit = bandwidth_fit(&sp.iter().map(|p| (p.f_hz, p.power(3))).collect::<Vec<_>>())?;
            summary.insert("lorentzian".into(), json!(fit));
        } else {
            let band: Vec<f64> = sp
                .iter()
                .filter(|p| (p.f_hz - probe).abs() <= cfg.sweep.flat_band_hz / 2.0)
                .map(|p| p.power(2))
                .collect();
            if !band.is_empty() {
                let hi = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = band.iter().copied().fold(f64::INFINITY, f64::min);
                summary.insert("off_s21_sq_variation".into(), json!(hi - lo));
            }
        }
    }
    summary.insert("probe_hz".into(), json!(probe));
    summary.insert("resonant".into(), json!(on));
    summary.insert("off_resonant".into(), json!(off));
    summary.insert("on_off_ratios".into(), json!(on_off_ratios(&spec, &on, &off, probe)?));
    out.json("sweep_summary", &summary)
}

pub fn fluxmap(cfg: &RunConfig, out: &mut Emitter) -> Result<(), CliError> {
    let data = simulate(cfg)?;
    write_dataset(&data, out)
}

fn simulate(cfg: &RunConfig) -> Result<SpectroscopyDataset, CliError> {
    let spec = cfg.device.switch()?;
    let fm = &cfg.fluxmap;
    Ok(simulate_flux_map(&spec, &fm.map()?, &fm.voltages()?, fm.v2_v, &fm.frequencies()?)?)
}

fn write_dataset(data: &SpectroscopyDataset, out: &mut Emitter) -> Result<(), CliError> {
    let mut t = Table::new(&["V1", "V2", "f_Hz", "S12_sq"]);
    for p in &data.points {
        t.push(vec![p.v1.into(), p.v2.into(), p.f_hz.into(), p.s12_sq.into()]);
    }
    out.table("fluxmap", &t)
}

pub fn fit(cfg: &RunConfig, dataset: Option<&Path>, seed: u64, out: &mut Emitter) -> Result<(), CliError> {
    let spec = cfg.device.switch()?;
    let guess = cfg.fit.guess(&cfg.device, &cfg.fluxmap)?;
    let (data, truth) = match dataset {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (SpectroscopyDataset::read_csv(file)?, None)
        }
        None => {
            let truth = FluxModel { map: cfg.fluxmap.map()?, squid: cfg.device.squid()? };
            (simulate(cfg)?, Some(truth.canonical()))
        }
    };
    let mut rows = extract_dips(&data);
    if dataset.is_none() && cfg.fit.dip_noise_rel > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows = add_frequency_noise(&rows, cfg.fit.dip_noise_rel, &mut rng)?;
    }
    let fit = fit_dip_rows(&rows, &spec, &guess)?;
    if fit.rank_warning {
        eprintln!("warning: sweep covers less than one flux period (periods {:?})", fit.periods);
    }
    let mut t = Table::new(&["V1", "V2", "dip_lo_hz", "dip_hi_hz", "model_lo_hz", "model_hi_hz"]);
    for r in rows.iter().filter(|r| r.dips.len() == 2) {
        let m = model_dips(&spec, &fit.model, r.v)?;
        t.push(vec![r.v[0].into(), r.v[1].into(), r.dips[0].into(), r.dips[1].into(), m[0].into(), m[1].into()]);
    }
    out.table("fit_residuals", &t)?;
    let mut summary = json!({ "fit": fit });
    if let Some(truth) = truth {
        summary["relative_errors"] = json!(relative_errors(&fit.model, &truth));
    }
    out.json("fit", &summary)
}

/// |est − true| / |true| per fitted parameter.
pub fn relative_errors(est: &FluxModel, truth: &FluxModel) -> serde_json::Map<String, serde_json::Value> {
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let pairs = [
        ("ej1", rel(est.squid.ej1_hz, truth.squid.ej1_hz)),
        ("ej2", rel(est.squid.ej2_hz, truth.squid.ej2_hz)),
        ("m11", rel(est.map.crosstalk[0][0], truth.map.crosstalk[0][0])),
        ("m21", rel(est.map.crosstalk[1][0], truth.map.crosstalk[1][0])),
        ("offset_a", rel(est.map.offsets[0], truth.map.offsets[0])),
        ("offset_b", rel(est.map.offsets[1], truth.map.offsets[1])),
        ("gradient_a", rel(est.map.gradients[0], truth.map.gradients[0])),
        ("gradient_b", rel(est.map.gradients[1], truth.map.gradients[1])),
    ];
    pairs.iter().map(|(k, v)| (k.to_string(), json!(v))).collect()
}

pub fn compression(cfg: &RunConfig, out: &mut Emitter) -> Result<(), CliError> {
    let n = &cfg.nonlin;
    if n.power_points < 2 {
        return Err(CliError::Config("nonlin.power_points must be at least 2".into()));
    }
    let p = DuffingParams::symmetric(n.resonance_hz, n.kappa_hz, n.kerr_hz, 0.0)?;
    let cp = compression_point(&p, n.arm_fraction)?;
    let linear = duffing_response(&p)?.transmission;
    let photon_energy = PhysicalConstants::PLANCK * n.resonance_hz;
    let mut t = Table::new(&["power_dbm", "input_flux_per_s", "photons", "transmission", "gain_change_db"]);
    for k in 0..n.power_points {
        let dbm = n.power_start_dbm + (n.power_stop_dbm - n.power_start_dbm) * k as f64 / (n.power_points - 1) as f64;
        let flux = 1e-3 * 10f64.powf(dbm / 10.0) / photon_energy;
        let s = duffing_response(&p.with_flux(flux * n.arm_fraction))?;
        t.push(vec![
            dbm.into(),
            flux.into(),
            s.photons.into(),
            s.transmission.into(),
            (10.0 * (s.transmission / linear).log10()).into(),
        ]);
    }
    out.table("compression", &t)?;
    let spec = cfg.device.switch()?;
    let phi = flux_for_frequency(&spec.resonator_a, cfg.device.probe_hz)?;
    let kerr = kerr_from_network(&spec.resonator_a, phi)?;
    out.json(
        "compression_summary",
        &json!({
            "compression_point": cp,
            "kerr_hz": n.kerr_hz,
            "kappa_hz": n.kappa_hz,
            "arm_fraction": n.arm_fraction,
            "network_kerr_estimate": kerr,
        }),
    )
}

pub fn pulse(cfg: &RunConfig, out: &mut Emitter) -> Result<(), CliError> {
    let d = &cfg.dynamics;
    let spec = cfg.device.switch()?;
    let mut exp = SwitchingExperiment::device_default(&spec, cfg.device.probe_hz)?;
    exp.pulse_bandwidth_hz = d.pulse_bandwidth_hz;
    exp.detection_bandwidth_hz = (d.detection_bandwidth_hz > 0.0).then_some(d.detection_bandwidth_hz);
    exp.dt_s = d.dt_s;
    exp.t_on_s = d.t_on_s;
    exp.t_off_s = d.t_off_s;
    exp.duration_s = d.duration_s;
    exp.window_s = d.window_s;
    let model = CoupledModeSwitch::new(&spec, cfg.device.probe_hz)?;
    let report = rise_fall_report(&model, &exp)?;

    let raw = model.simulate(&exp.pulses()?, &exp.config())?;
    let det = match exp.detection_bandwidth_hz {
        Some(b) => raw.detected(b)?,
        None => raw.clone(),
    };
    let (p2, p3, d2, d3) = (raw.power(2)?, raw.power(3)?, det.power(2)?, det.power(3)?);
    let mut t = Table::new(&["t_s", "p2_power", "p3_power", "p2_detected", "p3_detected"]);
    for i in (0..raw.t.len()).step_by(d.decimate.max(1)) {
        t.push(vec![raw.t[i].into(), p2[i].into(), p3[i].into(), d2[i].into(), d3[i].into()]);
    }
    out.table("pulse_waveforms", &t)?;

    let mut e = Table::new(&["port", "edge", "time_10_90_s", "reference_s", "t0_s", "width_s", "level_start", "level_end"]);
    for r in &report.edges {
        let edge = match r.edge {
            qswitch::dynamics::Edge::Rising => "rising",
            qswitch::dynamics::Edge::Falling => "falling",
        };
        e.push(vec![
            r.port.into(),
            edge.into(),
            r.time_10_90_s.into(),
            r.reference_s.into(),
            r.fit.t0_s.into(),
            r.fit.width_s.into(),
            r.fit.level_start.into(),
            r.fit.level_end.into(),
        ]);
    }
    out.table("pulse_edges", &e)?;
    out.json("pulse_summary", &json!({ "experiment": exp, "report": report }))
}

fn moment_rows(t: &mut Table, label: &str, theta: f64, m: &MomentSet) {
    for x in m.entries() {
        t.push(vec![label.into(), theta.into(), x.n.into(), x.m.into(), x.re.into(), x.im.into(), x.err.into()]);
    }
}

fn state_json(r: &StateReport) -> serde_json::Value {
    json!({
        "theta_rad": r.theta,
        "g2": r.g2,
        "fidelity": r.fidelity,
        "wigner_origin": r.wigner_origin,
        "rho": r.rho,
        "truth": r.truth,
        "moments": r.moments,
    })
}

pub fn photon(cfg: &RunConfig, seed: u64, out: &mut Emitter) -> Result<(), CliError> {
    let q = &cfg.quantum;
    let mut exp = q.experiment();
    exp.seed = seed;
    if q.wigner_points < 2 || !(q.wigner_extent > 0.0) {
        return Err(CliError::Config("quantum: wigner grid needs extent > 0 and at least 2 points".into()));
    }
    let report = run_photon_experiment(&exp)?;

    let mut t = Table::new(&["state", "theta_rad", "n", "m", "re", "im", "err"]);
    for (theta, m) in &report.sweep {
        moment_rows(&mut t, "sweep", *theta, m);
    }
    for (label, s) in [("one", &report.single_photon), ("superposition", &report.superposition), ("vacuum", &report.vacuum)] {
        moment_rows(&mut t, label, s.theta, &s.moments);
    }
    out.table("photon_moments", &t)?;

    let grid = square_grid(q.wigner_extent, q.wigner_points);
    if q.wigner_extent * q.wigner_extent * 2.0 > q.cutoff as f64 / 2.0 {
        eprintln!("warning: Wigner grid reaches |α|² > {}/2; truncation may matter", q.cutoff);
    }
    for (label, s) in [("one", &report.single_photon), ("superposition", &report.superposition)] {
        let w = wigner(&s.rho, &grid);
        let mut wt = Table::new(&["re_alpha", "im_alpha", "w"]);
        for (a, v) in w.alphas.iter().zip(&w.values) {
            wt.push(vec![a[0].into(), a[1].into(), (*v).into()]);
        }
        out.table(&format!("wigner_{label}"), &wt)?;
    }

    if q.write_records {
        let one = quantum::SourceParams { theta: PI, ..exp.source }.state(exp.cutoff)?;
        let sig = synthesize_records(&one.into(), &exp.amplifier, exp.records, sub_seed(seed, 1000))?;
        let reference = synthesize_records(
            &DensityMatrix::vacuum(exp.cutoff)?.into(),
            &quantum::Amplifier { noise_quanta: exp.amplifier.noise_quanta + exp.reference_extra_quanta, ..exp.amplifier },
            exp.records,
            sub_seed(seed, 0),
        )?;
        for (name, r) in [("records_one", &sig), ("records_reference", &reference)] {
            let mut buf = Vec::new();
            quantum::write_records_csv(&mut buf, r)?;
            out.raw_csv(name, &String::from_utf8(buf).map_err(|e| CliError::Other(e.to_string()))?)?;
        }
    }

    out.json(
        "photon_summary",
        &json!({
            "gain": report.gain,
            "chi2_per_dof": report.chi2_per_dof,
            "one": state_json(&report.single_photon),
            "superposition": state_json(&report.superposition),
            "vacuum": state_json(&report.vacuum),
        }),
    )
}
