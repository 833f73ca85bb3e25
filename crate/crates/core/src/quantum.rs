//! Routing of single-photon fields: a phenomenological emitter, heterodyne
//! records with amplifier noise, moment inversion against a signal-off
//! reference, g⁽²⁾, maximum-likelihood state reconstruction and Wigner
//! functions.
//!
//! Each shot is one complex number, the record already integrated against
//! the emission envelope e^{−t/2τ} (matched temporal mode). A record is
//! `S = √G (a + h†)` where `a` is the signal mode and `h` an amplifier mode
//! holding `n_h` thermal quanta, so the reference (signal off) carries
//! `n_h + 1` quanta per shot, split evenly between the two quadratures.

use std::f64::consts::{FRAC_2_PI, TAU};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::netcore::C64;
use crate::optim::{self, LmOptions};

pub const DEFAULT_CUTOFF: usize = 5;
/// Highest total order n + m of the moments ⟨(a†)ⁿaᵐ⟩ kept.
pub const MAX_ORDER: usize = 4;
pub const JACKKNIFE_BLOCKS: usize = 20;
/// Dephasing that reproduces |⟨a⟩| ≈ 0.43 at θ = π/2 and η = 0.98.
pub const DEFAULT_DEPHASING: f64 = 0.868_7;

const SYNTH_BLOCK: usize = 4096;
const MAX_SAMPLING_CUTOFF: usize = 16;
const TOL: f64 = 1e-10;

/// Phenomenological emitter: a qubit rotated by θ and released into the line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub theta: f64,
    /// Power decay time; the amplitude envelope is e^{−t/2τ}.
    pub tau_s: f64,
    pub efficiency: f64,
    pub dephasing: f64,
}

impl SourceParams {
    pub fn new(theta: f64) -> Self {
        SourceParams { theta, tau_s: 90e-9, efficiency: 0.98, dephasing: DEFAULT_DEPHASING }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(0.0..TAU).contains(&self.theta) {
            return Err(Error::InvalidInput(format!("rotation angle {} outside [0, 2π)", self.theta)));
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return Err(Error::InvalidInput(format!("emission time constant {} s", self.tau_s)));
        }
        if !unit(self.efficiency) || !unit(self.dephasing) {
            return Err(Error::InvalidInput(format!(
                "efficiency {} and dephasing {} must lie in [0, 1]",
                self.efficiency, self.dephasing
            )));
        }
        Ok(())
    }

    /// Same emitter behind an extra power transmission `t`.
    pub fn attenuated(self, t: f64) -> Self {
        SourceParams { efficiency: self.efficiency * t, ..self }
    }

    pub fn photon_number(&self) -> f64 {
        self.efficiency * (self.theta / 2.0).sin().powi(2)
    }

    pub fn coherence(&self) -> f64 {
        self.dephasing * self.efficiency.sqrt() * self.theta.sin() / 2.0
    }

    /// Emitted-mode state: populations in |0⟩, |1⟩ and ⟨1|ρ|0⟩ = ⟨a⟩.
    pub fn state(&self, cutoff: usize) -> Result<DensityMatrix> {
        self.validate()?;
        if cutoff < 2 {
            return Err(Error::UnsupportedState { cutoff });
        }
        let p = self.photon_number();
        let c = C64::new(self.coherence(), 0.0);
        let mut rho = DMatrix::zeros(cutoff, cutoff);
        rho[(0, 0)] = C64::new(1.0 - p, 0.0);
        rho[(1, 1)] = C64::new(p, 0.0);
        rho[(1, 0)] = c;
        rho[(0, 1)] = c.conj();
        DensityMatrix::new(rho)
    }
}

/// Dephasing factor giving coherence `target` at θ = π/2.
pub fn dephasing_for_coherence(target: f64, efficiency: f64) -> f64 {
    2.0 * target / efficiency.sqrt()
}

fn ladder(cutoff: usize) -> DMatrix<C64> {
    DMatrix::from_fn(cutoff, cutoff, |i, j| {
        if j == i + 1 {
            C64::new((j as f64).sqrt(), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// (a†)ⁿaᵐ in the Fock basis; exact on the truncated space since aᵐ only lowers.
fn normal_operator(cutoff: usize, n: usize, m: usize) -> DMatrix<C64> {
    let a = ladder(cutoff);
    let id = DMatrix::identity(cutoff, cutoff);
    let an = (0..n).fold(id.clone(), |acc, _| &acc * &a);
    let am = (0..m).fold(id, |acc, _| &acc * &a);
    an.adjoint() * am
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    data: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(data: DMatrix<C64>) -> Result<Self> {
        let rho = DensityMatrix { data };
        rho.validate()?;
        Ok(rho)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !d.is_square() || d.nrows() == 0 {
            return Err(Error::InvalidInput("density matrix must be square and non-empty".into()));
        }
        if d.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("density matrix has non-finite entries".into()));
        }
        let herm = (d - d.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > TOL {
            return Err(Error::InvalidInput(format!("density matrix not Hermitian ({herm:.1e})")));
        }
        let tr = d.trace();
        if (tr.re - 1.0).abs() > TOL || tr.im.abs() > TOL {
            return Err(Error::InvalidInput(format!("density matrix trace {tr}")));
        }
        let lowest = self.eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        if lowest < -TOL {
            return Err(Error::InvalidInput(format!("density matrix eigenvalue {lowest:.3e}")));
        }
        Ok(())
    }

    pub fn vacuum(cutoff: usize) -> Result<Self> {
        Self::fock(0, cutoff)
    }

    pub fn fock(n: usize, cutoff: usize) -> Result<Self> {
        if n >= cutoff {
            return Err(Error::UnsupportedState { cutoff });
        }
        let mut d = DMatrix::zeros(cutoff, cutoff);
        d[(n, n)] = C64::new(1.0, 0.0);
        Self::new(d)
    }

    /// Projector onto the normalised Fock-basis vector `amplitudes`.
    pub fn pure(amplitudes: &[C64]) -> Result<Self> {
        let v = DVector::from_column_slice(amplitudes);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(Error::InvalidInput("zero state vector".into()));
        }
        let v = v / C64::new(norm, 0.0);
        let mut d = &v * v.adjoint();
        d = (&d + d.adjoint()) * C64::new(0.5, 0.0);
        Self::new(d)
    }

    pub fn cutoff(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[(i, j)]
    }

    pub fn population(&self, n: usize) -> f64 {
        self.data[(n, n)].re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        SymmetricEigen::new(self.data.clone()).eigenvalues.iter().copied().collect()
    }

    /// ⟨(a†)ⁿaᵐ⟩.
    pub fn moment(&self, n: usize, m: usize) -> C64 {
        (&self.data * normal_operator(self.cutoff(), n, m)).trace()
    }

    pub fn photon_number(&self) -> f64 {
        self.moment(1, 1).re
    }

    /// Uhlmann fidelity (tr √(√ρ σ √ρ))².
    pub fn fidelity(&self, other: &DensityMatrix) -> Result<f64> {
        if other.cutoff() != self.cutoff() {
            return Err(Error::InvalidInput(format!(
                "fidelity between cutoffs {} and {}",
                self.cutoff(),
                other.cutoff()
            )));
        }
        let root = hermitian_sqrt(&self.data);
        let inner = &root * &other.data * &root;
        let inner = (&inner + inner.adjoint()) * C64::new(0.5, 0.0);
        let s: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
        Ok(s * s)
    }

    /// Same state padded with empty levels up to `cutoff`.
    pub fn embed(&self, cutoff: usize) -> Result<Self> {
        if cutoff < self.cutoff() {
            return Err(Error::UnsupportedState { cutoff });
        }
        let mut d = DMatrix::zeros(cutoff, cutoff);
        d.view_mut((0, 0), (self.cutoff(), self.cutoff())).copy_from(&self.data);
        Self::new(d)
    }
}

impl Serialize for DensityMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            cutoff: usize,
            /// Row-major [re, im] pairs.
            data: Vec<[f64; 2]>,
        }
        let d = self.cutoff();
        let data = (0..d * d).map(|k| self.data[(k / d, k % d)]).map(|z| [z.re, z.im]).collect();
        Repr { cutoff: d, data }.serialize(s)
    }
}

fn hermitian_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let e = SymmetricEigen::new(m.clone());
    let roots = e.eigenvalues.map(|l| C64::new(l.max(0.0).sqrt(), 0.0));
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.adjoint()
}

/// Index of (n, m) in the order (0,0), (0,1), (1,0), (0,2), (1,1), (2,0), ….
fn moment_index(n: usize, m: usize) -> usize {
    let k = n + m;
    k * (k + 1) / 2 + n
}

const MOMENT_COUNT: usize = (MAX_ORDER + 1) * (MAX_ORDER + 2) / 2;

type Table = [C64; MOMENT_COUNT];

fn pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..=MAX_ORDER).flat_map(|k| (0..=k).map(move |n| (n, k - n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moment {
    pub n: usize,
    pub m: usize,
    pub re: f64,
    pub im: f64,
    /// Standard error of the complex value.
    pub err: f64,
}

/// Moments ⟨(a†)ⁿaᵐ⟩ for n + m ≤ 4 with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSet {
    moments: Vec<Moment>,
    pub records: usize,
}

impl MomentSet {
    fn from_tables(values: &Table, errors: &[f64; MOMENT_COUNT], records: usize) -> Self {
        let moments = pairs()
            .map(|(n, m)| {
                let k = moment_index(n, m);
                Moment { n, m, re: values[k].re, im: values[k].im, err: errors[k] }
            })
            .collect();
        MomentSet { moments, records }
    }

    /// Exact moments of a state, with zero error.
    pub fn from_state(rho: &DensityMatrix) -> Self {
        let mut t = [C64::new(0.0, 0.0); MOMENT_COUNT];
        for (n, m) in pairs() {
            t[moment_index(n, m)] = rho.moment(n, m);
        }
        Self::from_tables(&t, &[0.0; MOMENT_COUNT], 0)
    }

    pub fn coherent(alpha: C64) -> Self {
        let mut t = [C64::new(0.0, 0.0); MOMENT_COUNT];
        for (n, m) in pairs() {
            // diagonal part as a real power so g⁽²⁾ is exactly 1
            let k = n.min(m) as i32;
            let phase = if m >= n { alpha.powu((m - n) as u32) } else { alpha.conj().powu((n - m) as u32) };
            t[moment_index(n, m)] = phase * alpha.norm_sqr().powi(k);
        }
        Self::from_tables(&t, &[0.0; MOMENT_COUNT], 0)
    }

    pub fn get(&self, n: usize, m: usize) -> C64 {
        let x = &self.moments[moment_index(n, m)];
        C64::new(x.re, x.im)
    }

    pub fn err(&self, n: usize, m: usize) -> f64 {
        self.moments[moment_index(n, m)].err
    }

    pub fn entries(&self) -> &[Moment] {
        &self.moments
    }

    pub fn photon_number(&self) -> f64 {
        self.get(1, 1).re
    }

    /// Rescales record-unit moments by a power gain: order n + m scales as G^{(n+m)/2}.
    pub fn normalized(&self, gain: f64) -> Self {
        let moments = self
            .moments
            .iter()
            .map(|x| {
                let s = gain.powf((x.n + x.m) as f64 / 2.0);
                Moment { re: x.re / s, im: x.im / s, err: x.err / s, ..*x }
            })
            .collect();
        MomentSet { moments, records: self.records }
    }
}

/// Ideal moments of the emitted field.
pub fn source_moments(params: &SourceParams) -> Result<MomentSet> {
    params.validate()?;
    let mut t = [C64::new(0.0, 0.0); MOMENT_COUNT];
    let c = C64::new(params.coherence(), 0.0);
    t[moment_index(0, 0)] = C64::new(1.0, 0.0);
    t[moment_index(1, 1)] = C64::new(params.photon_number(), 0.0);
    t[moment_index(0, 1)] = c;
    t[moment_index(1, 0)] = c.conj();
    Ok(MomentSet::from_tables(&t, &[0.0; MOMENT_COUNT], 0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalState {
    Density(DensityMatrix),
    Coherent(C64),
}

impl From<DensityMatrix> for SignalState {
    fn from(rho: DensityMatrix) -> Self {
        SignalState::Density(rho)
    }
}

/// Phase-insensitive amplifier: added thermal quanta and power gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplifier {
    pub noise_quanta: f64,
    pub gain: f64,
}

impl Amplifier {
    pub fn new(noise_quanta: f64) -> Self {
        Amplifier { noise_quanta, gain: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_quanta >= 0.0 && self.noise_quanta.is_finite()) {
            return Err(Error::InvalidInput(format!("noise quanta {}", self.noise_quanta)));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidInput(format!("gain {}", self.gain)));
        }
        Ok(())
    }
}

/// Rejection sampler for the Husimi Q function of a truncated state, with a
/// circular Gaussian proposal of mean |α|² = `s`.
struct HusimiSampler {
    rho: DMatrix<C64>,
    levels: usize,
    s: f64,
    bound: f64,
}

impl HusimiSampler {
    fn new(rho: &DensityMatrix) -> Result<Self> {
        if rho.cutoff() > MAX_SAMPLING_CUTOFF {
            return Err(Error::UnsupportedState { cutoff: rho.cutoff() });
        }
        let levels = (0..rho.cutoff()).rev().find(|&n| rho.population(n) > 1e-14).unwrap_or(0) + 1;
        let s = 1.0 + rho.photon_number();
        let envelope = |x: f64| {
            let mut term = 1.0;
            let mut sum = 1.0;
            for n in 1..levels {
                term *= x / n as f64;
                sum += term;
            }
            s * (-x * (1.0 - 1.0 / s)).exp() * sum
        };
        let bound = (0..=20_000).map(|i| envelope(i as f64 * 0.005)).fold(0.0, f64::max) * 1.001;
        let rho = rho.matrix().view((0, 0), (levels, levels)).into_owned();
        Ok(HusimiSampler { rho, levels, s, bound })
    }

    fn ratio(&self, alpha: C64) -> f64 {
        let mut v = Vec::with_capacity(self.levels);
        let mut term = C64::new(1.0, 0.0);
        for n in 0..self.levels {
            if n > 0 {
                term *= alpha / (n as f64).sqrt();
            }
            v.push(term);
        }
        let mut q = 0.0;
        for i in 0..self.levels {
            for j in 0..self.levels {
                q += (v[i].conj() * self.rho[(i, j)] * v[j]).re;
            }
        }
        self.s * (-alpha.norm_sqr() * (1.0 - 1.0 / self.s)).exp() * q
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> C64 {
        loop {
            let alpha = gaussian(rng, self.s);
            if rng.random::<f64>() * self.bound <= self.ratio(alpha) {
                return alpha;
            }
        }
    }
}

/// Circular complex Gaussian with E|z|² = `mean_sq`.
fn gaussian<R: Rng>(rng: &mut R, mean_sq: f64) -> C64 {
    let sd = (mean_sq / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(sd * re, sd * im)
}

/// Stateless 64-bit mix of a master seed and a label, for independent sub-streams.
pub fn sub_seed(master: u64, label: u64) -> u64 {
    let mut z = master ^ label.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` single-shot records. Shots are drawn in fixed blocks, each with
/// its own ChaCha stream of `seed`, so the output is independent of threading.
pub fn synthesize_records(state: &SignalState, amp: &Amplifier, count: usize, seed: u64) -> Result<Vec<C64>> {
    amp.validate()?;
    if count == 0 {
        return Err(Error::InvalidInput("record count must be at least 1".into()));
    }
    let sampler = match state {
        SignalState::Density(rho) => Some(HusimiSampler::new(rho)?),
        SignalState::Coherent(_) => None,
    };
    let scale = amp.gain.sqrt();
    let blocks = count.div_ceil(SYNTH_BLOCK);
    let out: Vec<Vec<C64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let len = SYNTH_BLOCK.min(count - b * SYNTH_BLOCK);
            (0..len)
                .map(|_| {
                    let a = match (&sampler, state) {
                        (Some(q), _) => q.sample(&mut rng),
                        (None, SignalState::Coherent(alpha)) => alpha + gaussian(&mut rng, 1.0),
                        (None, SignalState::Density(_)) => unreachable!(),
                    };
                    (a + gaussian(&mut rng, amp.noise_quanta)) * scale
                })
                .collect()
        })
        .collect();
    Ok(out.concat())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Σ (S*)ⁿSᵐ over a slice, for every (n, m).
fn power_sums(records: &[C64]) -> Table {
    let mut t = [C64::new(0.0, 0.0); MOMENT_COUNT];
    for s in records {
        let mut pc = [C64::new(1.0, 0.0); MAX_ORDER + 1];
        let mut p = [C64::new(1.0, 0.0); MAX_ORDER + 1];
        for k in 1..=MAX_ORDER {
            pc[k] = pc[k - 1] * s.conj();
            p[k] = p[k - 1] * s;
        }
        for (n, m) in pairs() {
            t[moment_index(n, m)] += pc[n] * p[m];
        }
    }
    t
}

/// Removes the noise convolution order by order:
/// ⟨(S*)ⁿSᵐ⟩ = Σ C(n,i)C(m,j)⟨(a†)ⁱaʲ⟩⟨hⁿ⁻ⁱ(h†)ᵐ⁻ʲ⟩.
fn invert(signal: &Table, noise: &Table) -> Table {
    let mut a = [C64::new(0.0, 0.0); MOMENT_COUNT];
    for (n, m) in pairs() {
        let mut v = signal[moment_index(n, m)];
        for i in 0..=n {
            for j in 0..=m {
                if (i, j) != (n, m) {
                    v -= a[moment_index(i, j)] * noise[moment_index(n - i, m - j)] * (binomial(n, i) * binomial(m, j));
                }
            }
        }
        a[moment_index(n, m)] = v;
    }
    a
}

fn scaled(t: &Table, k: f64) -> Table {
    t.map(|z| z * k)
}

fn block_sums(records: &[C64], blocks: usize) -> Vec<(Table, usize)> {
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * records.len() / blocks;
            let hi = (b + 1) * records.len() / blocks;
            (power_sums(&records[lo..hi]), hi - lo)
        })
        .collect()
}

/// Signal-mode moments from signal records and signal-off reference records,
/// with jackknife standard errors over contiguous record blocks. With
/// `tolerance`, any standard error above it is an error.
pub fn extract_moments(signal: &[C64], reference: &[C64], tolerance: Option<f64>) -> Result<MomentSet> {
    if signal.is_empty() || reference.is_empty() {
        return Err(Error::InvalidInput("signal and reference records must be non-empty".into()));
    }
    let blocks = JACKKNIFE_BLOCKS.min(signal.len()).min(reference.len());
    let sb = block_sums(signal, blocks);
    let rb = block_sums(reference, blocks);
    let total = |bs: &[(Table, usize)]| {
        bs.iter().fold(([C64::new(0.0, 0.0); MOMENT_COUNT], 0usize), |(mut t, c), (b, n)| {
            for k in 0..MOMENT_COUNT {
                t[k] += b[k];
            }
            (t, c + n)
        })
    };
    let (st, sn) = total(&sb);
    let (rt, rn) = total(&rb);
    let estimate = invert(&scaled(&st, 1.0 / sn as f64), &scaled(&rt, 1.0 / rn as f64));

    let mut errors = [0.0; MOMENT_COUNT];
    if blocks > 1 {
        let leave_out: Vec<Table> = (0..blocks)
            .map(|b| {
                let mut s = st;
                let mut r = rt;
                for k in 0..MOMENT_COUNT {
                    s[k] -= sb[b].0[k];
                    r[k] -= rb[b].0[k];
                }
                invert(&scaled(&s, 1.0 / (sn - sb[b].1) as f64), &scaled(&r, 1.0 / (rn - rb[b].1) as f64))
            })
            .collect();
        let nb = blocks as f64;
        for k in 0..MOMENT_COUNT {
            let mean = leave_out.iter().map(|t| t[k]).sum::<C64>() / nb;
            let ss: f64 = leave_out.iter().map(|t| (t[k] - mean).norm_sqr()).sum();
            errors[k] = ((nb - 1.0) / nb * ss).sqrt();
        }
    } else {
        errors = [f64::INFINITY; MOMENT_COUNT];
    }
    let set = MomentSet::from_tables(&estimate, &errors, signal.len());
    if let Some(tol) = tolerance {
        if let Some(worst) = set.entries().iter().skip(1).map(|x| x.err).reduce(f64::max) {
            if !(worst <= tol) {
                return Err(Error::InsufficientRecords { err: worst, tol });
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct G2 {
    pub value: f64,
    pub err: f64,
}

/// g⁽²⁾ = ⟨a†a†aa⟩/⟨a†a⟩² with first-order error propagation.
pub fn g2(m: &MomentSet) -> Result<G2> {
    let (n, en) = (m.photon_number(), m.err(1, 1));
    if !(n > 3.0 * en) || n <= 0.0 {
        return Err(Error::UndefinedG2 { mean: n, err: en });
    }
    let (c, ec) = (m.get(2, 2).re, m.err(2, 2));
    let value = c / (n * n);
    let err = ((ec / (n * n)).powi(2) + (2.0 * value * en / n).powi(2)).sqrt();
    Ok(G2 { value, err })
}

/// Weighted least-squares gain making extracted ⟨a†a⟩ follow `target(θ)`.
pub fn calibrate_gain(sweep: &[(f64, MomentSet)], target: impl Fn(f64) -> f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (theta, m) in sweep {
        let t = target(*theta);
        let w = 1.0 / m.err(1, 1).max(1e-12).powi(2);
        num += w * m.photon_number() * t;
        den += w * t * t;
    }
    let g = num / den;
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::DegenerateData("gain calibration needs a photon-number signal".into()));
    }
    Ok(g)
}

/// χ² per degree of freedom of extracted ⟨a†a⟩ against `target`; `fitted`
/// parameters are subtracted from the degrees of freedom.
pub fn photon_number_chi2(sweep: &[(f64, MomentSet)], target: impl Fn(f64) -> f64, fitted: usize) -> f64 {
    let chi2: f64 = sweep
        .iter()
        .map(|(theta, m)| ((m.photon_number() - target(*theta)) / m.err(1, 1)).powi(2))
        .sum();
    chi2 / (sweep.len() - fitted) as f64
}

/// Records grouped into time bins with shared edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedRecords {
    pub edges_s: Vec<f64>,
    pub bins: Vec<Vec<C64>>,
}

/// Envelope fraction of the emitted power in each bin.
fn bin_fractions(tau: f64, edges: &[f64]) -> Vec<f64> {
    edges.windows(2).map(|w| (-w[0].max(0.0) / tau).exp() - (-w[1].max(0.0) / tau).exp()).collect()
}

/// Time-binned records of the emitted photon; bin k sees the photon with
/// probability equal to its share of the e^{−t/τ} power envelope.
pub fn synthesize_binned(
    params: &SourceParams,
    amp: &Amplifier,
    edges_s: &[f64],
    count: usize,
    seed: u64,
) -> Result<BinnedRecords> {
    params.validate()?;
    if edges_s.len() < 2 || edges_s.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::GridMismatch("bin edges must be increasing".into()));
    }
    let bins = bin_fractions(params.tau_s, edges_s)
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let state = params.attenuated(p).state(2)?;
            synthesize_records(&state.into(), amp, count, sub_seed(seed, k as u64))
        })
        .collect::<Result<_>>()?;
    Ok(BinnedRecords { edges_s: edges_s.to_vec(), bins })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerWaveform {
    pub t_s: Vec<f64>,
    pub width_s: Vec<f64>,
    /// Photons per bin.
    pub photons: Vec<f64>,
    pub err: Vec<f64>,
}

impl PowerWaveform {
    /// Photon rate per second in bin `k`.
    pub fn rate(&self, k: usize) -> f64 {
        self.photons[k] / self.width_s[k]
    }

    /// Integrated photon number with its standard error.
    pub fn total(&self) -> (f64, f64) {
        let s = self.photons.iter().sum();
        let e = self.err.iter().map(|e| e * e).sum::<f64>().sqrt();
        (s, e)
    }
}

fn mean_power(r: &[C64]) -> (f64, f64) {
    let n = r.len() as f64;
    let m = r.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let v = r.iter().map(|z| (z.norm_sqr() - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

/// Per-bin ⟨|S|²⟩ of the signal minus that of the reference.
pub fn power_waveform(signal: &BinnedRecords, reference: &BinnedRecords) -> Result<PowerWaveform> {
    if signal.edges_s != reference.edges_s || signal.bins.len() != reference.bins.len() {
        return Err(Error::GridMismatch("signal and reference use different time bins".into()));
    }
    if signal.bins.len() + 1 != signal.edges_s.len() {
        return Err(Error::GridMismatch(format!(
            "{} bins for {} edges",
            signal.bins.len(),
            signal.edges_s.len()
        )));
    }
    if signal.bins.iter().chain(&reference.bins).any(|b| b.is_empty()) {
        return Err(Error::InvalidInput("empty time bin".into()));
    }
    let mut w = PowerWaveform { t_s: vec![], width_s: vec![], photons: vec![], err: vec![] };
    for (k, e) in signal.edges_s.windows(2).enumerate() {
        let (s, es) = mean_power(&signal.bins[k]);
        let (r, er) = mean_power(&reference.bins[k]);
        w.t_s.push(0.5 * (e[0] + e[1]));
        w.width_s.push(e[1] - e[0]);
        w.photons.push(s - r);
        w.err.push(es.hypot(er));
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    /// Total photon number of the fitted envelope.
    pub amplitude: f64,
    pub tau_s: f64,
    pub tau_err_s: f64,
}

/// Weighted fit of bin contents to A·(e^{−t₀/τ} − e^{−t₁/τ}).
pub fn fit_decay(w: &PowerWaveform) -> Result<DecayFit> {
    if w.photons.len() < 3 {
        return Err(Error::DegenerateData("decay fit needs at least 3 bins".into()));
    }
    let edges: Vec<(f64, f64)> = w.t_s.iter().zip(&w.width_s).map(|(t, d)| (t - d / 2.0, t + d / 2.0)).collect();
    let sigma: Vec<f64> = w.err.iter().map(|e| e.max(1e-12)).collect();
    let residuals = |p: &[f64]| -> Result<Vec<f64>> {
        let tau = p[1] * 1e-9;
        Ok(edges
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| {
                let model = p[0] * ((-a.max(0.0) / tau).exp() - (-b.max(0.0) / tau).exp());
                (model - w.photons[k]) / sigma[k]
            })
            .collect())
    };
    let span = edges.last().map(|e| e.1).unwrap_or(1.0) - edges[0].0;
    let x0 = [w.total().0.max(1e-3), span / 3.0 * 1e9];
    let rep = optim::levenberg_marquardt(residuals, &x0, &LmOptions { ftol: 1e-14, xtol: 1e-12, ..LmOptions::default() })?;
    let jtj = rep.jacobian.transpose() * &rep.jacobian;
    let tau_err = jtj.try_inverse().map(|c| c[(1, 1)].max(0.0).sqrt() * 1e-9).unwrap_or(f64::INFINITY);
    if !(rep.params[1] > 0.0) {
        return Err(Error::NonConvergence { what: "decay fit".into(), iterations: rep.iterations });
    }
    Ok(DecayFit { amplitude: rep.params[0], tau_s: rep.params[1] * 1e-9, tau_err_s: tau_err })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Stop when the normalised objective improves by less than this per step.
    pub tolerance: f64,
    /// Standard errors below this are raised to it when weighting.
    pub error_floor: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { max_iterations: 200_000, tolerance: 1e-10, error_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub rho: DensityMatrix,
    pub iterations: usize,
    /// Weighted squared residual, normalised by the total weight.
    pub objective: f64,
}

/// Orthonormal basis of Hermitian matrices under Re tr(X†Y).
fn hermitian_basis(d: usize) -> Vec<DMatrix<C64>> {
    let mut basis = Vec::with_capacity(d * d);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..d {
        let mut e = DMatrix::zeros(d, d);
        e[(j, j)] = C64::new(1.0, 0.0);
        basis.push(e);
    }
    for j in 0..d {
        for k in j + 1..d {
            let mut e = DMatrix::zeros(d, d);
            e[(j, k)] = C64::new(r, 0.0);
            e[(k, j)] = C64::new(r, 0.0);
            basis.push(e);
            let mut e = DMatrix::zeros(d, d);
            e[(j, k)] = C64::new(0.0, r);
            e[(k, j)] = C64::new(0.0, -r);
            basis.push(e);
        }
    }
    basis
}

/// Euclidean projection onto {ρ ≥ 0, tr ρ = 1}: eigenvalues onto the simplex.
fn project_physical(h: &DMatrix<C64>) -> DMatrix<C64> {
    let herm = (h + h.adjoint()) * C64::new(0.5, 0.0);
    let e = SymmetricEigen::new(herm);
    let mut sorted: Vec<f64> = e.eigenvalues.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut shift = 0.0;
    let mut cum = 0.0;
    for (i, &l) in sorted.iter().enumerate() {
        cum += l;
        let t = (cum - 1.0) / (i + 1) as f64;
        if l - t > 0.0 {
            shift = t;
        }
    }
    let lam = e.eigenvalues.map(|l| C64::new((l - shift).max(0.0), 0.0));
    let p = &e.eigenvectors * DMatrix::from_diagonal(&lam) * e.eigenvectors.adjoint();
    (&p + p.adjoint()) * C64::new(0.5, 0.0)
}

pub fn mle_reconstruct(m: &MomentSet, cutoff: usize) -> Result<DensityMatrix> {
    mle_reconstruct_with(m, cutoff, &MleOptions::default()).map(|r| r.rho)
}

/// Gaussian maximum likelihood of the measured moments over physical states:
/// accelerated projected gradient with adaptive restart.
pub fn mle_reconstruct_with(m: &MomentSet, cutoff: usize, opts: &MleOptions) -> Result<MleResult> {
    if cutoff < 3 {
        return Err(Error::InvalidInput(format!("Fock cutoff {cutoff} below 3")));
    }
    if m.entries().iter().any(|x| !(x.err.is_finite() && x.re.is_finite() && x.im.is_finite())) {
        return Err(Error::InvalidInput("moments and errors must be finite".into()));
    }
    let used: Vec<&Moment> = m.entries().iter().filter(|x| x.n + x.m > 0 && x.n <= x.m).collect();
    let weights: Vec<f64> = used.iter().map(|x| 1.0 / x.err.max(opts.error_floor).powi(2)).collect();
    let wsum: f64 = weights.iter().sum();
    let basis = hermitian_basis(cutoff);
    let dim = basis.len();

    // objective ‖Bx − c‖² in the real coordinates x of ρ
    let mut b = DMatrix::<f64>::zeros(2 * used.len(), dim);
    let mut c = DVector::<f64>::zeros(2 * used.len());
    for (row, (x, w)) in used.iter().zip(&weights).enumerate() {
        let op = normal_operator(cutoff, x.n, x.m);
        let sw = (w / wsum).sqrt();
        for (col, e) in basis.iter().enumerate() {
            let t = (e * &op).trace();
            b[(2 * row, col)] = sw * t.re;
            b[(2 * row + 1, col)] = sw * t.im;
        }
        c[2 * row] = sw * x.re;
        c[2 * row + 1] = sw * x.im;
    }
    let lipschitz = 2.0 * b.clone().svd(false, false).singular_values.max().powi(2);
    let step = 1.0 / lipschitz.max(1e-12);
    let to_matrix = |x: &DVector<f64>| {
        basis.iter().zip(x.iter()).fold(DMatrix::<C64>::zeros(cutoff, cutoff), |acc, (e, &v)| acc + e * C64::new(v, 0.0))
    };
    let to_coords = |r: &DMatrix<C64>| DVector::from_iterator(dim, basis.iter().map(|e| (e.adjoint() * r).trace().re));
    let objective = |x: &DVector<f64>| (&b * x - &c).norm_squared();

    let mixed = DMatrix::<C64>::identity(cutoff, cutoff) * C64::new(1.0 / cutoff as f64, 0.0);
    let mut x = to_coords(&mixed);
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut f = objective(&x);
    for it in 1..=opts.max_iterations {
        let grad = 2.0 * b.transpose() * (&b * &y - &c);
        let z = to_coords(&project_physical(&to_matrix(&(&y - grad * step))));
        let fz = objective(&z);
        if fz > f {
            // restart momentum from the last accepted iterate
            y = x.clone();
            t = 1.0;
            continue;
        }
        let gain = f - fz;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &z + (&z - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = z;
        f = fz;
        if gain < opts.tolerance && it > 1 {
            let rho = DensityMatrix::new(project_physical(&to_matrix(&x)))?;
            return Ok(MleResult { rho, iterations: it, objective: f });
        }
    }
    Err(Error::NonConvergence { what: "maximum-likelihood reconstruction".into(), iterations: opts.max_iterations })
}

fn laguerre(k: usize, alpha: f64, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 1.0 + alpha - x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = ((2 * j + 1) as f64 + alpha - x) * cur - (j as f64 + alpha) * prev;
        prev = cur;
        cur = next / (j + 1) as f64;
    }
    cur
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WignerField {
    pub alphas: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    /// Some |α|² exceeds half the Fock cutoff.
    pub truncation_warning: bool,
}

/// W(α) = (2/π) Σₙ (−1)ⁿ ⟨n|D†(α) ρ D(α)|n⟩, summed in closed form through
/// the Laguerre expansion of the displaced parity matrix elements.
pub fn wigner(rho: &DensityMatrix, alphas: &[C64]) -> WignerField {
    let d = rho.cutoff();
    let fact: Vec<f64> = (0..d).scan(1.0, |f, k| {
        let v = *f;
        *f *= (k + 1) as f64;
        Some(v)
    }).collect();
    let values = alphas
        .iter()
        .map(|&alpha| {
            let x = 4.0 * alpha.norm_sqr();
            let g = (-2.0 * alpha.norm_sqr()).exp() * FRAC_2_PI;
            let mut w = 0.0;
            for n in 0..d {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                for m in n..d {
                    let k = m - n;
                    let amp = sign * (fact[n] / fact[m]).sqrt() * laguerre(n, k as f64, x) * g;
                    let z = (alpha.conj() * 2.0).powu(k as u32) * amp;
                    // ρ_mn |m⟩⟨n| plus its Hermitian partner
                    let term = rho.get(m, n) * z;
                    w += if k == 0 { term.re } else { 2.0 * term.re };
                }
            }
            w
        })
        .collect();
    let truncation_warning = alphas.iter().any(|a| a.norm_sqr() > d as f64 / 2.0);
    WignerField { alphas: alphas.iter().map(|a| [a.re, a.im]).collect(), values, truncation_warning }
}

/// Square grid of `n × n` points spanning `[−extent, extent]` in both quadratures.
pub fn square_grid(extent: f64, n: usize) -> Vec<C64> {
    let step = if n > 1 { 2.0 * extent / (n - 1) as f64 } else { 0.0 };
    (0..n * n)
        .map(|k| C64::new(-extent + step * (k % n) as f64, -extent + step * (k / n) as f64))
        .collect()
}

pub fn write_records_csv<W: Write>(w: W, records: &[C64]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["shot_index", "re", "im"])?;
    for (i, z) in records.iter().enumerate() {
        wr.write_record([i.to_string(), z.re.to_string(), z.im.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<C64>> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        shot_index: usize,
        re: f64,
        im: f64,
    }
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    for col in ["shot_index", "re", "im"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Schema { row: 1, msg: format!("missing column {col}") });
        }
    }
    rd.deserialize::<Row>()
        .enumerate()
        .map(|(i, row)| {
            row.map(|r| C64::new(r.re, r.im)).map_err(|e| Error::Schema { row: i + 2, msg: e.to_string() })
        })
        .collect()
}

/// Settings of the end-to-end photon routing demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonExperiment {
    pub thetas: Vec<f64>,
    pub records: usize,
    pub amplifier: Amplifier,
    /// Extra thermal quanta present only in the reference records.
    pub reference_extra_quanta: f64,
    pub source: SourceParams,
    pub cutoff: usize,
    pub seed: u64,
}

impl PhotonExperiment {
    pub fn new(seed: u64) -> Self {
        PhotonExperiment {
            thetas: (0..13).map(|k| k as f64 * std::f64::consts::PI / 12.0).collect(),
            records: 100_000,
            amplifier: Amplifier::new(2.0),
            reference_extra_quanta: 0.0,
            source: SourceParams::new(0.0),
            cutoff: DEFAULT_CUTOFF,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.amplifier.validate()?;
        self.source.validate()?;
        if self.thetas.len() < 2 {
            return Err(Error::InvalidInput("θ sweep needs at least two angles".into()));
        }
        if self.records < JACKKNIFE_BLOCKS {
            return Err(Error::InvalidInput(format!("need at least {JACKKNIFE_BLOCKS} records")));
        }
        if !(self.reference_extra_quanta >= 0.0) {
            return Err(Error::InvalidInput("reference extra quanta must be non-negative".into()));
        }
        if self.cutoff < 3 {
            return Err(Error::InvalidInput(format!("Fock cutoff {} below 3", self.cutoff)));
        }
        Ok(())
    }

    fn at(&self, theta: f64) -> SourceParams {
        SourceParams { theta, ..self.source }
    }

    /// η·sin²(θ/2), the photon number the gain is calibrated against.
    pub fn expected_photons(&self, theta: f64) -> f64 {
        self.at(theta).photon_number()
    }
}

/// Reconstruction of one routed state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateReport {
    pub theta: f64,
    pub moments: MomentSet,
    /// `None` when ⟨a†a⟩ is not resolved above its error.
    pub g2: Option<G2>,
    pub rho: DensityMatrix,
    pub truth: DensityMatrix,
    pub fidelity: f64,
    pub wigner_origin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhotonReport {
    pub gain: f64,
    /// Gain-normalised sweep moments.
    pub sweep: Vec<(f64, MomentSet)>,
    pub chi2_per_dof: f64,
    pub single_photon: StateReport,
    pub superposition: StateReport,
    pub vacuum: StateReport,
}

/// θ-sweep gain calibration followed by reconstruction of |1⟩, the θ = π/2
/// superposition and the vacuum, each against a common signal-off reference.
pub fn run_photon_experiment(exp: &PhotonExperiment) -> Result<PhotonReport> {
    exp.validate()?;
    let warm = Amplifier { noise_quanta: exp.amplifier.noise_quanta + exp.reference_extra_quanta, ..exp.amplifier };
    let reference = synthesize_records(&DensityMatrix::vacuum(exp.cutoff)?.into(), &warm, exp.records, sub_seed(exp.seed, 0))?;
    let measure = |state: &DensityMatrix, label: u64| -> Result<MomentSet> {
        let s = synthesize_records(&state.clone().into(), &exp.amplifier, exp.records, sub_seed(exp.seed, label))?;
        extract_moments(&s, &reference, None)
    };
    let raw: Vec<(f64, MomentSet)> = exp
        .thetas
        .iter()
        .enumerate()
        .map(|(k, &theta)| Ok((theta, measure(&exp.at(theta).state(exp.cutoff)?, 1 + k as u64)?)))
        .collect::<Result<_>>()?;
    let gain = calibrate_gain(&raw, |t| exp.expected_photons(t))?;
    let sweep: Vec<(f64, MomentSet)> = raw.iter().map(|(t, m)| (*t, m.normalized(gain))).collect();
    let chi2_per_dof = photon_number_chi2(&sweep, |t| exp.expected_photons(t), 1);

    let state = |truth: DensityMatrix, theta: f64, label: u64| -> Result<StateReport> {
        let moments = measure(&truth, label)?.normalized(gain);
        let rho = mle_reconstruct(&moments, exp.cutoff)?;
        Ok(StateReport {
            theta,
            g2: g2(&moments).ok(),
            fidelity: rho.fidelity(&truth)?,
            wigner_origin: wigner(&rho, &[C64::new(0.0, 0.0)]).values[0],
            moments,
            rho,
            truth,
        })
    };
    let half = std::f64::consts::FRAC_PI_2;
    let pi = std::f64::consts::PI;
    Ok(PhotonReport {
        gain,
        chi2_per_dof,
        single_photon: state(exp.at(pi).state(exp.cutoff)?, pi, 1000)?,
        superposition: state(exp.at(half).state(exp.cutoff)?, half, 1001)?,
        vacuum: state(DensityMatrix::vacuum(exp.cutoff)?, 0.0, 1002)?,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn ideal(theta: f64) -> SourceParams {
        SourceParams { theta, tau_s: 90e-9, efficiency: 1.0, dephasing: 1.0 }
    }

    fn fock(n: usize) -> SignalState {
        DensityMatrix::fock(n, DEFAULT_CUTOFF).unwrap().into()
    }

    fn vacuum() -> SignalState {
        fock(0)
    }

    fn records(state: &SignalState, n_h: f64, count: usize, seed: u64) -> Vec<C64> {
        synthesize_records(state, &Amplifier::new(n_h), count, seed).unwrap()
    }

    fn mean_sq(r: &[C64]) -> (f64, f64) {
        mean_power(r)
    }

    #[test]
    fn fock_one_moments() {
        let m = source_moments(&ideal(PI)).unwrap();
        assert!((m.photon_number() - 1.0).abs() < 1e-15);
        assert!(m.get(0, 1).norm() < 1e-15);
        assert_eq!(m.get(2, 2), C64::new(0.0, 0.0));
    }

    #[test]
    fn equal_superposition_moments() {
        let m = source_moments(&ideal(FRAC_PI_2)).unwrap();
        assert!((m.photon_number() - 0.5).abs() < 1e-15);
        assert!((m.get(0, 1).norm() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dephased_coherence() {
        let p = SourceParams { dephasing: 0.86, ..SourceParams::new(FRAC_PI_2) };
        let c = source_moments(&p).unwrap().get(0, 1).norm();
        assert!((c - 0.43).abs() < 0.005, "{c}");
        assert!((dephasing_for_coherence(0.43, 0.98) - DEFAULT_DEPHASING).abs() < 1e-4);
    }

    #[test]
    fn bad_source_rejected() {
        assert!(SourceParams::new(TAU).validate().is_err());
        assert!(SourceParams { efficiency: 1.1, ..SourceParams::new(1.0) }.validate().is_err());
        assert!(SourceParams { tau_s: 0.0, ..SourceParams::new(1.0) }.validate().is_err());
        assert!(DensityMatrix::fock(5, 5).is_err());
    }

    #[test]
    fn vacuum_records_sit_on_noise_floor() {
        let r = records(&vacuum(), 0.0, 100_000, 1);
        let (p, ep) = mean_sq(&r);
        assert!((p - 1.0).abs() < 5.0 * ep, "{p} ± {ep}");
        let var = r.iter().map(|z| (z.norm_sqr() - p).powi(2)).sum::<f64>() / r.len() as f64;
        assert!((var - 1.0).abs() < 0.03, "{var}");
        let mean = r.iter().sum::<C64>() / r.len() as f64;
        assert!(mean.norm() < 5.0 * (1.0 / r.len() as f64).sqrt(), "{mean}");
    }

    #[test]
    fn noise_contribution_scales_with_noise_quanta() {
        let n = 200_000;
        let base = mean_sq(&records(&vacuum(), 0.0, n, 3)).0;
        let one = mean_sq(&records(&vacuum(), 1.0, n, 4)).0 - base;
        let two = mean_sq(&records(&vacuum(), 2.0, n, 5)).0 - base;
        assert!((two / one / 2.0 - 1.0).abs() < 0.05, "{one} {two}");
    }

    #[test]
    fn coherent_amplitude_is_recovered() {
        let alpha = C64::new(0.8, -0.3);
        let s = records(&SignalState::Coherent(alpha), 2.0, 100_000, 6);
        let r = records(&vacuum(), 2.0, 100_000, 7);
        let m = extract_moments(&s, &r, None).unwrap();
        assert!((m.get(0, 1) - alpha).norm() < 5.0 * m.err(0, 1), "{} ± {}", m.get(0, 1), m.err(0, 1));
    }

    #[test]
    fn reference_against_reference_gives_zero() {
        let s = records(&vacuum(), 2.0, 50_000, 8);
        let r = records(&vacuum(), 2.0, 50_000, 9);
        let m = extract_moments(&s, &r, None).unwrap();
        for x in m.entries().iter().skip(1) {
            assert!(x.re.hypot(x.im) < 5.0 * x.err, "{x:?}");
        }
    }

    #[test]
    fn single_photon_moments_from_noisy_records() {
        let s = records(&fock(1), 2.0, 100_000, 42);
        let r = records(&vacuum(), 2.0, 100_000, sub_seed(42, 1));
        let m = extract_moments(&s, &r, None).unwrap();
        assert!((m.photon_number() - 1.0).abs() < 0.05, "{}", m.photon_number());
        assert!(m.get(0, 1).norm() < 0.03, "{}", m.get(0, 1));
        assert!(m.get(2, 2).norm() < 0.1, "{} ± {}", m.get(2, 2), m.err(2, 2));
    }

    #[test]
    fn theta_sweep_follows_emitter_model() {
        let r = records(&vacuum(), 2.0, 100_000, 10);
        for (k, theta) in [0.0, PI / 4.0, FRAC_PI_2, 3.0 * PI / 4.0, PI, 3.0 * FRAC_PI_2].into_iter().enumerate() {
            let p = SourceParams::new(theta);
            let s = records(&p.state(DEFAULT_CUTOFF).unwrap().into(), 2.0, 100_000, 11 + k as u64);
            let m = extract_moments(&s, &r, None).unwrap();
            let n = p.efficiency * (theta / 2.0).sin().powi(2);
            let c = p.dephasing * p.efficiency.sqrt() * theta.sin().abs() / 2.0;
            assert!((m.photon_number() - n).abs() < 5.0 * m.err(1, 1), "θ={theta} n={}", m.photon_number());
            assert!((m.get(0, 1).norm() - c).abs() < 5.0 * m.err(0, 1), "θ={theta} c={}", m.get(0, 1));
        }
    }

    #[test]
    fn insufficient_records_reported() {
        let s = records(&fock(1), 2.0, 1000, 12);
        let r = records(&vacuum(), 2.0, 1000, 13);
        assert!(matches!(extract_moments(&s, &r, Some(1e-3)), Err(Error::InsufficientRecords { .. })));
        assert!(extract_moments(&[], &r, None).is_err());
    }

    #[test]
    fn extraction_is_unbiased() {
        let truth = 1.0;
        let reps: Vec<f64> = (0..100)
            .map(|k| {
                let s = records(&fock(1), 1.0, 2000, sub_seed(100, k));
                let r = records(&vacuum(), 1.0, 2000, sub_seed(200, k));
                extract_moments(&s, &r, None).unwrap().photon_number()
            })
            .collect();
        let mean = reps.iter().sum::<f64>() / 100.0;
        let sd = (reps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert!((mean - truth).abs() < 2.0 * sd / 10.0, "{mean} ± {}", sd / 10.0);
    }

    #[test]
    fn ideal_g2_values() {
        let one = MomentSet::from_state(&DensityMatrix::fock(1, 5).unwrap());
        assert_eq!(g2(&one).unwrap().value, 0.0);
        assert_eq!(g2(&MomentSet::coherent(C64::new(1.5, 0.0))).unwrap().value, 1.0);
        assert_eq!(g2(&MomentSet::coherent(C64::new(0.3, -1.1))).unwrap().value, 1.0);
        assert!(matches!(g2(&MomentSet::from_state(&DensityMatrix::vacuum(5).unwrap())), Err(Error::UndefinedG2 { .. })));
    }

    #[test]
    fn synthesized_g2_statistics() {
        let r = records(&vacuum(), 2.0, 100_000, 14);
        let coh = records(&SignalState::Coherent(C64::new(1.2, 0.4)), 2.0, 100_000, 15);
        let g = g2(&extract_moments(&coh, &r, None).unwrap()).unwrap();
        assert!((g.value - 1.0).abs() < 3.0 * g.err, "{g:?}");
        let one = records(&fock(1), 2.0, 100_000, 16);
        let g = g2(&extract_moments(&one, &r, None).unwrap()).unwrap();
        assert!(g.value.abs() < 3.0 * g.err, "{g:?}");
    }

    #[test]
    fn warm_reference_pulls_g2_negative() {
        let s = records(&fock(1), 2.0, 100_000, 17);
        let clean = records(&vacuum(), 2.0, 100_000, 18);
        let warm = records(&vacuum(), 2.02, 100_000, 18);
        let g_clean = g2(&extract_moments(&s, &clean, None).unwrap()).unwrap().value;
        let g_warm = g2(&extract_moments(&s, &warm, None).unwrap()).unwrap().value;
        // ⟨a†a†aa⟩ shifts by −4ε⟨a†a⟩ + 2ε²
        assert!(g_warm < g_clean - 0.05, "{g_clean} {g_warm}");
    }

    #[test]
    fn gain_calibration_recovers_amplifier_gain() {
        let amp = Amplifier { noise_quanta: 2.0, gain: 37.0 };
        let r = synthesize_records(&vacuum(), &amp, 100_000, 19).unwrap();
        let sweep: Vec<(f64, MomentSet)> = [PI / 3.0, FRAC_PI_2, 2.0, PI]
            .into_iter()
            .enumerate()
            .map(|(k, theta)| {
                let p = SourceParams::new(theta);
                let s = synthesize_records(&p.state(5).unwrap().into(), &amp, 100_000, 20 + k as u64).unwrap();
                (theta, extract_moments(&s, &r, None).unwrap())
            })
            .collect();
        let target = |t: f64| 0.98 * (t / 2.0).sin().powi(2);
        let g = calibrate_gain(&sweep, target).unwrap();
        assert!((g / 37.0 - 1.0).abs() < 0.03, "{g}");
        let normalized: Vec<_> = sweep.iter().map(|(t, m)| (*t, m.normalized(g))).collect();
        assert!(photon_number_chi2(&normalized, target, 1) < 4.0);
    }

    #[test]
    fn synthesis_is_deterministic_and_thread_independent() {
        let a = records(&fock(1), 2.0, 10_000, 21);
        let b = records(&fock(1), 2.0, 10_000, 21);
        assert_eq!(a, b);
        let c = records(&fock(1), 2.0, SYNTH_BLOCK, 21);
        assert_eq!(&a[..SYNTH_BLOCK], &c[..]);
        assert_ne!(a, records(&fock(1), 2.0, 10_000, 22));
    }

    #[test]
    fn records_csv_round_trip() {
        let r = records(&fock(1), 1.0, 50, 23);
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &r).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("shot_index,re,im\n"));
        assert_eq!(read_records_csv(&buf[..]).unwrap(), r);
        let err = read_records_csv("shot_index,re\n0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { row: 1, ref msg } if msg.contains("im")));
    }

    fn edges() -> Vec<f64> {
        (0..=20).map(|k| k as f64 * 25e-9).collect()
    }

    #[test]
    fn routed_photon_decays_with_emission_time() {
        let p = SourceParams::new(PI);
        let amp = Amplifier::new(2.0);
        let s = synthesize_binned(&p, &amp, &edges(), 100_000, 24).unwrap();
        let r = synthesize_binned(&SourceParams::new(0.0), &amp, &edges(), 100_000, 25).unwrap();
        let w = power_waveform(&s, &r).unwrap();
        let fit = fit_decay(&w).unwrap();
        assert!((fit.tau_s / 90e-9 - 1.0).abs() < 0.05, "{fit:?}");
        let (total, err) = w.total();
        let expect = p.photon_number() * (1.0 - (-500e-9 / 90e-9f64).exp());
        assert!((total - expect).abs() < 5.0 * err, "{total} ± {err} vs {expect}");
    }

    #[test]
    fn off_port_leakage_integrates_below_isolation() {
        use crate::dynamics::flux_for_frequency;
        use crate::switchnet::SwitchSpec;
        let spec = SwitchSpec::device_default().unwrap();
        let on = flux_for_frequency(&spec.resonator_a, 7.2e9).unwrap();
        let s = spec.smatrix(on, on, 7.2e9).unwrap();
        let leak = s.s(2, 1).norm_sqr() / s.s(3, 1).norm_sqr();
        let p = SourceParams::new(PI);
        let coarse: Vec<f64> = (0..=5).map(|k| k as f64 * 100e-9).collect();
        let amp = Amplifier::new(0.0);
        let sig = synthesize_binned(&p.attenuated(leak), &amp, &coarse, 1_000_000, 26).unwrap();
        let r = synthesize_binned(&SourceParams::new(0.0), &amp, &coarse, 1_000_000, 27).unwrap();
        let (total, _) = power_waveform(&sig, &r).unwrap().total();
        assert!(total <= 1e-2 * p.photon_number(), "{total} (leak {leak:.2e})");
    }

    #[test]
    fn zero_signal_waveform_is_flat() {
        let amp = Amplifier::new(2.0);
        let a = synthesize_binned(&SourceParams::new(0.0), &amp, &edges(), 20_000, 28).unwrap();
        let b = synthesize_binned(&SourceParams::new(0.0), &amp, &edges(), 20_000, 29).unwrap();
        let w = power_waveform(&a, &b).unwrap();
        for (x, e) in w.photons.iter().zip(&w.err) {
            assert!(x.abs() < 5.0 * e);
        }
        let mut c = b.clone();
        c.edges_s[3] += 1e-9;
        assert!(matches!(power_waveform(&a, &c), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn mle_on_exact_moments() {
        let one = mle_reconstruct(&MomentSet::from_state(&DensityMatrix::fock(1, 5).unwrap()), 5).unwrap();
        assert!(one.population(1) >= 0.99, "{}", one.population(1));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = DensityMatrix::pure(&[C64::new(s, 0.0), C64::new(s, 0.0), 0.0.into(), 0.0.into(), 0.0.into()]).unwrap();
        let rec = mle_reconstruct(&MomentSet::from_state(&plus), 5).unwrap();
        assert!(rec.fidelity(&plus).unwrap() >= 0.99);
        let vac = mle_reconstruct(&MomentSet::from_state(&DensityMatrix::vacuum(5).unwrap()), 5).unwrap();
        assert!(vac.population(0) >= 0.999);
        assert!(mle_reconstruct(&MomentSet::coherent(0.0.into()), 2).is_err());
    }

    #[test]
    fn fidelity_of_orthogonal_and_equal_states() {
        let a = DensityMatrix::fock(1, 4).unwrap();
        let b = DensityMatrix::fock(2, 4).unwrap();
        assert!(a.fidelity(&b).unwrap().abs() < 1e-12);
        assert!((a.fidelity(&a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wigner_at_origin() {
        let z = [C64::new(0.0, 0.0)];
        let w0 = wigner(&DensityMatrix::vacuum(5).unwrap(), &z).values[0];
        let w1 = wigner(&DensityMatrix::fock(1, 5).unwrap(), &z).values[0];
        assert!((w0 - 2.0 / PI).abs() < 1e-15);
        assert!((w1 + 2.0 / PI).abs() < 1e-15);
    }

    /// (2/π) Σ (−1)ⁿ ⟨n|D†ρD|n⟩ with D = exp(αa† − α*a) in a 60-level space.
    fn displaced_parity(rho: &DensityMatrix, alpha: C64) -> f64 {
        let big = rho.embed(60).unwrap();
        let a = ladder(60);
        let d = (a.adjoint() * alpha - &a * alpha.conj()).exp();
        let r = d.adjoint() * big.matrix() * &d;
        (0..40).map(|n| if n % 2 == 0 { r[(n, n)].re } else { -r[(n, n)].re }).sum::<f64>() * 2.0 / PI
    }

    #[test]
    fn wigner_matches_displaced_parity() {
        let c = [C64::new(0.5, 0.1), C64::new(-0.3, 0.4), C64::new(0.2, -0.2), C64::new(0.1, 0.0), C64::new(0.0, 0.3)];
        let rho = DensityMatrix::pure(&c).unwrap();
        let alphas = [C64::new(0.7, -0.4), C64::new(-1.1, 0.3), C64::new(0.0, 1.3)];
        let w = wigner(&rho, &alphas);
        for (a, v) in alphas.iter().zip(&w.values) {
            assert!((v - displaced_parity(&rho, *a)).abs() < 1e-9, "{a}: {v} vs {}", displaced_parity(&rho, *a));
        }
        assert!(!w.truncation_warning);
        assert!(wigner(&rho, &[C64::new(1.7, 0.0)]).truncation_warning);
    }

    #[test]
    fn wigner_mean_is_coherence() {
        let p = SourceParams::new(FRAC_PI_2).state(5).unwrap();
        let grid = square_grid(4.0, 161);
        let w = wigner(&p, &grid);
        let da = (8.0f64 / 160.0).powi(2);
        let mean: C64 = grid.iter().zip(&w.values).map(|(a, v)| a * *v * da).sum();
        assert!((mean - p.moment(0, 1)).norm() < 1e-6, "{mean}");
    }

    #[test]
    fn wigner_normalised_on_radius_three() {
        let grid = square_grid(3.0, 241);
        let da = (6.0f64 / 240.0).powi(2);
        for rho in [
            DensityMatrix::vacuum(5).unwrap(),
            DensityMatrix::fock(1, 5).unwrap(),
            DensityMatrix::fock(4, 5).unwrap(),
            SourceParams::new(FRAC_PI_2).state(5).unwrap(),
        ] {
            let w = wigner(&rho, &grid);
            let total: f64 = grid.iter().zip(&w.values).filter(|(a, _)| a.norm() <= 3.0).map(|(_, v)| v * da).sum();
            assert!((total - 1.0).abs() < 0.01, "{total}");
        }
    }

    fn random_state(d: usize) -> impl Strategy<Value = DensityMatrix> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), d * d).prop_map(move |v| {
            let g = DMatrix::from_fn(d, d, |i, j| C64::new(v[i * d + j].0, v[i * d + j].1));
            let mut r = &g * g.adjoint();
            let tr = r.trace();
            r /= tr;
            DensityMatrix::new((&r + r.adjoint()) * C64::new(0.5, 0.0)).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn state_moments_match_source(theta in 0.0f64..TAU, eta in 0.0f64..=1.0, d in 0.0f64..=1.0) {
            let p = SourceParams { theta, tau_s: 90e-9, efficiency: eta, dephasing: d };
            let a = MomentSet::from_state(&p.state(5).unwrap());
            let b = source_moments(&p).unwrap();
            for (x, y) in a.entries().iter().zip(b.entries()) {
                prop_assert!((x.re - y.re).abs() < 1e-12 && (x.im - y.im).abs() < 1e-12);
            }
        }

        #[test]
        fn wigner_is_bounded(rho in random_state(5), re in -3.0f64..3.0, im in -3.0f64..3.0) {
            let w = wigner(&rho, &[C64::new(re, im)]).values[0];
            prop_assert!(w.abs() <= 2.0 / PI + 1e-9);
        }

        #[test]
        fn mle_output_is_physical(
            noise in proptest::collection::vec(-0.3f64..0.3, 2 * MOMENT_COUNT),
            errs in proptest::collection::vec(0.001f64..0.2, MOMENT_COUNT),
        ) {
            let base = MomentSet::from_state(&SourceParams::new(2.0).state(5).unwrap());
            let mut t = [C64::new(0.0, 0.0); MOMENT_COUNT];
            let mut e = [0.0; MOMENT_COUNT];
            for (k, x) in base.entries().iter().enumerate() {
                t[k] = C64::new(x.re + noise[2 * k], x.im + noise[2 * k + 1]);
                e[k] = errs[k];
            }
            let m = MomentSet::from_tables(&t, &e, 1000);
            let rho = mle_reconstruct(&m, 5).unwrap();
            prop_assert!(rho.validate().is_ok());
        }
    }
}
