//! Linear network algebra: ABCD two-ports, n-port scattering matrices,
//! conversions between them, cascading and pairwise port interconnection.
//!
//! Port indices are zero-based everywhere except [`SMatrix::s`], which takes
//! the conventional one-based `S_ij` labels.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default reference impedance of every port.
pub const DEFAULT_Z_REF: f64 = 50.0;

const FREQ_RTOL: f64 = 1e-12;
const SINGULAR_TOL: f64 = 1e-14;

/// CODATA 2018 exact SI constants used across the crate.
#[derive(Debug, Clone, Copy)]
pub struct PhysicalConstants;

impl PhysicalConstants {
    pub const ELECTRON_CHARGE: f64 = 1.602_176_634e-19;
    pub const PLANCK: f64 = 6.626_070_15e-34;
    pub const REDUCED_PLANCK: f64 = Self::PLANCK / (2.0 * std::f64::consts::PI);
    /// Magnetic flux quantum h / 2e.
    pub const FLUX_QUANTUM: f64 = Self::PLANCK / (2.0 * Self::ELECTRON_CHARGE);
    /// Reduced flux quantum Φ0 / 2π = ħ / 2e.
    pub const REDUCED_FLUX_QUANTUM: f64 = Self::FLUX_QUANTUM / (2.0 * std::f64::consts::PI);
}

fn same_frequency(f1: f64, f2: f64) -> bool {
    (f1 - f2).abs() <= FREQ_RTOL * f1.abs().max(f2.abs()).max(1.0)
}

/// Two-port transfer (chain) matrix `[[a, b], [c, d]]` at one frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd {
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub d: C64,
    pub freq: f64,
}

impl Abcd {
    pub fn new(a: C64, b: C64, c: C64, d: C64, freq: f64) -> Self {
        Self { a, b, c, d, freq }
    }

    pub fn identity(freq: f64) -> Self {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        Self::new(one, zero, zero, one, freq)
    }

    /// Series impedance `z` between the two ports.
    pub fn series_impedance(z: C64, freq: f64) -> Self {
        let one = C64::new(1.0, 0.0);
        Self::new(one, z, C64::new(0.0, 0.0), one, freq)
    }

    /// Shunt admittance `y` to ground.
    pub fn shunt_admittance(y: C64, freq: f64) -> Self {
        let one = C64::new(1.0, 0.0);
        Self::new(one, C64::new(0.0, 0.0), y, one, freq)
    }

    pub fn determinant(&self) -> C64 {
        self.a * self.d - self.b * self.c
    }

    /// `self` followed by `next` (matrix product `self · next`).
    pub fn then(&self, next: &Abcd) -> Result<Abcd> {
        if !same_frequency(self.freq, next.freq) {
            return Err(Error::FrequencyMismatch(self.freq, next.freq));
        }
        Ok(Abcd {
            a: self.a * next.a + self.b * next.c,
            b: self.a * next.b + self.b * next.d,
            c: self.c * next.a + self.d * next.c,
            d: self.c * next.b + self.d * next.d,
            freq: self.freq,
        })
    }

    pub fn inverse(&self) -> Result<Abcd> {
        let det = self.determinant();
        if det.norm() < SINGULAR_TOL {
            return Err(Error::SingularNetwork("ABCD determinant vanishes".into()));
        }
        Ok(Abcd {
            a: self.d / det,
            b: -self.b / det,
            c: -self.c / det,
            d: self.a / det,
            freq: self.freq,
        })
    }

    pub fn max_abs_diff(&self, other: &Abcd) -> f64 {
        [
            (self.a - other.a).norm(),
            (self.b - other.b).norm(),
            (self.c - other.c).norm(),
            (self.d - other.d).norm(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Matrix product of `ms` in list order. The empty product is the identity
/// at DC (frequency 0).
pub fn cascade(ms: &[Abcd]) -> Result<Abcd> {
    let Some((first, rest)) = ms.split_first() else {
        return Ok(Abcd::identity(0.0));
    };
    rest.iter().try_fold(*first, |acc, m| acc.then(m))
}

/// n-port scattering matrix referenced to a real impedance at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SMatrix {
    s: DMatrix<C64>,
    z_ref: f64,
    freq: f64,
}

impl SMatrix {
    pub fn new(s: DMatrix<C64>, z_ref: f64, freq: f64) -> Result<Self> {
        if s.nrows() != s.ncols() || s.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "scattering matrix must be square and non-empty, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if !(z_ref > 0.0) {
            return Err(Error::InvalidInput(format!("reference impedance {z_ref} must be > 0")));
        }
        Ok(Self { s, z_ref, freq })
    }

    /// One-port termination with reflection coefficient `gamma`.
    pub fn reflector(gamma: C64, z_ref: f64, freq: f64) -> Self {
        Self { s: DMatrix::from_element(1, 1, gamma), z_ref, freq }
    }

    /// Ideal lossless through connection.
    pub fn through(z_ref: f64, freq: f64) -> Self {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        Self { s: DMatrix::from_row_slice(2, 2, &[zero, one, one, zero]), z_ref, freq }
    }

    pub fn ports(&self) -> usize {
        self.s.nrows()
    }

    pub fn z_ref(&self) -> f64 {
        self.z_ref
    }

    pub fn freq(&self) -> f64 {
        self.freq
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.s
    }

    /// Zero-based entry (row = outgoing port, column = incident port).
    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.s[(row, col)]
    }

    /// One-based `S_ij`.
    pub fn s(&self, i: usize, j: usize) -> C64 {
        self.s[(i - 1, j - 1)]
    }

    /// Largest entry of `|SᴴS − I|`.
    pub fn unitarity_error(&self) -> f64 {
        let n = self.ports();
        let g = self.s.adjoint() * &self.s;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - C64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    /// Largest entry of `|S − Sᵀ|`.
    pub fn reciprocity_error(&self) -> f64 {
        let n = self.ports();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.s[(i, j)] - self.s[(j, i)]).norm());
            }
        }
        worst
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.ports()).map(|j| self.s.column(j).norm()).collect()
    }

    /// Reorders ports: new port `k` is old port `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<SMatrix> {
        let n = self.ports();
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(Error::InvalidInput(format!(
                "permutation of length {} for a {n}-port",
                order.len()
            )));
        }
        for &p in order {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidInput(format!("invalid port permutation {order:?}")));
            }
        }
        let s = DMatrix::from_fn(n, n, |i, j| self.s[(order[i], order[j])]);
        Ok(SMatrix { s, z_ref: self.z_ref, freq: self.freq })
    }

    pub fn max_abs_diff(&self, other: &SMatrix) -> f64 {
        (&self.s - &other.s).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &SMatrix) -> Result<()> {
        if !same_frequency(self.freq, other.freq) {
            return Err(Error::FrequencyMismatch(self.freq, other.freq));
        }
        if (self.z_ref - other.z_ref).abs() > 1e-12 * self.z_ref {
            return Err(Error::ImpedanceMismatch(self.z_ref, other.z_ref));
        }
        Ok(())
    }
}

/// Two-port scattering matrix of `m` referenced to `z_ref` on both ports.
pub fn abcd_to_s(m: &Abcd, z_ref: f64) -> Result<SMatrix> {
    if !(z_ref > 0.0) {
        return Err(Error::InvalidInput(format!("reference impedance {z_ref} must be > 0")));
    }
    let (a, b, c, d) = (m.a, m.b, m.c, m.d);
    let den = a + b / z_ref + c * z_ref + d;
    if den.norm() < SINGULAR_TOL {
        return Err(Error::SingularNetwork(format!(
            "ABCD to S denominator vanishes at {} Hz",
            m.freq
        )));
    }
    let s11 = (a + b / z_ref - c * z_ref - d) / den;
    let s12 = 2.0 * (a * d - b * c) / den;
    let s21 = C64::new(2.0, 0.0) / den;
    let s22 = (-a + b / z_ref - c * z_ref + d) / den;
    Ok(SMatrix { s: DMatrix::from_row_slice(2, 2, &[s11, s12, s21, s22]), z_ref, freq: m.freq })
}

/// Inverse of [`abcd_to_s`]; fails when `S21` vanishes.
pub fn s_to_abcd(s: &SMatrix) -> Result<Abcd> {
    if s.ports() != 2 {
        return Err(Error::InvalidInput(format!("expected a two-port, got {} ports", s.ports())));
    }
    let z = s.z_ref;
    let (s11, s12, s21, s22) = (s.get(0, 0), s.get(0, 1), s.get(1, 0), s.get(1, 1));
    if s21.norm() < SINGULAR_TOL {
        return Err(Error::SingularNetwork("S21 vanishes; no ABCD representation".into()));
    }
    let one = C64::new(1.0, 0.0);
    let two_s21 = 2.0 * s21;
    Ok(Abcd {
        a: ((one + s11) * (one - s22) + s12 * s21) / two_s21,
        b: z * ((one + s11) * (one + s22) - s12 * s21) / two_s21,
        c: ((one - s11) * (one - s22) - s12 * s21) / (two_s21 * z),
        d: ((one - s11) * (one + s22) + s12 * s21) / two_s21,
        freq: s.freq,
    })
}

/// Joins port `port_a` of `net_a` to port `port_b` of `net_b`.
///
/// The result has `n_a + n_b − 2` ports: the remaining ports of `net_a` in
/// their original order, followed by the remaining ports of `net_b`.
pub fn connect(net_a: &SMatrix, port_a: usize, net_b: &SMatrix, port_b: usize) -> Result<SMatrix> {
    net_a.check_compatible(net_b)?;
    let (na, nb) = (net_a.ports(), net_b.ports());
    if port_a >= na {
        return Err(Error::PortOutOfRange { index: port_a, ports: na });
    }
    if port_b >= nb {
        return Err(Error::PortOutOfRange { index: port_b, ports: nb });
    }
    let n = na + nb;
    let mut s = DMatrix::zeros(n, n);
    s.view_mut((0, 0), (na, na)).copy_from(&net_a.s);
    s.view_mut((na, na), (nb, nb)).copy_from(&net_b.s);
    let joint = SMatrix { s, z_ref: net_a.z_ref, freq: net_a.freq };
    innerconnect(&joint, port_a, na + port_b)
}

/// Joins two ports `k` and `l` of the same network, closing a loop.
///
/// Remaining ports keep their relative order.
pub fn innerconnect(net: &SMatrix, k: usize, l: usize) -> Result<SMatrix> {
    let n = net.ports();
    for idx in [k, l] {
        if idx >= n {
            return Err(Error::PortOutOfRange { index: idx, ports: n });
        }
    }
    if k == l {
        return Err(Error::InvalidInput(format!("cannot connect port {k} to itself")));
    }
    let s = &net.s;
    let one = C64::new(1.0, 0.0);
    let (skk, sll, skl, slk) = (s[(k, k)], s[(l, l)], s[(k, l)], s[(l, k)]);
    let den = (one - skl) * (one - slk) - skk * sll;
    if den.norm() < 1e-12 {
        return Err(Error::SingularNetwork(format!(
            "resonant loop while joining ports {k} and {l} at {} Hz",
            net.freq
        )));
    }
    let keep: Vec<usize> = (0..n).filter(|&p| p != k && p != l).collect();
    let m = keep.len();
    let out = DMatrix::from_fn(m, m, |r, c| {
        let (i, j) = (keep[r], keep[c]);
        let num = s[(k, j)] * s[(i, l)] * (one - slk)
            + s[(l, j)] * s[(i, k)] * (one - skl)
            + s[(k, j)] * sll * s[(i, k)]
            + s[(l, j)] * skk * s[(i, l)];
        s[(i, j)] + num / den
    });
    Ok(SMatrix { s: out, z_ref: net.z_ref, freq: net.freq })
}

/// Block-diagonal union of independent networks; ports keep their order.
pub fn block_diagonal(nets: &[&SMatrix]) -> Result<SMatrix> {
    let first = nets
        .first()
        .ok_or_else(|| Error::InvalidInput("block_diagonal of zero networks".into()))?;
    let n: usize = nets.iter().map(|m| m.ports()).sum();
    let mut s = DMatrix::zeros(n, n);
    let mut at = 0;
    for m in nets {
        first.check_compatible(m)?;
        let k = m.ports();
        s.view_mut((at, at), (k, k)).copy_from(&m.s);
        at += k;
    }
    Ok(SMatrix { s, z_ref: first.z_ref, freq: first.freq })
}

/// Terminates ports `ports` of `net` in the multiport `load`, load port `k`
/// facing `ports[k]`. Equivalent to a sequence of [`connect`] and
/// [`innerconnect`] calls but done in one linear solve. The remaining ports
/// keep their relative order.
pub fn terminate(net: &SMatrix, ports: &[usize], load: &SMatrix) -> Result<SMatrix> {
    net.check_compatible(load)?;
    let n = net.ports();
    if ports.len() != load.ports() {
        return Err(Error::InvalidInput(format!(
            "{} ports terminated by a {}-port load",
            ports.len(),
            load.ports()
        )));
    }
    let mut used = vec![false; n];
    for &p in ports {
        if p >= n {
            return Err(Error::PortOutOfRange { index: p, ports: n });
        }
        if std::mem::replace(&mut used[p], true) {
            return Err(Error::InvalidInput(format!("port {p} terminated twice")));
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&p| !used[p]).collect();
    let (ni, ne) = (ports.len(), keep.len());
    let s = &net.s;
    let s_ii = DMatrix::from_fn(ni, ni, |r, c| s[(ports[r], ports[c])]);
    let s_ie = DMatrix::from_fn(ni, ne, |r, c| s[(ports[r], keep[c])]);
    let s_ei = DMatrix::from_fn(ne, ni, |r, c| s[(keep[r], ports[c])]);
    let s_ee = DMatrix::from_fn(ne, ne, |r, c| s[(keep[r], keep[c])]);
    // incident on the terminated ports: a_i = L (S_ie a_e + S_ii a_i)
    let lhs = DMatrix::<C64>::identity(ni, ni) - &load.s * &s_ii;
    let rhs = &load.s * &s_ie;
    let lu = lhs.lu();
    if lu.determinant().norm() < 1e-12 {
        return Err(Error::SingularNetwork(format!("resonant loop while terminating ports at {} Hz", net.freq)));
    }
    let a_i = lu.solve(&rhs).ok_or_else(|| Error::SingularNetwork("terminate solve failed".into()))?;
    Ok(SMatrix { s: s_ee + s_ei * a_i, z_ref: net.z_ref, freq: net.freq })
}

/// Scattering matrix with named ports, for assembling circuits without
/// tracking indices through successive eliminations.
#[derive(Debug, Clone)]
pub struct NamedNetwork {
    net: SMatrix,
    names: Vec<String>,
}

impl NamedNetwork {
    pub fn new(net: SMatrix, names: &[&str]) -> Result<Self> {
        if names.len() != net.ports() {
            return Err(Error::InvalidInput(format!(
                "{} names for a {}-port",
                names.len(),
                net.ports()
            )));
        }
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        check_unique(&names)?;
        Ok(Self { net, names })
    }

    pub fn port(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("no port named {name:?}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Joins `port` of `self` to `other_port` of `other`.
    pub fn join(&self, port: &str, other: &NamedNetwork, other_port: &str) -> Result<Self> {
        let (i, j) = (self.port(port)?, other.port(other_port)?);
        let net = connect(&self.net, i, &other.net, j)?;
        let names: Vec<String> = self
            .names
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .chain(other.names.iter().enumerate().filter(|&(k, _)| k != j))
            .map(|(_, n)| n.clone())
            .collect();
        check_unique(&names)?;
        Ok(Self { net, names })
    }

    /// Joins two ports of the same network.
    pub fn close(&self, a: &str, b: &str) -> Result<Self> {
        let (i, j) = (self.port(a)?, self.port(b)?);
        let net = innerconnect(&self.net, i, j)?;
        let names = self
            .names
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i && k != j)
            .map(|(_, n)| n.clone())
            .collect();
        Ok(Self { net, names })
    }

    /// Scattering parameter from port `from` to port `to`.
    pub fn get(&self, to: &str, from: &str) -> Result<C64> {
        Ok(self.net.get(self.port(to)?, self.port(from)?))
    }

    /// The scattering matrix with ports in the given name order.
    pub fn ordered(&self, names: &[&str]) -> Result<SMatrix> {
        let order = names.iter().map(|n| self.port(n)).collect::<Result<Vec<_>>>()?;
        self.net.permuted(&order)
    }
}

fn check_unique(names: &[String]) -> Result<()> {
    for (k, n) in names.iter().enumerate() {
        if names[..k].contains(n) {
            return Err(Error::InvalidInput(format!("duplicate port name {n:?}")));
        }
    }
    Ok(())
}
