//! Small numerical toolbox shared by the fitting and search code:
//! Levenberg-Marquardt least squares, Nelder-Mead simplex minimisation and
//! bracketed one-dimensional searches.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Minimises `f` on `[lo, hi]` assuming unimodality. Returns `(x, f(x))`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, xtol: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > xtol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // the midpoint can lose to an interior probe on flat plateaus
    [(x, fx), (c, fc), (d, fd)]
        .into_iter()
        .fold((x, fx), |best, p| if p.1 < best.1 { p } else { best })
}

/// Brent's minimiser (golden section with parabolic steps) on `[lo, hi]`.
/// Returns `(x, f(x))`.
pub fn brent_min<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, xtol: f64) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let xm = 0.5 * (a + b);
        let tol1 = xtol + f64::EPSILON.sqrt() * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Root of `f` in `[lo, hi]` by bisection; `f(lo)` and `f(hi)` must differ in sign.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, xtol: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::InvalidInput(format!(
            "bisection bracket [{lo}, {hi}] does not straddle a root"
        )));
    }
    while (b - a).abs() > xtol {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Grid scan of `f` on `[lo, hi]` followed by golden-section refinement of
/// the best grid point. Returns `(x, f(x))` of the maximum, or `None` when
/// the best grid point sits on the bracket edge.
pub fn scan_maximum<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    points: usize,
    xtol: f64,
) -> Option<(f64, f64)> {
    let n = points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let (mut best_i, mut best_v) = (0, f64::NEG_INFINITY);
    for i in 0..n {
        let v = f(lo + step * i as f64);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    if best_i == 0 || best_i == n - 1 {
        return None;
    }
    let a = lo + step * (best_i - 1) as f64;
    let b = lo + step * (best_i + 1) as f64;
    let (x, neg) = golden_section_min(|x| -f(x), a, b, xtol);
    Some((x, -neg))
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which the fit is considered converged.
    pub ftol: f64,
    /// Relative step size below which the fit is considered converged.
    pub xtol: f64,
    pub initial_damping: f64,
    /// Finite-difference step relative to `max(|x_i|, scale_i)`.
    pub fd_step: f64,
    /// Use central differences (two evaluations per parameter).
    pub central_differences: bool,
    /// Typical magnitude of each parameter; guards finite differences near zero.
    pub scales: Option<Vec<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-15,
            xtol: 1e-12,
            initial_damping: 1e-3,
            fd_step: 1e-7,
            central_differences: true,
            scales: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Euclidean norm of the final residual vector.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Residual norm after each accepted step, starting with the initial guess.
    pub history: Vec<f64>,
    /// Jacobian at the solution (rows = residuals).
    pub jacobian: DMatrix<f64>,
}

impl LmReport {
    /// Ratio of largest to smallest singular value of the column-normalised Jacobian.
    pub fn condition_number(&self) -> f64 {
        let mut j = self.jacobian.clone();
        for mut col in j.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        let sv = j.singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

fn jacobian<F>(f: &mut F, x: &[f64], r0: &[f64], opts: &LmOptions) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = r0.len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let scale = opts.scales.as_ref().map_or(0.0, |s| s[k]);
        let base = x[k].abs().max(scale);
        let h = opts.fd_step * if base > 0.0 { base } else { 1.0 };
        if opts.central_differences {
            xp[k] = x[k] + h;
            let rp = f(&xp)?;
            xp[k] = x[k] - h;
            let rm = f(&xp)?;
            for i in 0..m {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        } else {
            xp[k] = x[k] + h;
            let rp = f(&xp)?;
            for i in 0..m {
                jac[(i, k)] = (rp[i] - r0[i]) / h;
            }
        }
        xp[k] = x[k];
    }
    Ok(jac)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Levenberg-Marquardt minimisation of `Σ r_i(x)²` with Marquardt diagonal
/// scaling and a finite-difference Jacobian.
///
/// The residual function must return a vector of fixed length. Every accepted
/// step strictly decreases the cost, so `history` is non-increasing.
pub fn levenberg_marquardt<F>(mut f: F, x0: &[f64], opts: &LmOptions) -> Result<LmReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = f(&x)?;
    if r.len() < n {
        return Err(Error::DegenerateData(format!(
            "{} residuals for {} parameters",
            r.len(),
            n
        )));
    }
    let mut cost = sum_sq(&r);
    let mut history = vec![cost.sqrt()];
    let mut lambda = opts.initial_damping;
    let mut jac = jacobian(&mut f, &x, &r, opts)?;

    for iter in 1..=opts.max_iterations {
        if cost == 0.0 {
            return Ok(finish(x, r, iter - 1, history, jac));
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * (1.0 + jtj[(k, k)]));
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => match a.lu().solve(&(-&grad)) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi + si).collect();
            let rt = match f(&trial) {
                Ok(rt) if rt.iter().all(|v| v.is_finite()) => rt,
                _ => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let ct = sum_sq(&rt);
            if ct < cost {
                let step_norm = step.norm();
                let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel_drop = (cost - ct) / cost;
                x = trial;
                r = rt;
                cost = ct;
                history.push(cost.sqrt());
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_drop < opts.ftol || step_norm < opts.xtol * (x_norm + opts.xtol) {
                    let jac = jacobian(&mut f, &x, &r, opts)?;
                    return Ok(finish(x, r, iter, history, jac));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left: stationary point
            return Ok(finish(x, r, iter, history, jac));
        }
        jac = jacobian(&mut f, &x, &r, opts)?;
    }
    Err(Error::NonConvergence {
        what: format!("Levenberg-Marquardt (residual norm {:.3e})", cost.sqrt()),
        iterations: opts.max_iterations,
    })
}

fn finish(x: Vec<f64>, r: Vec<f64>, iterations: usize, history: Vec<f64>, jacobian: DMatrix<f64>) -> LmReport {
    let residual_norm = sum_sq(&r).sqrt();
    LmReport { params: x, residuals: r, residual_norm, iterations, history, jacobian }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder-Mead minimisation from `x0` with an axis-aligned initial simplex of
/// edge `step`. Converges when every vertex lies within `xtol` of the best.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: f64,
    xtol: f64,
    max_iterations: usize,
) -> Result<SimplexResult> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for iter in 0..max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter <= xtol {
            return Ok(SimplexResult { x: simplex[0].clone(), value: values[0], iterations: iter });
        }

        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };

        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=n {
            let v: Vec<f64> = simplex[i].iter().zip(&simplex[0]).map(|(a, b)| b + 0.5 * (a - b)).collect();
            values[i] = f(&v);
            simplex[i] = v;
        }
    }
    Err(Error::NonConvergence { what: "Nelder-Mead simplex".into(), iterations: max_iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden_section_min(|x| (x - 1.3).powi(2) + 2.0, -4.0, 5.0, 1e-10);
        // flat to machine precision within ~sqrt(eps)
        assert!((x - 1.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bisect_requires_sign_change() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!(bisect(|x| x * x + 1.0, 0.0, 2.0, 1e-6).is_err());
    }

    #[test]
    fn scan_rejects_edge_maximum() {
        assert!(scan_maximum(|x| x, 0.0, 1.0, 11, 1e-9).is_none());
        let (x, _) = scan_maximum(|x| -(x - 0.42).powi(2), 0.0, 1.0, 11, 1e-10).unwrap();
        assert!((x - 0.42).abs() < 1e-8);
    }

    #[test]
    fn lm_fits_exponential_exactly() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.5 * (-1.7 * t).exp() + 0.3).collect();
        let rep = levenberg_marquardt(
            |p| Ok(ts.iter().zip(&ys).map(|(t, y)| p[0] * (-p[1] * t).exp() + p[2] - y).collect()),
            &[1.0, 1.0, 0.0],
            &LmOptions::default(),
        )
        .unwrap();
        assert!((rep.params[0] - 2.5).abs() < 1e-9);
        assert!((rep.params[1] - 1.7).abs() < 1e-9);
        assert!(rep.residual_norm < 1e-10);
        assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lm_rejects_underdetermined() {
        let r = levenberg_marquardt(|p| Ok(vec![p[0] - p[1]]), &[1.0, 2.0], &LmOptions::default());
        assert!(matches!(r, Err(Error::DegenerateData(_))));
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let res = nelder_mead(
            |v| (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            1e-9,
            5000,
        )
        .unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        assert!(nelder_mead(|v| v[0], &[0.0], 1.0, 1e-9, 10).is_err());
    }
}
