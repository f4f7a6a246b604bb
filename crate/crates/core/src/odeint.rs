//! Adaptive Runge–Kutta–Fehlberg 4(5) integration, forward sensitivities and
//! cubic Hermite dense output.

use crate::dynamics::{jacobian, VectorField};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Upper bound on any accepted step.
    pub max_step: f64,
    /// Budget of attempted (accepted plus rejected) steps.
    pub max_steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_step: 1e-3,
            max_steps: 10_000_000,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.max_step > 0.0 && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "integration tolerances, max_step and max_steps must be positive".into(),
            ))
        }
    }
}

// Fehlberg tableau.
const C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const A2: [f64; 1] = [0.25];
const A3: [f64; 2] = [3.0 / 32.0, 9.0 / 32.0];
const A4: [f64; 3] = [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0];
const A5: [f64; 4] = [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0];
const A6: [f64; 5] = [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0];
const B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const BLOWUP_NORM: f64 = 1e100;

/// Right-hand side over flat state slices. Returns an error when evaluation fails.
pub trait Rhs {
    fn dim(&self) -> usize;
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F> Rhs for (usize, F)
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        (self.1)(t, y, dy)
    }
}

/// Accepted step record: time, state after any projection, and derivative there.
pub struct Knot<'a> {
    pub t: f64,
    pub y: &'a [f64],
    pub dy: &'a [f64],
}

/// Core RKF45 driver from `t0` to `t1 ≥ t0`.
///
/// `project` may modify the state after each accepted step (e.g. to restore
/// symmetry); `on_knot` sees the initial point and every accepted step.
pub fn integrate<R, P, K>(
    rhs: &mut R,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
    mut project: P,
    mut on_knot: K,
) -> Result<Vec<f64>>
where
    R: Rhs,
    P: FnMut(&mut [f64]),
    K: FnMut(Knot<'_>),
{
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(Error::InvalidParameter(format!(
            "integration interval must satisfy t1 >= t0 (got {t0} → {t1})"
        )));
    }
    let n = rhs.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y0.len(),
        });
    }
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { t: t0 });
    }
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 6];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let mut t = t0;

    rhs.eval(t, &y, &mut k[0]).map_err(|e| map_eval_error(e, t))?;
    on_knot(Knot { t, y: &y, dy: &k[0] });
    if t1 == t0 {
        return Ok(y);
    }

    let span = t1 - t0;
    let mut h = cfg.max_step.min(span);
    let mut attempts = 0usize;

    while t < t1 {
        if attempts >= cfg.max_steps {
            return Err(Error::StepLimitExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        attempts += 1;
        let last = t + h >= t1 || (t1 - (t + h)) <= 1e-12 * span;
        if last {
            h = t1 - t;
        }
        let min_step = 1e-14 * t.abs().max(span).max(1.0);
        if h < min_step {
            return Err(Error::NonFiniteState { t });
        }

        let stages_ok = (|| -> Result<()> {
            let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
            for (s, coeffs) in rows.iter().enumerate() {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in coeffs.iter().enumerate() {
                        acc += a * k[j][i];
                    }
                    stage[i] = y[i] + h * acc;
                }
                rhs.eval(t + C[s + 1] * h, &stage, &mut k[s + 1])?;
            }
            Ok(())
        })();

        match stages_ok {
            Ok(()) | Err(Error::NonFiniteEvaluation { .. }) => {}
            Err(other) => return Err(other),
        }
        let mut err = f64::INFINITY;
        let mut finite = stages_ok.is_ok();
        if finite {
            let mut acc = 0.0;
            for i in 0..n {
                let mut hi = 0.0;
                let mut lo = 0.0;
                for s in 0..6 {
                    hi += B5[s] * k[s][i];
                    lo += B4[s] * k[s][i];
                }
                y5[i] = y[i] + h * hi;
                let e = h * (hi - lo);
                let scale = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y5[i].abs());
                acc += (e / scale) * (e / scale);
            }
            err = (acc / n.max(1) as f64).sqrt();
            finite = err.is_finite() && y5.iter().all(|v| v.is_finite());
        }

        if !finite {
            // treat as an over-long step; repeated failure ends in NonFiniteState
            h *= MIN_FACTOR;
            continue;
        }

        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y.copy_from_slice(&y5);
            project(&mut y);
            if y.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_NORM) {
                return Err(Error::NonFiniteState { t });
            }
            rhs.eval(t, &y, &mut k[0]).map_err(|e| map_eval_error(e, t))?;
            on_knot(Knot { t, y: &y, dy: &k[0] });
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h = (h * factor).min(cfg.max_step);
        } else {
            let factor = (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
        }
    }
    Ok(y)
}

fn map_eval_error(e: Error, t: f64) -> Error {
    match e {
        Error::NonFiniteEvaluation { .. } => Error::NonFiniteState { t },
        other => other,
    }
}

struct FieldRhs<'a> {
    field: &'a VectorField,
    buf: Vector,
}

impl Rhs for FieldRhs<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self.buf.copy_from_slice(y);
        let d = self.field.eval(&self.buf, t)?;
        dy.copy_from_slice(d.as_slice());
        Ok(())
    }
}

/// `[t0, t1]` cut at the field's breakpoints strictly inside it.
fn pieces(field: &VectorField, t0: f64, t1: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![t0];
    cuts.extend(field.breakpoints().iter().copied().filter(|&b| b > t0 && b < t1));
    cuts.push(t1);
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// `integrate` restarted at every breakpoint of `field`.
fn integrate_pieces<R, K>(
    field: &VectorField,
    rhs: &mut R,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
    mut on_knot: K,
) -> Result<Vec<f64>>
where
    R: Rhs,
    K: FnMut(Knot<'_>),
{
    if !(t1 >= t0) {
        return integrate(rhs, y0, t0, t1, cfg, |_| {}, |_| {});
    }
    let mut y = y0.to_vec();
    for (i, (a, b)) in pieces(field, t0, t1).into_iter().enumerate() {
        y = integrate(rhs, &y, a, b, cfg, |_| {}, |k| {
            if i == 0 || k.t > a {
                on_knot(k)
            }
        })?;
    }
    Ok(y)
}

/// State transition `Σ_{(x0,t0)}(t1)`.
pub fn flow(field: &VectorField, x0: &Vector, t0: f64, t1: f64, cfg: &IntegrationConfig) -> Result<Vector> {
    let mut rhs = FieldRhs {
        field,
        buf: Vector::zeros(field.dim()),
    };
    let y = integrate_pieces(field, &mut rhs, x0.as_slice(), t0, t1, cfg, |_| {})?;
    Ok(Vector::from_vec(y))
}

struct SensitivityRhs<'a> {
    field: &'a VectorField,
    x: Vector,
    phi: Matrix,
}

impl Rhs for SensitivityRhs<'_> {
    fn dim(&self) -> usize {
        let n = self.field.dim();
        n + n * n
    }
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.field.dim();
        self.x.copy_from_slice(&y[..n]);
        self.phi.copy_from_slice(&y[n..]);
        let fx = self.field.eval(&self.x, t)?;
        let jac = jacobian(self.field, &self.x, t)?;
        let dphi = jac * &self.phi;
        dy[..n].copy_from_slice(fx.as_slice());
        dy[n..].copy_from_slice(dphi.as_slice());
        Ok(())
    }
}

/// State transition together with its sensitivity `Φ = ∂Σ(t1)/∂x0`, from the
/// variational equation `Φ̇ = ∂F/∂x · Φ`, `Φ(t0) = I`.
pub fn flow_sensitivity(
    field: &VectorField,
    x0: &Vector,
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
) -> Result<(Vector, Matrix)> {
    let n = field.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: x0.len(),
        });
    }
    let mut y0 = Vec::with_capacity(n + n * n);
    y0.extend_from_slice(x0.as_slice());
    y0.extend_from_slice(Matrix::identity(n, n).as_slice());
    let mut rhs = SensitivityRhs {
        field,
        x: Vector::zeros(n),
        phi: Matrix::zeros(n, n),
    };
    let y = integrate_pieces(field, &mut rhs, &y0, t0, t1, cfg, |_| {})?;
    Ok((
        Vector::from_column_slice(&y[..n]),
        Matrix::from_column_slice(n, n, &y[n..]),
    ))
}

/// Piecewise cubic Hermite interpolant of a vector-valued function.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolant {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    derivatives: Vec<Vec<f64>>,
}

impl Interpolant {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, derivatives: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() || times.len() != derivatives.len() {
            return Err(Error::InvalidParameter(
                "interpolant needs matching, non-empty knot arrays".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("knot times must be strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().chain(derivatives.iter()).any(|v| v.len() != dim) {
            return Err(Error::InvalidParameter("knot vectors differ in length".into()));
        }
        Ok(Self {
            times,
            values,
            derivatives,
        })
    }

    /// A constant function on `[t0, t1]`.
    pub fn constant(value: &[f64], t0: f64, t1: f64) -> Result<Self> {
        let zero = vec![0.0; value.len()];
        if t1 > t0 {
            Self::new(
                vec![t0, t1],
                vec![value.to_vec(), value.to_vec()],
                vec![zero.clone(), zero],
            )
        } else {
            Self::new(vec![t0], vec![value.to_vec()], vec![zero])
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn derivatives(&self) -> &[Vec<f64>] {
        &self.derivatives
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    fn domain_check(&self, t: f64) -> Result<f64> {
        let (a, b) = (self.start(), self.end());
        let slack = 1e-12 * (b - a).abs().max(1.0);
        if !(t >= a - slack && t <= b + slack) {
            return Err(Error::OutOfDomain { t, start: a, end: b });
        }
        Ok(t.clamp(a, b))
    }

    /// `Ok(i)` on exact knot hit, `Err(i)` for `t` inside `(tᵢ, tᵢ₊₁)`.
    fn locate(&self, t: f64) -> std::result::Result<usize, usize> {
        match self.times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => Ok(i),
            Err(i) => Err(i.saturating_sub(1).min(self.times.len().saturating_sub(2))),
        }
    }

    pub fn eval(&self, t: f64) -> Result<Vector> {
        let t = self.domain_check(t)?;
        match self.locate(t) {
            Ok(i) => Ok(Vector::from_column_slice(&self.values[i])),
            Err(i) => {
                let (t0, t1) = (self.times[i], self.times[i + 1]);
                let h = t1 - t0;
                let s = (t - t0) / h;
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                let (y0, y1) = (&self.values[i], &self.values[i + 1]);
                let (m0, m1) = (&self.derivatives[i], &self.derivatives[i + 1]);
                Ok(Vector::from_fn(self.dim(), |k, _| {
                    h00 * y0[k] + h10 * h * m0[k] + h01 * y1[k] + h11 * h * m1[k]
                }))
            }
        }
    }

    pub fn eval_derivative(&self, t: f64) -> Result<Vector> {
        let t = self.domain_check(t)?;
        if self.times.len() == 1 {
            return Ok(Vector::from_column_slice(&self.derivatives[0]));
        }
        match self.locate(t) {
            Ok(i) => Ok(Vector::from_column_slice(&self.derivatives[i])),
            Err(i) => {
                let (t0, t1) = (self.times[i], self.times[i + 1]);
                let h = t1 - t0;
                let s = (t - t0) / h;
                let s2 = s * s;
                let d00 = 6.0 * s2 - 6.0 * s;
                let d10 = 3.0 * s2 - 4.0 * s + 1.0;
                let d01 = -6.0 * s2 + 6.0 * s;
                let d11 = 3.0 * s2 - 2.0 * s;
                let (y0, y1) = (&self.values[i], &self.values[i + 1]);
                let (m0, m1) = (&self.derivatives[i], &self.derivatives[i + 1]);
                Ok(Vector::from_fn(self.dim(), |k, _| {
                    (d00 * y0[k] + d01 * y1[k]) / h + d10 * m0[k] + d11 * m1[k]
                }))
            }
        }
    }
}

/// Integrates and keeps every accepted step as a Hermite knot.
pub fn integrate_dense(
    field: &VectorField,
    x0: &Vector,
    t0: f64,
    t1: f64,
    cfg: &IntegrationConfig,
) -> Result<Interpolant> {
    if !(t1 > t0) {
        return Err(Error::InvalidParameter("dense integration needs t1 > t0".into()));
    }
    let mut rhs = FieldRhs {
        field,
        buf: Vector::zeros(field.dim()),
    };
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut derivs = Vec::new();
    integrate_pieces(field, &mut rhs, x0.as_slice(), t0, t1, cfg, |k| {
        times.push(k.t);
        values.push(k.y.to_vec());
        derivs.push(k.dy.to_vec());
    })?;
    Interpolant::new(times, values, derivs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn decay() -> VectorField {
        VectorField::linear(Matrix::from_element(1, 1, -1.0))
    }

    fn oscillator() -> VectorField {
        VectorField::linear(Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }

    #[test]
    fn zero_field_keeps_state() {
        let x0 = Vector::from_vec(vec![1.0, -2.0]);
        let cfg = IntegrationConfig::default();
        assert_eq!(flow(&VectorField::zero(2), &x0, 0.0, 1.0, &cfg).unwrap(), x0);
        let (x, phi) = flow_sensitivity(&VectorField::zero(2), &x0, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(x, x0);
        assert_eq!(phi, Matrix::identity(2, 2));
    }

    #[test]
    fn kinked_time_dependence_is_integrated_exactly() {
        // ẋ = |t − 0.3| has x(1) = (0.09 + 0.49) / 2
        let field = VectorField::new(1, Arc::new(|_x: &Vector, t| Vector::from_element(1, (t - 0.3).abs())))
            .with_breakpoints(vec![0.3, 2.0]);
        let cfg = IntegrationConfig::default();
        let x = flow(&field, &Vector::zeros(1), 0.0, 1.0, &cfg).unwrap();
        assert!((x[0] - 0.29).abs() < 1e-13, "{}", x[0]);
        let dense = integrate_dense(&field, &Vector::zeros(1), 0.0, 1.0, &cfg).unwrap();
        assert!(dense.times().contains(&0.3));
        assert!(dense.times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn exponential_decay() {
        let cfg = IntegrationConfig::default();
        let x = flow(&decay(), &Vector::from_element(1, 1.0), 0.0, 1.0, &cfg).unwrap();
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn oscillator_period_closure() {
        let cfg = IntegrationConfig::default();
        let x0 = Vector::from_vec(vec![1.0, 0.0]);
        let x = flow(&oscillator(), &x0, 0.0, 2.0 * std::f64::consts::PI, &cfg).unwrap();
        assert!((x - x0).norm() < 1e-6);
    }

    #[test]
    fn zero_length_interval() {
        let cfg = IntegrationConfig::default();
        let x0 = Vector::from_element(1, 3.0);
        assert_eq!(flow(&decay(), &x0, 0.5, 0.5, &cfg).unwrap(), x0);
        assert!(flow(&decay(), &x0, 1.0, 0.5, &cfg).is_err());
    }

    #[test]
    fn blow_up_is_typed() {
        // ẋ = x², escapes at t = 1 from x0 = 1
        let field = VectorField::new(1, Arc::new(|x: &Vector, _t| x.map(|v| v * v)));
        let cfg = IntegrationConfig::default();
        let err = flow(&field, &Vector::from_element(1, 1.0), 0.0, 2.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }), "{err:?}");
    }

    #[test]
    fn step_limit_is_typed() {
        let cfg = IntegrationConfig {
            max_steps: 10,
            ..Default::default()
        };
        let err = flow(&decay(), &Vector::from_element(1, 1.0), 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::StepLimitExceeded { .. }));
    }

    #[test]
    fn dense_output_matches_closed_form() {
        let cfg = IntegrationConfig::default();
        let it = integrate_dense(&decay(), &Vector::from_element(1, 1.0), 0.0, 1.0, &cfg).unwrap();
        assert!((it.eval(0.5).unwrap()[0] - (-0.5f64).exp()).abs() < 1e-6);
        for (t, y) in it.times().iter().zip(it.values()) {
            assert_eq!(it.eval(*t).unwrap()[0].to_bits(), y[0].to_bits());
        }
        assert!(it.eval(1.5).is_err());
        let c = integrate_dense(&VectorField::zero(2), &Vector::from_vec(vec![1.0, 2.0]), 0.0, 1.0, &cfg)
            .unwrap();
        assert_eq!(c.eval(0.37).unwrap(), Vector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn projection_hook_runs_after_each_step() {
        let mut rhs = (1usize, |_t: f64, _y: &[f64], dy: &mut [f64]| {
            dy[0] = 1.0;
            Ok(())
        });
        let cfg = IntegrationConfig::default();
        let mut calls = 0;
        let y = integrate(&mut rhs, &[0.0], 0.0, 0.01, &cfg, |y| {
            calls += 1;
            y[0] = y[0].min(0.005);
        }, |_| {})
        .unwrap();
        assert!(calls >= 10);
        assert_eq!(y[0], 0.005);
    }
}
