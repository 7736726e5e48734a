//! Central finite-difference gradient verification.
//!
//! The numeric side never looks at the backward pass: it re-evaluates the
//! forward closure on perturbed copies of the inputs. A NaN met anywhere
//! (forward value, analytic gradient, or difference quotient) is recorded
//! as a diagnostic failure instead of panicking.

use ndarray::Array2;

use super::{AutodiffError, Tape, Value};

/// Relative-error floor; errors are measured against
/// `max(|analytic|, |numeric|, EPS_FLOOR)`.
pub const EPS_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// One entry where analytic and numeric gradients disagree (or a NaN was met).
#[derive(Debug, Clone)]
pub struct Discrepancy {
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries; NaN when a NaN was met.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Entries exceeding the tolerance passed to [`GradCheckReport::passes`].
    pub worst: Vec<Discrepancy>,
    pub nan_detected: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.nan_detected && self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(EPS_FLOOR)
}

/// Evaluates `f` once and returns the scalar root value.
fn eval_scalar<F>(f: &F, inputs: &[Array2<f64>]) -> Result<f64, AutodiffError>
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    let tape = Tape::new();
    let vars: Vec<Value> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    let (r, c) = out.shape();
    if (r, c) != (1, 1) {
        return Err(AutodiffError::NonScalarRoot(r, c));
    }
    Ok(out.scalar_value())
}

/// Central-difference gradients of `f` with respect to every input entry.
pub fn numeric_grads<F>(
    f: &F,
    inputs: &[Array2<f64>],
    step: f64,
) -> Result<Vec<Array2<f64>>, AutodiffError>
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut gk = Array2::zeros(inputs[k].dim());
        for i in 0..inputs[k].nrows() {
            for j in 0..inputs[k].ncols() {
                let orig = inputs[k][(i, j)];
                work[k][(i, j)] = orig + step;
                let plus = eval_scalar(f, &work)?;
                work[k][(i, j)] = orig - step;
                let minus = eval_scalar(f, &work)?;
                work[k][(i, j)] = orig;
                gk[(i, j)] = (plus - minus) / (2.0 * step);
            }
        }
        out.push(gk);
    }
    Ok(out)
}

/// Analytic gradients of `f` via one backward pass. Inputs the closure never
/// touches get all-zero gradients.
pub fn analytic_grads<F>(
    f: &F,
    inputs: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>, AutodiffError>
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    let tape = Tape::new();
    let vars: Vec<Value> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&tape, &vars);
    out.backward()?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Array2::zeros(x.dim())))
        .collect())
}

/// Entry-wise comparison of two gradient sets.
pub fn compare(analytic: &[Array2<f64>], numeric: &[Array2<f64>], tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient set size mismatch");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: Vec::new(),
        nan_detected: false,
    };
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.dim(), n.dim(), "gradient shape mismatch for input {k}");
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let (av, nv) = (a[(i, j)], n[(i, j)]);
                report.checked += 1;
                if !av.is_finite() || !nv.is_finite() {
                    report.nan_detected = true;
                    report.max_rel_err = f64::NAN;
                    report.worst.push(Discrepancy {
                        input: k,
                        row: i,
                        col: j,
                        analytic: av,
                        numeric: nv,
                        rel_err: f64::NAN,
                    });
                    continue;
                }
                let e = rel_err(av, nv);
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                }
                if e > tol {
                    report.worst.push(Discrepancy {
                        input: k,
                        row: i,
                        col: j,
                        analytic: av,
                        numeric: nv,
                        rel_err: e,
                    });
                }
            }
        }
    }
    report
}

/// Checks analytic gradients of `f` against central differences.
///
/// `f` must be a deterministic pure function of its inputs; it is re-run
/// roughly `2 * total_entries` times.
pub fn gradcheck<F>(
    f: &F,
    inputs: &[Array2<f64>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    let analytic = analytic_grads(f, inputs)?;
    let numeric = numeric_grads(f, inputs, step)?;
    Ok(compare(&analytic, &numeric, tol))
}
