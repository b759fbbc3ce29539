//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward function, so it stays
//! independent of the backward rules it is checking.

use super::{ParamStore, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backward gradients of `loss_fn` against central differences
/// with step `h` for every scalar of every parameter in `store`.
pub fn check_gradients<E, F>(store: &ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&Tape, &ParamStore) -> Result<Var, E>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let t = Tape::no_grad();
        let l = loss_fn(&t, s)?;
        Ok(t.item(l)?)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = store.clone();
    for (id, p) in store.iter() {
        let analytic = grads
            .param(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{}[{j}] analytic={} numeric={}",
                    p.name, analytic[j], numeric
                );
            }
        }
    }
    Ok(report)
}
