//! Central finite-difference verification of tape gradients.

use super::store::{GradSink, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// The input-gradient check does not care about parameter gradients; any the
/// probed function produces are dropped.
struct NullSink;

impl GradSink for NullSink {
    fn accumulate(&mut self, _id: ParamId, _delta: &Tensor) -> Result<()> {
        Ok(())
    }
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences with step `h`. Returns the worst relative error
/// `|analytic − fd| / max(1, |fd|)` over all input coordinates. The builder
/// must be deterministic.
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone())?;
        let loss = build(&mut tape, v)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone())?;
    let loss = build(&mut tape, v)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let grads = tape.backward(loss, &mut NullSink)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite finite difference at coordinate {i}"
            )));
        }
        let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference check over every coordinate of every parameter in the
/// store. The builder must construct the same scalar loss for the same
/// parameter values. Returns the worst relative error.
pub fn grad_check_params<F>(build: F, store: &mut ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    tape.backward(loss, store)?;

    let analytic: Vec<Tensor> = store.ids().map(|id| store.grad(id).clone()).collect();
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (slot, &id) in ids.iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.value(loss).item()?
            };
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = {
                let mut tape = Tape::new();
                let loss = build(&mut tape, store)?;
                tape.value(loss).item()?
            };
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[slot].data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
