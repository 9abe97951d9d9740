//! Target value vectors for edits.
//!
//! For an input whose residual stream enters layer ℓ as `h`, the solver looks
//! for the FFN output `v` at ℓ that drives the model output to `target`:
//!
//! ```text
//! L(v) = ‖F_ℓ(h + v) − target‖² + γ‖v − v_init‖²
//! ```
//!
//! where `F_ℓ` is blocks ℓ+1..L and `v_init = W_ℓ·σ(A_ℓ·h)` is the unedited
//! value. Plain gradient descent with step halving on any increase.

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::numerics::{dot, norm};
use crate::toy_model::ToyModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueSolveOptions {
    pub max_iters: usize,
    pub step_size: f64,
    /// γ, the pull towards the unedited value.
    pub decay: f64,
    pub grad_tol: f64,
    pub target_tol: f64,
}

impl Default for ValueSolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_size: 0.05,
            decay: 1e-3,
            grad_tol: 1e-7,
            target_tol: 1e-6,
        }
    }
}

impl ValueSolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(EditError::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(EditError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(EditError::InvalidConfig("decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Last layer: the minimiser is available in closed form.
    ClosedForm,
    GradTol,
    TargetTol,
    MaxIters,
    /// The step was halved below machine resolution without progress.
    StepUnderflow,
}

#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub value: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters: usize,
    pub termination: Termination,
}

/// Loss and exact gradient of `L(v)` by reverse-mode through blocks ℓ+1..L.
pub fn value_loss_grad(
    model: &ToyModel,
    layer: usize,
    h: &[f64],
    v: &[f64],
    target: &[f64],
    decay: f64,
    v_init: &[f64],
) -> Result<(f64, Vec<f64>)> {
    model.check_layer(layer)?;
    let d = model.d_model();
    for (name, len) in [
        ("residual", h.len()),
        ("value", v.len()),
        ("target", target.len()),
        ("initial value", v_init.len()),
    ] {
        if len != d {
            return Err(EditError::DimensionMismatch(format!(
                "{name} of length {len}, model width {d}"
            )));
        }
    }

    let act = model.activation();
    let mut state: Vec<f64> = h.iter().zip(v).map(|(a, b)| a + b).collect();
    let mut pre_acts = Vec::with_capacity(model.num_layers() - layer - 1);
    for l in (layer + 1)..model.num_layers() {
        let (pre, key) = model.block_key(l, &state);
        let out = model.down_proj(l).matvec(&key)?;
        for (s, o) in state.iter_mut().zip(&out) {
            *s += o;
        }
        pre_acts.push(pre);
    }

    let resid: Vec<f64> = state.iter().zip(target).map(|(s, t)| s - t).collect();
    let anchor: Vec<f64> = v.iter().zip(v_init).map(|(a, b)| a - b).collect();
    let loss = dot(&resid, &resid) + decay * dot(&anchor, &anchor);

    let mut grad: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    for (l, pre) in ((layer + 1)..model.num_layers()).zip(&pre_acts).rev() {
        let mut back = model.down_proj(l).t_matvec(&grad)?;
        for (b, &z) in back.iter_mut().zip(pre) {
            *b *= act.derivative(z);
        }
        let through = model.block(l).up_proj.t_matvec(&back)?;
        for (g, t) in grad.iter_mut().zip(&through) {
            *g += t;
        }
    }
    for (g, a) in grad.iter_mut().zip(&anchor) {
        *g += 2.0 * decay * a;
    }
    Ok((loss, grad))
}

/// Solves for the value at `layer` that sends input `x` to `target`.
pub fn solve_value(
    model: &ToyModel,
    layer: usize,
    x: &[f64],
    target: &[f64],
    opts: &ValueSolveOptions,
) -> Result<ValueSolution> {
    let fwd = model.forward(x)?;
    model.check_layer(layer)?;
    let h = &fwd.hidden[layer];
    let v_init = model.down_proj(layer).matvec(&fwd.keys[layer])?;
    solve_value_from(model, layer, h, &v_init, target, opts)
}

/// As [`solve_value`] but starting from a known residual state and initial value.
pub fn solve_value_from(
    model: &ToyModel,
    layer: usize,
    h: &[f64],
    v_init: &[f64],
    target: &[f64],
    opts: &ValueSolveOptions,
) -> Result<ValueSolution> {
    opts.validate()?;
    if target.len() != model.d_model() {
        return Err(EditError::DimensionMismatch(format!(
            "target of length {}, model width {}",
            target.len(),
            model.d_model()
        )));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(EditError::NonFinite("value target".into()));
    }
    let gamma = opts.decay;

    if layer + 1 == model.num_layers() {
        // ‖h + v − t‖² + γ‖v − v_init‖² is minimised at (t − h + γ·v_init)/(1 + γ).
        let (initial_loss, _) = value_loss_grad(model, layer, h, v_init, target, gamma, v_init)?;
        let value: Vec<f64> = target
            .iter()
            .zip(h)
            .zip(v_init)
            .map(|((t, hi), vi)| (t - hi + gamma * vi) / (1.0 + gamma))
            .collect();
        let (final_loss, _) = value_loss_grad(model, layer, h, &value, target, gamma, v_init)?;
        return Ok(ValueSolution {
            value,
            initial_loss,
            final_loss,
            iters: 0,
            termination: Termination::ClosedForm,
        });
    }

    let mut v = v_init.to_vec();
    let (mut loss, mut grad) = value_loss_grad(model, layer, h, &v, target, gamma, v_init)?;
    if !loss.is_finite() {
        return Err(EditError::Diverged(format!("initial loss {loss}")));
    }
    let initial_loss = loss;
    let mut step = opts.step_size;
    let mut termination = Termination::MaxIters;
    let mut iters = 0;
    while iters < opts.max_iters {
        if loss <= opts.target_tol {
            termination = Termination::TargetTol;
            break;
        }
        if norm(&grad) <= opts.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        iters += 1;
        let trial: Vec<f64> = v.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        let (trial_loss, trial_grad) =
            value_loss_grad(model, layer, h, &trial, target, gamma, v_init)?;
        if !trial_loss.is_finite() {
            return Err(EditError::Diverged(format!(
                "loss became {trial_loss} at iteration {iters} (step {step:e})"
            )));
        }
        if trial_loss > loss {
            step *= 0.5;
            if step < 1e-16 * opts.step_size {
                termination = Termination::StepUnderflow;
                break;
            }
            continue;
        }
        v = trial;
        loss = trial_loss;
        grad = trial_grad;
    }
    if termination == Termination::MaxIters {
        if loss <= opts.target_tol {
            termination = Termination::TargetTol;
        } else if norm(&grad) <= opts.grad_tol {
            termination = Termination::GradTol;
        }
    }
    Ok(ValueSolution {
        value: v,
        initial_loss,
        final_loss: loss,
        iters,
        termination,
    })
}
