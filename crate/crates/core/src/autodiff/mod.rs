//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! The backward pass is recorded with the same primitives as the forward
//! pass, so on a [`Tape::with_higher_order`] tape a gradient can be fed into
//! further computation and differentiated once more. That is what makes the
//! gradient of a finite-difference curvature estimate available to training.

mod params;
mod tape;
mod tensor;

pub use params::{ParamVector, Segment};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("gradient needs a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("second-order gradient requested on a tape built without higher-order support")]
    HigherOrderDisabled,
    #[error("node {0} does not exist on this tape")]
    UnknownVar(usize),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("finite-difference step must be nonzero")]
    ZeroStep,
    #[error("duplicate parameter segment {0:?}")]
    DuplicateSegment(String),
}

/// Records `‖∇L(θ + h·d) − ∇L(θ)‖ / |h|` on a higher-order tape.
///
/// `loss` builds the scalar loss from one node per parameter segment.
/// `direction` holds one constant tensor per segment; no gradient flows into
/// it. The result is differentiable with respect to `params`. A zero
/// difference yields a zero gradient.
pub fn gradnorm_difference<F>(
    tape: &mut Tape,
    loss: &F,
    params: &[Var],
    direction: &[Tensor],
    h: f64,
) -> Result<Var, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    if h == 0.0 {
        return Err(AutodiffError::ZeroStep);
    }
    if direction.len() != params.len() {
        return Err(AutodiffError::Shape {
            op: "gradnorm_difference",
            detail: format!(
                "{} parameter segments but {} direction segments",
                params.len(),
                direction.len()
            ),
        });
    }
    let base_loss = loss(tape, params)?;
    let base_grad = tape.grad_graph(base_loss, params)?;
    gradnorm_difference_from(tape, loss, params, &base_grad, direction, h)
}

/// As [`gradnorm_difference`], reusing an already recorded base gradient
/// (from `grad_graph` on the same tape).
pub fn gradnorm_difference_from<F>(
    tape: &mut Tape,
    loss: &F,
    params: &[Var],
    base_grad: &[Var],
    direction: &[Tensor],
    h: f64,
) -> Result<Var, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    if h == 0.0 {
        return Err(AutodiffError::ZeroStep);
    }
    if direction.len() != params.len() || base_grad.len() != params.len() {
        return Err(AutodiffError::Shape {
            op: "gradnorm_difference",
            detail: format!(
                "{} parameter segments, {} gradient segments, {} direction segments",
                params.len(),
                base_grad.len(),
                direction.len()
            ),
        });
    }
    let mut shifted = Vec::with_capacity(params.len());
    for (&p, d) in params.iter().zip(direction) {
        let step = tape.constant(d.map(|v| v * h));
        shifted.push(tape.add(p, step)?);
    }
    let shifted_loss = loss(tape, &shifted)?;
    let shifted_grad = tape.grad_graph(shifted_loss, &shifted)?;

    let mut total: Option<Var> = None;
    for (&g1, &g0) in shifted_grad.iter().zip(base_grad) {
        let d = tape.sub(g1, g0)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.ok_or(AutodiffError::Shape {
        op: "gradnorm_difference",
        detail: "no parameters".into(),
    })?;
    let norm = tape.sqrt(total);
    Ok(tape.scale(norm, 1.0 / h.abs()))
}

/// Value and parameter gradient of [`gradnorm_difference`], evaluated on a
/// fresh tape by a second reverse pass.
pub fn grad_of_gradnorm<F>(
    loss: &F,
    params: &ParamVector,
    direction: &ParamVector,
    h: f64,
) -> Result<(f64, ParamVector), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    if !params.same_layout(direction) {
        return Err(AutodiffError::Shape {
            op: "grad_of_gradnorm",
            detail: "direction layout differs from parameter layout".into(),
        });
    }
    let mut tape = Tape::with_higher_order();
    let vars = params.leaves(&mut tape);
    let value = gradnorm_difference(&mut tape, loss, &vars, &direction.tensors(), h)?;
    let v = tape.item(value);
    let grads = tape.grad(value, &vars)?;
    Ok((v, ParamVector::from_tensors(params, grads)?))
}

/// Gradient of a scalar loss with respect to every segment of `params`.
pub fn value_and_grad<F>(loss: &F, params: &ParamVector) -> Result<(f64, ParamVector), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + ?Sized,
{
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let out = loss(&mut tape, &vars)?;
    let v = tape.item(out);
    let grads = tape.grad(out, &vars)?;
    Ok((v, ParamVector::from_tensors(params, grads)?))
}
