use super::{NumError, ParamStore, Real};

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Real = f32> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Real> AdamState<S> {
    /// Zeroed moments shaped after `params`, with lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn new(params: &ParamStore<S>) -> Self {
        Self::with_lr(params, S::of(1e-3))
    }

    pub fn with_lr(params: &ParamStore<S>, learning_rate: S) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            learning_rate,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            epsilon: S::of(1e-8),
        }
    }
}

/// Applies one bias-corrected Adam update from the gradients held in `params`.
///
/// Gradients are validated before anything is modified, so a diverged step
/// leaves both parameters and state untouched.
pub fn adam_step<S: Real>(params: &mut ParamStore<S>, state: &mut AdamState<S>) -> Result<(), NumError> {
    if state.first_moment.len() != params.len() {
        return Err(NumError::Shape(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (id, (name, t)) in params.ids().zip(params.iter()) {
        if state.first_moment[id.index()].len() != t.numel() {
            return Err(NumError::Shape(format!("moment shape mismatch for {name}")));
        }
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(NumError::Diverged(format!("non-finite gradient in {name}")));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let one = S::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let tensor = params.get_mut(id);
        let Some(grad) = tensor.grad().map(<[S]>::to_vec) else { continue };
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        for (k, p) in tensor.data_mut().iter_mut().enumerate() {
            let gk = grad[k];
            m[k] = state.beta1 * m[k] + (one - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (one - state.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *p -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
