//! Central-difference verification of reverse-mode gradients.

use super::{Graph, NumError, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor (evenly strided); `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-6, tolerance: 1e-3, max_entries_per_param: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.rel_error > self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Floor on the denominator so entries with vanishing gradient are judged
/// on absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// for every (or a strided subset of every) parameter entry in `params`.
pub fn grad_check<F>(params: &mut ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;
    let eval = |ps: &ParamStore<f64>| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let l = f(&mut g, ps)?;
        Ok(g.scalar(l))
    };

    let mut entries = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let numel = params.get(id).numel();
        let analytic = grads.of_param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && numel > k => numel.div_ceil(k),
            _ => 1,
        };
        for index in (0..numel).step_by(stride) {
            let orig = params.get(id).data()[index];
            params.get_mut(id).data_mut()[index] = orig + opts.epsilon;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[index] = orig - opts.epsilon;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            entries.push(GradCheckEntry {
                param: params.name(id).to_string(),
                index,
                analytic: analytic[index],
                numeric,
                rel_error: relative_error(analytic[index], numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance: opts.tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn store() -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.05]).unwrap());
        ps
    }

    #[test]
    fn sum_of_squares_passes_tightly() {
        let mut ps = store();
        let id = ps.find("x").unwrap();
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let x = g.param(ps, id);
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn sign_flipped_backward_fails() {
        let mut ps = store();
        let id = ps.find("x").unwrap();
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let x = g.param(ps, id);
                let x = g.grad_reverse(x);
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 4);
    }
}
