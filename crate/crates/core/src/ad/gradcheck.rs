//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step on each parameter scalar.
    pub step: f64,
    /// Check at most this many scalars per tensor (`None` = all of them).
    pub max_per_tensor: Option<usize>,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_tensor: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the tape gradient of `build` with central differences.
///
/// `build` must be deterministic; it is re-run twice per checked scalar.
pub fn check_gradients(
    store: &ParamStore,
    options: &GradCheckOptions,
    build: impl Fn(&mut Tape<'_>) -> Var,
) -> GradCheckReport {
    let grads = {
        let mut tape = Tape::new(store);
        let out = build(&mut tape);
        tape.backward(out)
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let out = build(&mut tape);
        tape.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for id in store.ids() {
        let len = store.value(id).len();
        let analytic = grads.get(id);
        let indices: Vec<usize> = match options.max_per_tensor {
            Some(k) if k < len => {
                // Half of the budget on scalars with a nonzero analytic
                // gradient, the rest uniformly at random.
                let mut picked: Vec<usize> = analytic
                    .map(|g| {
                        let nz: Vec<usize> = (0..len).filter(|&i| g.data()[i] != 0.0).collect();
                        let take = (k / 2).min(nz.len());
                        sample(&mut rng, nz.len(), take)
                            .into_iter()
                            .map(|j| nz[j])
                            .collect()
                    })
                    .unwrap_or_default();
                let rest = k - picked.len();
                picked.extend(sample(&mut rng, len, rest));
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..len).collect(),
        };
        for i in indices {
            let original = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = original + options.step;
            let plus = eval(&work);
            work.value_mut(id).data_mut()[i] = original - options.step;
            let minus = eval(&work);
            work.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.map(|g| g.data()[i]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(options.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                if rel >= report.max_rel_err {
                    report.worst_param = store.entry(id).name.clone();
                    report.worst_index = i;
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    report
}
