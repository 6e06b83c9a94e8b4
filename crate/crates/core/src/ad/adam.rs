use serde::{Deserialize, Serialize};

use super::{AdError, ParamGroup, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter, plus a step counter
/// per parameter group (groups may skip steps).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps_radiance: u64,
    pub steps_motion: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            steps_radiance: 0,
            steps_motion: 0,
        }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        match group {
            ParamGroup::Radiance => self.steps_radiance,
            ParamGroup::Motion => self.steps_motion,
        }
    }

    fn bump(&mut self, group: ParamGroup) -> u64 {
        let s = match group {
            ParamGroup::Radiance => &mut self.steps_radiance,
            ParamGroup::Motion => &mut self.steps_motion,
        };
        *s += 1;
        *s
    }
}

/// One Adam update of every parameter in the listed groups, using the
/// gradient buffers held by `params`. Groups not listed are left untouched,
/// moments included.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    config: &AdamConfig,
    groups: &[(ParamGroup, f64)],
) -> Result<(), AdError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(AdError::ShapeMismatch {
            context: "adam state size".into(),
            expected: (params.len(), 1),
            found: (state.m.len(), 1),
        });
    }
    for (i, e) in params.entries().iter().enumerate() {
        if state.m[i].shape() != e.value.shape() || state.v[i].shape() != e.value.shape() {
            return Err(AdError::ShapeMismatch {
                context: format!("adam moments for {}", e.name),
                expected: e.value.shape(),
                found: state.m[i].shape(),
            });
        }
    }
    for &(group, lr) in groups {
        let t = state.bump(group) as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let ids: Vec<_> = params
            .ids()
            .filter(|&id| params.entry(id).group == group)
            .collect();
        for id in ids {
            let i = id.index();
            let grad = params.grad(id).clone();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let value = params.value_mut(id).data_mut();
            for k in 0..value.len() {
                let g = grad.data()[k];
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{value_and_grad, Tape};

    fn store_with(values: &[f64]) -> (ParamStore, crate::ad::ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add(
                "x",
                ParamGroup::Motion,
                Tensor::from_vec(1, values.len(), values.to_vec()),
            )
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = store_with(&[1.0, -2.0]);
        let mut state = AdamState::new(&store);
        adam_step(
            &mut store,
            &mut state,
            &AdamConfig::default(),
            &[(ParamGroup::Motion, 0.1)],
        )
        .unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let (mut store, id) = store_with(&[1.0, -2.0]);
        let mut state = AdamState::new(&store);
        value_and_grad(&mut store, |tape: &mut Tape| {
            let x = tape.param(id);
            let w = tape.constant(Tensor::from_rows(&[[3.0, -0.5]]));
            let p = tape.mul(x, w);
            Ok::<_, AdError>(tape.sum(p))
        })
        .unwrap();
        let lr = 1e-2;
        adam_step(
            &mut store,
            &mut state,
            &AdamConfig::default(),
            &[(ParamGroup::Motion, lr)],
        )
        .unwrap();
        let d0 = store.value(id).data()[0] - 1.0;
        let d1 = store.value(id).data()[1] + 2.0;
        // |step| = lr·|g|/(|g| + eps)
        assert!((d0 + lr * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((d1 - lr * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn unlisted_group_is_untouched() {
        let (mut store, id) = store_with(&[1.0]);
        let mut state = AdamState::new(&store);
        value_and_grad(&mut store, |tape: &mut Tape| {
            let x = tape.param(id);
            Ok::<_, AdError>(tape.sum(x))
        })
        .unwrap();
        adam_step(
            &mut store,
            &mut state,
            &AdamConfig::default(),
            &[(ParamGroup::Radiance, 0.1)],
        )
        .unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(state.steps(ParamGroup::Motion), 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut store, id) = store_with(&[0.8, -0.6, 0.3]);
        let mut state = AdamState::new(&store);
        let mut steps = 0;
        while store
            .value(id)
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            >= 1e-3
        {
            value_and_grad(&mut store, |tape: &mut Tape| {
                let x = tape.param(id);
                let sq = tape.mul(x, x);
                Ok::<_, AdError>(tape.sum(sq))
            })
            .unwrap();
            adam_step(
                &mut store,
                &mut state,
                &AdamConfig::default(),
                &[(ParamGroup::Motion, 1e-2)],
            )
            .unwrap();
            steps += 1;
            assert!(steps <= 2000, "did not converge in 2000 steps");
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let (mut store, _) = store_with(&[1.0, 2.0]);
        let (other, _) = store_with(&[1.0]);
        let mut state = AdamState::new(&other);
        let r = adam_step(
            &mut store,
            &mut state,
            &AdamConfig::default(),
            &[(ParamGroup::Motion, 0.1)],
        );
        assert!(matches!(r, Err(AdError::ShapeMismatch { .. })));
    }
}
