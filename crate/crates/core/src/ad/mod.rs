//! Minimal reverse-mode automatic differentiation.
//!
//! Values are batched 2-D [`Tensor`]s recorded on a [`Tape`]; parameters live
//! in a [`ParamStore`] and are referenced from the tape by [`ParamId`], so
//! building a graph never copies parameter tensors.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use mlp::{mlp_forward, Activation, Linear, Mlp};
pub use params::{Gradients, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{Primitive, Tape, UnaryOp, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("primitive `{primitive}` takes {expected} inputs, got {found}")]
    Arity {
        primitive: String,
        expected: usize,
        found: usize,
    },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Evaluates a scalar program and writes its gradient into the gradient
/// buffers of `params` (previous contents are discarded).
pub fn value_and_grad<E>(
    params: &mut ParamStore,
    f: impl FnOnce(&mut Tape<'_>) -> Result<Var, E>,
) -> Result<f64, E> {
    let (value, grads) = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        let value = tape.value(out).item();
        (value, tape.backward(out))
    };
    params.zero_grads();
    params.accumulate(&grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamGroup::Motion, Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn square_at_three() {
        let (mut s, id) = scalar_store(3.0);
        let v = value_and_grad(&mut s, |t| {
            let x = t.param(id);
            Ok::<_, AdError>(t.mul(x, x))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(s.grad(id).item(), 6.0);
    }

    #[test]
    fn sine_at_zero() {
        let (mut s, id) = scalar_store(0.0);
        let v = value_and_grad(&mut s, |t| {
            let x = t.param(id);
            Ok::<_, AdError>(t.sin(x))
        })
        .unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(s.grad(id).item(), 1.0);
    }

    fn random_mlp(seed: u64) -> (ParamStore, Mlp, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::build(
            &mut store,
            "mlp",
            ParamGroup::Motion,
            &[4, 16, 3],
            Activation::Softplus,
            Activation::Identity,
            false,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        (store, mlp, x)
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        for seed in 0..5 {
            let (store, mlp, x) = random_mlp(seed);
            let report = check_gradients(&store, &GradCheckOptions::default(), |tape| {
                let xv = tape.constant(x.clone());
                let y = mlp.forward(tape, xv).unwrap();
                let c = tape.cos(y);
                tape.mean(c)
            });
            assert!(report.max_rel_err < 1e-4, "{report:?}");
            assert_eq!(report.checked, store.num_scalars());
        }
    }

    #[test]
    fn backward_is_linear() {
        // grad(f + g) == grad(f) + grad(g) on random graphs.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let (store, mlp, x) = random_mlp(100 + seed);
            let k: f64 = rng.random_range(-2.0..2.0);
            let build = |tape: &mut Tape, which: u8| -> Var {
                let xv = tape.constant(x.clone());
                let y = mlp.forward(tape, xv).unwrap();
                let f = {
                    let s = tape.sin(y);
                    tape.sum(s)
                };
                let g = {
                    let e = tape.unary(y, UnaryOp::Square);
                    let m = tape.mean(e);
                    tape.scale(m, k)
                };
                match which {
                    0 => f,
                    1 => g,
                    _ => tape.add(f, g),
                }
            };
            let grads: Vec<Gradients> = (0..3)
                .map(|w| {
                    let mut tape = Tape::new(&store);
                    let out = build(&mut tape, w);
                    tape.backward(out)
                })
                .collect();
            for id in store.ids() {
                let a = grads[0].get(id).unwrap();
                let b = grads[1].get(id).unwrap();
                let c = grads[2].get(id).unwrap();
                for i in 0..a.len() {
                    let sum = a.data()[i] + b.data()[i];
                    assert!((sum - c.data()[i]).abs() <= 1e-12 * (1.0 + sum.abs()));
                }
            }
        }
    }

    #[test]
    fn mlp_output_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut store = ParamStore::new();
            let mlp = Mlp::build(
                &mut store,
                "m",
                ParamGroup::Motion,
                &[48, 128, 128, 128, 3],
                Activation::Relu,
                Activation::Identity,
                false,
                &mut rng,
            )
            .unwrap();
            let x = Tensor::from_vec(2, 48, (0..96).map(|i| (i as f64 * 0.37).sin()).collect());
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x);
            let y = mlp.forward(&mut tape, xv).unwrap();
            tape.value(y)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
