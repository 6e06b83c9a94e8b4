use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdError, ParamGroup, ParamId, ParamStore, Tape, Tensor, UnaryOp, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Fully connected network `x · W + b` per layer, weights stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// Registers `sizes.len() - 1` layers named `{prefix}.{i}.weight/bias`.
    ///
    /// Weights and biases are drawn from `U(−1/√fan_in, 1/√fan_in)`; when
    /// `zero_last` is set the final layer starts at exactly zero.
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self, AdError> {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::new();
        let mut activations = Vec::new();
        let n = sizes.len() - 1;
        for i in 0..n {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = i + 1 == n;
            let mut draw = |len: usize| -> Vec<f64> {
                if last && zero_last {
                    vec![0.0; len]
                } else {
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
            let b = Tensor::from_vec(1, fan_out, draw(fan_out));
            let weight = store.add(format!("{prefix}.{i}.weight"), group, w)?;
            let bias = store.add(format!("{prefix}.{i}.bias"), group, b)?;
            layers.push(Linear { weight, bias });
            activations.push(if last { output } else { hidden });
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.value(self.layers[0].weight).rows()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store
            .value(self.layers[self.layers.len() - 1].weight)
            .cols()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, AdError> {
        mlp_forward(tape, &self.layers, &self.activations, x)
    }
}

/// Applies each layer in turn, checking that shapes chain.
pub fn mlp_forward(
    tape: &mut Tape<'_>,
    layers: &[Linear],
    activations: &[Activation],
    x: Var,
) -> Result<Var, AdError> {
    if layers.len() != activations.len() {
        return Err(AdError::ShapeMismatch {
            context: "mlp activations".into(),
            expected: (layers.len(), 1),
            found: (activations.len(), 1),
        });
    }
    let mut h = x;
    for (i, (layer, act)) in layers.iter().zip(activations).enumerate() {
        let (w_in, w_out) = tape.params().value(layer.weight).shape();
        let b_shape = tape.params().value(layer.bias).shape();
        let width = tape.shape(h).1;
        if width != w_in {
            return Err(AdError::ShapeMismatch {
                context: format!("mlp layer {i} input"),
                expected: (tape.shape(h).0, w_in),
                found: tape.shape(h),
            });
        }
        if b_shape != (1, w_out) {
            return Err(AdError::ShapeMismatch {
                context: format!("mlp layer {i} bias"),
                expected: (1, w_out),
                found: b_shape,
            });
        }
        let w = tape.param(layer.weight);
        let b = tape.param(layer.bias);
        let z = tape.matmul(h, w);
        let z = tape.add(z, b);
        h = match act {
            Activation::Identity => z,
            Activation::Relu => tape.unary(z, UnaryOp::Relu),
            Activation::Sigmoid => tape.unary(z, UnaryOp::Sigmoid),
            Activation::Softplus => tape.unary(z, UnaryOp::Softplus),
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::build(
            &mut store,
            "m",
            ParamGroup::Motion,
            &[3, 4, 2],
            Activation::Relu,
            Activation::Identity,
            false,
            &mut rng,
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0]]));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(1, 2));
    }

    #[test]
    fn identity_layer_returns_input() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                ParamGroup::Motion,
                Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            )
            .unwrap();
        let b = store
            .add("b", ParamGroup::Motion, Tensor::zeros(1, 2))
            .unwrap();
        let mut tape = Tape::new(&store);
        let input = Tensor::from_rows(&[[0.25, -7.0], [3.0, 1.5]]);
        let x = tape.constant(input.clone());
        let y = mlp_forward(
            &mut tape,
            &[Linear { weight: w, bias: b }],
            &[Activation::Identity],
            x,
        )
        .unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::build(
            &mut store,
            "m",
            ParamGroup::Motion,
            &[3, 4, 2],
            Activation::Relu,
            Activation::Identity,
            false,
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(5, 2));
        assert!(matches!(
            mlp.forward(&mut tape, x),
            Err(AdError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_last_layer_starts_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::build(
            &mut store,
            "m",
            ParamGroup::Motion,
            &[5, 8, 8, 3],
            Activation::Relu,
            Activation::Identity,
            true,
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(4, 5, 0.7));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).max_abs(), 0.0);
        assert!(store.value(mlp.layers[0].weight).max_abs() > 0.0);
    }
}
