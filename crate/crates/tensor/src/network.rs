use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::layer::{LayerKind, Mode};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A feed-forward stack of layers with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerKind>,
    params: Vec<Vec<Tensor<T>>>,
}

/// Tape handles of a network's parameters for one forward/backward cycle.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Vec<Var>>,
}

impl Bound {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flatten().copied()
    }
}

/// Per-sample shape after each layer, starting with `input`.
pub fn shape_trace(layers: &[LayerKind], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for layer in layers {
        let next = layer.output_shape(shapes.last().expect("non-empty"))?;
        shapes.push(next);
    }
    Ok(shapes)
}

impl<T: Scalar> Sequential<T> {
    /// Builds the stack with seeded initial parameters.
    pub fn new(layers: Vec<LayerKind>, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let shapes = shape_trace(&layers, &input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .zip(&shapes)
            .map(|(layer, shape)| layer.init_params(shape, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_shape,
            layers,
            params,
        })
    }

    /// Rebuilds a stack from stored parameters, checking every shape.
    pub fn from_params(layers: Vec<LayerKind>, input_shape: Vec<usize>, params: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let shapes = shape_trace(&layers, &input_shape)?;
        if params.len() != layers.len() {
            return Err(EngineError::ParamCount {
                expected: layers.len(),
                actual: params.len(),
            });
        }
        for ((layer, shape), given) in layers.iter().zip(&shapes).zip(&params) {
            let want = layer.param_shapes(shape)?;
            if want.len() != given.len() {
                return Err(EngineError::ParamCount {
                    expected: want.len(),
                    actual: given.len(),
                });
            }
            for (w, g) in want.iter().zip(given) {
                if w.as_slice() != g.shape() {
                    return Err(EngineError::ShapeMismatch {
                        op: "from_params",
                        left: w.clone(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        let params = params
            .into_iter()
            .map(|ps| ps.into_iter().map(Tensor::with_grad).collect())
            .collect();
        Ok(Self {
            input_shape,
            layers,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        shape_trace(&self.layers, &self.input_shape)
            .expect("validated at construction")
            .pop()
            .expect("non-empty")
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// `(name, tensor)` in declaration order; names look like `3.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .zip(&self.params)
            .enumerate()
            .flat_map(|(i, (layer, ps))| {
                layer
                    .param_names()
                    .iter()
                    .zip(ps)
                    .map(move |(name, t)| (format!("{i}.{name}"), t))
            })
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().flatten().collect()
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|ps| ps.iter().map(|p| tape.leaf(p, trainable)).collect())
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let batch_shape = tape.shape(x);
        if batch_shape.len() != self.input_shape.len() + 1 || batch_shape[1..] != self.input_shape[..] {
            return Err(EngineError::ShapeMismatch {
                op: "network input",
                left: batch_shape.to_vec(),
                right: self.input_shape.clone(),
            });
        }
        let mut h = x;
        for (i, (layer, vars)) in self.layers.iter().zip(&bound.vars).enumerate() {
            let layer_mode = match mode {
                Mode::Train { seed } => Mode::Train {
                    seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
                },
                Mode::Eval => Mode::Eval,
            };
            h = layer.forward(tape, h, vars, layer_mode)?;
        }
        Ok(h)
    }

    /// Gradient-free evaluation of a batch.
    pub fn predict(&self, batch: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let y = self.forward(&mut tape, &bound, x, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Copies the gradients of the bound parameters into each tensor's grad slot.
    pub fn store_grads(&mut self, grads: &mut Gradients<T>, bound: &Bound) -> Result<()> {
        for (ps, vs) in self.params.iter_mut().zip(&bound.vars) {
            for (p, &v) in ps.iter_mut().zip(vs) {
                let g = grads.take(v).ok_or(EngineError::MissingGradient { index: v.index() })?;
                p.set_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.clear_grad();
        }
    }

    /// Element-type conversion, e.g. to run a gradient check in `f64`.
    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|ps| ps.iter().map(Tensor::cast).collect())
                .collect(),
        }
    }
}
