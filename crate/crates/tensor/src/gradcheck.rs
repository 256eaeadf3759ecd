//! Central finite-difference oracle. It only ever calls the forward
//! function it is handed, so it stays independent of the backward pass.

/// `df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Outcome of comparing an analytic gradient against the numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|)` must stay within `rel_tol`;
/// entries where both magnitudes are below `small` are compared absolutely
/// against `abs_tol` instead.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, small: f64, abs_tol: f64) -> Agreement {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut out = Agreement {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst_index: 0,
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        let diff = (a - n).abs();
        if scale < small {
            out.max_abs_err_small = out.max_abs_err_small.max(diff);
            if diff > abs_tol {
                out.passed = false;
            }
        } else {
            let rel = diff / scale;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst_index = i;
            }
            if !(rel <= rel_tol) {
                out.passed = false;
            }
        }
    }
    out
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layer::{LayerKind, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Random input suited to `layer`: values kept away from ReLU's kink and
/// max-pool windows without near-ties, so central differences stay smooth.
pub fn layer_input(layer: &LayerKind, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match layer {
        LayerKind::ReLU => (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        LayerKind::MaxPool2x2 => {
            let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            for i in (1..n).rev() {
                levels.swap(i, rng.gen_range(0..=i));
            }
            levels.into_iter().map(|v| v + rng.gen_range(-0.01..0.01)).collect()
        }
        _ => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Checks autodiff against central differences for one layer on a random
/// batched input of `shape`, through the loss `mse(layer(x), target)`.
/// Gradients with respect to the input and every parameter are compared.
pub fn check_layer(layer: &LayerKind, shape: &[usize], seed: u64, h: f64) -> Result<Agreement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, params) = loop {
        let x = layer_input(layer, shape, &mut rng);
        let mut params: Vec<Tensor<f64>> = layer.init_params(&shape[1..], &mut rng)?;
        for (p, name) in params.iter_mut().zip(layer.param_names()) {
            let (lo, hi) = if name.ends_with("gamma") {
                (0.5, 1.5)
            } else {
                (-1.0, 1.0)
            };
            for v in p.data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
        if hidden_kink_margin(layer, &x, &params)? >= KINK_MARGIN {
            break (x, params);
        }
    };
    let mode = Mode::Train { seed };
    let out_shape = {
        let mut s = vec![shape[0]];
        s.extend(layer.output_shape(&shape[1..])?);
        s
    };
    let target = Tensor::new(
        out_shape.clone(),
        (0..out_shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;

    let loss_of = |x: &Tensor<f64>, params: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv: Vec<_> = params.iter().map(|p| tape.leaf(p, false)).collect();
        let y = layer.forward(&mut tape, xv, &pv, mode)?;
        let t = tape.constant(target.clone());
        let l = tape.mse(y, t)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&x, true);
    let pv: Vec<_> = params.iter().map(|p| tape.leaf(p, true)).collect();
    let y = layer.forward(&mut tape, xv, &pv, mode)?;
    let t = tape.constant(target.clone());
    let l = tape.mse(y, t)?;
    let grads = tape.backward(l)?;

    let mut analytic = grads.get(xv).expect("input grad").to_vec();
    for &v in &pv {
        analytic.extend_from_slice(grads.get(v).expect("param grad"));
    }

    let mut numeric = central_difference(x.data(), h, |xs| {
        let probe = Tensor::new(shape.to_vec(), xs.to_vec()).expect("shape");
        loss_of(&probe, &params).expect("forward")
    });
    for i in 0..params.len() {
        let base = params[i].data().to_vec();
        let pshape = params[i].shape().to_vec();
        numeric.extend(central_difference(&base, h, |ps| {
            let mut trial = params.clone();
            trial[i] = Tensor::new(pshape.clone(), ps.to_vec()).expect("shape");
            loss_of(&x, &trial).expect("forward")
        }));
    }
    Ok(compare(&analytic, &numeric, 1e-3, 1e-8, 1e-6))
}

const KINK_MARGIN: f64 = 1e-2;

/// Smallest |pre-activation| of a ReLU hidden inside `layer`; infinite for
/// layers without an internal ReLU. Central differences are meaningless when
/// a probe step can cross the kink.
fn hidden_kink_margin(layer: &LayerKind, x: &Tensor<f64>, params: &[Tensor<f64>]) -> Result<f64> {
    if !matches!(layer, LayerKind::ResidualBlock { .. }) {
        return Ok(f64::INFINITY);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv: Vec<_> = params.iter().map(|p| tape.leaf(p, false)).collect();
    let h = tape.conv2d(xv, pv[0], pv[1], 1)?;
    let h = tape.instance_norm(h, pv[2], pv[3])?;
    Ok(tape.value(h).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Batched input shape used by the per-layer gradient suites.
pub fn probe_shape(layer: &LayerKind) -> Vec<usize> {
    match layer {
        LayerKind::Dense { .. } => vec![3, 2, 2, 3],
        LayerKind::Softmax => vec![3, 5],
        LayerKind::ResidualBlock { filters } => vec![2, *filters, 4, 4],
        LayerKind::TransposeConv2d { .. } => vec![2, 3, 3, 3],
        LayerKind::MaxPool2x2 => vec![2, 2, 4, 5],
        _ => vec![2, 3, 5, 4],
    }
}

/// One representative of every layer kind.
pub fn all_layer_kinds() -> Vec<LayerKind> {
    vec![
        LayerKind::Conv2d { filters: 4, stride: 1 },
        LayerKind::Conv2d { filters: 3, stride: 2 },
        LayerKind::MaxPool2x2,
        LayerKind::Dense { width: 4 },
        LayerKind::ReLU,
        LayerKind::Tanh,
        LayerKind::Softmax,
        LayerKind::Dropout { rate: 0.4 },
        LayerKind::InstanceNorm,
        LayerKind::TransposeConv2d { filters: 2 },
        LayerKind::ResidualBlock { filters: 2 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(&[2.0], 1e-4, |x| x[0].powi(3));
        assert!((g[0] - 12.0).abs() < 1e-7);
    }

    #[test]
    fn compare_flags_disagreement() {
        assert!(compare(&[1.0, 0.0], &[1.0005, 1e-9], 1e-3, 1e-8, 1e-6).passed);
        assert!(!compare(&[1.0], &[1.1], 1e-3, 1e-8, 1e-6).passed);
    }
}
