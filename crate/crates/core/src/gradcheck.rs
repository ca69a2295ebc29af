//! Central finite-difference checks for every differentiable tape op.
//!
//! Each case maps random inputs to an output of any shape; the harness
//! contracts it with a fixed random tensor to get a scalar and compares the
//! backward pass against `(f(x + h) − f(x − h)) / 2h` element by element.
//! The error is norm-wise: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::PoolKind;
use crate::losses::{arcface_from_centers, embed_mse};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 20;

type Inputs = fn(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>;
type Forward = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

pub struct GradCase {
    pub name: &'static str,
    inputs: Inputs,
    forward: Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub seeds: usize,
    pub worst_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst_error < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal samples pushed at least 0.05 away from zero (kink of PReLU).
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    let mut t = randn(rng, shape)?;
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { *v - 0.05 } else { *v + 0.05 };
        }
    }
    Ok(t)
}

/// Distinct values 0.05 apart in random order, so no perturbation changes
/// which element wins a max.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape, v)
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            inputs: |r| Ok(vec![randn(r, &[2, 3, 4])?, randn(r, &[2, 3, 4])?]),
            forward: |x| x[0].add(x[1]),
        },
        GradCase {
            name: "add_n",
            inputs: |r| Ok(vec![randn(r, &[2, 5])?, randn(r, &[2, 5])?, randn(r, &[2, 5])?]),
            forward: |x| Var::add_n(x),
        },
        GradCase {
            name: "scale",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?]),
            forward: |x| Ok(x[0].scale(1.7)),
        },
        GradCase {
            name: "mul",
            inputs: |r| Ok(vec![randn(r, &[2, 3])?, randn(r, &[2, 3])?]),
            forward: |x| x[0].mul(x[1]),
        },
        GradCase {
            name: "sum",
            inputs: |r| Ok(vec![randn(r, &[4, 3])?]),
            forward: |x| Ok(x[0].sum()),
        },
        GradCase {
            name: "conv2d",
            inputs: |r| Ok(vec![randn(r, &[2, 3, 5, 5])?, randn(r, &[4, 3, 3, 3])?]),
            forward: |x| x[0].conv2d(x[1], 1, 1, 1),
        },
        GradCase {
            name: "conv2d_grouped_strided",
            inputs: |r| Ok(vec![randn(r, &[2, 4, 5, 5])?, randn(r, &[6, 2, 3, 3])?]),
            forward: |x| x[0].conv2d(x[1], 2, 1, 2),
        },
        GradCase {
            name: "conv2d_depthwise",
            inputs: |r| Ok(vec![randn(r, &[1, 3, 6, 6])?, randn(r, &[3, 1, 5, 5])?]),
            forward: |x| x[0].conv2d(x[1], 1, 2, 3),
        },
        GradCase {
            name: "conv2d_pointwise",
            inputs: |r| Ok(vec![randn(r, &[2, 3, 4, 4])?, randn(r, &[5, 3, 1, 1])?]),
            forward: |x| x[0].conv2d(x[1], 2, 0, 1),
        },
        GradCase {
            name: "batch_norm_train",
            inputs: |r| Ok(vec![randn(r, &[3, 4, 3, 3])?, randn(r, &[4])?, randn(r, &[4])?]),
            forward: |x| Ok(x[0].batch_norm(x[1], x[2], None)?.0),
        },
        GradCase {
            name: "batch_norm_eval",
            inputs: |r| Ok(vec![randn(r, &[2, 3, 2, 2])?, randn(r, &[3])?, randn(r, &[3])?]),
            forward: |x| Ok(x[0].batch_norm(x[1], x[2], Some((&[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0])))?.0),
        },
        GradCase {
            name: "prelu",
            inputs: |r| Ok(vec![off_zero(r, &[2, 3, 3, 3])?, randn(r, &[3])?]),
            forward: |x| x[0].prelu(x[1]),
        },
        GradCase {
            name: "max_pool",
            inputs: |r| Ok(vec![spaced(r, &[2, 2, 5, 5])?]),
            forward: |x| x[0].pool2d(PoolKind::Max, 3, 2, 1),
        },
        GradCase {
            name: "avg_pool",
            inputs: |r| Ok(vec![randn(r, &[2, 2, 5, 5])?]),
            forward: |x| x[0].pool2d(PoolKind::Avg, 3, 1, 1),
        },
        GradCase {
            name: "concat_channels",
            inputs: |r| Ok(vec![randn(r, &[2, 2, 3, 3])?, randn(r, &[2, 3, 3, 3])?]),
            forward: |x| Var::concat_channels(x),
        },
        GradCase {
            name: "weighted_sum",
            inputs: |r| {
                Ok(vec![
                    randn(r, &[4])?,
                    randn(r, &[2, 3, 2, 2])?,
                    randn(r, &[2, 3, 2, 2])?,
                    randn(r, &[2, 3, 2, 2])?,
                ])
            },
            forward: |x| Var::weighted_sum(&[Some(x[1]), Some(x[2]), None, Some(x[3])], x[0]),
        },
        GradCase {
            name: "softmax",
            inputs: |r| Ok(vec![randn(r, &[3, 5])?]),
            forward: |x| Ok(x[0].softmax()),
        },
        GradCase {
            name: "mixed_op",
            inputs: |r| Ok(vec![randn(r, &[3])?, randn(r, &[1, 2, 3, 3])?, randn(r, &[1, 2, 3, 3])?]),
            forward: |x| Var::weighted_sum(&[Some(x[1]), None, Some(x[2])], x[0].softmax()),
        },
        GradCase {
            name: "ln",
            inputs: |r| Tensor::uniform(&[3, 4], 0.5, 2.0, r).map(|t| vec![t]),
            forward: |x| Ok(x[0].ln()),
        },
        GradCase {
            name: "exp",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?]),
            forward: |x| Ok(x[0].exp()),
        },
        GradCase {
            name: "l2_normalize",
            inputs: |r| Ok(vec![randn(r, &[3, 5])?]),
            forward: |x| x[0].l2_normalize(),
        },
        GradCase {
            name: "mse_mean",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?, randn(r, &[3, 4])?]),
            forward: |x| x[0].mse_mean(x[1]),
        },
        GradCase {
            name: "cross_entropy",
            inputs: |r| Ok(vec![randn(r, &[4, 5])?]),
            forward: |x| x[0].cross_entropy(&[0, 3, 1, 4]),
        },
        GradCase {
            name: "matmul_nt",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?, randn(r, &[5, 4])?]),
            forward: |x| x[0].matmul_nt(x[1]),
        },
        GradCase {
            name: "add_bias",
            inputs: |r| Ok(vec![randn(r, &[3, 5])?, randn(r, &[5])?]),
            forward: |x| x[0].add_bias(x[1]),
        },
        GradCase {
            name: "arc_margin",
            inputs: |r| Tensor::uniform(&[4, 5], -0.5, 0.9, r).map(|t| vec![t]),
            forward: |x| x[0].arc_margin(&[1, 0, 4, 2], 2.0, 0.5),
        },
        GradCase {
            name: "global_avg_pool",
            inputs: |r| Ok(vec![randn(r, &[2, 3, 4, 4])?]),
            forward: |x| x[0].global_avg_pool(),
        },
        GradCase {
            name: "reshape",
            inputs: |r| Ok(vec![randn(r, &[2, 6])?]),
            forward: |x| x[0].reshape(&[3, 4]),
        },
        GradCase {
            name: "row",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?]),
            forward: |x| x[0].row(1),
        },
        GradCase {
            name: "arcface",
            inputs: |r| Ok(vec![randn(r, &[4, 6])?, randn(r, &[5, 6])?]),
            forward: |x| arcface_from_centers(x[0], x[1], &[2, 0, 4, 1], 4.0, 0.5),
        },
        GradCase {
            name: "embed_mse",
            inputs: |r| Ok(vec![randn(r, &[3, 4])?]),
            forward: |x| {
                let t = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.7).sin()).collect())?;
                embed_mse(x[0], &t)
            },
        },
    ]
}

fn contracted(case: &GradCase, inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>, tape: &Tape<f64>) -> Result<(f64, Vec<Vec<f64>>, Tensor<f64>)> {
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = (case.forward)(&vars)?;
    let out_val = out.value();
    let probe = match probe {
        Some(p) => p.clone(),
        None => {
            // deterministic in the output shape only, so every evaluation agrees
            let n = out_val.len();
            Tensor::new(out_val.shape(), (0..n).map(|i| ((i as f64 + 1.0) * 0.618_034).sin()).collect())?
        }
    };
    let loss = out.mul(tape.constant(probe.clone()))?.sum();
    let value = loss.item();
    let grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.value().len()]))
        .collect();
    Ok((value, g, probe))
}

/// Worst norm-wise relative error over all inputs of `case` for one seed.
pub fn check_case(case: &GradCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.inputs)(&mut rng)?;
    let (_, analytic, probe) = contracted(case, &inputs, None, &Tape::new())?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> { Ok(contracted(case, xs, Some(&probe), &Tape::new())?.0) };
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let mut xs = inputs.to_vec();
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = x0 - STEP;
            let down = eval(&xs)?;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        let err = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        if !err.is_finite() {
            return Err(Error::Numerical(format!("{}: non-finite gradient error", case.name)));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every case over seeds `0..seeds`.
pub fn run_suite(seeds: usize) -> Result<Vec<GradReport>> {
    cases()
        .iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds as u64 {
                worst = worst.max(check_case(c, s)?);
            }
            Ok(GradReport {
                op: c.name,
                seeds,
                worst_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_seeds_pass() {
        for c in cases() {
            let e = check_case(&c, 3).unwrap();
            assert!(e < TOLERANCE, "{}: {e}", c.name);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let bad = GradCase {
            name: "detached",
            inputs: |r| Ok(vec![randn(r, &[3])?]),
            forward: |x| {
                // value of x², but the gradient only flows through one factor
                let c = x[0].tape().constant((*x[0].value()).clone());
                x[0].mul(c)
            },
        };
        assert!(check_case(&bad, 0).unwrap() > 0.1);
    }
}
