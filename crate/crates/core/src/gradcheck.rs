//! Central finite-difference verification of backward passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aim::{Aim, BatchNorm};
use crate::autodiff::{Graph, Var};
use crate::cnc::Cnc;
use crate::error::{Error, Result};
use crate::networks::{Ablation, Discriminator, Generator, LinkKind, LinkSpec, NetConfig, Norm};
use crate::params::{Binding, Mode, ParamStore};
use crate::tensor::Tensor;

/// Relative-error tolerance for 64-bit checks.
pub const TOLERANCE_F64: f64 = 1e-4;
/// Relative-error tolerance for 32-bit checks.
pub const TOLERANCE_F32: f64 = 1e-2;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward gradients of a scalar-valued `op` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every coordinate of every
/// input, returning the largest relative error.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_steps(op, inputs, &[eps])
}

const EARLY_EXIT: f64 = 1e-6;

/// Like [`grad_check`], but each coordinate is compared against the central
/// difference at every step in `steps` in turn and scores the smallest
/// relative error found, stopping once one falls under `1e-6`.
///
/// A single step cannot serve every coordinate of a deep network: large
/// steps straddle activation kinks, small ones drown near-zero gradients
/// in rounding noise.
pub fn grad_check_steps<F>(op: F, inputs: &[Tensor<f64>], steps: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if steps.is_empty() {
        return Err(Error::Config("no finite-difference step given".into()));
    }
    if let Some(eps) = steps.iter().find(|e| !(1e-7..=1e-3).contains(*e)) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = op(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[ti].data()[i];
            let mut best = f64::INFINITY;
            for &eps in steps {
                work[ti].data_mut()[i] = orig + eps;
                let plus = eval(&work)?;
                work[ti].data_mut()[i] = orig - eps;
                let minus = eval(&work)?;
                best = best.min(relative_error(a, (plus - minus) / (2.0 * eps)));
                if best < EARLY_EXIT {
                    break;
                }
            }
            work[ti].data_mut()[i] = orig;
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Steps tried, in order, by the registered checks.
pub const SUITE_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-3];

/// Every differentiable operation covered by [`check_op`].
pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "softmax",
    "concat",
    "spatial_mean",
    "cross_entropy",
    "batch_norm",
    "cnc_forward",
    "global_nc_forward",
    "aim_forward",
    "generator",
    "discriminator",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    /// Largest relative error of each instance.
    pub errors: Vec<f64>,
    pub seconds: f64,
}

impl OpReport {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.errors.is_empty() && self.worst() < TOLERANCE_F64
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ w·(out - base)`: a scalar whose gradient reaches every output
/// coordinate and whose value stays near zero, keeping rounding in the
/// differences small.
fn project(g: &mut Graph<f64>, out: Var, base: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Var> {
    let base = g.constant(base.map(|v| -v));
    let centered = g.add(out, base)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(centered, w)?;
    g.sum(prod)
}

/// Checks `f` with respect to both `data` and every trainable entry of `store`.
fn check_module<F>(
    store: &ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut Binding<f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<_> = store
        .ids()
        .zip(store.entries())
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let nd = data.len();
    let mut inputs = data;
    inputs.extend(ids.iter().map(|id| store.get(*id).clone()));
    let body = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut p = store.bind(g, mode, false);
        p.override_vars(ids.iter().copied().zip(v[nd..].iter().copied()));
        f(g, &mut p, &v[..nd])
    };
    check_projected(body, inputs, rng)
}

/// Runs `op` once for its output shape, then checks its projection onto a
/// random unit direction.
fn check_projected<F>(op: F, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let base = g.value(out).clone();
    let raw = Tensor::from_fn(base.shape(), |_| rng.random_range(-1.0..1.0));
    let norm = raw
        .data()
        .iter()
        .map(|w| w * w)
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let weights = raw.map(|w| w / norm);
    grad_check_steps(
        |g, v| {
            let out = op(g, v)?;
            project(g, out, &base, &weights)
        },
        &inputs,
        &SUITE_STEPS,
    )
}

fn unary_check(rng: &mut ChaCha8Rng, f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    // Keep samples away from the kink at zero.
    let x = Tensor::from_fn(&[2, 3, 2], |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    check_projected(|g, v| f(g, v[0]), vec![x], rng)
}

/// Redraws the deliberately small initial weights (attention projections,
/// modulation output layers) at unit fan-in scale, so that no parameter's
/// gradient is tiny merely because of its initialization.
fn widen_small_inits(store: &mut ParamStore<f64>, gen: &Generator, rng: &mut ChaCha8Rng) {
    let mut ids = Vec::new();
    for link in &gen.links {
        if let LinkKind::Attend { cnc, .. } = &link.kind {
            ids.extend([cnc.query.w, cnc.key.w, cnc.value.w]);
        }
    }
    for norm in &gen.norms {
        if let Norm::Aim(aim) = norm {
            ids.extend([aim.gamma.out.w, aim.beta.out.w]);
        }
    }
    for id in ids {
        let t = store.get_mut(id);
        let bound = 1.0 / (t.shape()[0] as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
}

fn small_net(instance: u64) -> NetConfig {
    NetConfig {
        image_size: 32,
        base_channels: 1,
        id_dim: 3,
        noise_dim: 2,
        num_ids: 3,
        num_attrs: 2,
        ablation: Ablation::ALL[instance as usize % Ablation::ALL.len()],
        links: vec![LinkSpec {
            resolution: 8,
            radius: 1 + instance as usize % 2,
        }],
    }
}

/// Largest relative error of one random instance of `op`.
pub fn check_op(op: &str, instance: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ instance.wrapping_mul(0x9e37_79b9));
    let r = &mut rng;
    match op {
        "add" | "mul" => {
            let a = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            let same = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            let chan = uniform(r, &[3], -1.0, 1.0);
            let item = uniform(r, &[2, 3], -1.0, 1.0);
            let scalar = uniform(r, &[1], -1.0, 1.0);
            let mul = op == "mul";
            check_projected(
                |g, v| {
                    let mut acc = v[0];
                    for &b in &v[1..] {
                        acc = if mul { g.mul(acc, b)? } else { g.add(acc, b)? };
                    }
                    Ok(acc)
                },
                vec![a, same, chan, item, scalar],
                r,
            )
        }
        "scale" => {
            let x = uniform(r, &[3, 4], -1.0, 1.0);
            let k = r.random_range(-2.0..2.0);
            check_projected(|g, v| g.scale(v[0], k), vec![x], r)
        }
        "relu" => unary_check(r, |g, x| g.relu(x)),
        "leaky_relu" => unary_check(r, |g, x| g.leaky_relu(x)),
        "sigmoid" => unary_check(r, |g, x| g.sigmoid(x)),
        "tanh" => unary_check(r, |g, x| g.tanh(x)),
        "sum" | "mean" => {
            let x = uniform(r, &[2, 3, 2], -1.0, 1.0);
            let mean = op == "mean";
            check_projected(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    if mean {
                        g.mean(sq)
                    } else {
                        g.sum(sq)
                    }
                },
                vec![x],
                r,
            )
        }
        "reshape" => {
            let x = uniform(r, &[2, 3, 2], -1.0, 1.0);
            check_projected(|g, v| g.reshape(v[0], &[3, 4]), vec![x], r)
        }
        "matmul" => {
            let (m, k, n) = (
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..4),
            );
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            check_projected(|g, v| g.matmul(v[0], v[1]), vec![a, b], r)
        }
        "conv2d" => {
            let (stride, pad, k) = (1 + instance as usize % 2, instance as usize % 2, 3);
            let x = uniform(r, &[2, 2, 5, 5], -1.0, 1.0);
            let w = uniform(r, &[3, 2, k, k], -1.0, 1.0);
            let b = uniform(r, &[3], -1.0, 1.0);
            check_projected(
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
                vec![x, w, b],
                r,
            )
        }
        "conv_transpose2d" => {
            let x = uniform(r, &[2, 2, 3, 3], -1.0, 1.0);
            let w = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
            let b = uniform(r, &[3], -1.0, 1.0);
            check_projected(
                |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
                vec![x, w, b],
                r,
            )
        }
        "softmax" => {
            let x = uniform(r, &[3, 4], -2.0, 2.0);
            check_projected(|g, v| g.softmax_lastdim(v[0]), vec![x], r)
        }
        "concat" => {
            let a = uniform(r, &[2, 1, 2, 2], -1.0, 1.0);
            let b = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            let c = uniform(r, &[2, 2, 2, 2], -1.0, 1.0);
            check_projected(|g, v| g.concat(v), vec![a, b, c], r)
        }
        "spatial_mean" => {
            let x = uniform(r, &[2, 3, 3, 2], -1.0, 1.0);
            check_projected(|g, v| g.spatial_mean(v[0]), vec![x], r)
        }
        "cross_entropy" => {
            let (n, k) = (r.random_range(1..5), r.random_range(2..6));
            let x = uniform(r, &[n, k], -2.0, 2.0);
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            grad_check_steps(
                |g, v| g.cross_entropy_logits(v[0], &targets),
                &[x],
                &SUITE_STEPS,
            )
        }
        "batch_norm" => {
            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 3);
            let x = uniform(r, &[3, 3, 2, 2], -1.0, 1.0);
            check_module(&store, vec![x], Mode::Train, r, |g, p, v| {
                bn.forward(g, p, v[0])
            })
        }
        "cnc_forward" | "global_nc_forward" => {
            let (h, w) = (2 + instance as usize % 3, 3);
            let mut store = ParamStore::new();
            let radius = instance as usize % 3;
            let cnc = Cnc::new(&mut store, "cnc", 2, 3, 2, radius, r);
            // Larger than the init so attention is far from uniform.
            for e in store.entries_mut() {
                for v in e.tensor.data_mut() {
                    *v = r.random_range(-1.0..1.0);
                }
            }
            let x = uniform(r, &[2, 2, h, w], -1.0, 1.0);
            let y = uniform(r, &[2, 3, h, w], -1.0, 1.0);
            let global = op == "global_nc_forward";
            check_module(&store, vec![x, y], Mode::Eval, r, |g, p, v| {
                if global {
                    cnc.forward_global(g, p, v[0], v[1])
                } else {
                    cnc.forward(g, p, v[0], v[1])
                }
            })
        }
        "aim_forward" => {
            let mut store = ParamStore::new();
            let aim = Aim::new(&mut store, "aim", 3, 4, r);
            let b = uniform(r, &[3, 3, 2, 2], -1.0, 1.0);
            let f = uniform(r, &[3, 4], -1.0, 1.0);
            check_module(&store, vec![b, f], Mode::Train, r, |g, p, v| {
                aim.forward(g, p, v[0], v[1])
            })
        }
        "generator" => {
            let cfg = small_net(instance);
            let mut store = ParamStore::new();
            let gen = Generator::new(&mut store, &cfg, r)?;
            widen_small_inits(&mut store, &gen, r);
            let image = uniform(r, &[2, 3, cfg.image_size, cfg.image_size], -1.0, 1.0);
            let z = uniform(r, &[2, cfg.noise_dim], -1.0, 1.0);
            let code = Tensor::from_fn(&[2, cfg.num_attrs], |i| {
                if i % cfg.num_attrs == i / cfg.num_attrs {
                    1.0
                } else {
                    0.0
                }
            });
            check_module(&store, vec![image, z, code], Mode::Train, r, |g, p, v| {
                gen.generate(g, p, v[0], v[1], v[2])
            })
        }
        "discriminator" => {
            let cfg = small_net(instance);
            let mut store = ParamStore::new();
            let disc = Discriminator::new(&mut store, &cfg, r)?;
            let image = uniform(r, &[2, 3, cfg.image_size, cfg.image_size], -1.0, 1.0);
            check_module(&store, vec![image], Mode::Train, r, |g, p, v| {
                let (id, attr) = disc.forward(g, p, v[0])?;
                g.concat(&[id, attr])
            })
        }
        other => Err(Error::Config(format!(
            "no gradient check registered for '{other}'"
        ))),
    }
}

/// Runs `instances` random instances of every registered operation.
pub fn run_suite(instances: usize) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|&name| {
            let start = Instant::now();
            let errors = (0..instances as u64)
                .map(|i| check_op(name, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(OpReport {
                name,
                errors,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Function;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 0.25, -1.5, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(y)
            },
            &[x, w],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_random_2x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[2, 3], |_| rng.random_range(-2.0..2.0));
        let err = grad_check(|g, v| g.cross_entropy_logits(v[0], &[2, 0]), &[x], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Doubles its input but claims a gradient of 3.
    struct Corrupt;

    impl Function<f64> for Corrupt {
        fn name(&self) -> &'static str {
            "corrupt"
        }

        fn backward(
            &self,
            _inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad_out: &[f64],
            _needs: &[bool],
        ) -> Vec<Option<Vec<f64>>> {
            vec![Some(grad_out.iter().map(|g| g * 3.0).collect())]
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::new(&[3], vec![0.5, -0.25, 1.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let doubled = g.value(v[0]).map(|x| 2.0 * x);
                let y = g.record(doubled, &[v[0]], Corrupt)?;
                g.sum(y)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| g.sum(v[0]), &[x], 0.1).is_err());
    }

    #[test]
    fn every_registered_op_passes_once() {
        for op in OPS {
            let err = check_op(op, 0).unwrap();
            assert!(err < TOLERANCE_F64, "{op}: {err}");
        }
    }

    #[test]
    fn unknown_op_rejected() {
        assert!(matches!(check_op("nope", 0), Err(Error::Config(_))));
    }

    #[test]
    fn step_ladder_validates_and_detects() {
        let x = Tensor::new(&[3], vec![0.5, -0.25, 1.0]).unwrap();
        assert!(grad_check_steps(|g, v| g.sum(v[0]), std::slice::from_ref(&x), &[]).is_err());
        assert!(
            grad_check_steps(|g, v| g.sum(v[0]), std::slice::from_ref(&x), &[1e-4, 1e-2]).is_err()
        );
        let err = grad_check_steps(
            |g, v| {
                let doubled = g.value(v[0]).map(|x| 2.0 * x);
                let y = g.record(doubled, &[v[0]], Corrupt)?;
                g.sum(y)
            },
            &[x],
            &SUITE_STEPS,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
