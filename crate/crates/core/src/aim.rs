//! Adaptive identity modulation.
//!
//! Batch normalization whose per-item scale and shift come from the identity
//! feature `f_id`, gated by a sigmoid attention computed from the spatial
//! average of the very feature map being normalized:
//!
//! ```text
//! B̂     = (B - E[B]) / sqrt(Var[B] + ε)          (per channel, over N·H·W)
//! att_B = τ(mean_hw(B_i))                         (sigmoid-terminated MLP)
//! f_att = f_id ⊙ att_B
//! B̃_i   = γ(f_att)·B̂_i + β(f_att)
//! ```

use rand::Rng;

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Dense, Mode, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Final-layer weight scale of the γ/β MLPs, keeping γ ≈ 1 and β ≈ 0 at init.
const MODULATION_INIT_SCALE: f64 = 0.1;

/// Per-channel statistics of `[N, C, H, W]` data: `(mean, biased variance)`.
fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x[(b * c + ci) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for b in 0..n {
            for v in &x[(b * c + ci) * hw..][..hw] {
                ss = ss + (*v - m) * (*v - m);
            }
        }
        mean[ci] = m;
        var[ci] = ss / count;
    }
    (mean, var)
}

struct BatchNormFn<T> {
    inv_std: Vec<T>,
    train: bool,
    n: usize,
    c: usize,
    hw: usize,
}

impl<T: Real> Function<T> for BatchNormFn<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, hw) = (self.n, self.c, self.hw);
        let mut gx = vec![T::zero(); grad_out.len()];
        let xhat = output.data();
        let count = T::of((n * hw) as f64);
        for ci in 0..c {
            let inv = self.inv_std[ci];
            let planes = (0..n).map(|b| (b * c + ci) * hw);
            if !self.train {
                for start in planes {
                    for i in start..start + hw {
                        gx[i] = grad_out[i] * inv;
                    }
                }
                continue;
            }
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for start in planes.clone() {
                for i in start..start + hw {
                    sum_dy = sum_dy + grad_out[i];
                    sum_dy_xhat = sum_dy_xhat + grad_out[i] * xhat[i];
                }
            }
            let (mean_dy, mean_dy_xhat) = (sum_dy / count, sum_dy_xhat / count);
            for start in planes {
                for i in start..start + hw {
                    gx[i] = inv * (grad_out[i] - mean_dy - xhat[i] * mean_dy_xhat);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Affine-free batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let running_mean =
            store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            Tensor::full(&[channels], T::one()),
        );
        BatchNorm {
            channels,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// `B̂ = (B - μ)/√(σ² + ε)`; train mode uses batch statistics and queues
    /// a momentum update of the running ones, eval mode uses the running ones.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binding<T>, x: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::dim(format!(
                "batch norm over {} channels got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let eps = T::of(self.eps);
        let train = p.mode == Mode::Train;
        let (mean, var) = if train {
            if n < 2 {
                return Err(Error::BatchSize(format!(
                    "train-mode batch norm needs at least 2 items, got {n}"
                )));
            }
            let (mean, var) = channel_stats(g.value(x).data(), n, c, hw);
            let m = T::of(self.momentum);
            let count = (n * hw) as f64;
            let unbias = T::of(count / (count - 1.0).max(1.0));
            let old_mean = g.value(p.var(self.running_mean)).data();
            let old_var = g.value(p.var(self.running_var)).data();
            let new_mean: Vec<T> = old_mean
                .iter()
                .zip(&mean)
                .map(|(o, b)| (T::one() - m) * *o + m * *b)
                .collect();
            let new_var: Vec<T> = old_var
                .iter()
                .zip(&var)
                .map(|(o, b)| (T::one() - m) * *o + m * *b * unbias)
                .collect();
            p.push_update(self.running_mean, Tensor::new(&[c], new_mean)?);
            p.push_update(self.running_var, Tensor::new(&[c], new_var)?);
            (mean, var)
        } else {
            (
                g.value(p.var(self.running_mean)).data().to_vec(),
                g.value(p.var(self.running_var)).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let src = g.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (i, plane) in src.chunks(hw).enumerate() {
            let ci = i % c;
            for (o, v) in out[i * hw..][..hw].iter_mut().zip(plane) {
                *o = (*v - mean[ci]) * inv_std[ci];
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        g.record(
            out,
            &[x],
            BatchNormFn {
                inv_std,
                train,
                n,
                c,
                hw,
            },
        )
    }
}

/// Two dense layers with a leaky-relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        width: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Dense::new(store, &format!("{name}.0"), inputs, width, rng),
            out: Dense::new(store, &format!("{name}.1"), width, outputs, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.leaky_relu(h)?;
        self.out.forward(g, p, h)
    }
}

/// Identity-conditioned normalization of one decoder block.
#[derive(Clone, Debug)]
pub struct Aim {
    pub bn: BatchNorm,
    /// `C → C_id`, sigmoid-terminated.
    pub tau: Mlp,
    /// `C_id → C`, output bias initialised to 1.
    pub gamma: Mlp,
    /// `C_id → C`, output bias initialised to 0.
    pub beta: Mlp,
    pub channels: usize,
    pub id_dim: usize,
    /// When false, γ and β see `f_id` directly (plain conditional BN).
    pub adaptive: bool,
}

impl Aim {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        id_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels);
        let tau = Mlp::new(store, &format!("{name}.tau"), channels, id_dim, id_dim, rng);
        let gamma = Mlp::new(
            store,
            &format!("{name}.gamma"),
            id_dim,
            id_dim,
            channels,
            rng,
        );
        let beta = Mlp::new(
            store,
            &format!("{name}.beta"),
            id_dim,
            id_dim,
            channels,
            rng,
        );
        for (mlp, bias) in [(&gamma, 1.0), (&beta, 0.0)] {
            let w = store.get_mut(mlp.out.w);
            for v in w.data_mut() {
                *v = *v * T::of(MODULATION_INIT_SCALE);
            }
            store.get_mut(mlp.out.b).data_mut().fill(T::of(bias));
        }
        Aim {
            bn,
            tau,
            gamma,
            beta,
            channels,
            id_dim,
            adaptive: true,
        }
    }

    /// Forces γ ≡ 1 and β ≡ 0 by zeroing the output layers.
    pub fn make_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        self.gamma.out.make_constant(store, 1.0);
        self.beta.out.make_constant(store, 0.0);
    }

    /// `att_B = τ(mean_hw(B))`, shape `[N, C_id]`, entries in (0, 1).
    pub fn channel_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding<T>,
        b: Var,
    ) -> Result<Var> {
        let pooled = g.spatial_mean(b)?;
        let logits = self.tau.forward(g, p, pooled)?;
        g.sigmoid(logits)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binding<T>,
        b: Var,
        f_id: Var,
    ) -> Result<Var> {
        let (n, c, _, _) = g.value(b).dims4()?;
        if g.shape(f_id) != [n, self.id_dim] {
            return Err(Error::dim(format!(
                "identity feature {:?} for batch {n} and C_id {}",
                g.shape(f_id),
                self.id_dim
            )));
        }
        if c != self.channels {
            return Err(Error::dim(format!(
                "modulation over {} channels got {c}",
                self.channels
            )));
        }
        let normalized = self.bn.forward(g, p, b)?;
        let cond = if self.adaptive {
            let att = self.channel_attention(g, p, b)?;
            g.mul(f_id, att)?
        } else {
            f_id
        };
        let gamma = self.gamma.forward(g, p, cond)?;
        let beta = self.beta.forward(g, p, cond)?;
        let scaled = g.mul(normalized, gamma)?;
        g.add(scaled, beta)
    }
}
