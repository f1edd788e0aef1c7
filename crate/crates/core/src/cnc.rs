//! Constrained nonalignment connection.
//!
//! A decoder map `Y` (queries) attends onto a same-resolution encoder map `X`
//! (keys and values). Each query location `p` only sees the `(2r+1)×(2r+1)`
//! square of key positions centred on `p`; positions falling outside the map
//! are masked out of the softmax. The attended feature `Z` is concatenated
//! behind `Y`, giving `F = [Y, Z]`.
//!
//! Logits are raw dot products `Q_pᵀ K_i` (temperature 1) unless
//! [`Cnc::scaled`] is set, in which case they are divided by `√C_h`.

use rand::Rng;

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Conv, ParamStore};
use crate::tensor::{Real, Tensor};

/// Initial projection weights are drawn from `U(-PROJ_INIT, PROJ_INIT)`.
pub const PROJ_INIT: f64 = 0.05;

/// Which key positions a query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// Square of radius `r` centred on the query, clipped to the map.
    Local(usize),
    /// Every position of the key map.
    Global,
}

impl Window {
    /// Candidate key slots per query.
    fn slots(self, h: usize, w: usize) -> usize {
        match self {
            Window::Local(r) => (2 * r + 1) * (2 * r + 1),
            Window::Global => h * w,
        }
    }

    /// Key position for slot `s` of query `(py, px)`, if inside the map.
    #[inline]
    fn key(self, s: usize, (py, px): (usize, usize), h: usize, w: usize) -> Option<usize> {
        match self {
            Window::Global => Some(s),
            Window::Local(r) => {
                let side = 2 * r + 1;
                let ky = (py + s / side).checked_sub(r).filter(|&y| y < h)?;
                let kx = (px + s % side).checked_sub(r).filter(|&x| x < w)?;
                Some(ky * w + kx)
            }
        }
    }

    /// `slots × h·w` validity mask (same for every batch item).
    fn mask(self, h: usize, w: usize) -> Vec<bool> {
        let slots = self.slots(h, w);
        let mut mask = Vec::with_capacity(h * w * slots);
        for py in 0..h {
            for px in 0..w {
                for s in 0..slots {
                    mask.push(self.key(s, (py, px), h, w).is_some());
                }
            }
        }
        mask
    }
}

/// Attention weights of every query location.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    pub window: Window,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Candidate slots per query: `(2r+1)²` or `h·w`.
    pub slots: usize,
    /// `[n, h·w, slots]`; exactly zero at invalid slots.
    pub weights: Vec<T>,
    /// `[h·w, slots]`.
    pub mask: Vec<bool>,
}

impl<T: Real> AttentionMap<T> {
    pub fn row(&self, item: usize, p: usize) -> &[T] {
        &self.weights[(item * self.h * self.w + p) * self.slots..][..self.slots]
    }

    pub fn row_mask(&self, p: usize) -> &[bool] {
        &self.mask[p * self.slots..][..self.slots]
    }
}

/// `[n, c, hw] -> [n, hw, c]`.
fn to_channel_last<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            for p in 0..hw {
                out[(b * hw + p) * c + ci] = x[(b * c + ci) * hw + p];
            }
        }
    }
    out
}

/// `[n, hw, c] -> [n, c, hw]`.
fn to_channel_first<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            for ci in 0..c {
                out[(b * c + ci) * hw + p] = x[(b * hw + p) * c + ci];
            }
        }
    }
    out
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Computes attention weights and the attended map from channel-last
/// `q [n, hw, c]`, `k`, `v`.
fn attend<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    window: Window,
    scale: T,
) -> (AttentionMap<T>, Vec<T>) {
    let hw = h * w;
    let slots = window.slots(h, w);
    let mut weights = vec![T::zero(); n * hw * slots];
    let mut z = vec![T::zero(); n * hw * c];
    for b in 0..n {
        let (qb, kb, vb) = (&q[b * hw * c..], &k[b * hw * c..], &v[b * hw * c..]);
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let qp = &qb[p * c..][..c];
                let row = &mut weights[(b * hw + p) * slots..][..slots];
                let mut max = T::neg_infinity();
                for (s, a) in row.iter_mut().enumerate() {
                    if let Some(kp) = window.key(s, (py, px), h, w) {
                        *a = dot(qp, &kb[kp * c..][..c]) * scale;
                        max = max.max(*a);
                    }
                }
                let mut total = T::zero();
                for (s, a) in row.iter_mut().enumerate() {
                    if window.key(s, (py, px), h, w).is_some() {
                        *a = (*a - max).exp();
                        total = total + *a;
                    }
                }
                let zp = &mut z[(b * hw + p) * c..][..c];
                for (s, a) in row.iter_mut().enumerate() {
                    if let Some(kp) = window.key(s, (py, px), h, w) {
                        *a = *a / total;
                        for (zi, vi) in zp.iter_mut().zip(&vb[kp * c..][..c]) {
                            *zi = *zi + *a * *vi;
                        }
                    }
                }
            }
        }
    }
    let map = AttentionMap {
        window,
        n,
        h,
        w,
        slots,
        weights,
        mask: window.mask(h, w),
    };
    (map, z)
}

struct WindowAttentionFn<T: Real> {
    map: AttentionMap<T>,
    c: usize,
    scale: T,
}

impl<T: Real> Function<T> for WindowAttentionFn<T> {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let AttentionMap {
            window,
            n,
            h,
            w,
            slots,
            ..
        } = self.map;
        let (c, hw) = (self.c, h * w);
        let q = to_channel_last(inputs[0].data(), n, c, hw);
        let k = to_channel_last(inputs[1].data(), n, c, hw);
        let v = to_channel_last(inputs[2].data(), n, c, hw);
        let dz = to_channel_last(grad_out, n, c, hw);
        let mut dq = vec![T::zero(); q.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut dv = vec![T::zero(); v.len()];
        let mut dalpha = vec![T::zero(); slots];
        for b in 0..n {
            let off = b * hw * c;
            for py in 0..h {
                for px in 0..w {
                    let p = py * w + px;
                    let alpha = self.map.row(b, p);
                    let dzp = &dz[off + p * c..][..c];
                    let mut weighted = T::zero();
                    for (s, da) in dalpha.iter_mut().enumerate() {
                        *da = match window.key(s, (py, px), h, w) {
                            Some(kp) => dot(dzp, &v[off + kp * c..][..c]),
                            None => T::zero(),
                        };
                        weighted = weighted + alpha[s] * *da;
                    }
                    for (s, da) in dalpha.iter().enumerate() {
                        let Some(kp) = window.key(s, (py, px), h, w) else {
                            continue;
                        };
                        let a = alpha[s];
                        let dlogit = a * (*da - weighted) * self.scale;
                        let kidx = off + kp * c;
                        let pidx = off + p * c;
                        for ci in 0..c {
                            dv[kidx + ci] = dv[kidx + ci] + a * dzp[ci];
                            dq[pidx + ci] = dq[pidx + ci] + dlogit * k[kidx + ci];
                            dk[kidx + ci] = dk[kidx + ci] + dlogit * q[pidx + ci];
                        }
                    }
                }
            }
        }
        [dq, dk, dv]
            .into_iter()
            .zip(needs)
            .map(|(g, &need)| need.then(|| to_channel_first(&g, n, c, hw)))
            .collect()
    }
}

/// Windowed attention of `q` onto `k`/`v`, all `[N, C_h, H, W]`.
pub fn window_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    window: Window,
    scaled: bool,
) -> Result<Var> {
    let dims = g.value(q).dims4()?;
    if g.shape(k) != g.shape(q) || g.shape(v) != g.shape(q) {
        return Err(Error::dim(format!(
            "attention operands differ: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let (n, c, h, w) = dims;
    let scale = if scaled {
        T::one() / T::of(c.max(1) as f64).sqrt()
    } else {
        T::one()
    };
    let hw = h * w;
    let ql = to_channel_last(g.value(q).data(), n, c, hw);
    let kl = to_channel_last(g.value(k).data(), n, c, hw);
    let vl = to_channel_last(g.value(v).data(), n, c, hw);
    let (map, z) = attend(&ql, &kl, &vl, dims, window, scale);
    let out = Tensor::new(&[n, c, h, w], to_channel_first(&z, n, c, hw))?;
    g.record(out, &[q, k, v], WindowAttentionFn { map, c, scale })
}

/// Gathers key features of the window centred on `p` for batch item `item`.
///
/// Returns `[C_h, valid]` features (in-bounds positions only, row-major over
/// the window) and the `(2r+1)²` in-bounds mask.
pub fn window_gather<T: Real>(
    k: &Tensor<T>,
    item: usize,
    (row, col): (usize, usize),
    radius: usize,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (n, c, h, w) = k.dims4()?;
    if item >= n || row >= h || col >= w {
        return Err(Error::Index(format!(
            "position ({item}, {row}, {col}) outside [{n}, {h}, {w}]"
        )));
    }
    let window = Window::Local(radius);
    let slots = window.slots(h, w);
    let mut mask = Vec::with_capacity(slots);
    let mut positions = Vec::new();
    for s in 0..slots {
        let key = window.key(s, (row, col), h, w);
        mask.push(key.is_some());
        positions.extend(key);
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * positions.len());
    for ci in 0..c {
        let base = (item * c + ci) * plane;
        data.extend(positions.iter().map(|&kp| k.data()[base + kp]));
    }
    Ok((Tensor::new(&[c, positions.len()], data)?, mask))
}

/// Projections of one connection: bias-free 1×1 convolutions
/// `Y → Q` (`C_Y → C_h`) and `X → K, V` (`C_X → C_h`).
#[derive(Clone, Debug)]
pub struct Cnc {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub radius: usize,
    pub x_channels: usize,
    pub y_channels: usize,
    pub hidden: usize,
    pub scaled: bool,
}

impl Cnc {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        x_channels: usize,
        y_channels: usize,
        hidden: usize,
        radius: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut proj = |suffix: &str, cin: usize| {
            Conv::with_bound(
                store,
                &format!("{name}.{suffix}"),
                [hidden, cin, 1, 1],
                1,
                0,
                false,
                PROJ_INIT,
                rng,
            )
        };
        let query = proj("wq", y_channels);
        let key = proj("wk", x_channels);
        let value = proj("wv", x_channels);
        Cnc {
            query,
            key,
            value,
            radius,
            x_channels,
            y_channels,
            hidden,
            scaled: false,
        }
    }

    /// Output channels of `F = [Y, Z]`.
    pub fn out_channels(&self) -> usize {
        self.y_channels + self.hidden
    }

    fn check<T: Real>(&self, g: &Graph<T>, x: Var, y: Var) -> Result<()> {
        let (nx, cx, hx, wx) = g.value(x).dims4()?;
        let (ny, cy, hy, wy) = g.value(y).dims4()?;
        if (nx, hx, wx) != (ny, hy, wy) {
            return Err(Error::dim(format!(
                "encoder map {:?} and decoder map {:?} differ outside channels",
                g.shape(x),
                g.shape(y)
            )));
        }
        if cx != self.x_channels || cy != self.y_channels {
            return Err(Error::dim(format!(
                "expected {}/{} channels, got {cx}/{cy}",
                self.x_channels, self.y_channels
            )));
        }
        Ok(())
    }

    pub fn project_qkv<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding<T>,
        x: Var,
        y: Var,
    ) -> Result<(Var, Var, Var)> {
        self.check(g, x, y)?;
        let q = self.query.forward(g, p, y)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        Ok((q, k, v))
    }

    fn fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding<T>,
        x: Var,
        y: Var,
        window: Window,
    ) -> Result<Var> {
        let (q, k, v) = self.project_qkv(g, p, x, y)?;
        let z = window_attention(g, q, k, v, window, self.scaled)?;
        g.concat_channels(y, z)
    }

    /// `F = [Y, Z]` with attention restricted to the radius-`r` window.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding<T>,
        x: Var,
        y: Var,
    ) -> Result<Var> {
        self.fuse(g, p, x, y, Window::Local(self.radius))
    }

    /// Unconstrained variant: every query attends over the whole key map.
    pub fn forward_global<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding<T>,
        x: Var,
        y: Var,
    ) -> Result<Var> {
        self.fuse(g, p, x, y, Window::Global)
    }

    /// Attention weights the connection would use for `(x, y)`.
    pub fn attention_map<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        y: &Tensor<T>,
        window: Window,
    ) -> Result<AttentionMap<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, crate::params::Mode::Eval, false);
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let (q, k, v) = self.project_qkv(&mut g, &p, vx, vy)?;
        let dims = g.value(q).dims4()?;
        let hw = dims.2 * dims.3;
        let scale = if self.scaled {
            T::one() / T::of(self.hidden.max(1) as f64).sqrt()
        } else {
            T::one()
        };
        let ql = to_channel_last(g.value(q).data(), dims.0, dims.1, hw);
        let kl = to_channel_last(g.value(k).data(), dims.0, dims.1, hw);
        let vl = to_channel_last(g.value(v).data(), dims.0, dims.1, hw);
        Ok(attend(&ql, &kl, &vl, dims, window, scale).0)
    }
}

/// Reference implementation with explicit per-location loops and a scalar
/// softmax, evaluated in `f64`. Intended for small maps in tests.
pub fn cnc_oracle<T: Real>(
    store: &ParamStore<T>,
    cnc: &Cnc,
    x: &Tensor<T>,
    y: &Tensor<T>,
    window: Window,
) -> Result<Tensor<T>> {
    let (n, cx, h, w) = x.dims4()?;
    let (ny, cy, hy, wy) = y.dims4()?;
    if (n, h, w) != (ny, hy, wy) || cx != cnc.x_channels || cy != cnc.y_channels {
        return Err(Error::dim("oracle: incompatible X/Y shapes"));
    }
    let f = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64().unwrap()).collect() };
    let (xd, yd) = (f(x), f(y));
    let (wq, wk, wv) = (
        f(store.get(cnc.query.w)),
        f(store.get(cnc.key.w)),
        f(store.get(cnc.value.w)),
    );
    let ch = cnc.hidden;
    let scale = if cnc.scaled {
        1.0 / (ch as f64).sqrt()
    } else {
        1.0
    };
    let at = |d: &[f64], c: usize, b: usize, ci: usize, yy: usize, xx: usize| {
        d[((b * c + ci) * h + yy) * w + xx]
    };
    let project = |weights: &[f64], src: &[f64], cin: usize, b: usize, yy: usize, xx: usize| {
        (0..ch)
            .map(|o| {
                (0..cin)
                    .map(|i| weights[o * cin + i] * at(src, cin, b, i, yy, xx))
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    };

    let cout = cy + ch;
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for py in 0..h {
            for px in 0..w {
                let q = project(&wq, &yd, cy, b, py, px);
                let mut neighbours = Vec::new();
                for ky in 0..h {
                    for kx in 0..w {
                        let inside = match window {
                            Window::Global => true,
                            Window::Local(r) => py.abs_diff(ky) <= r && px.abs_diff(kx) <= r,
                        };
                        if inside {
                            neighbours.push((ky, kx));
                        }
                    }
                }
                let logits: Vec<f64> = neighbours
                    .iter()
                    .map(|&(ky, kx)| {
                        let k = project(&wk, &xd, cx, b, ky, kx);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut z = vec![0.0; ch];
                for (&(ky, kx), e) in neighbours.iter().zip(&exps) {
                    let v = project(&wv, &xd, cx, b, ky, kx);
                    for (zi, vi) in z.iter_mut().zip(&v) {
                        *zi += e / total * vi;
                    }
                }
                for ci in 0..cy {
                    out[((b * cout + ci) * h + py) * w + px] = at(&yd, cy, b, ci, py, px);
                }
                for (ci, zi) in z.iter().enumerate() {
                    out[((b * cout + cy + ci) * h + py) * w + px] = *zi;
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, w], out.into_iter().map(T::of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn setup(
        seed: u64,
        (n, cx, cy, ch, h, w): (usize, usize, usize, usize, usize, usize),
        radius: usize,
    ) -> (ParamStore<f64>, Cnc, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cnc = Cnc::new(&mut store, "cnc", cx, cy, ch, radius, &mut rng);
        // Larger weights than the init so attention is far from uniform.
        for id in [cnc.query.w, cnc.key.w, cnc.value.w] {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x = random(&mut rng, &[n, cx, h, w]);
        let y = random(&mut rng, &[n, cy, h, w]);
        (store, cnc, x, y)
    }

    fn run(
        store: &ParamStore<f64>,
        cnc: &Cnc,
        x: &Tensor<f64>,
        y: &Tensor<f64>,
        window: Window,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, Mode::Eval, false);
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = match window {
            Window::Global => cnc.forward_global(&mut g, &p, vx, vy),
            Window::Local(r) => {
                let mut c = cnc.clone();
                c.radius = r;
                c.forward(&mut g, &p, vx, vy)
            }
        }
        .unwrap();
        g.value(out).clone()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gather_clips_corner() {
        let k = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let (win, mask) = window_gather(&k, 0, (0, 0), 1).unwrap();
        assert_eq!(win.shape(), &[1, 4]);
        assert_eq!(win.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(
            mask,
            vec![false, false, false, false, true, true, false, true, true]
        );
        let (win, mask) = window_gather(&k, 0, (2, 1), 0).unwrap();
        assert_eq!(win.data(), &[8.0]);
        assert_eq!(mask, vec![true]);
        let (win, mask) = window_gather(&k, 0, (1, 1), 1).unwrap();
        assert_eq!(win.data(), &(1..=9).map(f64::from).collect::<Vec<_>>()[..]);
        assert!(mask.iter().all(|m| *m));
        assert!(matches!(
            window_gather(&k, 0, (3, 0), 1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn identity_projections() {
        let (mut store, cnc, x, y) = setup(1, (2, 3, 3, 3, 4, 4), 1);
        for id in [cnc.query.w, cnc.key.w, cnc.value.w] {
            let t = store.get_mut(id);
            t.data_mut().fill(0.0);
            for c in 0..3 {
                t.data_mut()[c * 3 + c] = 1.0;
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, Mode::Eval, false);
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let (q, k, v) = cnc.project_qkv(&mut g, &p, vx, vy).unwrap();
        assert_eq!(g.value(q).data(), y.data());
        assert_eq!(g.value(k).data(), x.data());
        assert_eq!(g.value(v).data(), x.data());
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let (store, cnc, x, _) = setup(2, (1, 2, 2, 2, 4, 4), 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, Mode::Eval, false);
        let vx = g.constant(x);
        let vy = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            cnc.forward(&mut g, &p, vx, vy),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_key_gives_window_mean() {
        // 3×3 toy: with K ≡ 0 every valid slot gets equal weight, so Z_p is
        // the plain mean of the value window.
        let (mut store, cnc, _, y) = setup(3, (1, 1, 1, 1, 3, 3), 1);
        store.get_mut(cnc.key.w).data_mut().fill(0.0);
        store.get_mut(cnc.value.w).data_mut().fill(1.0);
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let out = run(&store, &cnc, &x, &y, Window::Local(1));
        let z = &out.data()[9..];
        let want = [3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let map = cnc.attention_map(&store, &x, &y, Window::Local(1)).unwrap();
        let corner: Vec<f64> = map.row(0, 0).iter().copied().filter(|v| *v > 0.0).collect();
        assert_eq!(corner.len(), 4);
        assert!(corner.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn matches_oracle_and_degenerate_cases() {
        let (store, cnc, x, y) = setup(4, (1, 4, 4, 4, 5, 5), 1);
        let fast = run(&store, &cnc, &x, &y, Window::Local(1));
        let slow = cnc_oracle(&store, &cnc, &x, &y, Window::Local(1)).unwrap();
        assert!(max_diff(&fast, &slow) < 1e-6);

        // r = 0: Z is the projected value at p.
        let r0 = run(&store, &cnc, &x, &y, Window::Local(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g, Mode::Eval, false);
        let vx = g.constant(x.clone());
        let v = cnc.value.forward(&mut g, &p, vx).unwrap();
        assert!(r0.data()[4 * 25..]
            .iter()
            .zip(g.value(v).data())
            .all(|(a, b)| (a - b).abs() < 1e-12));

        // 1×1 map: α = [1], Z = V for any radius and for the global variant.
        let (store1, cnc1, x1, y1) = setup(5, (2, 3, 2, 2, 1, 1), 3);
        let a = run(&store1, &cnc1, &x1, &y1, Window::Local(3));
        let b = run(&store1, &cnc1, &x1, &y1, Window::Global);
        assert!(max_diff(&a, &b) < 1e-15);
    }

    #[test]
    fn covering_window_equals_global() {
        let (store, cnc, x, y) = setup(6, (2, 3, 2, 4, 4, 5), 4);
        let local = run(&store, &cnc, &x, &y, Window::Local(4));
        let global = run(&store, &cnc, &x, &y, Window::Global);
        assert!(max_diff(&local, &global) < 1e-6);
        let oracle = cnc_oracle(&store, &cnc, &x, &y, Window::Global).unwrap();
        assert!(max_diff(&global, &oracle) < 1e-6);
    }

    #[test]
    fn attention_rows_normalised_and_masked() {
        let (store, cnc, x, y) = setup(7, (2, 3, 3, 2, 5, 4), 2);
        let map = cnc.attention_map(&store, &x, &y, Window::Local(2)).unwrap();
        for b in 0..2 {
            for p in 0..20 {
                let row = map.row(b, p);
                let mask = map.row_mask(p);
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
                for (a, m) in row.iter().zip(mask) {
                    if *m {
                        assert!(*a > 0.0);
                    } else {
                        assert_eq!(*a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn translation_consistency() {
        let (store, cnc, x, y) = setup(8, (1, 2, 2, 3, 8, 8), 1);
        let shift = |t: &Tensor<f64>| {
            let (n, c, h, w) = t.dims4().unwrap();
            let mut out = Tensor::zeros(&[n, c, h, w]);
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 1..w {
                        out.data_mut()[(ci * h + yy) * w + xx] =
                            t.data()[(ci * h + yy) * w + xx - 1];
                    }
                }
            }
            out
        };
        let base = run(&store, &cnc, &x, &y, Window::Local(1));
        let moved = run(&store, &cnc, &shift(&x), &shift(&y), Window::Local(1));
        let (_, c, h, w) = base.dims4().unwrap();
        // Interior: the window (radius 1) never touches the boundary or the
        // zero column introduced by the shift.
        for ci in 2..c {
            for yy in 1..h - 1 {
                for xx in 2..w - 2 {
                    let a = base.data()[(ci * h + yy) * w + xx];
                    let b = moved.data()[(ci * h + yy) * w + xx + 1];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn gradients_local_and_global() {
        for (case, (radius, global)) in [(0, false), (1, false), (2, false), (1, true), (3, false)]
            .into_iter()
            .enumerate()
        {
            let (store, cnc, x, y) = setup(20 + case as u64, (2, 3, 2, 2, 3, 4), radius);
            let weights = [
                store.get(cnc.query.w).clone(),
                store.get(cnc.key.w).clone(),
                store.get(cnc.value.w).clone(),
            ];
            let cnc_ref = &cnc;
            let err = grad_check(
                |g, v| {
                    let (q, k, val) = (
                        g.conv2d(v[1], v[2], None, 1, 0)?,
                        g.conv2d(v[0], v[3], None, 1, 0)?,
                        g.conv2d(v[0], v[4], None, 1, 0)?,
                    );
                    let window = if global {
                        Window::Global
                    } else {
                        Window::Local(cnc_ref.radius)
                    };
                    let z = window_attention(g, q, k, val, window, false)?;
                    let f = g.concat_channels(v[1], z)?;
                    let sq = g.mul(f, f)?;
                    g.sum(sq)
                },
                &[
                    x,
                    y,
                    weights[0].clone(),
                    weights[1].clone(),
                    weights[2].clone(),
                ],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }
}
