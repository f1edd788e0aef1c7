use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How the right operand of a binary op lines up with the left one.
///
/// The left operand is viewed as `[N, C, S]` (`S` = product of trailing dims).
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// `b` is `[C]`.
    Channel {
        n: usize,
        c: usize,
        s: usize,
    },
    /// `b` is `[N, C]` against a rank ≥ 3 `a`.
    ItemChannel {
        n: usize,
        c: usize,
        s: usize,
    },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let b_len: usize = b.iter().product();
        if b_len == 1 {
            return Ok(Broadcast::Scalar);
        }
        if a.len() >= 2 {
            let (n, c) = (a[0], a[1]);
            let s: usize = a[2..].iter().product();
            if b == [c] {
                return Ok(Broadcast::Channel { n, c, s });
            }
            if a.len() >= 3 && b == [n, c] {
                return Ok(Broadcast::ItemChannel { n, c, s });
            }
        }
        Err(Error::dim(format!("cannot broadcast {b:?} onto {a:?}")))
    }

    /// Calls `f(a_index_range, b_index)` for every run sharing one `b` element,
    /// or `f(i..i+1, i)` per element for `Same`.
    fn for_each_run(self, len: usize, mut f: impl FnMut(std::ops::Range<usize>, usize)) {
        match self {
            Broadcast::Same => (0..len).for_each(|i| f(i..i + 1, i)),
            Broadcast::Scalar => f(0..len, 0),
            Broadcast::Channel { n, c, s } | Broadcast::ItemChannel { n, c, s } => {
                let item = matches!(self, Broadcast::ItemChannel { .. });
                for ni in 0..n {
                    for ci in 0..c {
                        let start = (ni * c + ci) * s;
                        let bi = if item { ni * c + ci } else { ci };
                        f(start..start + s, bi);
                    }
                }
            }
        }
    }
}

fn map_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bc: Broadcast,
    op: impl Fn(T, T) -> T,
) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); ad.len()];
    bc.for_each_run(ad.len(), |range, bi| {
        let bv = bd[bi];
        for i in range {
            out[i] = op(ad[i], bv);
        }
    });
    out
}

/// Sums `values` (shaped like `a`) down to `b`'s shape.
fn reduce_to<T: Real>(values: Vec<T>, b_len: usize, bc: Broadcast) -> Vec<T> {
    if let Broadcast::Same = bc {
        return values;
    }
    let mut out = vec![T::zero(); b_len];
    bc.for_each_run(values.len(), |range, bi| {
        let mut acc = T::zero();
        for i in range {
            acc = acc + values[i];
        }
        out[bi] = out[bi] + acc;
    });
    out
}

struct AddFn(Broadcast);

impl<T: Real> Function<T> for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let ga = needs[0].then(|| grad_out.to_vec());
        let gb = needs[1].then(|| reduce_to(grad_out.to_vec(), inputs[1].len(), self.0));
        vec![ga, gb]
    }
}

struct MulFn(Broadcast);

impl<T: Real> Function<T> for MulFn {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let g = Tensor::new(a.shape(), grad_out.to_vec()).expect("grad matches output");
            map_binary(&g, b, self.0, |g, bv| g * bv)
        });
        let gb = needs[1].then(|| {
            let prod: Vec<T> = grad_out
                .iter()
                .zip(a.data())
                .map(|(g, a)| *g * *a)
                .collect();
            reduce_to(prod, b.len(), self.0)
        });
        vec![ga, gb]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

struct UnaryFn(Unary);

impl<T: Real> Function<T> for UnaryFn {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let slope = T::of(LEAKY_SLOPE);
        let g: Vec<T> = match self.0 {
            Unary::Relu => grad_out
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect(),
            Unary::LeakyRelu => grad_out
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > T::zero() { *g } else { *g * slope })
                .collect(),
            Unary::Sigmoid => grad_out
                .iter()
                .zip(y)
                .map(|(g, y)| *g * *y * (T::one() - *y))
                .collect(),
            Unary::Tanh => grad_out
                .iter()
                .zip(y)
                .map(|(g, y)| *g * (T::one() - *y * *y))
                .collect(),
        };
        vec![Some(g)]
    }
}

struct ScaleFn<T>(T);

impl<T: Real> Function<T> for ScaleFn<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(grad_out.iter().map(|g| *g * self.0).collect())]
    }
}

struct SumFn;

impl<T: Real> Function<T> for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad_out[0]; inputs[0].len()])]
    }
}

struct ReshapeFn;

impl<T: Real> Function<T> for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(grad_out.to_vec())]
    }
}

/// Concatenation along axis 1; stores each input's extent on that axis.
struct ConcatFn {
    n: usize,
    s: usize,
    channels: Vec<usize>,
}

impl<T: Real> Function<T> for ConcatFn {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut g = Vec::with_capacity(self.n * c * self.s);
                for ni in 0..self.n {
                    let start = (ni * total + offset) * self.s;
                    g.extend_from_slice(&grad_out[start..start + c * self.s]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct SpatialMeanFn {
    hw: usize,
}

impl<T: Real> Function<T> for SpatialMeanFn {
    fn name(&self) -> &'static str {
        "spatial_mean"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let inv = T::one() / T::of(self.hw as f64);
        let mut g = Vec::with_capacity(grad_out.len() * self.hw);
        for go in grad_out {
            g.extend(std::iter::repeat_n(*go * inv, self.hw));
        }
        vec![Some(g)]
    }
}

struct SoftmaxFn {
    last: usize,
}

impl<T: Real> Function<T> for SoftmaxFn {
    fn name(&self) -> &'static str {
        "softmax_lastdim"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let y = output.data();
        let mut g = vec![T::zero(); y.len()];
        for ((gs, ys), gos) in g
            .chunks_mut(self.last)
            .zip(y.chunks(self.last))
            .zip(grad_out.chunks(self.last))
        {
            let dot: T = ys.iter().zip(gos).map(|(y, g)| *y * *g).sum();
            for ((gi, yi), goi) in gs.iter_mut().zip(ys).zip(gos) {
                *gi = *yi * (*goi - dot);
            }
        }
        vec![Some(g)]
    }
}

/// Row-wise softmax of a `[rows, last]` buffer with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], last: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, row) in out.chunks_mut(last).zip(x.chunks(last)) {
        let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let mut total = T::zero();
        for (oi, xi) in o.iter_mut().zip(row) {
            *oi = (*xi - max).exp();
            total = total + *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / total;
        }
    }
    out
}

struct CrossEntropyFn {
    probs: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Real> Function<T> for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy_logits"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let n = self.targets.len();
        let scale = grad_out[0].to_f64().unwrap_or(0.0) / n as f64;
        let mut g = Vec::with_capacity(self.probs.len());
        for (row, &t) in self.probs.chunks(self.classes).zip(&self.targets) {
            for (k, p) in row.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                g.push(T::of((p - onehot) * scale));
            }
        }
        vec![Some(g)]
    }
}

struct MatMulFn {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Function<T> for MatMulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = needs[0].then(|| {
            let mut ga = vec![T::zero(); m * k];
            T::gemm(
                m,
                n,
                k,
                grad_out,
                false,
                inputs[1].data(),
                true,
                &mut ga,
                false,
            );
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![T::zero(); k * n];
            T::gemm(
                k,
                m,
                n,
                inputs[0].data(),
                true,
                grad_out,
                false,
                &mut gb,
                false,
            );
            gb
        });
        vec![ga, gb]
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::new(ta.shape(), map_binary(ta, tb, bc, |x, y| x + y))?;
        self.record(out, &[a, b], AddFn(bc))
    }

    /// Elementwise product; `b` may broadcast over the channel axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::new(ta.shape(), map_binary(ta, tb, bc, |x, y| x * y))?;
        self.record(out, &[a, b], MulFn(bc))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        self.record(out, &[x], ScaleFn(f))
    }

    pub(crate) fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let out = self.value(x).map(|v| match kind {
            Unary::Relu => v.max(T::zero()),
            Unary::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => v.tanh(),
        });
        self.record(out, &[x], UnaryFn(kind))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.record(Tensor::scalar(total), &[x], SumFn)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.record(out, &[x], ReshapeFn)
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let rest: usize = shape[1..].iter().product();
        let n = shape[0];
        self.reshape(x, &[n, rest])
    }

    /// Stacks along axis 1; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| Error::dim("concat of nothing"))?,
        );
        if first.len() < 2 {
            return Err(Error::dim("concat needs rank >= 2"));
        }
        let (n, tail) = (first[0], first[2..].to_vec());
        let s: usize = tail.iter().product();
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len() || sh[0] != n || sh[2..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: {:?} does not match {:?} outside axis 1",
                    sh, first
                )));
            }
            channels.push(sh[1]);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * s);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[ni * c * s..(ni + 1) * c * s]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        self.record(out, parts, ConcatFn { n, s, channels })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b])
    }

    /// `[N, C, H, W] -> [N, C]` mean over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::dim("spatial_mean over an empty map"));
        }
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        self.record(out, &[x], SpatialMeanFn { hw })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of rank-0"))?;
        if last == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let out = Tensor::new(t.shape(), softmax_rows(t.data(), last))?;
        self.record(out, &[x], SoftmaxFn { last })
    }

    /// Mean over rows of `-log softmax(logits)[row, target[row]]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "{} targets for {n} rows of logits",
                targets.len()
            )));
        }
        if let Some((row, t)) = targets.iter().enumerate().find(|(_, t)| **t >= k) {
            return Err(Error::Label(format!(
                "target {t} at row {row} outside 0..{k}"
            )));
        }
        // Evaluated in f64 regardless of T; stable via max subtraction.
        let x: Vec<f64> = self
            .value(logits)
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &t) in x.chunks(k).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(T::of(loss / n as f64));
        self.record(
            out,
            &[logits],
            CrossEntropyFn {
                probs,
                targets: targets.to_vec(),
                classes: k,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions {k} vs {k2}")));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut c,
            false,
        );
        let out = Tensor::new(&[m, n], c)?;
        self.record(out, &[a, b], MatMulFn { m, k, n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3, 5]);
        let want = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let su = g.softmax_lastdim(u).unwrap();
        for v in g.value(su).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        let sx = g.softmax_lastdim(x).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(sx).data()[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((g.value(sx).data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(sx).data()[1] - 0.2689).abs() < 1e-4);
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let sb = g.softmax_lastdim(big).unwrap();
        assert!((g.value(sb).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(sb).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_lastdim(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let l = g.leaky_relu(x).unwrap();
        assert_eq!(g.value(l).data(), &[-0.2, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
    }

    #[test]
    fn channel_broadcast_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn item_channel_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 2, 1, 2], 1.0));
        let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn concat_shapes_and_empty() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 2, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = random(&mut rng, &[2, 3, 2, 2]);
        let x = g.constant(xt.clone());
        let e = g.constant(Tensor::zeros(&[2, 0, 2, 2]));
        let xe = g.concat_channels(x, e).unwrap();
        assert_eq!(g.value(xe).data(), xt.data());
        assert_eq!(g.shape(xe), xt.shape());

        let bad = g.constant(Tensor::zeros(&[1, 3, 3, 2]));
        assert!(matches!(
            g.concat_channels(a, bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spatial_mean_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.spatial_mean(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
        let mc = g.spatial_mean(c).unwrap();
        assert!(g.value(mc).data().iter().all(|v| (*v - 1.75).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&mut rng, &[2, 3, 4, 5]);
        let mut want = Vec::new();
        for plane in 0..6 {
            let mut s = 0.0;
            for i in 0..20 {
                s += r.data()[plane * 20 + i];
            }
            want.push(s / 20.0);
        }
        let rv = g.constant(r);
        let mr = g.spatial_mean(rv).unwrap();
        for (a, b) in g.value(mr).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.cross_entropy_logits(l, &[0]).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-4);

        let c = g.constant(t(&[1, 2], &[1000.0, -1000.0]));
        let cc = g.cross_entropy_logits(c, &[0]).unwrap();
        assert!(g.value(cc).item().abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy_logits(l, &[5]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..5 {
            let shape = [1 + case % 2, 2 + case % 3, 2, 1 + case % 2];
            // offset keeps relu away from its kink
            let x = random(&mut rng, &shape).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
            let ch = random(&mut rng, &[shape[1]]);
            let item = random(&mut rng, &[shape[0], shape[1]]);
            let err = grad_check(
                |g, v| {
                    let a = g.relu(v[0])?;
                    let b = g.leaky_relu(v[0])?;
                    let c = g.sigmoid(a)?;
                    let d = g.tanh(b)?;
                    let e = g.mul(c, v[1])?;
                    let f = g.add(d, v[2])?;
                    let h = g.mul(e, f)?;
                    g.sum(h)
                },
                &[x, ch, item],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }

    #[test]
    fn gradients_of_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..5 {
            let (n, ca, cb, h, w) = (1 + case % 2, 1 + case % 3, 2, 2 + case % 2, 3);
            let a = random(&mut rng, &[n, ca, h, w]);
            let b = random(&mut rng, &[n, cb, h, w]);
            let weights = random(&mut rng, &[n, ca + cb]);
            let err = grad_check(
                |g, v| {
                    let c = g.concat_channels(v[0], v[1])?;
                    let sq = g.mul(c, c)?;
                    let m = g.spatial_mean(sq)?;
                    let wm = g.mul(m, v[2])?;
                    g.sum(wm)
                },
                &[a, b, weights],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }

    #[test]
    fn gradients_of_matmul_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..5 {
            let (m, k, n) = (2 + case % 3, 3, 2 + case % 2);
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let targets: Vec<usize> = (0..m).map(|i| (i + case) % n).collect();
            let err = grad_check(
                |g, v| {
                    let c = g.matmul(v[0], v[1])?;
                    let s = g.softmax_lastdim(c)?;
                    let ce = g.cross_entropy_logits(c, &targets)?;
                    let sq = g.mul(s, s)?;
                    let t = g.sum(sq)?;
                    g.add(ce, t)
                },
                &[a, b],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case}: {err}");
        }
    }

    #[test]
    fn softmax_cross_entropy_gradcheck_2x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[2, 3]);
        let err = grad_check(|g, v| g.cross_entropy_logits(v[0], &[1, 2]), &[x], 1e-6).unwrap();
        assert!(err < 1e-4);
    }
}
