//! Named parameter collections and the dense/convolutional layers built on them.
//!
//! A [`ParamStore`] owns trainable tensors and non-trainable buffers (running
//! statistics). Each forward pass binds the store into a [`Graph`], producing a
//! [`Binding`] that maps every [`ParamId`] to a graph variable and collects
//! buffer updates for the caller to commit afterwards.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Entry<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(true);
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(false);
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            e.tensor.zero_grad();
        }
    }

    /// Adds every entry to `graph`; trainable entries are differentiated
    /// only when `with_grad` is set.
    pub fn bind(&self, graph: &mut Graph<T>, mode: Mode, with_grad: bool) -> Binding<T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.clear_grad();
                t.set_requires_grad(with_grad && e.trainable);
                graph.leaf(t)
            })
            .collect();
        Binding {
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    /// Adds the graph gradients of bound trainable entries into their buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, binding: &Binding<T>) {
        for (e, v) in self.entries.iter_mut().zip(&binding.vars) {
            if !e.trainable {
                continue;
            }
            if let Some(g) = graph.grad(*v) {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    /// Applies the buffer updates gathered during a forward pass.
    pub fn commit(&mut self, binding: &mut Binding<T>) {
        for (id, t) in binding.updates.drain(..) {
            let dst = &mut self.entries[id.0].tensor;
            debug_assert_eq!(dst.shape(), t.shape());
            dst.data_mut().copy_from_slice(t.data());
        }
    }
}

/// A store bound into one graph for one forward pass.
pub struct Binding<T: Real> {
    vars: Vec<Var>,
    pub mode: Mode,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Binding<T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    /// Routes the given parameters to other graph variables.
    pub fn override_vars(&mut self, pairs: impl IntoIterator<Item = (ParamId, Var)>) {
        for (id, v) in pairs {
            self.vars[id.0] = v;
        }
    }

    pub fn pending_updates(&self) -> usize {
        self.updates.len()
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[inputs, outputs], bound));
        let b = store.add(format!("{name}.b"), uniform(rng, &[outputs], bound));
        Dense {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }

    /// Sets the weight to zero and the bias to `bias`, making the layer constant.
    pub fn make_constant<T: Real>(&self, store: &mut ParamStore<T>, bias: f64) {
        store.get_mut(self.w).data_mut().fill(T::zero());
        store.get_mut(self.b).data_mut().fill(T::of(bias));
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel).max(1) as f64).sqrt();
        Self::with_bound(
            store,
            name,
            [cout, cin, kernel, kernel],
            stride,
            pad,
            bias,
            bound,
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bound<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        pad: usize,
        bias: bool,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, &shape, bound));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform(rng, &[shape[0]], bound)));
        Conv { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.w),
            self.b.map(|b| p.var(b)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel).max(1) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform(rng, &[cin, cout, kernel, kernel], bound),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), uniform(rng, &[cout], bound)));
        ConvTranspose { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, x: Var) -> Result<Var> {
        g.conv_transpose2d(
            x,
            p.var(self.w),
            self.b.map(|b| p.var(b)),
            self.stride,
            self.pad,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_backward_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dense = Dense::new(&mut store, "fc", 3, 2, &mut rng);
        let running = store.add_buffer("stat", Tensor::zeros(&[2]));
        assert_eq!(store.num_params(), 8);

        let mut g = Graph::new();
        let mut p = store.bind(&mut g, Mode::Train, true);
        let x = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = dense.forward(&mut g, &p, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        p.push_update(running, Tensor::full(&[2], 7.0));

        store.zero_grads();
        store.accumulate_grads(&g, &p);
        store.commit(&mut p);
        // d(sum(xW+b))/dW[i][j] = x[i]
        assert_eq!(
            store.get(dense.w).grad().unwrap(),
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
        );
        assert_eq!(store.get(dense.b).grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(store.get(running).data(), &[7.0, 7.0]);
        assert!(store.get(running).grad().is_none());
    }

    #[test]
    fn frozen_binding_has_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dense = Dense::new(&mut store, "fc", 2, 2, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, Mode::Eval, false);
        let x = g.param(Tensor::full(&[1, 2], 1.0));
        let y = dense.forward(&mut g, &p, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(p.var(dense.w)).is_none());
        assert!(g.grad(x).is_some());
    }
}
