//! Small convolutional classifier used as feature extractor and few-shot learner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{Binding, Conv, Dense, Mode, ParamStore};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::training::argmax;

const BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            width: 8,
            steps: 400,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Four stride-2 conv blocks, global average pooling, and a dense head that
/// optionally sees a real/fake bit appended to the pooled feature.
#[derive(Clone, Debug)]
pub struct SmallCnn {
    convs: Vec<Conv>,
    head: Dense,
    pub feature_dim: usize,
    pub classes: usize,
    pub with_bit: bool,
}

impl SmallCnn {
    pub fn new(
        store: &mut ParamStore<f32>,
        width: usize,
        classes: usize,
        with_bit: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for k in 0..BLOCKS {
            let cout = width << k;
            convs.push(Conv::new(
                store,
                &format!("cls{k}"),
                cin,
                cout,
                4,
                2,
                1,
                true,
                rng,
            ));
            cin = cout;
        }
        let head = Dense::new(store, "cls.head", cin + usize::from(with_bit), classes, rng);
        SmallCnn {
            convs,
            head,
            feature_dim: cin,
            classes,
            with_bit,
        }
    }

    /// Pooled features `[N, feature_dim]`.
    pub fn features(&self, g: &mut Graph<f32>, p: &Binding<f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            let pre = conv.forward(g, p, h)?;
            h = g.leaky_relu(pre)?;
        }
        g.spatial_mean(h)
    }

    pub fn logits(
        &self,
        g: &mut Graph<f32>,
        p: &Binding<f32>,
        x: Var,
        bits: Option<Var>,
    ) -> Result<Var> {
        let f = self.features(g, p, x)?;
        let f = match (self.with_bit, bits) {
            (true, Some(b)) => g.concat(&[f, b])?,
            (false, None) => f,
            _ => {
                return Err(Error::Config(
                    "real/fake bit supplied inconsistently with the classifier".into(),
                ))
            }
        };
        self.head.forward(g, p, f)
    }
}

/// Trained classifier with its parameters.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: SmallCnn,
    pub store: ParamStore<f32>,
}

fn bit_tensor(bits: &[bool]) -> Tensor<f32> {
    Tensor::from_fn(&[bits.len(), 1], |i| if bits[i] { 1.0 } else { 0.0 })
}

impl Classifier {
    /// Trains on `data.identities` (which must lie in `0..classes`); `bits`
    /// enables the real/fake input and supplies one bit per image.
    pub fn train(
        data: &Dataset,
        classes: usize,
        bits: Option<&[bool]>,
        cfg: &ClassifierConfig,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("classifier training set is empty".into()));
        }
        if let Some(y) = data.identities.iter().find(|y| **y >= classes) {
            return Err(Error::Label(format!(
                "class {} outside 1..={classes}",
                y + 1
            )));
        }
        if bits.is_some_and(|b| b.len() != data.len()) {
            return Err(Error::dim("one real/fake bit per image required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let net = SmallCnn::new(&mut store, cfg.width, classes, bits.is_some(), &mut rng);
        let mut opt = Adam::with_betas(&store, cfg.lr, 0.9, 0.999);
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.random_range(0..data.len()))
                .collect();
            let labels: Vec<usize> = idx.iter().map(|i| data.identities[*i]).collect();
            let mut g = Graph::new();
            let p = store.bind(&mut g, Mode::Train, true);
            let x = g.constant(data.batch(&idx));
            let b = bits.map(|bits| {
                g.constant(bit_tensor(
                    &idx.iter().map(|i| bits[*i]).collect::<Vec<_>>(),
                ))
            });
            let logits = net.logits(&mut g, &p, x, b)?;
            let loss = g.cross_entropy_logits(logits, &labels)?;
            g.backward(loss)?;
            store.zero_grads();
            store.accumulate_grads(&g, &p);
            opt.step(&mut store);
        }
        Ok(Classifier { net, store })
    }

    /// Pooled features of `images`, one row per image.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, Mode::Eval, false);
        let x = g.constant(images.clone());
        let f = self.net.features(&mut g, &p, x)?;
        Ok(g.value(f)
            .data()
            .chunks(self.net.feature_dim)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Class logits; images carry bit 1 when the classifier takes one.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape()[0];
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, Mode::Eval, false);
        let x = g.constant(images.clone());
        let bits = self
            .net
            .with_bit
            .then(|| g.constant(Tensor::full(&[n, 1], 1.0)));
        let out = self.net.logits(&mut g, &p, x, bits)?;
        Ok(g.value(out).clone())
    }

    /// Features of a whole dataset, in chunks.
    pub fn dataset_features(&self, data: &Dataset) -> Result<Vec<Vec<f32>>> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in all.chunks(64) {
            out.extend(self.features(&data.batch(chunk))?);
        }
        Ok(out)
    }

    /// Classes of each image ranked by decreasing logit.
    pub fn rankings(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in all.chunks(64) {
            let logits = self.logits(&data.batch(chunk))?;
            for row in logits.data().chunks(self.net.classes) {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
                out.push(order);
            }
        }
        Ok(out)
    }

    /// Top-1 accuracy on `data.identities`.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("accuracy of an empty dataset".into()));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0;
        for chunk in all.chunks(64) {
            let logits = self.logits(&data.batch(chunk))?;
            for (row, i) in logits.data().chunks(self.net.classes).zip(chunk) {
                correct += usize::from(argmax(row) == data.identities[*i]);
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Trains the identity classifier whose pooled features serve as the KNN
/// embedding; identities are relabelled to `0..k` first.
pub fn train_feature_extractor(auxiliary: &Dataset, cfg: &ClassifierConfig) -> Result<Classifier> {
    let mut data = auxiliary.clone();
    let classes = data.relabel().len();
    Classifier::train(&data, classes, None, cfg)
}
