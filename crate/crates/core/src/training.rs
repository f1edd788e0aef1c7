//! Adversarial training.
//!
//! With 0-based labels, identity classes `0..N_i`, the fake class `N_i` and
//! attribute classes `0..N_a`, the two steps minimize
//!
//! ```text
//! d_loss = CE(D_id(I), y_i) + λ·CE(D_attr(I), y_a) + CE(D_id(G(I, z, C)), N_i)
//! g_loss = λ·CE(D_attr(G(I, z, C)), y_a^t) + CE(D_id(G(I, z, C)), y_i)
//! ```
//!
//! updating only D and only G respectively.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::networks::{Discriminator, Generator, NetConfig};
use crate::optim::{Adam, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_LR};
use crate::params::{Mode, ParamStore};
use crate::synthdata::Dataset;
use crate::tensor::{Real, Tensor};

pub const METRICS_NAME: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.mgck";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Attribute-loss weight.
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Accepted for interface compatibility; execution is always sequential.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            lambda: 5.0,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One training minibatch with 0-based labels.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub ids: Vec<usize>,
    pub attrs: Vec<usize>,
    pub z: Tensor<T>,
    /// Target attribute codes `[N, N_a]`.
    pub code: Tensor<T>,
    pub targets: Vec<usize>,
}

pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    match labels.iter().find(|y| **y >= classes) {
        Some(y) => Err(Error::Label(format!(
            "{what} label {} outside 1..={classes}",
            y + 1
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DLoss {
    pub total: f64,
    pub real_id: f64,
    pub real_attr: f64,
    pub fake_id: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GLoss {
    pub total: f64,
    pub attr: f64,
    pub id: f64,
}

/// Generator and discriminator with their parameters and optimizers.
#[derive(Clone, Debug)]
pub struct Gan<T: Real> {
    pub gen: Generator,
    pub disc: Discriminator,
    pub g_store: ParamStore<T>,
    pub d_store: ParamStore<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
}

impl<T: Real> Gan<T> {
    pub fn new(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut g_store = ParamStore::new();
        let gen = Generator::new(&mut g_store, &config.net, rng)?;
        let mut d_store = ParamStore::new();
        let disc = Discriminator::new(&mut d_store, &config.net, rng)?;
        let g_opt = Adam::with_betas(&g_store, config.lr, config.beta1, config.beta2);
        let d_opt = Adam::with_betas(&d_store, config.lr, config.beta1, config.beta2);
        Ok(Gan {
            gen,
            disc,
            g_store,
            d_store,
            g_opt,
            d_opt,
        })
    }

    pub fn net(&self) -> &NetConfig {
        &self.gen.config
    }

    fn check_batch(&self, b: &Batch<T>) -> Result<()> {
        let net = self.net();
        let n = b.images.shape().first().copied().unwrap_or(0);
        if b.ids.len() != n || b.attrs.len() != n || b.targets.len() != n {
            return Err(Error::dim(format!(
                "batch of {n} images with mismatched label counts"
            )));
        }
        check_labels(&b.ids, net.num_ids, "identity")?;
        check_labels(&b.attrs, net.num_attrs, "attribute")?;
        check_labels(&b.targets, net.num_attrs, "target attribute")
    }

    /// Generator output without gradient tracking. Train mode uses batch
    /// statistics and commits the running-statistic update.
    pub fn generate(
        &mut self,
        images: &Tensor<T>,
        z: &Tensor<T>,
        code: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut p = self.g_store.bind(&mut g, mode, false);
        let (i, zv, cv) = (
            g.constant(images.clone()),
            g.constant(z.clone()),
            g.constant(code.clone()),
        );
        let out = self.gen.generate(&mut g, &mut p, i, zv, cv)?;
        self.g_store.commit(&mut p);
        Ok(g.value(out).clone())
    }

    /// Identity and attribute logits.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.d_store.bind(&mut g, Mode::Eval, false);
        let x = g.constant(images.clone());
        let (id, attr) = self.disc.forward(&mut g, &p, x)?;
        Ok((g.value(id).clone(), g.value(attr).clone()))
    }

    pub fn d_step(&mut self, b: &Batch<T>, lambda: f64) -> Result<DLoss> {
        self.check_batch(b)?;
        let fake = self.generate(&b.images, &b.z, &b.code, Mode::Train)?;
        let fake_ids = vec![self.net().num_ids; b.ids.len()];

        let mut g = Graph::new();
        let p = self.d_store.bind(&mut g, Mode::Train, true);
        let real = g.constant(b.images.clone());
        let fake = g.constant(fake);
        let (id_real, attr_real) = self.disc.forward(&mut g, &p, real)?;
        let (id_fake, _) = self.disc.forward(&mut g, &p, fake)?;
        let real_id = g.cross_entropy_logits(id_real, &b.ids)?;
        let real_attr = g.cross_entropy_logits(attr_real, &b.attrs)?;
        let fake_id = g.cross_entropy_logits(id_fake, &fake_ids)?;
        let weighted = g.scale(real_attr, lambda)?;
        let sum = g.add(real_id, weighted)?;
        let total = g.add(sum, fake_id)?;
        g.backward(total)?;
        self.d_store.zero_grads();
        self.d_store.accumulate_grads(&g, &p);
        self.d_opt.step(&mut self.d_store);
        let v = |x| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        Ok(DLoss {
            total: v(total),
            real_id: v(real_id),
            real_attr: v(real_attr),
            fake_id: v(fake_id),
        })
    }

    pub fn g_step(&mut self, b: &Batch<T>, lambda: f64) -> Result<GLoss> {
        self.check_batch(b)?;
        let mut g = Graph::new();
        let mut gp = self.g_store.bind(&mut g, Mode::Train, true);
        let dp = self.d_store.bind(&mut g, Mode::Train, false);
        let (i, zv, cv) = (
            g.constant(b.images.clone()),
            g.constant(b.z.clone()),
            g.constant(b.code.clone()),
        );
        let fake = self.gen.generate(&mut g, &mut gp, i, zv, cv)?;
        let (id_fake, attr_fake) = self.disc.forward(&mut g, &dp, fake)?;
        let attr = g.cross_entropy_logits(attr_fake, &b.targets)?;
        let id = g.cross_entropy_logits(id_fake, &b.ids)?;
        let weighted = g.scale(attr, lambda)?;
        let total = g.add(weighted, id)?;
        g.backward(total)?;
        self.g_store.zero_grads();
        self.g_store.accumulate_grads(&g, &gp);
        self.g_store.commit(&mut gp);
        self.g_opt.step(&mut self.g_store);
        let v = |x| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        Ok(GLoss {
            total: v(total),
            attr: v(attr),
            id: v(id),
        })
    }

    /// Share of images whose attribute logits peak at their attribute label.
    pub fn attribute_accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("attribute accuracy of an empty dataset".into()));
        }
        let mut correct = 0usize;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(64) {
            let (_, attr) = self.discriminate(&data.batch(chunk))?;
            let k = attr.shape()[1];
            for (row, &i) in attr.data().chunks(k).zip(chunk) {
                if argmax(row) == data.viewpoints[i] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Training state: models, optimizers, step counter and sampling RNG.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub gan: Gan<T>,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let gan = Gan::new(&config, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            gan,
            step: 0,
            rng,
        })
    }

    /// Draws indices with replacement, noise `z ~ N(0, I)` and uniform target attributes.
    pub fn sample_batch(&mut self, data: &Dataset) -> Batch<T> {
        let n = self.config.batch_size;
        let net = &self.config.net;
        let idx: Vec<usize> = (0..n)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        let z = Tensor::from_fn(&[n, net.noise_dim], |_| {
            T::of(self.rng.sample::<f64, _>(StandardNormal))
        });
        let targets: Vec<usize> = (0..n)
            .map(|_| self.rng.random_range(0..net.num_attrs))
            .collect();
        Batch {
            images: data.batch(&idx),
            ids: idx.iter().map(|i| data.identities[*i]).collect(),
            attrs: idx.iter().map(|i| data.viewpoints[*i]).collect(),
            z,
            code: one_hot(&targets, net.num_attrs),
            targets,
        }
    }

    /// One D update followed by one G update on the same batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        let batch = self.sample_batch(data);
        let lambda = self.config.lambda;
        let d = self.gan.d_step(&batch, lambda)?;
        let g = self.gan.g_step(&batch, lambda)?;
        self.step += 1;
        if !(d.total.is_finite() && g.total.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: d {} g {}",
                self.step, d.total, g.total
            )));
        }
        Ok((d.total, g.total))
    }

    /// Runs until `until` steps, writing one metrics line per step and
    /// periodic checkpoints into `out_dir`.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        out_dir: &Path,
        metrics: &mut impl Write,
    ) -> Result<()> {
        let metrics_path = out_dir.join(METRICS_NAME);
        while self.step < until {
            let (d, g) = self.train_step(data)?;
            writeln!(metrics, "{}\t{d}\t{g}", self.step).at(&metrics_path)?;
            if self.step.is_multiple_of(100) {
                info!("step {} d_loss {d:.4} g_loss {g:.4}", self.step);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < until {
                self.save(&out_dir.join(format!("checkpoint-{:06}.mgck", self.step)))?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_bytes("config", self.config.to_text().as_bytes());
        c.push_u64("step", &[self.step]);
        c.push_bytes("rng.seed", &self.rng.get_seed());
        let pos = self.rng.get_word_pos();
        c.push_u64("rng.word_pos", &[pos as u64, (pos >> 64) as u64]);
        c.push_u64("rng.stream", &[self.rng.get_stream()]);
        for (prefix, store, opt) in [
            ("g", &self.gan.g_store, &self.gan.g_opt),
            ("d", &self.gan.d_store, &self.gan.d_opt),
        ] {
            let (m, v) = opt.moments();
            for ((e, m), v) in store.entries().iter().zip(m).zip(v) {
                c.push_tensor(format!("{prefix}.{}", e.name), &e.tensor);
                if e.trainable {
                    c.push_tensor(format!("{prefix}.adam_m.{}", e.name), &m);
                    c.push_tensor(format!("{prefix}.adam_v.{}", e.name), &v);
                }
            }
            c.push_u64(format!("{prefix}.adam_t"), &[opt.t]);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text = std::str::from_utf8(c.bytes("config")?)
            .map_err(|_| Error::Corrupt("config record is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text)?;
        let mut t = Trainer::<T>::new(config)?;
        t.step = single(c.u64s("step")?, "step")?;
        let seed: [u8; 32] = c
            .bytes("rng.seed")?
            .try_into()
            .map_err(|_| Error::Corrupt("rng seed is not 32 bytes".into()))?;
        let pos = c.u64s("rng.word_pos")?;
        if pos.len() != 2 {
            return Err(Error::Corrupt("rng word position is not 2 words".into()));
        }
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng
            .set_stream(single(c.u64s("rng.stream")?, "rng.stream")?);
        t.rng.set_word_pos(pos[0] as u128 | (pos[1] as u128) << 64);
        let gan = &mut t.gan;
        for (prefix, store, opt) in [
            ("g", &mut gan.g_store, &mut gan.g_opt),
            ("d", &mut gan.d_store, &mut gan.d_opt),
        ] {
            let (mut ms, mut vs) = (Vec::new(), Vec::new());
            for e in store.entries_mut() {
                let name = format!("{prefix}.{}", e.name);
                let loaded: Tensor<T> = c.tensor(&name)?;
                if loaded.shape() != e.tensor.shape() {
                    return Err(Error::Corrupt(format!(
                        "record '{name}' has shape {:?}, model expects {:?}",
                        loaded.shape(),
                        e.tensor.shape()
                    )));
                }
                e.tensor.data_mut().copy_from_slice(loaded.data());
                if e.trainable {
                    ms.push(
                        c.tensor::<T>(&format!("{prefix}.adam_m.{}", e.name))?
                            .into_data(),
                    );
                    vs.push(
                        c.tensor::<T>(&format!("{prefix}.adam_v.{}", e.name))?
                            .into_data(),
                    );
                } else {
                    ms.push(Vec::new());
                    vs.push(Vec::new());
                }
            }
            opt.set_moments(ms, vs)?;
            opt.t = single(c.u64s(&format!("{prefix}.adam_t"))?, "adam_t")?;
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn single(v: &[u64], what: &str) -> Result<u64> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Corrupt(format!(
            "record '{what}' should hold one value"
        ))),
    }
}

/// Number of identity classes implied by a dataset's labels.
pub fn identity_count(data: &Dataset) -> usize {
    data.identities.iter().max().map_or(0, |m| m + 1)
}

/// Trains from scratch on `data`, writing `metrics.tsv`, periodic
/// checkpoints and `checkpoint.mgck` into `out_dir`.
pub fn train<T: Real>(
    mut config: TrainConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<Trainer<T>> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.image_size != config.net.image_size || data.num_attrs != config.net.num_attrs {
        return Err(Error::Config(format!(
            "dataset has {}px images and {} attributes, config expects {}px and {}",
            data.image_size, data.num_attrs, config.net.image_size, config.net.num_attrs
        )));
    }
    config.net.num_ids = identity_count(data);
    let mut trainer = Trainer::new(config)?;
    resume(&mut trainer, data, out_dir)?;
    Ok(trainer)
}

/// Continues `trainer` up to its configured step count, appending to the metrics log.
pub fn resume<T: Real>(
    trainer: &mut Trainer<T>,
    data: &Dataset,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let metrics_path = out_dir.join(METRICS_NAME);
    let file = if trainer.step == 0 {
        File::create(&metrics_path)
    } else {
        File::options()
            .append(true)
            .create(true)
            .open(&metrics_path)
    }
    .at(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    let until = trainer.config.steps;
    trainer.run(data, until, out_dir, &mut metrics)?;
    metrics.flush().at(&metrics_path)?;
    let ckpt = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&ckpt)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Ablation, LinkSpec};
    use crate::synthdata::render_dataset;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                image_size: 16,
                base_channels: 2,
                id_dim: 4,
                noise_dim: 3,
                num_ids: 3,
                num_attrs: 5,
                ablation: Ablation::Full,
                links: vec![LinkSpec {
                    resolution: 4,
                    radius: 1,
                }],
            },
            batch_size: 4,
            steps: 6,
            checkpoint_every: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn data() -> Dataset {
        render_dataset(3, 1, 5, 16).unwrap()
    }

    #[test]
    fn label_errors() {
        let mut t = Trainer::<f64>::new(tiny_config()).unwrap();
        let mut b = t.sample_batch(&data());
        b.ids[0] = 3;
        assert!(matches!(t.gan.d_step(&b, 5.0), Err(Error::Label(_))));
        b.ids[0] = 0;
        b.targets[1] = 5;
        assert!(matches!(t.gan.g_step(&b, 5.0), Err(Error::Label(_))));
    }

    #[test]
    fn zero_lambda_drops_attribute_term() {
        let mut t = Trainer::<f64>::new(tiny_config()).unwrap();
        let b = t.sample_batch(&data());
        let mut gan = t.gan.clone();
        let d = gan.d_step(&b, 0.0).unwrap();
        assert!((d.total - (d.real_id + d.fake_id)).abs() < 1e-12);
        let g = t.gan.clone().g_step(&b, 0.0).unwrap();
        assert!((g.total - g.id).abs() < 1e-12);
        let d5 = t.gan.clone().d_step(&b, 5.0).unwrap();
        assert!((d5.total - (d5.real_id + 5.0 * d5.real_attr + d5.fake_id)).abs() < 1e-12);
    }

    #[test]
    fn steps_update_only_their_network() {
        let mut t = Trainer::<f64>::new(tiny_config()).unwrap();
        let b = t.sample_batch(&data());
        let before = t.gan.clone();
        t.gan.d_step(&b, 5.0).unwrap();
        let trainable = |s: &ParamStore<f64>| -> Vec<Vec<f64>> {
            s.entries()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| e.tensor.data().to_vec())
                .collect()
        };
        assert_eq!(trainable(&before.g_store), trainable(&t.gan.g_store));
        assert_ne!(trainable(&before.d_store), trainable(&t.gan.d_store));
        let mid = t.gan.clone();
        t.gan.g_step(&b, 5.0).unwrap();
        assert_eq!(trainable(&mid.d_store), trainable(&t.gan.d_store));
        assert_ne!(trainable(&mid.g_store), trainable(&t.gan.g_store));
    }

    #[test]
    fn every_generator_parameter_receives_gradient() {
        for ablation in [Ablation::Full, Ablation::GlobalNc] {
            let mut cfg = tiny_config();
            cfg.net.ablation = ablation;
            let mut t = Trainer::<f64>::new(cfg).unwrap();
            let b = t.sample_batch(&data());
            t.gan.g_step(&b, 5.0).unwrap();
            for e in t.gan.g_store.entries().iter().filter(|e| e.trainable) {
                let g = e.tensor.grad().unwrap();
                assert!(
                    g.iter().any(|v| *v != 0.0),
                    "{ablation}: {} has zero gradient",
                    e.name
                );
            }
        }
    }

    #[test]
    fn identity_term_decreases_with_frozen_discriminator() {
        let mut t = Trainer::<f64>::new(tiny_config()).unwrap();
        let b = t.sample_batch(&data());
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let g = t.gan.g_step(&b, 0.0).unwrap();
            assert!(g.id < last, "step {step}: {} !< {last}", g.id);
            last = g.id;
        }
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let t = train::<f64>(cfg, &data(), dir.path()).unwrap();
        assert_eq!(t.step, 0);
        let loaded = Trainer::<f64>::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(loaded.step, 0);
        assert_eq!(
            fs::read_to_string(dir.path().join(METRICS_NAME)).unwrap(),
            ""
        );
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let data = data();
        let dir = tempfile::tempdir().unwrap();
        let full = train::<f64>(tiny_config(), &data, dir.path()).unwrap();
        let full_log = fs::read_to_string(dir.path().join(METRICS_NAME)).unwrap();
        assert_eq!(full_log.lines().count(), 6);

        let mid = Trainer::<f64>::load(&dir.path().join("checkpoint-000003.mgck")).unwrap();
        assert_eq!(mid.step, 3);
        assert_eq!(
            mid.to_checkpoint(),
            Checkpoint::load(&dir.path().join("checkpoint-000003.mgck")).unwrap()
        );
        let resumed_dir = tempfile::tempdir().unwrap();
        let mut resumed = mid;
        resume(&mut resumed, &data, resumed_dir.path()).unwrap();
        let tail: Vec<&str> = full_log.lines().skip(3).collect();
        let log = fs::read_to_string(resumed_dir.path().join(METRICS_NAME)).unwrap();
        assert_eq!(log.lines().collect::<Vec<_>>(), tail);
        assert_eq!(resumed.to_checkpoint(), full.to_checkpoint());
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..tiny_config()
            },
            TrainConfig {
                lambda: -1.0,
                ..tiny_config()
            },
            TrainConfig {
                batch_size: 1,
                ..tiny_config()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
