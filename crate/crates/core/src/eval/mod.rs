//! Recognition-oriented evaluation of a trained generator.
//!
//! * [`knn_idpres`]: a KNN classifier fitted on real images of `N_c`
//!   standard-set classes must recognise the identity of fakes generated for
//!   every target viewpoint.
//! * [`fewshot_eval`]: `N_c`-way `s`-shot classification, with and without
//!   20 generated fakes per training image.

mod classifier;
mod knn;
mod report;

use image::RgbImage;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::Mode;
use crate::synthdata::{pixels_to_image, Dataset};
use crate::tensor::{Real, Tensor};
use crate::training::{one_hot, Gan};

pub use classifier::{train_feature_extractor, Classifier, ClassifierConfig, SmallCnn};
pub use knn::Knn;
pub use report::{ClassCount, EvalReport};

/// Interpolation grid between two viewpoint codes.
pub const INTERPOLATION_STEPS: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_FAKES_PER_IMAGE: usize = 20;
pub const DEFAULT_K: usize = 5;
const CHUNK: usize = 64;

/// Maps images and attribute codes `[N, N_a]` to generated images.
pub trait ImageGenerator {
    fn generate(&mut self, images: &Tensor<f32>, codes: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Returns its input unchanged.
pub struct IdentityGenerator;

impl ImageGenerator for IdentityGenerator {
    fn generate(&mut self, images: &Tensor<f32>, _codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(images.clone())
    }
}

/// Returns a uniform image of the given pixel value.
pub struct ConstantGenerator(pub f32);

impl ImageGenerator for ConstantGenerator {
    fn generate(&mut self, images: &Tensor<f32>, _codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Tensor::full(images.shape(), self.0))
    }
}

/// A trained generator in eval mode, drawing fresh noise for every image.
pub struct ModelGenerator<'a, T: Real> {
    gan: &'a mut Gan<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> ModelGenerator<'a, T> {
    pub fn new(gan: &'a mut Gan<T>, seed: u64) -> Self {
        ModelGenerator {
            gan,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Real> ImageGenerator for ModelGenerator<'_, T> {
    fn generate(&mut self, images: &Tensor<f32>, codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape()[0];
        let noise = self.gan.net().noise_dim;
        let z = Tensor::from_fn(&[n, noise], |_| {
            T::of(self.rng.sample::<f64, _>(StandardNormal))
        });
        let out = self
            .gan
            .generate(&images.cast(), &z, &codes.cast(), Mode::Eval)?;
        Ok(out.cast())
    }
}

/// One generated image per viewpoint for every input: `outputs[v]` is `[N, 3, S, S]`.
pub fn generate_viewpoints(
    gen: &mut dyn ImageGenerator,
    images: &Tensor<f32>,
    num_attrs: usize,
) -> Result<Vec<Tensor<f32>>> {
    let n = images.shape()[0];
    (0..num_attrs)
        .map(|v| gen.generate(images, &one_hot(&vec![v; n], num_attrs)))
        .collect()
}

/// Grid with one row per input: the input followed by its generated variants.
pub fn contact_sheet(inputs: &Tensor<f32>, outputs: &[Tensor<f32>]) -> Result<RgbImage> {
    let (n, _, h, w) = inputs.dims4()?;
    let gap = 2;
    let cols = 1 + outputs.len();
    let mut sheet = RgbImage::from_pixel(
        (cols * (w + gap) + gap) as u32,
        (n * (h + gap) + gap) as u32,
        image::Rgb([255, 255, 255]),
    );
    for row in 0..n {
        for col in 0..cols {
            let src = if col == 0 { inputs } else { &outputs[col - 1] };
            if src.shape() != inputs.shape() {
                return Err(Error::dim(
                    "generated batch differs in shape from its inputs",
                ));
            }
            let tile = pixels_to_image(src.item_slice(row).data(), h, w);
            let x = (gap + col * (w + gap)) as i64;
            let y = (gap + row * (h + gap)) as i64;
            image::imageops::replace(&mut sheet, &tile, x, y);
        }
    }
    Ok(sheet)
}

/// Picks `n_c` identities (sorted) from `data`.
fn select_classes(data: &Dataset, n_c: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let available = data.identity_set();
    if n_c == 0 || n_c > available.len() {
        return Err(Error::Config(format!(
            "{n_c} classes requested, {} available",
            available.len()
        )));
    }
    let mut chosen: Vec<usize> = sample(rng, available.len(), n_c)
        .into_iter()
        .map(|i| available[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-class shuffled index lists, in class order.
fn class_members(data: &Dataset, classes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    classes
        .iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..data.len())
                .filter(|i| data.identities[*i] == *c)
                .collect();
            idx.shuffle(rng);
            idx
        })
        .collect()
}

/// Train/test indices into the source dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    /// Subset relabelled to class positions `0..n_c`.
    fn take(&self, data: &Dataset, indices: &[usize]) -> Dataset {
        let mut out = data.subset(indices);
        for y in &mut out.identities {
            *y = self.classes.binary_search(y).expect("selected class");
        }
        out
    }
}

/// Stratified split with `round(0.8 · count)` training images per class (at least one of each side).
fn split_8_2(data: &Dataset, n_c: usize, rng: &mut ChaCha8Rng) -> Result<ClassSplit> {
    let classes = select_classes(data, n_c, rng)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in classes.iter().zip(class_members(data, &classes, rng)) {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "identity {} has fewer than 2 images",
                c + 1
            )));
        }
        let k = ((members.len() as f64 * 0.8).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    Ok(ClassSplit {
        classes,
        train,
        test,
    })
}

/// `shots` training images per class, the rest for testing.
fn split_shots(
    data: &Dataset,
    n_c: usize,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClassSplit> {
    let classes = select_classes(data, n_c, rng)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in classes.iter().zip(class_members(data, &classes, rng)) {
        if members.len() <= shots {
            return Err(Error::Config(format!(
                "identity {} has {} images, needs more than {shots}",
                c + 1,
                members.len()
            )));
        }
        train.extend_from_slice(&members[..shots]);
        test.extend_from_slice(&members[shots..]);
    }
    Ok(ClassSplit {
        classes,
        train,
        test,
    })
}

/// Top-1/top-5 scoring of ranked predictions.
struct Tally {
    per_class: Vec<ClassCount>,
    top1: usize,
    top5: usize,
    n: usize,
}

impl Tally {
    fn new(classes: &[usize]) -> Self {
        Tally {
            per_class: classes
                .iter()
                .map(|c| ClassCount {
                    identity: *c,
                    ..ClassCount::default()
                })
                .collect(),
            top1: 0,
            top5: 0,
            n: 0,
        }
    }

    fn add(&mut self, label: usize, ranking: &[usize]) {
        let hit1 = ranking.first() == Some(&label);
        self.n += 1;
        self.top1 += usize::from(hit1);
        self.top5 += usize::from(ranking.iter().take(5).any(|c| *c == label));
        self.per_class[label].count += 1;
        self.per_class[label].top1 += usize::from(hit1);
    }

    fn rates(&self) -> (f64, f64) {
        let n = self.n.max(1) as f64;
        (self.top1 as f64 / n, self.top5 as f64 / n)
    }
}

#[derive(Clone, Debug)]
pub struct IdPresConfig {
    pub n_c: usize,
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Identity preservation: KNN fitted on real training images of `n_c`
/// classes classifies one fake per viewpoint for every real test image.
/// The report also records the KNN accuracy on the real test images.
pub fn knn_idpres(
    standard: &Dataset,
    gen: &mut dyn ImageGenerator,
    extractor: &Classifier,
    cfg: &IdPresConfig,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = split_8_2(standard, cfg.n_c, &mut rng)?;
    let train = split.take(standard, &split.train);
    let test = split.take(standard, &split.test);
    let knn = Knn::fit(
        extractor.dataset_features(&train)?,
        train.identities.clone(),
        cfg.k,
    )?;

    let na = standard.num_attrs;
    let mut real = Tally::new(&split.classes);
    let mut fake = Tally::new(&split.classes);
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let images = test.batch::<f32>(chunk);
        for (f, i) in extractor.features(&images)?.iter().zip(chunk) {
            real.add(test.identities[*i], &knn.rank(f));
        }
        for out in generate_viewpoints(gen, &images, na)? {
            for (f, i) in extractor.features(&out)?.iter().zip(chunk) {
                fake.add(test.identities[*i], &knn.rank(f));
            }
        }
    }
    let (top1, top5) = fake.rates();
    let (real1, real5) = real.rates();
    Ok(EvalReport {
        protocol: "knn_idpres".into(),
        n_c: cfg.n_c,
        top1,
        top5,
        evaluated: fake.n,
        per_class: fake.per_class,
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        extra: vec![
            ("k".into(), cfg.k as f64),
            ("real_top1".into(), real1),
            ("real_top5".into(), real5),
            ("test_images".into(), test.len() as f64),
        ],
    })
}

/// Training set extended with generated images.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub data: Dataset,
    /// `true` for real images.
    pub real: Vec<bool>,
    /// Attribute code used for each image (the one-hot label for reals).
    pub codes: Vec<Vec<f32>>,
}

/// For each real image, appends `fakes_per_image` fakes with the source's
/// identity label and codes `(1 - t)·C_a + t·C_b` over random viewpoint
/// pairs and the interpolation grid.
pub fn augment_fewshot(
    train: &Dataset,
    gen: &mut dyn ImageGenerator,
    fakes_per_image: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Augmented> {
    let na = train.num_attrs;
    let mut out = Augmented {
        data: Dataset::new(train.image_size, na),
        real: Vec::new(),
        codes: Vec::new(),
    };
    for i in 0..train.len() {
        let mut real_code = vec![0.0f32; na];
        real_code[train.viewpoints[i]] = 1.0;
        out.data.push(
            train.image(i),
            train.identities[i],
            train.viewpoints[i],
            train.splits[i],
        )?;
        out.real.push(true);
        out.codes.push(real_code);

        let mut codes = Vec::with_capacity(fakes_per_image);
        let mut dominant = Vec::with_capacity(fakes_per_image);
        while codes.len() < fakes_per_image {
            let a = rng.random_range(0..na);
            let b = if na > 1 {
                (a + 1 + rng.random_range(0..na - 1)) % na
            } else {
                a
            };
            for t in INTERPOLATION_STEPS {
                if codes.len() == fakes_per_image {
                    break;
                }
                let mut c = vec![0.0f32; na];
                c[a] += 1.0 - t;
                c[b] += t;
                codes.push(c);
                dominant.push(if t < 0.5 { a } else { b });
            }
        }
        if fakes_per_image == 0 {
            continue;
        }
        let flat: Vec<f32> = codes.iter().flatten().copied().collect();
        let code_tensor = Tensor::new(&[fakes_per_image, na], flat)?;
        let images = train.batch::<f32>(&vec![i; fakes_per_image]);
        let fakes = gen.generate(&images, &code_tensor)?;
        for (j, code) in codes.into_iter().enumerate() {
            out.data.push(
                fakes.item_slice(j).data(),
                train.identities[i],
                dominant[j],
                train.splits[i],
            )?;
            out.real.push(false);
            out.codes.push(code);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FewShotConfig {
    pub n_c: usize,
    pub shots: usize,
    pub fakes_per_image: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct FewShotResult {
    pub baseline: EvalReport,
    pub augmented: EvalReport,
    pub split: ClassSplit,
    pub augmented_size: usize,
}

/// Baseline (reals only) versus treatment (reals plus fakes, with a real/fake
/// bit), both freshly initialised from the same seed and evaluated on the same
/// real test images with bit 1.
pub fn fewshot_eval(
    standard: &Dataset,
    gen: &mut dyn ImageGenerator,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = split_shots(standard, cfg.n_c, cfg.shots, &mut rng)?;
    let train = split.take(standard, &split.train);
    let test = split.take(standard, &split.test);

    let score =
        |clf: &Classifier, protocol: &str, extra: Vec<(String, f64)>| -> Result<EvalReport> {
            let mut tally = Tally::new(&split.classes);
            for (ranking, y) in clf.rankings(&test)?.iter().zip(&test.identities) {
                tally.add(*y, ranking);
            }
            let (top1, top5) = tally.rates();
            Ok(EvalReport {
                protocol: protocol.into(),
                n_c: cfg.n_c,
                top1,
                top5,
                evaluated: tally.n,
                per_class: tally.per_class,
                config_hash: cfg.config_hash.clone(),
                seed: cfg.seed,
                extra,
            })
        };

    let base = Classifier::train(&train, cfg.n_c, None, &cfg.classifier)?;
    let shots = ("shots".to_string(), cfg.shots as f64);
    let baseline = score(
        &base,
        "fewshot_baseline",
        vec![shots.clone(), ("train_images".into(), train.len() as f64)],
    )?;

    let aug = augment_fewshot(&train, gen, cfg.fakes_per_image, &mut rng)?;
    let treated = Classifier::train(&aug.data, cfg.n_c, Some(&aug.real), &cfg.classifier)?;
    let augmented = score(
        &treated,
        "fewshot_augmented",
        vec![shots, ("train_images".into(), aug.data.len() as f64)],
    )?;
    Ok(FewShotResult {
        baseline,
        augmented,
        augmented_size: aug.data.len(),
        split,
    })
}
