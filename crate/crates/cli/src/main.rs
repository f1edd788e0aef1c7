//! `idmorph` command-line entry point.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::imageops::{self, FilterType};
use log::info;

use idmorph::config::{config_hash, RunConfig};
use idmorph::eval::{
    contact_sheet, fewshot_eval, generate_viewpoints, knn_idpres, train_feature_extractor,
    ClassifierConfig, ConstantGenerator, FewShotConfig, IdPresConfig, IdentityGenerator,
    ImageGenerator, ModelGenerator, DEFAULT_FAKES_PER_IMAGE, DEFAULT_K,
};
use idmorph::gradcheck::run_suite;
use idmorph::synthdata::{
    build_dataset, image_to_pixels, load_dataset, Dataset, Split, DEFAULT_IMAGE_SIZE,
    MANIFEST_NAME, NUM_VIEWPOINTS,
};
use idmorph::training::{identity_count, resume, train, Trainer};
use idmorph::Error;

use run::RunDir;

const LOG_ENV: &str = "IDMORPH_LOG";

#[derive(Parser)]
#[command(
    name = "idmorph",
    version,
    about = "Identity-preserving image transformation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Write contact sheets of every viewpoint for a set of inputs.
    Generate(GenerateArgs),
    /// Identity-preservation KNN evaluation.
    EvalIdpres(IdPresArgs),
    /// Few-shot augmentation evaluation.
    EvalFewshot(FewShotArgs),
    /// Finite-difference check of every registered differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    identities: usize,
    #[arg(long)]
    per_cell: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Directory under which timestamped run directories are created.
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Exact output directory, bypassing the timestamped name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Auxiliary,
    Standard,
    All,
}

impl SplitArg {
    fn select(self, data: &Dataset) -> Dataset {
        match self {
            SplitArg::Auxiliary => data.split(Split::Auxiliary),
            SplitArg::Standard => data.split(Split::Standard),
            SplitArg::All => data.clone(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Auxiliary => "auxiliary",
            SplitArg::Standard => "standard",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset split to train on.
    #[arg(long, value_enum, default_value = "auxiliary")]
    split: SplitArg,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest to draw inputs from.
    #[arg(long, conflicts_with = "input")]
    data: Option<PathBuf>,
    /// Input image; repeatable.
    #[arg(long)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    split: SplitArg,
    /// Number of dataset images to transform.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Rows per contact sheet.
    #[arg(long, default_value_t = 8)]
    per_sheet: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Model,
    Identity,
    Constant,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint; required for the model generator.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "model")]
    generator: GeneratorArg,
    /// Image size when no checkpoint fixes it.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    nc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classifier training steps.
    #[arg(long, default_value_t = 400)]
    classifier_steps: usize,
    #[arg(long, default_value_t = 8)]
    classifier_width: usize,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct IdPresArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct FewShotArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = DEFAULT_FAKES_PER_IMAGE)]
    fakes: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[command(flatten)]
    run: RunArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            exit_code(&e)
        }
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let m = cause.to_string();
        if !out.ends_with(&m) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&m);
        }
    }
    out
}

/// 2 for configuration errors, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> ExitCode {
    let config = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
    ExitCode::from(if config { 2 } else { 1 })
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::EvalIdpres(a) => eval_idpres(a),
        Command::EvalFewshot(a) => eval_fewshot(a),
        Command::Gradcheck(a) => gradcheck(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let manifest = build_dataset(a.identities, a.per_cell, &a.out, a.seed, a.image_size)?;
    println!(
        "{} images, manifest {}",
        manifest.rows.len(),
        a.out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

/// Keys a resumed run may change.
const RESUMABLE: &[&str] = &["steps", "checkpoint_every", "data", "run_root"];

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.into(), v));
        }
    };
    flag("data", a.data.map(|p| p.display().to_string()));
    flag("ablation", a.ablation);
    flag("steps", a.steps.map(|v| v.to_string()));
    flag("base_channels", a.base_channels.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("image_size", a.image_size.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got '{s}'")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    if let Some(r) = &a.run.run_root {
        overrides.push(("run_root".into(), r.display().to_string()));
    }

    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::<f32>::load(ckpt)?;
            if let Some((k, _)) = overrides
                .iter()
                .find(|(k, _)| !RESUMABLE.contains(&k.as_str()))
            {
                return Err(config_error(format!(
                    "'{k}' cannot change when resuming; only {} may",
                    RESUMABLE.join(", ")
                )));
            }
            cfg.train = t.config.clone();
            Some(t)
        }
        None => None,
    };
    for (k, v) in &overrides {
        cfg.set(k, v)
            .map_err(|e| config_error(format!("{k}: {}", strip_config(e))))?;
    }
    cfg.train.validate()?;

    let manifest = cfg
        .data
        .clone()
        .ok_or_else(|| config_error("no dataset: pass --data or set 'data' in the config"))?;
    let net = &cfg.train.net;
    let mut data = a
        .split
        .select(&load_dataset(&manifest, net.image_size, net.num_attrs)?);
    if data.is_empty() {
        return Err(Error::Data(format!("{} split is empty", a.split.name())).into());
    }
    data.relabel();

    let ckpt = match trainer.as_mut() {
        Some(t) => {
            let dir = match &a.run.run_dir {
                Some(d) => d.clone(),
                None => a
                    .resume
                    .as_deref()
                    .and_then(Path::parent)
                    .map(Path::to_path_buf)
                    .unwrap_or_default(),
            };
            if identity_count(&data) != t.config.net.num_ids {
                return Err(Error::Data(format!(
                    "dataset has {} identities, checkpoint expects {}",
                    identity_count(&data),
                    t.config.net.num_ids
                ))
                .into());
            }
            t.config.steps = cfg.train.steps;
            t.config.checkpoint_every = cfg.train.checkpoint_every;
            info!("resuming at step {} into {}", t.step, dir.display());
            write_config(&dir, &cfg)?;
            resume(t, &data, &dir)?
        }
        None => {
            cfg.train.net.num_ids = identity_count(&data);
            let dir = RunDir::create(&a.run, &cfg.run_root, "train", &cfg.hash8())?;
            write_config(&dir.path, &cfg)?;
            info!(
                "training {} steps into {}",
                cfg.train.steps,
                dir.path.display()
            );
            train::<f32>(cfg.train.clone(), &data, &dir.path)?;
            dir.path.join(idmorph::training::FINAL_CHECKPOINT)
        }
    };
    println!("{}", ckpt.display());
    Ok(())
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).with_context(|| path.display().to_string())
}

fn load_inputs(paths: &[PathBuf], size: usize, num_attrs: usize) -> Result<Dataset> {
    let mut data = Dataset::new(size, num_attrs);
    for p in paths {
        let img = image::open(p)
            .map_err(|e| Error::File {
                path: p.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let img = if img.dimensions() == (size as u32, size as u32) {
            img
        } else {
            imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        };
        data.push(&image_to_pixels::<f32>(&img), 0, 0, Split::Standard)?;
    }
    Ok(data)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.per_sheet == 0 {
        return Err(config_error("--per-sheet must be positive"));
    }
    let mut trainer = Trainer::<f32>::load(&a.checkpoint)?;
    let net = trainer.config.net.clone();
    let (inputs, source) = match &a.data {
        Some(manifest) => {
            let data = a
                .split
                .select(&load_dataset(manifest, net.image_size, net.num_attrs)?);
            let n = a.count.min(data.len());
            let idx: Vec<usize> = (0..n).collect();
            (data.subset(&idx), manifest.display().to_string())
        }
        None if !a.input.is_empty() => (
            load_inputs(&a.input, net.image_size, net.num_attrs)?,
            a.input
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        None => return Err(config_error("pass --data or at least one --input")),
    };
    if inputs.is_empty() {
        return Err(Error::Data("no input images".into()).into());
    }
    let settings = format!(
        "command = generate\nconfig = {}\nsource = {source}\nsplit = {}\ncount = {}\nper_sheet = {}\nseed = {}\n",
        trainer.config.to_text().replace('\n', ";"),
        a.split.name(),
        inputs.len(),
        a.per_sheet,
        a.seed
    );
    let dir = RunDir::create(
        &a.run,
        &run_root(&a.run),
        "generate",
        &config_hash(&settings),
    )?;
    dir.write("settings.txt", &settings)?;

    let mut gen = ModelGenerator::new(&mut trainer.gan, a.seed);
    let all: Vec<usize> = (0..inputs.len()).collect();
    for (i, chunk) in all.chunks(a.per_sheet).enumerate() {
        let images = inputs.batch::<f32>(chunk);
        let outputs = generate_viewpoints(&mut gen, &images, net.num_attrs)?;
        let path = dir.path.join(format!("contact_sheet_{i:03}.png"));
        contact_sheet(&images, &outputs)?
            .save(&path)
            .map_err(|e| Error::File {
                path: path.clone(),
                message: e.to_string(),
            })?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_root(r: &RunArgs) -> PathBuf {
    r.run_root
        .clone()
        .unwrap_or_else(|| RunConfig::default().run_root)
}

/// Loaded inputs shared by both evaluation commands.
struct EvalSetup {
    trainer: Option<Trainer<f32>>,
    data: Dataset,
    settings: String,
}

fn eval_setup(a: &EvalArgs, command: &str) -> Result<EvalSetup> {
    let trainer = match (&a.checkpoint, a.generator) {
        (Some(p), GeneratorArg::Model) => Some(Trainer::<f32>::load(p)?),
        (None, GeneratorArg::Model) => {
            return Err(config_error("the model generator needs --checkpoint"))
        }
        _ => None,
    };
    let (size, num_attrs) = match &trainer {
        Some(t) => {
            let n = &t.config.net;
            if a.image_size.is_some_and(|s| s != n.image_size) {
                return Err(config_error(format!(
                    "--image-size differs from the checkpoint's {}",
                    n.image_size
                )));
            }
            (n.image_size, n.num_attrs)
        }
        None => (a.image_size.unwrap_or(DEFAULT_IMAGE_SIZE), NUM_VIEWPOINTS),
    };
    let data = load_dataset(&a.data, size, num_attrs)?;
    let model = trainer
        .as_ref()
        .map(|t| t.config.to_text().replace('\n', ";"))
        .unwrap_or_default();
    let settings = format!(
        "command = {command}\ngenerator = {}\nmodel = {model}\ndata = {}\nimage_size = {size}\nnc = {}\nseed = {}\nclassifier_steps = {}\nclassifier_width = {}\n",
        match a.generator {
            GeneratorArg::Model => "model",
            GeneratorArg::Identity => "identity",
            GeneratorArg::Constant => "constant",
        },
        a.data.display(),
        a.nc,
        a.seed,
        a.classifier_steps,
        a.classifier_width,
    );
    Ok(EvalSetup {
        trainer,
        data,
        settings,
    })
}

fn classifier_config(a: &EvalArgs) -> Result<ClassifierConfig> {
    if a.classifier_steps == 0 || a.classifier_width == 0 {
        return Err(config_error("classifier steps and width must be positive"));
    }
    Ok(ClassifierConfig {
        width: a.classifier_width,
        steps: a.classifier_steps,
        seed: a.seed,
        ..ClassifierConfig::default()
    })
}

fn with_generator<R>(
    kind: GeneratorArg,
    trainer: Option<&mut Trainer<f32>>,
    seed: u64,
    f: impl FnOnce(&mut dyn ImageGenerator) -> Result<R>,
) -> Result<R> {
    match (kind, trainer) {
        (GeneratorArg::Model, Some(t)) => f(&mut ModelGenerator::new(&mut t.gan, seed)),
        (GeneratorArg::Identity, _) => f(&mut IdentityGenerator),
        (GeneratorArg::Constant, _) => f(&mut ConstantGenerator(0.0)),
        (GeneratorArg::Model, None) => Err(anyhow!("model generator without a checkpoint")),
    }
}

fn eval_idpres(a: IdPresArgs) -> Result<()> {
    if a.k == 0 {
        return Err(config_error("--k must be positive"));
    }
    let e = &a.eval;
    let mut setup = eval_setup(e, "eval-idpres")?;
    let settings = format!("{}k = {}\n", setup.settings, a.k);
    let hash = config_hash(&settings);
    let ccfg = classifier_config(e)?;
    let standard = setup.data.split(Split::Standard);
    let auxiliary = setup.data.split(Split::Auxiliary);
    if auxiliary.is_empty() {
        return Err(Error::Data("auxiliary split is empty".into()).into());
    }
    let dir = RunDir::create(&e.run, &run_root(&e.run), "eval-idpres", &hash)?;
    dir.write("settings.txt", &settings)?;
    info!(
        "training feature extractor on {} auxiliary images",
        auxiliary.len()
    );
    let extractor = train_feature_extractor(&auxiliary, &ccfg)?;
    let cfg = IdPresConfig {
        n_c: e.nc,
        k: a.k,
        seed: e.seed,
        config_hash: hash,
    };
    let report = with_generator(e.generator, setup.trainer.as_mut(), e.seed, |g| {
        Ok(knn_idpres(&standard, g, &extractor, &cfg)?)
    })?;
    let path = dir.path.join("idpres.tsv");
    report.write(&path)?;
    print!("{}", report.summary());
    println!("{}", path.display());
    Ok(())
}

fn eval_fewshot(a: FewShotArgs) -> Result<()> {
    if a.shots == 0 {
        return Err(config_error("--shots must be positive"));
    }
    let e = &a.eval;
    let mut setup = eval_setup(e, "eval-fewshot")?;
    let settings = format!(
        "{}shots = {}\nfakes = {}\n",
        setup.settings, a.shots, a.fakes
    );
    let hash = config_hash(&settings);
    let cfg = FewShotConfig {
        n_c: e.nc,
        shots: a.shots,
        fakes_per_image: a.fakes,
        seed: e.seed,
        classifier: classifier_config(e)?,
        config_hash: hash.clone(),
    };
    let standard = setup.data.split(Split::Standard);
    let dir = RunDir::create(&e.run, &run_root(&e.run), "eval-fewshot", &hash)?;
    dir.write("settings.txt", &settings)?;
    let result = with_generator(e.generator, setup.trainer.as_mut(), e.seed, |g| {
        Ok(fewshot_eval(&standard, g, &cfg)?)
    })?;
    for (name, report) in [
        ("fewshot_baseline.tsv", &result.baseline),
        ("fewshot_augmented.tsv", &result.augmented),
    ] {
        let path = dir.path.join(name);
        report.write(&path)?;
        print!("{}", report.summary());
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(config_error("--instances must be positive"));
    }
    let settings = format!("command = gradcheck\ninstances = {}\n", a.instances);
    let dir = RunDir::create(
        &a.run,
        &run_root(&a.run),
        "gradcheck",
        &config_hash(&settings),
    )?;
    dir.write("settings.txt", &settings)?;
    let reports = run_suite(a.instances)?;
    let mut table = String::from("op\tinstances\tmax_rel_error\tresult\n");
    println!(
        "{:<20} {:>9} {:>14} {:>8}  result",
        "op", "instances", "max rel err", "secs"
    );
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        table.push_str(&format!(
            "{}\t{}\t{:e}\t{verdict}\n",
            r.name,
            r.errors.len(),
            r.worst()
        ));
        println!(
            "{:<20} {:>9} {:>14.3e} {:>8.2}  {verdict}",
            r.name,
            r.errors.len(),
            r.worst(),
            r.seconds
        );
    }
    dir.write("gradcheck.tsv", &table)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} ops failed", reports.len())).into());
    }
    println!("all {} ops passed", reports.len());
    Ok(())
}
