//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{
    DataConfig, TrainConfig, SOURCE_EVAL_SPLIT, SOURCE_SPLIT, TARGET_EVAL_SPLIT, TARGET_SPLIT,
};
use crate::error::{Error, Result};
use crate::eval::{self, FeatureKind};
use crate::model::D2ca;
use crate::rundir::RunDir;
use crate::synthetic::dataset::{generate_domain_dataset, DatasetManifest, MANIFEST_FILE};
use crate::synthetic::{FaceImage, LabeledSplit, UnlabeledSplit};
use crate::train::{self, load_model};

pub const DATA_ROOT_ENV: &str = "D2CA_DATA_ROOT";
pub const CONFIG_SNAPSHOT: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "d2ca", version, about = "Cross-domain AU adaptation on procedurally rendered toy faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the four toy splits (source, target, source_eval, target_eval).
    GenData(GenDataArgs),
    /// Train one model into a fresh run directory.
    Train(TrainArgs),
    /// Score a checkpoint: target AU F1, oracle swap fidelity, and FID.
    Eval(EvalArgs),
    /// Grid of cross-domain swaps and reconstructions.
    SynthGrid(SynthGridArgs),
    /// Interpolate AU features between two source faces on a target face.
    Interpolate(InterpolateArgs),
    /// Dump AU or domain features of a split as CSV.
    ExportFeatures(ExportArgs),
    /// Train every ablation variant for several seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root to create.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_icl: bool,
    #[arg(long)]
    pub no_fcl: bool,
    /// Train only the AU encoder and head on source labels.
    #[arg(long)]
    pub source_only: bool,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: PathBuf,
}

impl TrainFlags {
    /// File values overridden by flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        c.disable_icl |= self.no_icl;
        c.disable_fcl |= self.no_fcl;
        c.source_only |= self.source_only;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: PathBuf,
    /// Checkpoint whose AU encoder defines the FID feature space.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1000)]
    pub fid_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthGridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: PathBuf,
    /// Record index in `target_eval`.
    #[arg(long)]
    pub target: usize,
    /// Record indices in `source_eval`.
    #[arg(long)]
    pub source_a: usize,
    #[arg(long)]
    pub source_b: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: PathBuf,
    #[arg(long, default_value = SOURCE_EVAL_SPLIT)]
    pub split: String,
    /// `au` or `dm`.
    #[arg(long)]
    pub which: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Also train the source-only baseline for each seed.
    #[arg(long)]
    pub with_source_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => {
            let config = a.flags.resolve()?;
            let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
            train_run(&config, &a.flags.data_root, &a.out, resume.as_ref())
        }
        Command::Eval(a) => eval_cmd(&a),
        Command::SynthGrid(a) => synth_grid(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::ExportFeatures(a) => export(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => DataConfig::load(p)?,
        None => DataConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate()?;
    let run = RunDir::create(&a.out, "gen-data")?;
    run.write("data.cfg", c.to_kv().as_bytes())?;
    for spec in c.splits() {
        let m = generate_domain_dataset(&spec, c.seed, run.path())?;
        println!("{}: {} images", spec.name, m.records.len());
    }
    run.close()?;
    Ok(())
}

/// Trains `config` into a fresh run directory `out`.
pub fn train_run(config: &TrainConfig, data_root: &Path, out: &Path, resume: Option<&Checkpoint>) -> Result<()> {
    let source = LabeledSplit::source_for_training(&data_root.join(SOURCE_SPLIT))?;
    let target = UnlabeledSplit::open(&data_root.join(TARGET_SPLIT))?;
    let run = RunDir::create(out, "train")?;
    run.write(CONFIG_SNAPSHOT, config.to_kv().as_bytes())?;
    for split in [SOURCE_SPLIT, TARGET_SPLIT] {
        let p = data_root.join(split).join(MANIFEST_FILE);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        run.write(&format!("manifests/{split}.json"), &bytes)?;
    }
    match train::fit(&source, &target, config, run.path(), resume) {
        Ok(outcome) => {
            if let Some(r) = outcome.last_report {
                println!("finished {} steps; last l_total {:.5}", outcome.steps, r.l_total);
            }
        }
        Err(e) => {
            run.write("failure.txt", format!("{e}\n").as_bytes())?;
            run.close()?;
            return Err(e);
        }
    }
    run.close()?;
    Ok(())
}

fn check_compatible(model: &D2ca, manifest: &DatasetManifest) -> Result<()> {
    let c = &model.config;
    if manifest.height != c.image_size || manifest.width != c.image_size || manifest.num_aus != c.num_aus {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {s}x{s} images with {} AUs, split `{}` has {}x{} with {}",
            c.num_aus,
            manifest.split,
            manifest.height,
            manifest.width,
            manifest.num_aus,
            s = c.image_size
        )));
    }
    Ok(())
}

fn open_model(path: &Path) -> Result<(Checkpoint, D2ca)> {
    let ckpt = Checkpoint::load(path)?;
    let model = load_model(&ckpt)?;
    Ok((ckpt, model))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (_, model) = open_model(&a.checkpoint)?;
    let te_dir = a.data_root.join(TARGET_EVAL_SPLIT);
    let se_dir = a.data_root.join(SOURCE_EVAL_SPLIT);
    let te = DatasetManifest::load(&te_dir)?;
    let se = DatasetManifest::load(&se_dir)?;
    check_compatible(&model, &te)?;
    let reference = a.reference.as_deref().map(open_model).transpose()?;
    let run = RunDir::create(&a.out, "eval")?;
    let (probs, labels) = eval::split_probabilities(&model, &te_dir)?;
    let f1 = eval::f1_scores(&probs, &labels, 0.5)?;
    run.write("f1.json", serde_json::to_string_pretty(&f1)?.as_bytes())?;
    run.write("f1.csv", f1.table().as_bytes())?;
    let pairs = eval::sample_swap_pairs(&se, &te, a.pairs, a.seed)?;
    let swap = eval::swap_fidelity(&model, &se, &te, &pairs)?;
    run.write("swap.json", serde_json::to_string_pretty(&swap)?.as_bytes())?;
    if let Some((_, reference)) = &reference {
        let source = LabeledSplit::source_for_training(&a.data_root.join(SOURCE_SPLIT))?;
        let target = UnlabeledSplit::open(&a.data_root.join(TARGET_SPLIT))?;
        let fid = eval::generation_fid(&model, reference, &source.images, &target.images, a.fid_samples, a.seed)?;
        run.write("fid.json", serde_json::to_string_pretty(&serde_json::json!({ "fid": fid }))?.as_bytes())?;
    }
    println!("AVE F1 {:.1}", 100.0 * f1.ave);
    run.close()?;
    Ok(())
}

/// Splits `[n, 3, H, W]` into images.
pub fn tensor_to_faces(t: &tch::Tensor) -> Result<Vec<FaceImage>> {
    let s = t.size();
    let (n, h, w) = (s[0] as usize, s[2] as usize, s[3] as usize);
    let flat: Vec<f32> = Vec::try_from(t.to_kind(tch::Kind::Float).contiguous().reshape([-1]))?;
    let per = 3 * h * w;
    (0..n).map(|i| FaceImage::from_chw(h, w, &flat[i * per..(i + 1) * per])).collect()
}

/// Tiles rows of equally sized images into one picture.
pub fn image_grid(rows: &[Vec<FaceImage>]) -> image::RgbImage {
    let h = rows[0][0].height() as u32;
    let w = rows[0][0].width() as u32;
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let mut canvas = image::RgbImage::new(cols * w, rows.len() as u32 * h);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            image::imageops::replace(&mut canvas, &img.to_rgb8(), (c as u32 * w) as i64, (r as u32 * h) as i64);
        }
    }
    canvas
}

fn png_bytes(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn synth_grid(a: &SynthGridArgs) -> Result<()> {
    if a.pairs <= 0 {
        return Err(Error::invalid("pairs", format!("{} must be positive", a.pairs)));
    }
    let (_, model) = open_model(&a.checkpoint)?;
    let se = LabeledSplit::for_evaluation(&a.data_root.join(SOURCE_EVAL_SPLIT))?;
    let te = UnlabeledSplit::open(&a.data_root.join(TARGET_EVAL_SPLIT))?;
    if se.images.height != model.config.image_size {
        return Err(Error::Checkpoint("checkpoint and data image sizes differ".into()));
    }
    let n = a.pairs as usize;
    let idx = train::sample_batch(&se.identity_ids, te.len(), n.max(2), a.seed, 0)?;
    let batch = train::Batch::gather(&se, &te, &idx);
    let rows = tch::no_grad(|| -> Result<Vec<Vec<FaceImage>>> {
        let b = train::forward_synthesis(&model, &batch.source, &batch.target)?;
        let cols: Vec<Vec<FaceImage>> = [&b.i_s, &b.i_t, &b.i_st, &b.i_ts, &b.hat_s, &b.hat_t]
            .iter()
            .map(|t| tensor_to_faces(t))
            .collect::<Result<_>>()?;
        Ok((0..n).map(|i| cols.iter().map(|c| c[i].clone()).collect()).collect())
    })?;
    let run = RunDir::create(&a.out, "synth-grid")?;
    run.write("grid.png", &png_bytes(&image_grid(&rows))?)?;
    run.close()?;
    Ok(())
}

fn interpolate(a: &InterpolateArgs) -> Result<()> {
    let (_, model) = open_model(&a.checkpoint)?;
    let se = LabeledSplit::for_evaluation(&a.data_root.join(SOURCE_EVAL_SPLIT))?;
    let te = UnlabeledSplit::open(&a.data_root.join(TARGET_EVAL_SPLIT))?;
    for (name, i, len) in [("target", a.target, te.len()), ("source_a", a.source_a, se.len()), ("source_b", a.source_b, se.len())] {
        if i >= len {
            return Err(Error::invalid(name, format!("index {i} out of range ({len} records)")));
        }
    }
    let one = |stack: &crate::synthetic::ImageStack, i: usize| {
        crate::model::images_to_tensor(stack.image_chw(i), 1, stack.height, stack.width)
    };
    let (t, sa, sb) = (one(&te.images, a.target), one(&se.images, a.source_a), one(&se.images, a.source_b));
    let path = eval::interpolate_au(&model, &t, &sa, &sb, a.steps)?;
    let report = eval::interpolation_report(&model, &t, &path, &se.labels[a.source_a], &se.labels[a.source_b])?;
    let mut row = vec![te.images.image(a.target), se.images.image(a.source_a), se.images.image(a.source_b)];
    row.extend(tensor_to_faces(&path)?);
    let name = format!(
        "interp_{}_t{}_a{}_b{}.png",
        &model.checksum()[..12],
        a.target,
        a.source_a,
        a.source_b
    );
    let run = RunDir::create(&a.out, "interpolate")?;
    run.write(&name, &png_bytes(&image_grid(&[row]))?)?;
    run.write("interpolation.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.close()?;
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let which: FeatureKind = a.which.parse()?;
    let (_, model) = open_model(&a.checkpoint)?;
    let split = LabeledSplit::for_evaluation(&a.data_root.join(&a.split))?;
    let feats = eval::extract_features(&model, &split.images, split.domain, which)?;
    let mut buf = Vec::new();
    eval::export_features(&mut buf, split.domain, &split.identity_ids, Some(&split.labels), &feats)?;
    let run = RunDir::create(&a.out, "export-features")?;
    run.write(&format!("features_{}_{}.csv", a.split, a.which), &buf)?;
    run.close()?;
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let base = a.flags.resolve()?;
    let mut variants = vec![(false, false), (false, true), (true, true)];
    let run = RunDir::create(&a.out, "sweep")?;
    let mut runs = Vec::new();
    for &seed in &a.seeds {
        for &(no_icl, no_fcl) in &variants {
            let mut c = base.clone();
            c.seed = seed;
            c.disable_icl = no_icl;
            c.disable_fcl = no_fcl;
            runs.push(c);
        }
        if a.with_source_only {
            let mut c = base.clone();
            c.seed = seed;
            c.source_only = true;
            runs.push(c);
        }
    }
    variants.clear();
    for c in &runs {
        let dir = run.join(&format!("{}_seed{}", c.variant(), c.seed));
        println!("training {}", dir.display());
        train_run(c, &a.flags.data_root, &dir, None)?;
    }
    run.close()?;
    Ok(())
}
