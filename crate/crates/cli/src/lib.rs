//! The `spectraseg` command-line pipeline.
//!
//! ```text
//! synth → fit-reconstructor → reconstruct → train → evaluate
//!                  └────────→ patch-experiment      segment
//! ```
//!
//! Every subcommand reads its inputs from wherever it is pointed and writes
//! only below `--out`. Datasets on disk are directories holding a
//! `manifest.txt` plus `<stem>.spc` cubes and `<stem>.pgm` label maps.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use spectraseg::io::pnm::{self, Transfer};
use spectraseg::io::{checkpoint, spc1, table};
use spectraseg::nn::{unet_init, UNetConfig, UNetModel};
use spectraseg::patch::{
    extract_patches, fit_baselines, pca_fit, pca_project_all, points_to_csv, separability_report,
    LabeledVectors,
};
use spectraseg::scene::{
    default_tissue_library, generate_dataset, save_scene, LabelMap, LabeledScene, Manifest,
    SceneConfig,
};
use spectraseg::spectral::{
    fit_wiener, reconstruct_cube, render_cube, CameraModel, RenderOptions, SpectralCube,
};
use spectraseg::train::{
    compute_class_weights, evaluate_scenes, iou, mask_to_color, predict_mask, train,
    train_val_split, TrainConfig,
};
use spectraseg::{Error, Result};

use config::{load_config, PipelineConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

pub const SCENES_DIR: &str = "scenes";
pub const RECONSTRUCTED_DIR: &str = "reconstructed";
pub const RECONSTRUCTOR_FILE: &str = "reconstructor.txt";
pub const MODEL_FILE: &str = "model.unet";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";

#[derive(Debug, Parser)]
#[command(
    name = "spectraseg",
    version,
    about = "Spectral reconstruction and segmentation pipeline"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Pipeline configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; overrides `paths.out`
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset with RGB renderings
    Synth,
    /// Fit a Wiener reconstructor from the spectra of a dataset
    FitReconstructor(InputArgs),
    /// Turn RGB renderings (or SPC1 cubes) into reconstructed cubes
    Reconstruct(ReconstructArgs),
    /// Patch extraction, PCA projection and baseline classifiers
    PatchExperiment(InputArgs),
    /// Train the segmentation network
    Train(InputArgs),
    /// Per-class IoU of a trained model on the validation split
    Evaluate(EvaluateArgs),
    /// Segment one RGB image or spectral cube
    Segment(SegmentArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Dataset directory (defaults depend on the subcommand)
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Dataset directory, P6 image or SPC1 cube; defaults to `<out>/scenes`
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Fitted reconstructor; defaults to `<out>/reconstructor.txt`
    #[arg(long)]
    pub reconstructor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directories, one table row each
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Checkpoint; defaults to `<out>/model.unet`
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// P6 image or SPC1 cube
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint; defaults to `<out>/model.unet`
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Needed for P6 input; defaults to `<out>/reconstructor.txt`
    #[arg(long)]
    pub reconstructor: Option<PathBuf>,
    /// Ground-truth P5 label map
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation { .. } => EXIT_CONFIG,
        Error::Format(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_FORMAT,
        _ => EXIT_OTHER,
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    let config = match &cli.config {
        Some(p) => match load_config(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                // a config file that cannot be read or parsed is a config failure
                return EXIT_CONFIG;
            }
        },
        None => PipelineConfig::default(),
    };
    let out = cli.out.clone().unwrap_or_else(|| config.out.clone());
    let ctx = Context {
        config,
        seed: cli.seed,
        out,
    };
    match dispatch(&ctx, &cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Context {
    config: PipelineConfig,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn out_dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = if sub.is_empty() {
            self.out.clone()
        } else {
            self.out.join(sub)
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn camera(&self) -> Result<CameraModel> {
        match &self.config.reconstruction.camera {
            Some(p) => table::load_camera(p),
            None => Ok(CameraModel::synthetic_default()),
        }
    }

    /// Training input: reconstructed cubes if present, else ground truth.
    fn default_dataset(&self) -> PathBuf {
        let rec = self.out.join(RECONSTRUCTED_DIR);
        if rec.join(Manifest::FILE_NAME).is_file() {
            rec
        } else {
            self.out.join(SCENES_DIR)
        }
    }

    fn unet_config(&self, n_classes: usize) -> UNetConfig {
        let t = &self.config.training;
        UNetConfig {
            n_classes,
            depth: t.depth,
            base_filters: t.base_filters,
            dropout_rate: t.dropout,
            dilation: t.dilation,
            seed: self.seed,
            ..UNetConfig::default()
        }
    }

    fn train_config(&self) -> TrainConfig {
        let t = &self.config.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            augment: t.augment,
            val_fraction: t.val_fraction,
            seed: self.seed,
        }
    }
}

fn dispatch(ctx: &Context, command: &Command) -> Result<()> {
    match command {
        Command::Synth => synth(ctx),
        Command::FitReconstructor(a) => fit_reconstructor(ctx, a),
        Command::Reconstruct(a) => reconstruct(ctx, a),
        Command::PatchExperiment(a) => patch_experiment(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Evaluate(a) => evaluate(ctx, a),
        Command::Segment(a) => segment(ctx, a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scene_config(ctx: &Context) -> Result<SceneConfig> {
    let s = &ctx.config.scene;
    let mut classes = default_tissue_library(s.classes)?;
    for c in &mut classes {
        c.spectral_jitter = s.jitter;
    }
    Ok(SceneConfig {
        height: s.height,
        width: s.width,
        n_regions: s.regions,
        shading_strength: s.shading,
        dominant_share: s.dominant_share,
        seed: ctx.seed,
        ..SceneConfig::with_classes(classes)
    })
}

fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<LabeledScene>)> {
    let manifest = Manifest::load(dir)?;
    let scenes = manifest.load_scenes(dir)?;
    Ok((manifest, scenes))
}

fn synth(ctx: &Context) -> Result<()> {
    let cfg = scene_config(ctx)?;
    let deg = ctx.config.degradation.to_core();
    let camera = ctx.camera()?;
    let scenes = generate_dataset(&cfg, &deg, ctx.config.scene.count, ctx.seed)?;
    let dir = ctx.out_dir(SCENES_DIR)?;
    let mut listed = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:03}");
        save_scene(&dir, &stem, s)?;
        let rgb = render_cube(&s.cube, &camera, RenderOptions::default());
        pnm::save(
            &dir.join(format!("{stem}.ppm")),
            &pnm::rgb_to_raster(&rgb, ctx.config.reconstruction.gamma),
        )?;
        listed.push((stem, s.fingerprint));
    }
    let manifest = Manifest {
        seed: ctx.seed,
        config_hash: scenes.first().map_or(0, |s| s.fingerprint),
        class_names: cfg.classes.iter().map(|c| c.name.clone()).collect(),
        scenes: listed,
    };
    manifest.save(&dir)?;
    println!("wrote {} scenes to {}", scenes.len(), dir.display());
    Ok(())
}

fn fit_reconstructor(ctx: &Context, args: &InputArgs) -> Result<()> {
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| ctx.out.join(SCENES_DIR));
    let (_, scenes) = load_dataset(&input)?;
    let stride = ctx.config.reconstruction.fit_stride;
    let mut spectra = Vec::new();
    for s in &scenes {
        let (h, w) = (s.cube.height(), s.cube.width());
        for i in (0..h * w).step_by(stride) {
            spectra.push(s.cube.pixel(i / w, i % w));
        }
    }
    let rec = fit_wiener(
        &spectra,
        &ctx.camera()?,
        ctx.config.reconstruction.noise_sigma,
    )?;
    let path = ctx.out_dir("")?.join(RECONSTRUCTOR_FILE);
    table::save_reconstructor(&path, &rec)?;
    println!(
        "fitted reconstructor on {} spectra -> {}",
        spectra.len(),
        path.display()
    );
    Ok(())
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// A cube from a P6 image (reconstructed) or an SPC1 file (passed through).
fn cube_from_file(
    path: &Path,
    reconstructor: impl FnOnce() -> Result<PathBuf>,
    gamma: Transfer,
) -> Result<SpectralCube> {
    if has_extension(path, "spc") {
        spc1::load(path)
    } else {
        let raster = pnm::load(path)?;
        let rgb = pnm::raster_to_rgb(&raster, gamma)?;
        let rec = table::load_reconstructor(&reconstructor()?)?;
        Ok(reconstruct_cube(&rec, &rgb))
    }
}

fn reconstruct(ctx: &Context, args: &ReconstructArgs) -> Result<()> {
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| ctx.out.join(SCENES_DIR));
    let rec_path = args
        .reconstructor
        .clone()
        .unwrap_or_else(|| ctx.out.join(RECONSTRUCTOR_FILE));
    let gamma = ctx.config.reconstruction.gamma;
    let dir = ctx.out_dir(RECONSTRUCTED_DIR)?;
    if input.is_file() {
        let cube = cube_from_file(&input, || Ok(rec_path.clone()), gamma)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cube");
        let path = dir.join(format!("{stem}.spc"));
        spc1::save(&path, &cube)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let manifest = Manifest::load(&input)?;
    let rec = table::load_reconstructor(&rec_path)?;
    for (stem, _) in &manifest.scenes {
        let ppm = input.join(format!("{stem}.ppm"));
        let cube = if ppm.is_file() {
            reconstruct_cube(&rec, &pnm::raster_to_rgb(&pnm::load(&ppm)?, gamma)?)
        } else {
            spc1::load(&input.join(format!("{stem}.spc")))?
        };
        spc1::save(&dir.join(format!("{stem}.spc")), &cube)?;
        let labels = pnm::load(&input.join(format!("{stem}.pgm")))?;
        pnm::save(&dir.join(format!("{stem}.pgm")), &labels)?;
    }
    manifest.save(&dir)?;
    println!(
        "reconstructed {} scenes into {}",
        manifest.scenes.len(),
        dir.display()
    );
    Ok(())
}

fn patch_experiment(ctx: &Context, args: &InputArgs) -> Result<()> {
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| ctx.out.join(SCENES_DIR));
    let (_, scenes) = load_dataset(&input)?;
    let p = &ctx.config.patch;
    let mut samples: Option<LabeledVectors> = None;
    for s in &scenes {
        let patches = extract_patches(&s.cube, &s.labels, p.size, p.stride)?.into_samples();
        match &mut samples {
            Some(all) => all.extend(&patches)?,
            None => samples = Some(patches),
        }
    }
    let samples = samples.ok_or_else(|| Error::Data("dataset has no scenes".into()))?;
    let report = fit_baselines(&samples, ctx.seed)?;

    // PCA on an evenly spaced subsample, then project every patch
    let step = samples.len().div_ceil(p.pca_samples).max(1);
    let subset: Vec<usize> = (0..samples.len()).step_by(step).collect();
    let pca = pca_fit(&samples.select(&subset), p.k)?;
    let projected = pca_project_all(&pca, &samples)?;
    let separability = separability_report(&projected)?;

    let dir = ctx.out_dir("patch")?;
    write(&dir.join("baselines.csv"), report.to_csv().as_bytes())?;
    write(
        &dir.join("pca_points.csv"),
        points_to_csv(&projected).as_bytes(),
    )?;
    write(
        &dir.join("separability.csv"),
        separability.to_csv().as_bytes(),
    )?;
    print!("{}", report.to_csv());
    println!(
        "silhouette {:.4}, overlap fraction {:.4}, explained variance {:?}",
        separability.silhouette,
        separability.overlap_fraction,
        pca.explained_variance_ratio()
    );
    Ok(())
}

fn train_cmd(ctx: &Context, args: &InputArgs) -> Result<()> {
    let input = args.input.clone().unwrap_or_else(|| ctx.default_dataset());
    let (manifest, scenes) = load_dataset(&input)?;
    let model = unet_init(&ctx.unet_config(manifest.class_names.len()))?;
    let (model, history) = train(model, &scenes, &ctx.train_config())?;
    let dir = ctx.out_dir("")?;
    checkpoint::save(&dir.join(MODEL_FILE), &model)?;
    write(&dir.join(HISTORY_FILE), history.to_csv().as_bytes())?;
    print!("{}", history.to_csv());
    Ok(())
}

/// `dataset,<class names...>,mean_iou`, one row per dataset; classes absent
/// from a dataset's validation masks are left empty.
pub fn evaluation_table(
    class_names: &[String],
    rows: &[(String, spectraseg::train::IouReport)],
) -> String {
    let mut out = format!("dataset,{},mean_iou\n", class_names.join(","));
    for (name, r) in rows {
        out.push_str(name);
        for v in &r.per_class_iou {
            match v {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{}", r.mean_iou).unwrap();
    }
    out
}

fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<()> {
    let inputs = if args.input.is_empty() {
        vec![ctx.default_dataset()]
    } else {
        args.input.clone()
    };
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| ctx.out.join(MODEL_FILE));
    let model: UNetModel = checkpoint::load(&model_path)?;
    let n_classes = model.config().n_classes;
    let seed = ctx.seed;
    let mut class_names = None;
    let mut rows = Vec::new();
    for dir in &inputs {
        let (manifest, scenes) = load_dataset(dir)?;
        if manifest.class_names.len() != n_classes {
            return Err(Error::Config(format!(
                "{} has {} classes but the model predicts {n_classes}",
                dir.display(),
                manifest.class_names.len()
            )));
        }
        let (train_idx, val_idx) =
            train_val_split(scenes.len(), ctx.config.training.val_fraction, seed);
        let weights =
            compute_class_weights(train_idx.iter().map(|&i| &scenes[i].labels), n_classes)?;
        let val: Vec<&LabeledScene> = val_idx.iter().map(|&i| &scenes[i]).collect();
        let (report, _) = evaluate_scenes(&model, &val, &weights)?;
        let name = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        rows.push((name, report));
        class_names.get_or_insert(manifest.class_names);
    }
    let table = evaluation_table(&class_names.unwrap_or_default(), &rows);
    write(&ctx.out_dir("")?.join(EVALUATION_FILE), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn segment(ctx: &Context, args: &SegmentArgs) -> Result<()> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| ctx.out.join(MODEL_FILE));
    let model = checkpoint::load(&model_path)?;
    let rec = args
        .reconstructor
        .clone()
        .unwrap_or_else(|| ctx.out.join(RECONSTRUCTOR_FILE));
    let cube = cube_from_file(&args.input, || Ok(rec), ctx.config.reconstruction.gamma)?;
    let mask = predict_mask(&model, &cube)?;
    let stem = args
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input");
    let dir = ctx.out_dir("segment")?;
    pnm::save(&dir.join(format!("{stem}_mask.pgm")), &mask.to_raster())?;
    pnm::save(&dir.join(format!("{stem}_mask.ppm")), &mask_to_color(&mask))?;
    if let Some(truth) = &args.truth {
        let gt = LabelMap::from_raster(pnm::load(truth)?)?;
        let report = iou(&mask, &gt, model.config().n_classes)?;
        let names: Vec<String> = (0..model.config().n_classes)
            .map(|k| k.to_string())
            .collect();
        let csv = report.to_csv(&names);
        write(&dir.join(format!("{stem}_iou.csv")), csv.as_bytes())?;
        print!("{csv}");
    }
    println!("wrote {}", dir.join(format!("{stem}_mask.pgm")).display());
    Ok(())
}
