use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use flod_core::camera::mean_center;
use flod_core::defaults::Defaults;
use flod_core::image::Image;
use flod_core::io::splat::encode_level;
use flod_core::io::{load_checkpoint, load_dataset, load_model, save_checkpoint, save_dataset, save_model, CameraFile};
use flod_core::io::{LevelFile, ModelMeta};
use flod_core::metrics::MetricReport;
use flod_core::model::scale_constraint;
use flod_core::raster::render as render_level;
use flod_core::scene::{generate, SyntheticParams};
use flod_core::selective::{FrameStats, RebuildMode, SelectionConfig, Session};
use flod_core::trainer::{TrainConfig, Trainer};

use crate::error::{CliError, CliResult};
use crate::{EvalArgs, GenSceneArgs, RenderArgs, TrainArgs};

pub const GT_FILE: &str = "gt.ply";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const STATS_FILE: &str = "stats.ndjson";

/// Iterations between cancellation checks and progress lines.
const TRAIN_CHUNK: u64 = 250;

/// Set once SIGINT or SIGTERM arrives. The handler is installed on first use.
pub fn shutdown_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    Arc::clone(FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = Arc::clone(&flag);
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install signal handler: {e}");
        }
        flag
    }))
}

fn is_non_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn check_output_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    if !force && is_non_empty_dir(dir) {
        return Err(CliError::Usage(format!("{} is not empty (use --force)", dir.display())));
    }
    Ok(())
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(flod_core::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

pub fn gen_scene(args: &GenSceneArgs) -> CliResult<()> {
    check_output_dir(&args.out, args.force)?;
    let scene = generate(SyntheticParams {
        seed: args.seed,
        gaussians: args.gaussians,
        views: args.views,
        resolution: args.res,
    })?;
    save_dataset(&args.out, &scene.dataset).map_err(runtime(args.out.display()))?;
    // a single-level file: the ground truth has no scale floor
    let gt = LevelFile { set: scene.ground_truth, tau: 1.0, rho: 2.0, l_max: 1 };
    std::fs::write(args.out.join(GT_FILE), encode_level(&gt)?)?;
    log::info!(
        "wrote {} training and {} held-out views to {}",
        scene.dataset.train.len(),
        scene.dataset.test.len(),
        args.out.display()
    );
    Ok(())
}

/// Training configuration from the defaults table, an optional TOML file and
/// the command-line overrides, in that order.
pub fn train_config(args: &TrainArgs, defaults: Defaults) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::for_levels(args.lmax);
    cfg.lambda_ssim = defaults.lambda_ssim;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let overlay: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        base.extend(overlay);
        cfg = base
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config {}: {e}", path.display())))?;
    }
    if let Some(f) = args.scale {
        if !(f > 0.0 && f.is_finite()) {
            return Err(CliError::Usage(format!("--scale must be positive, got {f}")));
        }
        cfg = cfg.scaled(f);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate(args.lmax)?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs, defaults: Defaults) -> CliResult<()> {
    if args.lmax < 1 {
        return Err(CliError::Usage("--lmax must be at least 1".into()));
    }
    scale_constraint(1, args.tau, args.rho, args.lmax)?;
    let cfg = train_config(args, defaults)?;
    if args.resume.is_none() {
        check_output_dir(&args.out, args.force)?;
    }
    let data = load_dataset(&args.data).map_err(runtime(args.data.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(runtime(path.display()))?;
            Trainer::resume(&data, cfg.clone(), ckpt)?
        }
        None => Trainer::new(&data, cfg.clone(), args.tau, args.rho, args.lmax)?,
    };
    log::info!("training {} levels, scene extent {:.4}", args.lmax, trainer.extent());
    let stop = shutdown_flag();
    while !trainer.is_done() {
        if stop.load(Ordering::SeqCst) {
            std::fs::create_dir_all(&args.out)?;
            let path = args.out.join(CHECKPOINT_FILE);
            save_checkpoint(&path, &trainer.checkpoint())?;
            return Err(CliError::Runtime(format!(
                "interrupted at level {} iteration {}; resume with --resume {}",
                trainer.level(),
                trainer.iteration(),
                path.display()
            )));
        }
        trainer.run_steps(TRAIN_CHUNK).map_err(|e| CliError::Runtime(e.to_string()))?;
        log::info!(
            "level {} iteration {} with {} Gaussians",
            trainer.level(),
            trainer.iteration(),
            trainer.current_set().len()
        );
    }
    let outcome = trainer.finish()?;
    let reference = mean_center(&data.train_cameras()).unwrap_or([0.0; 3]);
    let meta = ModelMeta {
        config_digest: &cfg.digest(),
        defaults,
        reference_position: reference,
        events: Some(&outcome.events),
    };
    let manifest = save_model(&args.out, &outcome.model, meta).map_err(runtime(args.out.display()))?;
    let report = serde_json::to_string_pretty(&outcome.reports)? + "\n";
    std::fs::write(args.out.join(TRAIN_REPORT_FILE), report)?;
    for e in &manifest.levels {
        log::info!("level {}: {} Gaussians, s_min {}", e.level, e.gaussians, e.s_min);
    }
    Ok(())
}

fn write_stats(path: &Path, stats: &[FrameStats]) -> CliResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in stats {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn render(args: &RenderArgs, defaults: Defaults) -> CliResult<()> {
    let (manifest, model) = load_model(&args.model).map_err(runtime(args.model.display()))?;
    let (l_start, l_end) = match (args.level, args.levels) {
        (Some(l), _) => (l, l),
        (None, Some(r)) => r,
        (None, None) => return Err(CliError::Usage("give --level or --levels".into())),
    };
    let mut cfg = SelectionConfig::new(l_start, l_end, args.gamma.unwrap_or(defaults.gamma));
    cfg.policy = args.reference.into();
    cfg.update_period = args.update_period.unwrap_or(defaults.update_period);
    cfg.validate(model.l_max)
        .map_err(|e| CliError::Usage(format!("{e} (model has levels 1..{})", model.l_max)))?;
    let cameras = CameraFile::load(&args.cameras).map_err(runtime(args.cameras.display()))?;
    if cameras.cameras.is_empty() {
        return Err(CliError::Usage(format!("{} lists no cameras", args.cameras.display())));
    }
    std::fs::create_dir_all(&args.out)?;

    let model = Arc::new(model);
    let cams: Vec<_> = cameras.cameras.iter().map(|e| e.camera()).collect();
    let mut stats = Vec::with_capacity(cams.len());
    let save = |id: &str, image: &Image| -> CliResult<()> {
        let path: PathBuf = args.out.join(format!("{id}.png"));
        image.save_png(&path).map_err(runtime(path.display()))
    };
    if let Some(level) = args.level {
        let set = model.level(level)?;
        for (i, (entry, cam)) in cameras.cameras.iter().zip(&cams).enumerate() {
            let t = std::time::Instant::now();
            let out = render_level(set, cam, args.background);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            save(&entry.id, &out.image)?;
            stats.push(FrameStats {
                view_index: i,
                generation: 0,
                gaussian_count: set.len(),
                render_ms: ms,
                latency_ms: ms,
                levels_used: vec![level],
                level_counts: vec![(level, set.len())],
                gamma: cfg.gamma,
            });
        }
    } else {
        let mut session = Session::new(model, cfg, manifest.reference_position, &cams[0], RebuildMode::Synchronous)?;
        for (i, (entry, cam)) in cameras.cameras.iter().zip(&cams).enumerate() {
            let frame = session.render_view(i, cam, args.background);
            save(&entry.id, &frame.output.image)?;
            stats.push(frame.stats);
        }
        for d in session.diagnostics() {
            log::warn!("{d}");
        }
    }
    write_stats(&args.out.join(STATS_FILE), &stats)?;
    log::info!("rendered {} views to {}", stats.len(), args.out.display());
    Ok(())
}

fn png_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

pub fn evaluate_dirs(renders: &Path, gt: &Path) -> CliResult<MetricReport> {
    let ours = png_names(renders)?;
    let theirs = png_names(gt)?;
    if ours.is_empty() {
        return Err(CliError::Runtime(format!("no PNG files in {}", renders.display())));
    }
    if ours != theirs {
        let missing: Vec<_> = ours.symmetric_difference(&theirs).cloned().collect();
        return Err(CliError::Runtime(format!(
            "{} and {} hold different images ({} vs {}); unmatched: {}",
            renders.display(),
            gt.display(),
            ours.len(),
            theirs.len(),
            missing.join(", ")
        )));
    }
    let mut pairs = Vec::new();
    for name in &ours {
        let a = Image::load_png(renders.join(name)).map_err(runtime(name))?;
        let b = Image::load_png(gt.join(name)).map_err(runtime(name))?;
        pairs.push((name.trim_end_matches(".png").to_string(), a, b));
    }
    Ok(MetricReport::evaluate(pairs.iter().map(|(n, a, b)| (n.clone(), a, b)))?)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let report = evaluate_dirs(&args.renders, &args.gt)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
