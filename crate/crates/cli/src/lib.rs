//! `lts` command-line front end.

pub mod config;
mod selfcheck;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lts_core::didl::{defect_iterate, predict_mask, DidlArch, DidlModel};
use lts_core::distlayer::{divergence_experiment, verify_zero_bin_rule, write_density_csv};
use lts_core::eval::{aggregate, score_video, CSV_HEADER};
use lts_core::hist::{build_pool, load_pool, prune_similar, save_pool};
use lts_core::sbr::{
    corrupt_mask, synthetic_corpus, train_sbr, CorpusSpec, RefineNet, TrainingPair,
};
use lts_core::videoio::{
    align_masks, generate_synthetic, load_frames, load_gt_masks, read_mask, write_frame,
    write_heatmap, write_mask, FilePattern, FrameSequence, Label, Provenance, SyntheticSceneSpec,
    ValueMap,
};
use lts_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "lts", version, about = "Moving object segmentation from temporal pixel histograms")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Extra config assignment, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving run.log (default: current directory).
    #[arg(long, global = true)]
    log_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a labeled histogram pool from frames and ground truth.
    Extract {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "in%06d.png")]
        frame_pattern: String,
        #[arg(long, default_value = "gt%06d.png")]
        gt_pattern: String,
    },
    /// Drop near-duplicate instances from a pool.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the histogram classifier with defect iteration.
    TrainDidl {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        init_frac: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration CSV (iteration, subset_size, accuracy).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify every pixel of one frame.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// File index of the frame (the number in its name).
        #[arg(long)]
        t: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "in%06d.png")]
        frame_pattern: String,
    },
    /// Train the patch refinement network.
    TrainSbr {
        /// Directory with `input/`, `groundtruth/` and optionally `didl/`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Train on this many generated scenes instead of a corpus.
        #[arg(long, conflicts_with = "corpus")]
        synthetic: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Base channel width of the network.
        #[arg(long, default_value_t = lts_core::sbr::DEFAULT_BASE_WIDTH)]
        width: usize,
    },
    /// Classify a frame, then refine the mask.
    Refine {
        #[arg(long)]
        didl: PathBuf,
        #[arg(long)]
        sbr: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        t: u64,
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value = "in%06d.png")]
        frame_pattern: String,
    },
    /// Monte Carlo checks of the product layer's zero bin.
    VerifyProduct {
        #[arg(long, default_value_t = 10_000_000)]
        samples: u64,
        /// Where the two density CSVs are written.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Finite-difference checks of the hand-written gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = selfcheck::Suite::All)]
        suite: selfcheck::Suite,
    },
    /// Render a moving-square scene with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 10)]
        square: usize,
        #[arg(long, default_value_t = 0.02)]
        sigma: f64,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "bin%06d.png")]
        pred_pattern: String,
        #[arg(long, default_value = "gt%06d.png")]
        gt_pattern: String,
        #[arg(long)]
        video: Option<String>,
        #[arg(long, default_value = "default")]
        category: String,
    },
}

/// Usage problems exit with 2, failures while running with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.global.config {
        cfg.merge_file(path)?;
    }
    for kv in &cli.global.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Prune { tau: Some(t), .. } => cfg.tau = *t,
        Command::TrainDidl { init_frac, iters, .. } => {
            if let Some(f) = init_frac {
                cfg.didl_init_frac = *f;
            }
            if let Some(n) = iters {
                cfg.didl_iterations = *n;
            }
        }
        Command::TrainSbr { epochs: Some(e), .. } => cfg.sbr_epochs = *e,
        Command::Refine { l: Some(l), .. } => cfg.sbr_l = *l,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, argv: &[OsString]) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(&cli).map_err(Failure::Usage)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("threads must be ≥ 1")));
        }
        // A pool may already exist when several commands run in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let log_dir = cli.global.log_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut log = RunLog::new(&log_dir, argv, &cfg, &cli);
    let result = dispatch(&cli, &cfg, &mut log);
    log.finish(&result).map_err(Failure::Runtime)?;
    result.map_err(Failure::Runtime)
}

struct RunLog {
    path: PathBuf,
    text: String,
}

impl RunLog {
    fn new(dir: &Path, argv: &[OsString], cfg: &RunConfig, cli: &Cli) -> Self {
        let cmd: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        let mut text = format!("command = {}\n", cmd.join(" "));
        let _ = writeln!(text, "precision = {:?}", cli.global.precision);
        let _ = writeln!(text, "threads = {}", rayon::current_num_threads());
        text.push_str(&cfg.to_text());
        Self {
            path: dir.join("run.log"),
            text,
        }
    }

    fn note(&mut self, line: impl AsRef<str>) {
        self.text.push_str(line.as_ref());
        self.text.push('\n');
    }

    fn finish(&mut self, result: &Result<()>) -> Result<()> {
        match result {
            Ok(()) => self.note("status = ok"),
            Err(e) => self.note(format!("status = failed: {e:#}")),
        }
        fs::create_dir_all(self.path.parent().unwrap_or(Path::new(".")))?;
        fs::write(&self.path, &self.text).with_context(|| format!("writing {}", self.path.display()))
    }
}

fn frame_position(seq: &FrameSequence, index: u64) -> Result<usize> {
    seq.indices()
        .binary_search(&index)
        .map_err(|_| anyhow::anyhow!("no frame with index {index}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    match &cli.command {
        Command::Extract {
            frames,
            gt,
            stride,
            out,
            frame_pattern,
            gt_pattern,
        } => {
            let seq = load_frames(frames, frame_pattern)?;
            let masks = load_gt_masks(gt, gt_pattern, &ValueMap::cdnet())?;
            let aligned = align_masks(&seq, masks)?;
            let pool = build_pool(&seq, &aligned, *stride)?;
            create_parent(out)?;
            save_pool(&pool, out)?;
            let msg = format!(
                "{} instances ({} background, {} foreground, {} other)",
                pool.len(),
                pool.count(Label::Background),
                pool.count(Label::Foreground),
                pool.count(Label::Other)
            );
            println!("{msg}");
            log.note(msg);
        }
        Command::Prune { input, out, .. } => {
            let pool = load_pool(input)?;
            let kept = prune_similar(&pool, cfg.tau)?;
            create_parent(out)?;
            save_pool(&kept, out)?;
            let msg = format!("kept {} of {} instances at tau {}", kept.len(), pool.len(), cfg.tau);
            println!("{msg}");
            log.note(msg);
        }
        Command::TrainDidl { pool, out, report, .. } => match cli.global.precision {
            Precision::F32 => train_didl::<f32>(cfg, pool, out, report.as_deref(), log)?,
            Precision::F64 => train_didl::<f64>(cfg, pool, out, report.as_deref(), log)?,
        },
        Command::Infer {
            model,
            frames,
            t,
            out,
            frame_pattern,
        } => {
            let seq = load_frames(frames, frame_pattern)?;
            let pos = frame_position(&seq, *t)?;
            let mask = match cli.global.precision {
                Precision::F32 => predict_mask(&DidlModel::<f32>::load(model)?, &seq, pos)?,
                Precision::F64 => predict_mask(&DidlModel::<f64>::load(model)?, &seq, pos)?,
            };
            create_parent(out)?;
            write_mask(&mask, out)?;
            log.note(format!("foreground pixels = {}", mask.count(Label::Foreground)));
        }
        Command::TrainSbr {
            corpus,
            synthetic,
            out,
            width,
            ..
        } => {
            if *width == 0 {
                bail!("width must be ≥ 1");
            }
            let pairs = match corpus {
                Some(dir) => load_corpus(dir, cfg)?,
                None => synthetic_corpus(&CorpusSpec {
                    scenes: synthetic.unwrap_or(8),
                    noise_rate: cfg.sbr_noise_rate,
                    seed: cfg.seed,
                    ..Default::default()
                })?,
            };
            log.note(format!("training images = {}", pairs.len()));
            let losses = match cli.global.precision {
                Precision::F32 => train_sbr_to::<f32>(cfg, &pairs, *width, out)?,
                Precision::F64 => train_sbr_to::<f64>(cfg, &pairs, *width, out)?,
            };
            for (i, l) in losses.iter().enumerate() {
                let line = format!("epoch {} loss {l:.6}", i + 1);
                println!("{line}");
                log.note(line);
            }
        }
        Command::Refine {
            didl,
            sbr,
            frames,
            t,
            out,
            heatmap,
            frame_pattern,
            ..
        } => {
            let seq = load_frames(frames, frame_pattern)?;
            let pos = frame_position(&seq, *t)?;
            let (heat, mask) = match cli.global.precision {
                Precision::F32 => refine::<f32>(didl, sbr, &seq, pos, cfg)?,
                Precision::F64 => refine::<f64>(didl, sbr, &seq, pos, cfg)?,
            };
            create_parent(out)?;
            write_mask(&mask, out)?;
            if let Some(h) = heatmap {
                create_parent(h)?;
                write_heatmap(&heat.normalized(), heat.height, heat.width, h)?;
            }
            log.note(format!(
                "foreground pixels = {}, min stack = {}",
                mask.count(Label::Foreground),
                heat.min_stack()
            ));
        }
        Command::VerifyProduct { samples, out_dir } => {
            fs::create_dir_all(out_dir)?;
            let z = verify_zero_bin_rule(*samples, cfg.seed)?;
            let d = divergence_experiment(*samples, cfg.seed)?;
            write_density_csv(&z.product, &out_dir.join("product_bimodal.csv"))?;
            write_density_csv(&d.product, &out_dir.join("product_divergence.csv"))?;
            let text = format!(
                "samples = {}\nseed = {}\nbimodal.zero_bin_density = {:.6}\nbimodal.x_zero_density = {:.6}\n\
                 bimodal.mean_inverse_abs_w = {:.6}\nbimodal.predicted_zero_density = {:.6}\n\
                 bimodal.relative_error = {:.6}\ndivergence.zero_bin_density = {:.6}\n\
                 divergence.median_density = {:.6}\ndivergence.ratio = {:.3}",
                z.samples,
                z.seed,
                z.measured_zero_density,
                z.x_zero_density,
                z.mean_inverse_abs_w,
                z.predicted_zero_density,
                z.relative_error,
                d.zero_density,
                d.median_density,
                d.ratio
            );
            println!("{text}");
            log.note(text);
        }
        Command::Gradcheck { suite } => {
            let results = selfcheck::run(*suite, cfg.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                let line = format!(
                    "{:<24} entries {:>5}  max rel err {:.3e}  (limit {:.0e})  {}",
                    r.name,
                    r.entries,
                    r.max_error,
                    r.tolerance,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                println!("{line}");
                log.note(line);
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join(", "));
            }
        }
        Command::Synth {
            out,
            height,
            width,
            frames,
            square,
            sigma,
        } => {
            let spec = SyntheticSceneSpec::moving_square(*height, *width, *frames, *square, *sigma, cfg.seed);
            let (seq, masks) = generate_synthetic(&spec)?;
            let (inp, gt) = (out.join("input"), out.join("groundtruth"));
            fs::create_dir_all(&inp)?;
            fs::create_dir_all(&gt)?;
            let fp = FilePattern::parse("in%06d.png")?;
            let gp = FilePattern::parse("gt%06d.png")?;
            for (t, (f, m)) in seq.frames().iter().zip(&masks).enumerate() {
                write_frame(f, &inp.join(fp.format(t as u64 + 1)))?;
                write_mask(m, &gt.join(gp.format(t as u64 + 1)))?;
            }
            log.note(format!("wrote {} frames to {}", seq.len(), out.display()));
        }
        Command::Evaluate {
            pred,
            gt,
            report,
            pred_pattern,
            gt_pattern,
            video,
            category,
        } => evaluate(pred, gt, report, pred_pattern, gt_pattern, video.as_deref(), category, log)?,
    }
    Ok(())
}

fn train_didl<T: Real>(
    cfg: &RunConfig,
    pool: &Path,
    out: &Path,
    report: Option<&Path>,
    log: &mut RunLog,
) -> Result<()> {
    let pool = load_pool(pool)?;
    let (model, rep) = defect_iterate::<T>(&pool, &cfg.defect_config(), DidlArch::default())?;
    create_parent(out)?;
    model.save(out)?;
    let csv = rep.to_csv();
    print!("{csv}");
    log.note(csv.trim_end());
    if let Some(path) = report {
        create_parent(path)?;
        fs::write(path, csv)?;
    }
    Ok(())
}

fn train_sbr_to<T: Real>(cfg: &RunConfig, pairs: &[TrainingPair], width: usize, out: &Path) -> Result<Vec<f64>> {
    let mut net = RefineNet::<T>::build(width, cfg.seed);
    let losses = train_sbr(&mut net, pairs, &cfg.sbr_train_config())?;
    create_parent(out)?;
    net.save(out)?;
    Ok(losses)
}

fn refine<T: Real>(
    didl: &Path,
    sbr: &Path,
    seq: &FrameSequence,
    t: usize,
    cfg: &RunConfig,
) -> Result<(lts_core::sbr::Heatmap, lts_core::videoio::LabelMask)> {
    let model = DidlModel::<T>::load(didl)?;
    let net = RefineNet::<T>::load(sbr)?;
    Ok(lts_core::sbr::refine_pipeline(&model, &net, seq, t, &cfg.refine_config())?)
}

/// Pairs every ground-truth frame of `dir/groundtruth` with its image in
/// `dir/input`. Input masks come from `dir/didl` when present, otherwise
/// from corrupted ground truth.
fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let seq = load_frames(&dir.join("input"), "in%06d.png")?;
    let gts = load_gt_masks(&dir.join("groundtruth"), "gt%06d.png", &ValueMap::cdnet())?;
    let didl_dir = dir.join("didl");
    let didl_pattern = FilePattern::parse("bin%06d.png")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    for (idx, gt) in gts {
        let Ok(pos) = seq.indices().binary_search(&idx) else {
            continue;
        };
        let input = if didl_dir.is_dir() {
            read_mask(&didl_dir.join(didl_pattern.format(idx)), &ValueMap::predicted(), Provenance::Predicted)?
        } else {
            let strength = rng.random_range(0.0..=1.0);
            corrupt_mask(&gt, 0.5 * strength, cfg.sbr_noise_rate * strength, &mut rng)
        };
        pairs.push(TrainingPair::new(seq.frame(pos), &input, &gt)?);
    }
    if pairs.is_empty() {
        bail!("no ground-truth frame in {} has a matching input image", dir.display());
    }
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    pred: &Path,
    gt: &Path,
    report: &Path,
    pred_pattern: &str,
    gt_pattern: &str,
    video: Option<&str>,
    category: &str,
    log: &mut RunLog,
) -> Result<()> {
    let preds = load_gt_masks(pred, pred_pattern, &ValueMap::predicted())?;
    let gts = load_gt_masks(gt, gt_pattern, &ValueMap::cdnet())?;
    let mut pairs = Vec::new();
    for (idx, p) in &preds {
        if let Ok(i) = gts.binary_search_by_key(idx, |(g, _)| *g) {
            pairs.push((p, &gts[i].1));
        }
    }
    if pairs.is_empty() {
        bail!("no predicted mask has a ground-truth counterpart");
    }
    let name = video.map(str::to_string).unwrap_or_else(|| {
        pred.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into())
    });
    let rep = score_video(name, category, &pairs)?;
    create_parent(report)?;
    let mut w = csv::Writer::from_path(report)?;
    w.write_record(CSV_HEADER)?;
    w.write_record(rep.csv_record())?;
    w.flush()?;
    let summary = aggregate(std::slice::from_ref(&rep))?;
    let line = format!(
        "{}: {} frames, F = {:.6} (overall {:.6})",
        rep.video, rep.frames_scored, rep.counts.f_measure(), summary.overall
    );
    println!("{line}");
    log.note(line);
    Ok(())
}
