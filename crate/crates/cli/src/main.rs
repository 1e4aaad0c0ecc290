//! `dehaze` — synthesize hazy videos, train the network, evaluate, and
//! inspect intermediates.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use dehaze_core::haze::{synthesize_video, DepthMap, Frame, SynthesisConfig};
use dehaze_core::io;
use dehaze_core::metrics::evaluate_video;
use dehaze_core::model::{
    decode_step, frame_to_tensor, tensor_to_frame, FrameState, NetworkConfig, Parameters,
};
use dehaze_core::train::{clip_window, load_checkpoint, save_checkpoint, train_step, AdamW};
use dehaze_core::{DehazeError, Tensor};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dehaze", version, about = "Video dehazing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply the scattering model to clear frames + depth maps.
    Synthesize(SynthesizeArgs),
    /// Train on a directory of (hazy, clear) frame pairs.
    Train(TrainArgs),
    /// Evaluate a checkpoint against ground truth (PSNR / SSIM).
    Eval(EvalArgs),
    /// Dump per-scale intermediates of one frame to float-map files.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Directory of clear PNG frames.
    #[arg(long)]
    clear: PathBuf,
    /// Directory of PFM depth maps, one per frame.
    #[arg(long)]
    depth: PathBuf,
    /// Output directory (hazy/, trans/, gt/, manifest.txt).
    #[arg(long)]
    out: PathBuf,
    /// Seed for the haze parameter draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Key-value configuration file (overridden by the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ranges: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    dbins: Option<usize>,
    #[arg(long)]
    memory: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing hazy/ and gt/ PNG frames.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint.bin, train_log.csv).
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps to run in this invocation.
    #[arg(long, default_value_t = 300)]
    steps: u64,
    /// Continue from out/checkpoint.bin instead of reinitializing.
    #[arg(long, default_value_t = false)]
    resume: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hazy: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory (report.txt and, with --dump, dehazed frames).
    #[arg(long)]
    out: PathBuf,
    /// Also write the dehazed PNG frames.
    #[arg(long, default_value_t = false)]
    dump: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    hazy: PathBuf,
    /// Frame index to dump (default: last frame).
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synthesize(args) => run_synthesize(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Inspect(args) => run_inspect(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                DehazeError::Numeric(_) => 3,
                DehazeError::Parameter(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

// --- configuration ------------------------------------------------------

fn parse_key(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<(), DehazeError> {
    let bad = |k: &str, v: &str| DehazeError::param(format!("config key {k} has bad value {v:?}"));
    match key {
        "scales" => cfg.scales = value.parse().map_err(|_| bad(key, value))?,
        "channels" => {
            cfg.channels = value
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| bad(key, value)))
                .collect::<Result<_, _>>()?
        }
        "ranges" => cfg.ranges = value.parse().map_err(|_| bad(key, value))?,
        "d_bins" => cfg.d_bins = value.parse().map_err(|_| bad(key, value))?,
        "memory" => cfg.memory = value.parse().map_err(|_| bad(key, value))?,
        "window" => cfg.window = value.parse().map_err(|_| bad(key, value))?,
        "heads" => cfg.heads = value.parse().map_err(|_| bad(key, value))?,
        "lambda_phy" => cfg.lambda_phy = value.parse().map_err(|_| bad(key, value))?,
        "lambda_flow" => cfg.lambda_flow = value.parse().map_err(|_| bad(key, value))?,
        "lr0" => cfg.lr0 = value.parse().map_err(|_| bad(key, value))?,
        "schedule_steps" => cfg.schedule_steps = value.parse().map_err(|_| bad(key, value))?,
        "poly_power" => cfg.poly_power = value.parse().map_err(|_| bad(key, value))?,
        "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad(key, value))?,
        "clip_len" => cfg.clip_len = value.parse().map_err(|_| bad(key, value))?,
        "use_mpg" => cfg.use_mpg = value.parse().map_err(|_| bad(key, value))?,
        "use_msr" => cfg.use_msr = value.parse().map_err(|_| bad(key, value))?,
        "rng_seed" => cfg.rng_seed = value.parse().map_err(|_| bad(key, value))?,
        _ => return Err(DehazeError::param(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Defaults, then the config file, then command-line flags. When `scales`
/// changes without an explicit channel list, widths double per scale.
fn resolve_config(flags: &ModelFlags) -> Result<NetworkConfig, DehazeError> {
    let mut cfg = NetworkConfig::default();
    let mut channels_given = false;
    if let Some(path) = &flags.config {
        for (k, v) in io::read_manifest(path)? {
            if k == "channels" {
                channels_given = true;
            }
            parse_key(&mut cfg, &k, &v)?;
        }
    }
    if let Some(s) = flags.scales {
        cfg.scales = s;
    }
    if cfg.scales != cfg.channels.len() && !channels_given {
        cfg.channels = (0..cfg.scales).map(|s| 8 << s).collect();
    }
    if let Some(r) = flags.ranges {
        cfg.ranges = r;
    }
    if let Some(d) = flags.dbins {
        cfg.d_bins = d;
    }
    if let Some(m) = flags.memory {
        cfg.memory = m;
    }
    if let Some(s) = flags.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

// --- shared helpers -------------------------------------------------------

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DehazeError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DehazeError::Format(format!(
            "no .{ext} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn load_frames(dir: &Path) -> Result<Vec<Frame>, DehazeError> {
    sorted_files(dir, "png")?
        .iter()
        .map(|p| io::read_frame_png(p))
        .collect()
}

fn frames_to_tensors(frames: &[Frame]) -> Vec<Tensor> {
    frames.iter().map(frame_to_tensor).collect()
}

// --- synthesize -----------------------------------------------------------

fn run_synthesize(args: &SynthesizeArgs) -> Result<(), DehazeError> {
    let clear = load_frames(&args.clear)?;
    let depths: Vec<DepthMap> = sorted_files(&args.depth, "pfm")?
        .iter()
        .map(|p| io::read_depth_pfm(p))
        .collect::<Result<_, _>>()?;
    let cfg = SynthesisConfig {
        rng_seed: args.seed,
        ..SynthesisConfig::default()
    };
    let (hazy, trans, params) = synthesize_video(&clear, &depths, &cfg)?;
    for sub in ["hazy", "trans", "gt"] {
        fs::create_dir_all(args.out.join(sub))?;
    }
    for (i, frame) in hazy.iter().enumerate() {
        io::write_frame_png(&args.out.join(format!("hazy/{i:04}.png")), frame)?;
    }
    for (i, t) in trans.iter().enumerate() {
        io::write_transmission_png(&args.out.join(format!("trans/{i:04}.png")), t)?;
    }
    for (i, frame) in clear.iter().enumerate() {
        io::write_frame_png(&args.out.join(format!("gt/{i:04}.png")), frame)?;
    }
    io::write_manifest(
        &args.out.join("manifest.txt"),
        &[
            ("beta", format!("{}", params.beta)),
            ("a", format!("{}", params.a)),
            ("seed", format!("{}", args.seed)),
            ("frames", format!("{}", hazy.len())),
        ],
    )?;
    println!(
        "synthesized {} frames (beta = {}, A = {})",
        hazy.len(),
        params.beta,
        params.a
    );
    Ok(())
}

// --- train ------------------------------------------------------------

fn run_train(args: &TrainArgs) -> Result<(), DehazeError> {
    let ckpt_path = args.out.join("checkpoint.bin");
    let log_path = args.out.join("train_log.csv");
    let (cfg, mut params, mut opt) = if args.resume {
        load_checkpoint(&ckpt_path)?
    } else {
        let cfg = resolve_config(&args.model)?;
        let params = Parameters::init(&cfg)?;
        let opt = AdamW::new(&params);
        (cfg, params, opt)
    };

    let hazy = frames_to_tensors(&load_frames(&args.data.join("hazy"))?);
    let clear = frames_to_tensors(&load_frames(&args.data.join("gt"))?);
    if hazy.len() != clear.len() {
        return Err(DehazeError::Format(format!(
            "{} hazy frames but {} ground-truth frames",
            hazy.len(),
            clear.len()
        )));
    }
    fs::create_dir_all(&args.out)?;

    let mut log = if args.resume && log_path.exists() {
        fs::read_to_string(&log_path)?
    } else {
        "step,lr,out,phy,flow,total\n".to_string()
    };

    for _ in 0..args.steps {
        let (lo, hi) = clip_window(opt.step, hazy.len(), cfg.clip_len);
        let step = opt.step;
        let (report, lr) = train_step(&mut params, &mut opt, &cfg, &hazy[lo..hi], &clear[lo..hi])?;
        log.push_str(&format!(
            "{step},{lr},{},{},{},{}\n",
            report.out, report.phy, report.flow, report.total
        ));
    }
    save_checkpoint(&ckpt_path, &cfg, &params, &opt)?;
    io::write_atomic(&log_path, log.as_bytes())?;
    println!(
        "trained {} steps ({} total), checkpoint at {}",
        args.steps,
        opt.step,
        ckpt_path.display()
    );
    Ok(())
}

// --- eval -------------------------------------------------------------

fn run_eval(args: &EvalArgs) -> Result<(), DehazeError> {
    let hazy = load_frames(&args.hazy)?;
    let gt = load_frames(&args.gt)?;
    let (cfg, params, _) = load_checkpoint(&args.checkpoint)?;
    let outputs = dehaze_core::model::run_video(&params, &cfg, &frames_to_tensors(&hazy))?;
    let pred: Vec<Frame> = outputs
        .iter()
        .map(|o| tensor_to_frame(&o.output))
        .collect::<Result<_, _>>()?;
    let report = evaluate_video(&pred, &gt)?;
    fs::create_dir_all(&args.out)?;
    let mut text = String::from("frame,psnr,ssim\n");
    for i in 0..report.psnr.len() {
        text.push_str(&format!("{i},{},{}\n", report.psnr[i], report.ssim[i]));
    }
    text.push_str(&format!(
        "mean,{},{}\n",
        report.mean_psnr, report.mean_ssim
    ));
    io::write_atomic(&args.out.join("report.txt"), text.as_bytes())?;
    if args.dump {
        fs::create_dir_all(args.out.join("dehazed"))?;
        for (i, frame) in pred.iter().enumerate() {
            io::write_frame_png(&args.out.join(format!("dehazed/{i:04}.png")), frame)?;
        }
    }
    println!(
        "evaluated {} frames: PSNR {:.4} dB, SSIM {:.6}",
        pred.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

// --- inspect ----------------------------------------------------------

fn run_inspect(args: &InspectArgs) -> Result<(), DehazeError> {
    let hazy = frames_to_tensors(&load_frames(&args.hazy)?);
    let (cfg, params, _) = load_checkpoint(&args.checkpoint)?;
    let target = args.frame.unwrap_or(hazy.len() - 1);
    if target >= hazy.len() {
        return Err(DehazeError::param(format!(
            "frame {target} out of range (video has {} frames)",
            hazy.len()
        )));
    }
    let mut state = FrameState::new(&cfg);
    let mut picked = None;
    for frame in &hazy[..=target] {
        picked = Some(decode_step(&params, &cfg, &mut state, frame)?);
    }
    let out = picked.expect("at least one frame decoded");
    fs::create_dir_all(&args.out)?;
    let mut listing: Vec<(String, String)> = vec![("frame".into(), format!("{target}"))];
    let mut dump = |name: String, t: &Tensor| -> Result<(), DehazeError> {
        io::write_dfm(&args.out.join(format!("{name}.dfm")), t.shape(), t.data())?;
        listing.push((name, format!("{:?}", t.shape())));
        Ok(())
    };
    dump("output".into(), &out.output)?;
    for (s, sc) in out.scales.iter().enumerate() {
        dump(format!("s{s}.t_hat"), &sc.t_hat)?;
        dump(format!("s{s}.a_hat"), &sc.a_hat)?;
        dump(format!("s{s}.j_hat"), &sc.j_hat)?;
        dump(format!("s{s}.i_hat"), &sc.i_hat)?;
        if let Some(d) = &sc.dist {
            dump(format!("s{s}.dist"), d)?;
        }
        if let Some(w) = &sc.gmra_weights {
            dump(format!("s{s}.range_weights"), w)?;
        }
        for (r, f) in sc.flows.iter().enumerate() {
            dump(format!("s{s}.flow_r{}", r + 1), f)?;
        }
    }
    let entries: Vec<(&str, String)> = listing
        .iter()
        .map(|(k, v)| (k.as_str(), v.clone()))
        .collect();
    io::write_manifest(&args.out.join("manifest.txt"), &entries)?;
    println!("dumped {} tensors for frame {target}", listing.len() - 1);
    Ok(())
}
