//! The `ddn` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ddn_core::eval::{
    blob_phantom, difference_image, gaussian_deformation, global_ncc, mutual_information, overlay_rg,
    validation_run, DeformParams, DEFAULT_MI_BINS,
};
use ddn_core::field::{load_field, save_field, DDNF_MAGIC};
use ddn_core::gradcheck::run_suite;
use ddn_core::infer::{register_volume, tile_volume};
use ddn_core::loss::LossConfig;
use ddn_core::model::{build_ddn, DdnConfig};
use ddn_core::patches::{
    read_patch_dataset, sample_patch_pairs, write_patch_dataset, EdgeParams, DDNP_MAGIC, DEFAULT_PATCH_SIZE,
};
use ddn_core::train::{load_checkpoint, load_checkpoint_for, save_checkpoint, train_from, AdamState, TrainConfig, DDNC_MAGIC};
use ddn_core::volume::{load_volume, save_volume, Axis, Volume3, DDNV_MAGIC};
use ddn_core::warp::warp_volume;
use ddn_core::{DdnError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ddn", version, about = "Dense deformable registration of 3D volumes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DDN_THREADS")]
    threads: Option<usize>,
    /// Request ordered reductions. Every reduction in this build is already
    /// ordered, so outputs are reproducible with or without the flag.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample informative patch pairs from two volumes into a DDNP dataset.
    Extract(ExtractArgs),
    /// Train a network on a patch dataset and write a DDNC checkpoint.
    Train(TrainArgs),
    /// Register a source volume onto a target with a trained network.
    Register(RegisterArgs),
    /// Print global correlation and mutual information of two volumes.
    Eval(EvalArgs),
    /// Apply a random smooth deformation to a volume or a generated phantom.
    Synth(SynthArgs),
    /// Deform a volume, register it back and report the scores.
    Validate(ValidateArgs),
    /// Render target (red) and registered (green) slices as a PPM image.
    Overlay(SliceArgs),
    /// Render the absolute difference of two slices as a PGM image.
    Diff(SliceArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Describe a DDNV, DDNF, DDNP or DDNC file.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    /// Minimum edge density required of both patches.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 0.02)]
    t_low: f64,
    #[arg(long, default_value_t = 0.5)]
    t_high: f64,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    units: usize,
    #[arg(long, default_value_t = 8)]
    growth: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 0.2)]
    leaky_slope: f64,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Weight of the smoothness term.
    #[arg(long = "lambda", default_value_t = 1.0)]
    lambda_smooth: f64,
    #[arg(long, default_value_t = 9)]
    cc_window: usize,
    /// Correlate whole patches instead of local windows.
    #[arg(long)]
    global_cc: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint that holds optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total number of updates, including any already in the resumed checkpoint.
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    /// Write `step_NNNNNN.ddnc` into --checkpoint-dir every this many updates.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Training log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MI_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct DeformArgs {
    #[arg(long, default_value_t = 16)]
    grid_spacing: usize,
    /// Control-node displacement standard deviation in voxels.
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Volume to deform.
    #[arg(long, conflicts_with = "phantom", required_unless_present = "phantom")]
    vol: Option<PathBuf>,
    /// Generate a blob phantom of these dims (e.g. 96,96,96) instead of reading --vol.
    #[arg(long, value_delimiter = ',')]
    phantom: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    blobs: usize,
    /// Range of blob widths in voxels.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0])]
    blob_sigma: Vec<f64>,
    /// Where to write the generated phantom.
    #[arg(long)]
    out_source: Option<PathBuf>,
    #[arg(long)]
    out_volume: PathBuf,
    #[arg(long)]
    out_field: Option<PathBuf>,
    #[command(flatten)]
    deform: DeformArgs,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vol: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = DEFAULT_MI_BINS)]
    bins: usize,
    /// Report as CSV (also printed).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out_field: Option<PathBuf>,
    #[arg(long)]
    out_warped: Option<PathBuf>,
    #[command(flatten)]
    deform: DeformArgs,
}

#[derive(Args, Debug)]
struct SliceArgs {
    /// Target (overlay) or first (diff) volume.
    #[arg(long, alias = "tgt")]
    a: PathBuf,
    /// Registered (overlay) or second (diff) volume.
    #[arg(long, alias = "reg")]
    b: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Slice index; defaults to the middle slice.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Spatial extent of the single-operation checks (even).
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

#[derive(Args, Debug)]
struct InfoArgs {
    file: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(e: &DdnError) -> i32 {
    match e {
        DdnError::Config(_) => EXIT_USAGE,
        DdnError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Extract(a) => extract(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli),
        Command::Register(a) => register(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a, cli.seed),
        Command::Validate(a) => validate(a, cli.seed),
        Command::Overlay(a) => slices(a, true),
        Command::Diff(a) => slices(a, false),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
        Command::Info(a) => info(&a.file),
    }
}

fn extract(a: &ExtractArgs, seed: u64) -> Result<i32> {
    let src = load_volume(&a.src)?;
    let tgt = load_volume(&a.tgt)?;
    let params = EdgeParams::new(a.t_low, a.t_high)?;
    let s = sample_patch_pairs(&src, &tgt, &params, a.count, a.patch_size, a.threshold, seed)?;
    write_patch_dataset(&s.set, &a.out)?;
    println!(
        "pairs={} candidates={} budget_exhausted={}",
        s.set.len(),
        s.candidates,
        s.budget_exhausted
    );
    Ok(EXIT_OK)
}

fn train_cmd(a: &TrainArgs, cli: &Cli) -> Result<i32> {
    let data = read_patch_dataset(&a.data)?;
    let config = DdnConfig {
        patch_size: data.patch_size(),
        units_per_block: a.model.units,
        growth: a.model.growth,
        kernel: a.model.kernel,
        leaky_slope: a.model.leaky_slope,
        base_channels: a.model.base_channels,
        ..Default::default()
    };
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        steps: a.steps,
        learning_rate: a.learning_rate,
        beta1: a.beta1,
        beta2: a.beta2,
        adam_eps: a.adam_eps,
        seed: cli.seed,
        loss: LossConfig {
            lambda_smooth: a.loss.lambda_smooth,
            cc_window: a.loss.cc_window,
            global_cc: a.loss.global_cc,
            ..Default::default()
        },
        checkpoint_every: a.checkpoint_every,
        deterministic: cli.deterministic,
    };
    cfg.validate()?;
    if a.checkpoint_every > 0 && a.checkpoint_dir.is_none() {
        return Err(DdnError::Config("--checkpoint-every needs --checkpoint-dir".into()));
    }
    let (model, opt) = match &a.resume {
        Some(path) => {
            let (m, o) = load_checkpoint_for(path, &config)?;
            let o = o.ok_or_else(|| DdnError::Config(format!("{} holds no optimizer state", path.display())))?;
            (m, o)
        }
        None => {
            let m = build_ddn(&config, cli.seed)?;
            let o = AdamState::for_model(&m);
            (m, o)
        }
    };
    log::info!(
        "training {} parameters on {} pairs from step {} to {}",
        model.count_params(),
        data.len(),
        opt.step,
        cfg.steps
    );
    let dir = a.checkpoint_dir.clone();
    let mut on_checkpoint = |m: &_, o: &AdamState| -> Result<()> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
            save_checkpoint(m, Some(o), &d.join(format!("step_{:06}.ddnc", o.step)))?;
        }
        Ok(())
    };
    let out = train_from(model, opt, &data, &cfg, &mut on_checkpoint)?;
    save_checkpoint(&out.model, Some(&out.optimizer), &a.out)?;
    if let Some(p) = &a.log {
        std::fs::write(p, out.log.to_csv())?;
    }
    if let Some(last) = out.log.records.last() {
        println!(
            "steps={} sim={} smooth={} total={}",
            out.optimizer.step, last.sim, last.smooth, last.total
        );
    } else {
        println!("steps={}", out.optimizer.step);
    }
    Ok(EXIT_OK)
}

fn register(a: &RegisterArgs) -> Result<i32> {
    let (model, _) = load_checkpoint(&a.model)?;
    let src = load_volume(&a.src)?;
    let tgt = load_volume(&a.tgt)?;
    let plan = tile_volume(src.dims(), model.config().patch_size, a.overlap)?;
    let started = Instant::now();
    let (field, warped) = register_volume(&model, &src, &tgt, a.overlap)?;
    let secs = started.elapsed().as_secs_f64();
    save_field(&field, &a.out_field)?;
    save_volume(&warped, &a.out_warped)?;
    println!("tiles={} seconds={secs:.3} max_displacement={}", plan.origins.len(), field.max_abs());
    Ok(EXIT_OK)
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let va = load_volume(&a.a)?;
    let vb = load_volume(&a.b)?;
    let cc = global_ncc(&va, &vb)?;
    let mi = mutual_information(&va, &vb, a.bins)?;
    println!("cc={cc} mi={mi}");
    Ok(EXIT_OK)
}

fn deform_params(d: &DeformArgs) -> DeformParams {
    DeformParams {
        grid_spacing: d.grid_spacing,
        sigma: d.sigma,
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<i32> {
    let vol = match (&a.vol, &a.phantom) {
        (Some(p), _) => load_volume(p)?,
        (None, Some(dims)) => {
            let [x, y, z] = dims[..] else {
                return Err(DdnError::Config(format!("--phantom needs three extents, got {dims:?}")));
            };
            let dims = [x, y, z];
            if a.blob_sigma.len() != 2 {
                return Err(DdnError::Config("--blob-sigma needs two values".into()));
            }
            let v = blob_phantom(dims, a.blobs, (a.blob_sigma[0], a.blob_sigma[1]), seed)?;
            if let Some(p) = &a.out_source {
                save_volume(&v, p)?;
            }
            v
        }
        (None, None) => return Err(DdnError::Config("either --vol or --phantom is required".into())),
    };
    let field = gaussian_deformation(vol.dims(), &deform_params(&a.deform), seed)?;
    let deformed = warp_volume(&vol, &field)?;
    save_volume(&deformed, &a.out_volume)?;
    if let Some(p) = &a.out_field {
        save_field(&field, p)?;
    }
    println!("dims={:?} max_displacement={}", vol.dims(), field.max_abs());
    Ok(EXIT_OK)
}

fn validate(a: &ValidateArgs, seed: u64) -> Result<i32> {
    let (model, _) = load_checkpoint(&a.model)?;
    let vol = load_volume(&a.vol)?;
    let v = validation_run(&model, &vol, &deform_params(&a.deform), seed, a.overlap, a.bins)?;
    let csv = v.report.to_csv();
    print!("{csv}");
    if let Some(p) = &a.report {
        std::fs::write(p, &csv)?;
    }
    if let Some(p) = &a.out_field {
        save_field(&v.recovered, p)?;
    }
    if let Some(p) = &a.out_warped {
        save_volume(&v.warped, p)?;
    }
    Ok(EXIT_OK)
}

fn slices(a: &SliceArgs, overlay: bool) -> Result<i32> {
    let va = load_volume(&a.a)?;
    let vb = load_volume(&a.b)?;
    if va.dims() != vb.dims() {
        return Err(DdnError::Shape(format!("dims {:?} and {:?} differ", va.dims(), vb.dims())));
    }
    let index = a.index.unwrap_or(va.dims()[a.axis.index()] / 2);
    let sa = va.slice(a.axis, index)?;
    let sb = vb.slice(a.axis, index)?;
    if overlay {
        overlay_rg(&sa, &sb)?.write_ppm(&a.out)?;
    } else {
        difference_image(&sa, &sb)?.write_pgm(&a.out)?;
    }
    println!("axis={} index={index} size={}x{}", a.axis, sa.width, sa.height);
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<i32> {
    let results = run_suite(a.size, a.eps, seed)?;
    let mut all = true;
    let mut worst: f64 = 0.0;
    for r in &results {
        let pass = r.passed();
        all &= pass;
        worst = worst.max(r.max_rel_error);
        println!(
            "{:<14} shape={:?} coords={} eps={:e} max_rel_error={:.3e} tol={:e} {}",
            r.name,
            r.shape,
            r.coordinates,
            r.eps,
            r.max_rel_error,
            r.tolerance,
            if pass { "pass" } else { "FAIL" }
        );
    }
    println!("max_rel_error={worst:e}");
    Ok(if all { EXIT_OK } else { EXIT_NUMERIC })
}

fn info(path: &Path) -> Result<i32> {
    let head = {
        use std::io::Read;
        let mut buf = [0u8; 4];
        let mut f = std::fs::File::open(path)?;
        f.read_exact(&mut buf)
            .map_err(|_| DdnError::Format { offset: 0, message: "file shorter than a magic tag".into() })?;
        buf
    };
    match &head {
        m if m == DDNV_MAGIC => {
            let v: Volume3 = load_volume(path)?;
            let (lo, hi) = v.min_max();
            println!("DDNV dims={:?} spacing={:?} min={lo} max={hi}", v.dims(), v.spacing());
        }
        m if m == DDNF_MAGIC => {
            let f = load_field(path)?;
            println!("DDNF dims={:?} max_displacement={}", f.dims(), f.max_abs());
        }
        m if m == DDNP_MAGIC => {
            let s = read_patch_dataset(path)?;
            println!("DDNP patch_size={} pairs={}", s.patch_size(), s.len());
        }
        m if m == DDNC_MAGIC => {
            let (model, opt) = load_checkpoint(path)?;
            let config = serde_json::to_string(model.config()).expect("config serializes");
            match opt {
                Some(o) => println!("DDNC params={} step={} config={config}", model.count_params(), o.step),
                None => println!("DDNC params={} config={config}", model.count_params()),
            }
        }
        _ => {
            return Err(DdnError::Format {
                offset: 0,
                message: format!("unknown magic {:?}", String::from_utf8_lossy(&head)),
            })
        }
    }
    Ok(EXIT_OK)
}
