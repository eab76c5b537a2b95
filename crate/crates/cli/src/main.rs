//! `tml`: train, run and verify the low-light enhancement pipeline.
//!
//! Exit status is 0 on success, 1 when a verification fails and 2 on a usage,
//! configuration or input error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tml_core::bench::{scaling_bench, Block};
use tml_core::checkpoint;
use tml_core::config::{EmChoice, RunConfig, Slot};
use tml_core::data::{self, AccessLog, DatasetSpec};
use tml_core::gdc::equivalence_error;
use tml_core::gradcheck::gradient_suite;
use tml_core::metrics::{psnr, ssim};
use tml_core::pipeline::{enhance, train_pm_em, train_tm, EpochLog};
use tml_core::{Error, ImageBuffer, Model32, Rng, Role};

const TM_FILE: &str = "tm.ckpt";
const PM_FILE: &str = "pm.ckpt";
const EM_FILE: &str = "em.ckpt";

#[derive(Parser)]
#[command(name = "tml", version, about = "Troublemaker-learning low-light enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired corpus (normal/, low/, manifest.csv).
    Synth(SynthArgs),
    /// Step 1: train the troublemaker on pairs.
    TrainTm(TrainArgs),
    /// Step 2: train predictor and enhancer from normal-light images only.
    Train(TrainArgs),
    /// Enhance low-light images with a trained run.
    Enhance(EnhanceArgs),
    /// PSNR and SSIM of predictions against references.
    Metrics(MetricsArgs),
    /// Finite-difference check of every differentiable operation.
    CheckGrad(CheckGradArgs),
    /// Attention map through dynamic convolution vs. Q K^T.
    CheckEquiv(CheckEquivArgs),
    /// Runtime scaling of GDC and self-attention, as CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_em)]
    em_mode: Option<EmChoice>,
    /// GDC in every model; the per-model flags below take precedence.
    #[arg(long, value_enum)]
    gdc: Option<Toggle>,
    #[arg(long, value_enum)]
    tm_gdc: Option<Toggle>,
    #[arg(long, value_enum)]
    pm_gdc: Option<Toggle>,
    #[arg(long, value_enum)]
    em_gdc: Option<Toggle>,
    #[arg(long)]
    epochs_tm: Option<usize>,
    #[arg(long)]
    epochs_pm: Option<usize>,
    #[arg(long)]
    epochs_em: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_em(s: &str) -> Result<EmChoice, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Troublemaker checkpoint (train only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training data directory: `normal/` + `low/` for train-tm, `normal/` for train.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out pairs (`normal/` + `low/`) to evaluate after training.
    #[arg(long)]
    test_data: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Output directory of a `train` run (holds pm.ckpt and, if trained, em.ckpt).
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PPM file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<name>.residual.ppm`.
    #[arg(long)]
    residual: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Prediction file or directory.
    #[arg(long)]
    pred: PathBuf,
    /// Reference file or directory.
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct CheckEquivArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchBlock {
    Gdc,
    SelfAttention,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "gdc")]
    block: BenchBlock,
    /// Comma-separated pixel (token) counts, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    /// A check ran and did not pass.
    Verification(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("io error: {e}"))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainTm(a) => train_tm_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::CheckEquiv(a) => check_equiv(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("tml: verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("tml: {msg}");
            ExitCode::from(2)
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.size == 0 || a.count == 0 {
        return Err(Failure::Usage("synth needs a positive --count and --size".into()));
    }
    data::write_synthetic(&a.out, a.count, a.size, a.size, a.seed)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(m) = run.em_mode {
        cfg.em_mode = m;
    }
    if let Some(g) = run.gdc {
        cfg.tm_gdc = g.on();
        cfg.pm_gdc = g.on();
        cfg.em_gdc = g.on();
    }
    for (flag, slot) in [(run.tm_gdc, &mut cfg.tm_gdc), (run.pm_gdc, &mut cfg.pm_gdc), (run.em_gdc, &mut cfg.em_gdc)] {
        if let Some(g) = flag {
            *slot = g.on();
        }
    }
    if let Some(e) = run.epochs_tm {
        cfg.epochs_tm = e;
    }
    if let Some(e) = run.epochs_pm {
        cfg.epochs_pm = e;
    }
    if let Some(e) = run.epochs_em {
        cfg.epochs_em = e;
    }
    if let Some(lr) = run.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_size(img: &ImageBuffer, cfg: &RunConfig, what: &str) -> CmdResult {
    if img.width() != cfg.image_size || img.height() != cfg.image_size {
        return Err(Failure::Usage(format!(
            "{what} is {}x{}, config image_size is {}",
            img.width(),
            img.height(),
            cfg.image_size
        )));
    }
    Ok(())
}

/// Appends each epoch line to the log file and echoes it on stdout.
fn epoch_logger(path: &Path) -> Result<impl FnMut(&EpochLog), Failure> {
    let mut file = fs::File::create(path)?;
    Ok(move |l: &EpochLog| {
        let _ = writeln!(file, "{l}");
        println!("{l}");
    })
}

fn train_tm_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = resolve(&a.run)?;
    if let Some(dir) = &a.data {
        cfg.tm_data = DatasetSpec::PairedDir { normal: dir.join("normal"), low: dir.join("low") };
    }
    cfg.write_resolved(&a.out)?;
    let pairs = data::load_pairs(&cfg.tm_data, &AccessLog::new())?;
    let pairs: Vec<_> = pairs.into_iter().map(|p| (p.normal, p.low)).collect();
    for (n, _) in &pairs {
        check_size(n, &cfg, "training image")?;
    }
    let mut log = epoch_logger(&a.out.join("train_tm.log"))?;
    let trained = train_tm::<f32>(&pairs, &cfg.model_config(Slot::Tm), &cfg.train_config(), &mut log)?;
    checkpoint::save(&a.out.join(TM_FILE), &trained.model, Some(&trained.optimizer))?;
    println!("wrote {}", a.out.join(TM_FILE).display());
    Ok(())
}

fn tm_checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(TM_FILE)
    } else {
        p.to_path_buf()
    }
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = resolve(&a.run)?;
    let tm_path = match &a.checkpoint {
        Some(p) if tm_checkpoint_path(p).is_file() => tm_checkpoint_path(p),
        Some(p) => return Err(Failure::Usage(format!("missing troublemaker checkpoint: {} not found", p.display()))),
        None => return Err(Failure::Usage("missing troublemaker checkpoint (pass --checkpoint)".into())),
    };
    if let Some(dir) = &a.data {
        cfg.normal_data = DatasetSpec::NormalDir { normal: dir.join("normal") };
    }
    if let Some(dir) = &a.test_data {
        cfg.test_data = DatasetSpec::PairedDir { normal: dir.join("normal"), low: dir.join("low") };
    }
    cfg.write_resolved(&a.out)?;

    let mut tm: Model32 = checkpoint::load_as(&tm_path, Role::Troublemaker, &cfg.model_config(Slot::Tm))?.model;
    tm.freeze();
    let tm_bytes = tm.param_bytes();

    let access = AccessLog::new();
    let normals = data::load_normals(&cfg.normal_data, &access);
    let listing: String = access.paths().iter().map(|p| format!("{}\n", p.display())).collect();
    fs::write(a.out.join("access.log"), listing)?;
    let normals: Vec<ImageBuffer> = normals?.into_iter().map(|(_, img)| img).collect();
    for img in &normals {
        check_size(img, &cfg, "training image")?;
    }

    let em_cfg = cfg.model_config(Slot::Em);
    let em = cfg.em_mode.role().map(|role| (role, &em_cfg));
    let mut log = epoch_logger(&a.out.join("train.log"))?;
    let step2 = train_pm_em(&tm, &normals, &cfg.model_config(Slot::Pm), em, &cfg.train_config(), &mut log)?;
    if tm.param_bytes() != tm_bytes {
        return Err(Failure::Verification("troublemaker parameters changed during step 2".into()));
    }
    checkpoint::save(&a.out.join(PM_FILE), &step2.pm.model, Some(&step2.pm.optimizer))?;
    if let Some(em) = &step2.em {
        checkpoint::save(&a.out.join(EM_FILE), &em.model, Some(&em.optimizer))?;
    }

    let pairs = data::load_pairs(&cfg.test_data, &AccessLog::new())?;
    let mut report = String::from("name,psnr_low,ssim_low,psnr,ssim\n");
    let (mut sum_low, mut sum_out, mut sum_ssim) = (0.0, 0.0, 0.0);
    for p in &pairs {
        let out = enhance(&step2.pm.model, step2.em.as_ref().map(|e| &e.model), &p.low, false)?.image;
        let (pl, sl) = (psnr(&p.low, &p.normal, 1.0)?, ssim(&p.low, &p.normal)?);
        let (po, so) = (psnr(&out, &p.normal, 1.0)?, ssim(&out, &p.normal)?);
        report.push_str(&format!("{},{pl:.4},{sl:.4},{po:.4},{so:.4}\n", p.name));
        sum_low += pl;
        sum_out += po;
        sum_ssim += so;
    }
    fs::write(a.out.join("metrics.csv"), report)?;
    let n = pairs.len().max(1) as f64;
    println!(
        "held-out {} pairs: psnr(low) {:.4} dB, psnr(enhanced) {:.4} dB, ssim(enhanced) {:.4}",
        pairs.len(),
        sum_low / n,
        sum_out / n,
        sum_ssim / n
    );
    Ok(())
}

/// `(name, path)` for a file or every `.ppm` in a directory.
fn image_paths(p: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if p.is_dir() {
        Ok(data::list_images(p)?.into_iter().map(|n| (n.clone(), p.join(n))).collect())
    } else if p.is_file() {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(vec![(name, p.to_path_buf())])
    } else {
        Err(Failure::Usage(format!("{} does not exist", p.display())))
    }
}

fn enhance_cmd(a: EnhanceArgs) -> CmdResult {
    let pm_path = a.checkpoint.join(PM_FILE);
    if !pm_path.is_file() {
        return Err(Failure::Usage(format!("missing predictor checkpoint {}", pm_path.display())));
    }
    let pm = checkpoint::load::<f32>(&pm_path)?.model;
    let em_path = a.checkpoint.join(EM_FILE);
    let em = if em_path.is_file() { Some(checkpoint::load::<f32>(&em_path)?.model) } else { None };
    fs::create_dir_all(&a.out)?;
    for (name, path) in image_paths(&a.input)? {
        let low = ImageBuffer::read_ppm(&path)?;
        let out = enhance(&pm, em.as_ref(), &low, a.residual)?;
        out.image.write_ppm(&a.out.join(&name))?;
        if let Some(r) = out.residual {
            let stem = name.strip_suffix(".ppm").unwrap_or(&name);
            r.write_ppm(&a.out.join(format!("{stem}.residual.ppm")))?;
        }
        println!("{name}");
    }
    Ok(())
}

fn metrics_cmd(a: MetricsArgs) -> CmdResult {
    let preds = image_paths(&a.pred)?;
    let refs = image_paths(&a.reference)?;
    let pairs: Vec<_> = if preds.len() == 1 && refs.len() == 1 {
        vec![(preds[0].0.clone(), preds[0].1.clone(), refs[0].1.clone())]
    } else {
        preds
            .iter()
            .map(|(name, p)| {
                let r = refs.iter().find(|(n, _)| n == name).ok_or_else(|| Failure::Usage(format!("no reference for {name}")))?;
                Ok((name.clone(), p.clone(), r.1.clone()))
            })
            .collect::<Result<_, Failure>>()?
    };
    if pairs.is_empty() {
        return Err(Failure::Usage("no images to compare".into()));
    }
    println!("name,psnr,ssim");
    let (mut sp, mut ss) = (0.0, 0.0);
    for (name, p, r) in &pairs {
        let (p, r) = (ImageBuffer::read_ppm(p)?, ImageBuffer::read_ppm(r)?);
        let (v, s) = (psnr(&p, &r, 1.0)?, ssim(&p, &r)?);
        println!("{name},{v:.4},{s:.6}");
        sp += v;
        ss += s;
    }
    let n = pairs.len() as f64;
    println!("mean,{:.4},{:.6}", sp / n, ss / n);
    Ok(())
}

fn check_grad(a: CheckGradArgs) -> CmdResult {
    let reports = gradient_suite::<f32>(a.seed, a.probes)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(a.tol) && r.probes >= a.probes;
        println!("{} {:<28} probes {:>4}  max rel err {:.3e}", if ok { "ok  " } else { "FAIL" }, r.name, r.probes, r.max_rel_error);
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn check_equiv(a: CheckEquivArgs) -> CmdResult {
    let mut rng = Rng::new(a.seed);
    let mut worst: f64 = 0.0;
    for tokens in [4, 16, 64] {
        for embed in [8, 32] {
            let mut case = 0.0f64;
            for _ in 0..a.trials {
                case = case.max(equivalence_error(tokens, embed, &mut rng)?);
            }
            println!("S={tokens:<3} E={embed:<3} max|A'-QK^T| = {case:.3e}");
            worst = worst.max(case);
        }
    }
    println!("max|A'-QK^T| = {worst:.3e}");
    if worst <= a.tol {
        Ok(())
    } else {
        Err(Failure::Verification(format!("max|A'-QK^T| = {worst:.3e} exceeds {:.1e}", a.tol)))
    }
}

fn bench(a: BenchArgs) -> CmdResult {
    let block = match a.block {
        BenchBlock::Gdc => Block::Gdc,
        BenchBlock::SelfAttention => Block::SelfAttention,
    };
    let report = scaling_bench(block, &a.sizes, a.repeats, a.seed)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = &a.out {
        fs::write(path, &csv)?;
    }
    if let Some(slope) = report.slope {
        eprintln!("{} log-log slope {slope:.3}", block.tag());
    }
    Ok(())
}
