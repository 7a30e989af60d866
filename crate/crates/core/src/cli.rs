//! Command-line entry points. Every command is a library function so it can
//! be driven in-process; `run` parses arguments and dispatches.

use crate::checkpoint;
use crate::config::Config;
use crate::diffusion::{p_sample_loop, DiffusionTrainer, TrainItem};
use crate::error::{Error, Result};
use crate::eval::{attention_op_count, psnr, sci3, ssim, MetricTable};
use crate::gradsuite;
use crate::lpg::{evaluate, train_lpg, Lpg, SyntheticSource, TrainOptions};
use crate::synthdata::{self, read_manifest, read_ppm, write_manifest, write_ppm, ManifestEntry};
use crate::tensor::{ParamStore, Tensor};
use crate::wnenet::WneNet;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "adsm", version, about = "Prompt-conditioned wavelet diffusion for weather-degraded image restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Prompt generator checkpoint for `train`, restorer checkpoint for `restore`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the training step budget.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Trains or restores without the latent prompts.
    #[arg(long, global = true)]
    pub ablate_prompts: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic PPM pairs and a label manifest.
    GenData,
    /// Pretrain the locked encoder and train the prompt generator.
    TrainLpg,
    /// Train the restorer with a frozen prompt generator.
    Train,
    /// Restore held-out pairs (or a directory written by gen-data).
    Restore {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print the self-attention operation counts.
    BenchAttention,
    /// Run the 64-bit gradient checks.
    Gradcheck,
}

pub const LPG_CHECKPOINT: &str = "lpg.bin";
pub const RESTORER_CHECKPOINT: &str = "restorer.bin";
pub const RUN_CONFIG: &str = "config.toml";

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn lpg_seed(cfg: &Config) -> u64 {
    synthdata::derive_seed(cfg.seed, 0x1F6)
}

fn net_seed(cfg: &Config) -> u64 {
    synthdata::derive_seed(cfg.seed, 0x4E7)
}

/// Writes `data.samples` clean/degraded pairs and `manifest.json`.
pub fn cmd_gen_data(cfg: &Config, out: &Path) -> Result<PathBuf> {
    mkdir(out)?;
    let n = cfg.data.samples;
    let samples = synthdata::generate(n, cfg.data.size, cfg.data.size, &cfg.data.kinds, cfg.seed);
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let (clean, degraded) = (format!("{i:05}_clean.ppm"), format!("{i:05}_degraded.ppm"));
        write_ppm(&out.join(&clean), &s.clean)?;
        write_ppm(&out.join(&degraded), &s.degraded)?;
        entries.push(ManifestEntry { index: i, clean, degraded, spec: s.spec, labels: s.labels });
    }
    let path = out.join("manifest.json");
    write_manifest(&path, &entries)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpgSummary {
    pub checkpoint: PathBuf,
    /// Held-out type, property and content accuracy.
    pub accuracy: [f64; 3],
}

pub fn cmd_train_lpg(cfg: &Config, out: &Path, steps: Option<usize>) -> Result<LpgSummary> {
    mkdir(out)?;
    let mut store = ParamStore::<f32>::new();
    let lpg = Lpg::build(&cfg.lpg, &mut store, "lpg", lpg_seed(cfg))?;
    let size = cfg.lpg.image_size;
    let kinds = cfg.data.kinds.clone();
    let clean = SyntheticSource { n: usize::MAX, size, kinds: kinds.clone(), seed: synthdata::derive_seed(cfg.seed, 1), clean: true };
    let pre_loss = lpg.pretrain_locked(&mut store, &clean, synthdata::derive_seed(cfg.seed, 2))?;
    let train = SyntheticSource { n: usize::MAX, size, kinds: kinds.clone(), seed: synthdata::derive_seed(cfg.seed, 3), clean: false };
    let opts = TrainOptions {
        steps: steps.unwrap_or(cfg.lpg.train_steps),
        lr: cfg.lpg.lr,
        min_lr: cfg.lpg.min_lr,
        batch: cfg.lpg.batch,
        seed: synthdata::derive_seed(cfg.seed, 4),
    };
    let report = train_lpg(&lpg, &mut store, &train, &opts)?;
    let held = SyntheticSource { n: cfg.eval.lpg_heldout, size, kinds, seed: cfg.eval.heldout_seed, clean: false };
    let accuracy = evaluate(&lpg, &store, &held)?;
    let ckpt = out.join(LPG_CHECKPOINT);
    checkpoint::save(&store, &ckpt)?;
    write(&out.join("lpg_report.txt"), &report.render())?;
    let mut t = MetricTable::default();
    t.push("pretrain_content_loss", format!("{pre_loss:.6}"));
    t.push("heldout_samples", cfg.eval.lpg_heldout);
    t.push("type_accuracy", format!("{:.4}", accuracy[0]));
    t.push("property_accuracy", format!("{:.4}", accuracy[1]));
    t.push("content_accuracy", format!("{:.4}", accuracy[2]));
    t.write(&out.join("lpg_eval.txt"))?;
    Ok(LpgSummary { checkpoint: ckpt, accuracy })
}

/// Prompt generator and restorer sharing one parameter store.
pub struct Pipeline {
    pub cfg: Config,
    pub store: ParamStore<f32>,
    pub lpg: Lpg,
    pub net: WneNet,
}

impl Pipeline {
    pub fn build(cfg: &Config) -> Result<Self> {
        let mut store = ParamStore::<f32>::new();
        let lpg = Lpg::build(&cfg.lpg, &mut store, "lpg", lpg_seed(cfg))?;
        let net = WneNet::build(&cfg.wnenet, cfg.diffusion.steps_t, &mut store, "net", net_seed(cfg))?;
        Ok(Pipeline { cfg: cfg.clone(), store, lpg, net })
    }

    fn prompted(&self) -> bool {
        !self.cfg.wnenet.ablate_prompts
    }

    pub fn item(&self, sample: &synthdata::DegradationSample) -> Result<TrainItem<f32>> {
        let prompts = if self.prompted() { Some(self.lpg.generate_prompts(&self.store, &sample.degraded)?) } else { None };
        Ok(TrainItem { clean: sample.clean.clone(), degraded: sample.degraded.clone(), prompts })
    }

    pub fn restore(&self, degraded: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        let prompts = if self.prompted() { Some(self.lpg.generate_prompts(&self.store, degraded)?) } else { None };
        let schedule = self.cfg.diffusion.schedule()?;
        p_sample_loop(&self.net, &self.store, degraded, prompts.as_ref(), &schedule, self.cfg.diffusion.sample_options(), seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
}

/// Trains the restorer; the prompt generator is loaded from `lpg_ckpt` and
/// frozen. Writes the combined checkpoint, the effective config and a
/// `(step, loss, lr)` report.
pub fn cmd_train(cfg: &Config, out: &Path, lpg_ckpt: &Path, steps: Option<usize>) -> Result<TrainSummary> {
    mkdir(out)?;
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.diffusion.train_steps = s;
    }
    let mut p = Pipeline::build(&cfg)?;
    checkpoint::load_prefix(&mut p.store, lpg_ckpt, "lpg.")?;
    p.store.set_trainable("lpg.", false);
    let mut trainer = DiffusionTrainer::new(&cfg.diffusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(synthdata::derive_seed(cfg.seed, 5));
    let (batch, size, pairs) = (cfg.diffusion.batch, cfg.data.size, cfg.data.train_pairs);
    let mut report = String::from("step loss lr\n");
    let mut window = 0.0;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.diffusion.train_steps {
        let lr = trainer.current_lr();
        let items = (0..batch)
            .map(|j| {
                let idx = (step * batch + j) % pairs;
                let s = synthdata::plan(idx, &cfg.data.kinds, cfg.data.train_seed).realize(size, size);
                p.item(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TrainItem<f32>> = items.iter().collect();
        let loss = trainer.training_step(&mut p.store, &p.net, &refs, &mut rng)?;
        window += loss;
        let done = step + 1;
        if done % 100 == 0 || done == cfg.diffusion.train_steps {
            let n = if done % 100 == 0 { 100 } else { done % 100 };
            final_loss = window / n as f64;
            let _ = writeln!(report, "{done} {final_loss:.6} {lr:.6e}");
            window = 0.0;
        }
    }
    let ckpt = out.join(RESTORER_CHECKPOINT);
    checkpoint::save(&p.store, &ckpt)?;
    write(&out.join(RUN_CONFIG), &cfg.to_toml())?;
    write(&out.join("train_report.txt"), &report)?;
    Ok(TrainSummary { checkpoint: ckpt, final_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestoreSummary {
    pub pairs: usize,
    pub psnr_degraded: f64,
    pub psnr_restored: f64,
    pub ssim_degraded: f64,
    pub ssim_restored: f64,
}

/// Restores the pairs listed in `input/manifest.json`, or the synthetic
/// held-out set when `input` is `None`, and writes restored PPMs plus a
/// metrics table.
pub fn cmd_restore(cfg: &Config, out: &Path, ckpt: &Path, input: Option<&Path>) -> Result<RestoreSummary> {
    mkdir(out)?;
    let mut p = Pipeline::build(cfg)?;
    checkpoint::load(&mut p.store, ckpt)?;
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = match input {
        Some(dir) => read_manifest(&dir.join("manifest.json"))?
            .iter()
            .map(|e| Ok((read_ppm(&dir.join(&e.clean))?, read_ppm(&dir.join(&e.degraded))?)))
            .collect::<Result<_>>()?,
        None => (0..cfg.eval.heldout)
            .map(|i| {
                let s = synthdata::plan(i, &cfg.data.kinds, cfg.eval.heldout_seed).realize(cfg.data.size, cfg.data.size);
                (s.clean, s.degraded)
            })
            .collect(),
    };
    if pairs.is_empty() {
        return Err(Error::Contract("nothing to restore".into()));
    }
    let mut table = String::from("index psnr_degraded psnr_restored ssim_degraded ssim_restored\n");
    let mut sums = [0.0f64; 4];
    for (i, (clean, degraded)) in pairs.iter().enumerate() {
        let restored = p.restore(degraded, cfg.eval.sample_seed.wrapping_add(i as u64))?;
        write_ppm(&out.join(format!("{i:05}_restored.ppm")), &restored)?;
        let row = [psnr(degraded, clean, 1.0)?, psnr(&restored, clean, 1.0)?, ssim(degraded, clean)?, ssim(&restored, clean)?];
        let _ = writeln!(table, "{i} {:.4} {:.4} {:.4} {:.4}", row[0], row[1], row[2], row[3]);
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = pairs.len() as f64;
    let summary = RestoreSummary {
        pairs: pairs.len(),
        psnr_degraded: sums[0] / n,
        psnr_restored: sums[1] / n,
        ssim_degraded: sums[2] / n,
        ssim_restored: sums[3] / n,
    };
    let _ = writeln!(
        table,
        "mean {:.4} {:.4} {:.4} {:.4}",
        summary.psnr_degraded, summary.psnr_restored, summary.ssim_degraded, summary.ssim_restored
    );
    write(&out.join("metrics.txt"), &table)?;
    Ok(summary)
}

/// Op-count table for the traditional (32×64×64) and wavelet (128×32×32)
/// attention inputs.
pub fn cmd_bench_attention() -> Result<String> {
    let mut s = String::from("attention    input        additions      multiplications\n");
    for (name, wavelet, input) in [("traditional", false, "32x64x64"), ("wavelet", true, "128x32x32")] {
        let c = attention_op_count(32, 64, 64, wavelet)?;
        let _ = writeln!(
            s,
            "{name:<12} {input:<12} {:<14} {} ({})",
            sci3(c.additions),
            sci3(c.multiplications),
            c.multiplications
        );
    }
    Ok(s)
}

pub fn cmd_gradcheck(seed: u64) -> Result<(String, bool)> {
    let cases = gradsuite::run(seed)?;
    let mut s = String::new();
    let mut ok = true;
    for c in &cases {
        ok &= c.passed();
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(s, "{verdict:<4} {:<52} max_rel_err {:.3e} over {} coords (worst: {})", c.name, c.max_rel_err, c.coords, c.worst);
    }
    Ok((s, ok))
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.ablate_prompts {
        cfg.wnenet.ablate_prompts = true;
    }
    Ok(cfg)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| Error::Contract(format!("--checkpoint is required: {what}")))?;
    if !p.exists() {
        return Err(Error::Contract(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

/// Runs one command; returns the process exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            println!("{}", cmd_gen_data(&cfg, out)?.display());
        }
        Command::TrainLpg => {
            let cfg = load_config(cli)?;
            let s = cmd_train_lpg(&cfg, out, cli.steps)?;
            println!(
                "{}: type {:.4} property {:.4} content {:.4}",
                s.checkpoint.display(),
                s.accuracy[0],
                s.accuracy[1],
                s.accuracy[2]
            );
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let ckpt = require(&cli.checkpoint, "the prompt generator checkpoint written by train-lpg")?;
            let s = cmd_train(&cfg, out, ckpt, cli.steps)?;
            println!("{}: final loss {:.6}", s.checkpoint.display(), s.final_loss);
        }
        Command::Restore { input } => {
            let ckpt = require(&cli.checkpoint, "the restorer checkpoint written by train")?;
            let mut cfg = match &cli.config {
                Some(_) => load_config(cli)?,
                None => {
                    let beside = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG);
                    if beside.exists() { Config::load(&beside)? } else { Config::default() }
                }
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.wnenet.ablate_prompts |= cli.ablate_prompts;
            let s = cmd_restore(&cfg, out, ckpt, input.as_deref())?;
            println!(
                "{} pairs: PSNR {:.3} -> {:.3} dB, SSIM {:.4} -> {:.4}",
                s.pairs, s.psnr_degraded, s.psnr_restored, s.ssim_degraded, s.ssim_restored
            );
        }
        Command::BenchAttention => {
            let table = cmd_bench_attention()?;
            print!("{table}");
            mkdir(out)?;
            write(&out.join("attention_ops.txt"), &table)?;
        }
        Command::Gradcheck => {
            let (text, ok) = cmd_gradcheck(cli.seed.unwrap_or(0))?;
            print!("{text}");
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and executes.
pub fn run<I, S>(args: I) -> Result<i32>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(0);
        }
        Err(e) => return Err(Error::Contract(e.to_string())),
    };
    execute(&cli)
}
