//! End-to-end acceptance suite. Runs sequentially in one test so the timed
//! criteria do not compete for cores. Set `ADSM_ACCEPTANCE_DIR` to keep the
//! artifacts and `ADSM_ACCEPTANCE_SKIP=5,6,7` to skip criteria while
//! iterating; a skipped criterion is reported and does not count as passed.

mod common;

use adsm::blocks::{CaptionCrossAttention, PromptBundle};
use adsm::cli::{cmd_bench_attention, cmd_gen_data, cmd_gradcheck, cmd_restore, cmd_train, cmd_train_lpg, RestoreSummary};
use adsm::config::Config;
use adsm::eval::attention_op_count;
use adsm::gradsuite::{self, TOLERANCE};
use adsm::lpg::{Lpg, LpgConfig};
use adsm::tensor::ParamBuilder;
use adsm::wnenet::{WneNet, WnenetConfig};
use adsm::{Graph, ParamStore, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

struct Verdict {
    id: u8,
    name: &'static str,
    passed: Option<bool>,
    detail: String,
    seconds: f64,
}

impl Verdict {
    fn line(&self) -> String {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        format!("[{tag}] {} {:<34} {} ({:.1} s)", self.id, self.name, self.detail, self.seconds)
    }
}

fn within(value: f64, printed: f64, rel: f64) -> bool {
    ((value - printed) / printed).abs() <= rel
}

fn op_counts() -> (bool, String) {
    let trad = attention_op_count(32, 64, 64, false).unwrap();
    let wav = attention_op_count(32, 64, 64, true).unwrap();
    let exact = |n: u64, d: u64| 2 * n * n * d;
    let ok = within(trad.multiplications as f64, 1.07e9, 0.03)
        && within(wav.multiplications as f64, 2.68e8, 0.03)
        && within(wav.additions as f64, 2.69e8, 0.03)
        && trad.multiplications == exact(64 * 64, 32)
        && wav.multiplications == exact(32 * 32, 128);
    let table = cmd_bench_attention().unwrap();
    let ok = ok && table.contains("1.07e9") && table.contains("2.68e8") && table.contains("2.69e8");
    (
        ok,
        format!(
            "mult {} / {}, add(wavelet) {}",
            trad.multiplications, wav.multiplications, wav.additions
        ),
    )
}

fn wavelet() -> (bool, String) {
    let (e32, e64, energy) = common::wavelet_suite(1000, 2024);
    (e32 < 1e-5 && e64 < 1e-10 && energy < 1e-6, format!("round trip {e32:.1e} (f32) {e64:.1e} (f64), energy {energy:.1e}"))
}

fn gradients() -> (bool, String) {
    let cases = gradsuite::run(0).unwrap();
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    (failed.is_empty() && worst < TOLERANCE, format!("{} cases, worst rel. err {worst:.2e} {failed:?}", cases.len()))
}

fn zero_init() -> (bool, String) {
    // (a) prompt generator equals its locked-only path
    let a = {
        let mut store = ParamStore::<f32>::new();
        let lpg = Lpg::build(&LpgConfig::default(), &mut store, "lpg", 1).unwrap();
        let img = Tensor::<f32>::uniform([3, 48, 48], 0.0, 1.0, &mut common::rng(2));
        let mut g = Graph::with_params(&store);
        let x = g.constant(img);
        let (u, v) = (lpg.forward(&mut g, x).unwrap(), lpg.forward_locked_only(&mut g, x).unwrap());
        [(u.p_t, v.p_t), (u.p_p, v.p_p), (u.p_c, v.p_c), (u.type_logits, v.type_logits), (u.prop_logits, v.prop_logits), (u.content_logits, v.content_logits)]
            .iter()
            .all(|&(p, q)| g.value(p) == g.value(q))
    };
    // (b) caption cross-attention returns its input
    let b = {
        let mut store = ParamStore::<f32>::new();
        let ca = CaptionCrossAttention::new(&mut ParamBuilder::new(&mut store, &mut common::rng(3)), "xattn", 32, 64, true);
        let x = Tensor::<f32>::randn([64, 8, 8], &mut common::rng(4));
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let c = g.constant(Tensor::randn([4, 32], &mut common::rng(5)));
        let y = ca.forward(&mut g, xv, c).unwrap();
        g.value(y).data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    // (c) the ablation switch reproduces the unprompted baseline
    let c = {
        let cfg = WnenetConfig::default();
        let (mut s1, mut s2) = (ParamStore::<f32>::new(), ParamStore::<f32>::new());
        let net = WneNet::build(&cfg, 200, &mut s1, "net", 6).unwrap();
        let ablated = WneNet::build(&WnenetConfig { ablate_prompts: true, ..cfg.clone() }, 200, &mut s2, "net", 6).unwrap();
        let mut r = common::rng(7);
        let (xt, xd) = (Tensor::<f32>::randn([3, 32, 32], &mut r), Tensor::<f32>::uniform([3, 32, 32], 0.0, 1.0, &mut r));
        let bundle = PromptBundle { p_t: Tensor::randn([32], &mut r), p_p: Tensor::randn([32], &mut r), p_c: Tensor::randn([4, 32], &mut r) };
        ablated.estimate_noise(&s2, &xt, &xd, 100, Some(&bundle)).unwrap() == net.estimate_noise(&s1, &xt, &xd, 100, None).unwrap()
    };
    (a && b && c, format!("lpg {a}, cross-attention {b}, ablation {c}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Runs `f` into `root/a` and `root/b` and compares every emitted byte.
fn twice(root: &Path, tag: &str, f: impl Fn(&Path)) -> bool {
    let (a, b) = (root.join(format!("{tag}_a")), root.join(format!("{tag}_b")));
    f(&a);
    f(&b);
    let (x, y) = (snapshot(&a), snapshot(&b));
    !x.is_empty() && x == y
}

fn determinism(root: &Path, restorer: Option<&Path>) -> (bool, String) {
    let base = Config::default();
    let mut checks = Vec::new();
    checks.push(("gen-data", twice(root, "gen", |d| {
        cmd_gen_data(&base, d).unwrap();
    })));
    checks.push(("bench-attention", twice(root, "bench", |d| {
        std::fs::create_dir_all(d).unwrap();
        std::fs::write(d.join("attention_ops.txt"), cmd_bench_attention().unwrap()).unwrap();
    })));
    checks.push(("gradcheck", twice(root, "grad", |d| {
        std::fs::create_dir_all(d).unwrap();
        std::fs::write(d.join("gradcheck.txt"), cmd_gradcheck(0).unwrap().0).unwrap();
    })));
    let mut short = base.clone();
    short.lpg.pretrain_steps = 20;
    short.eval.lpg_heldout = 20;
    short.eval.heldout = 2;
    checks.push(("train-lpg", twice(root, "lpg", |d| {
        cmd_train_lpg(&short, d, Some(20)).unwrap();
    })));
    let lpg = root.join("lpg_a").join("lpg.bin");
    checks.push(("train", twice(root, "train", |d| {
        cmd_train(&short, d, &lpg, Some(20)).unwrap();
    })));
    let ckpt = root.join("train_a").join("restorer.bin");
    checks.push(("restore", twice(root, "restore", |d| {
        cmd_restore(&short, d, &ckpt, None).unwrap();
    })));
    if let Some(full) = restorer {
        checks.push(("restore (trained)", twice(root, "restore_full", |d| {
            cmd_restore(&short, d, full, None).unwrap();
        })));
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (failed.is_empty(), format!("{} commands repeated, mismatched: {failed:?}", checks.len()))
}

struct Restoration {
    summary: RestoreSummary,
    checkpoint: PathBuf,
    seconds: f64,
}

fn train_and_restore(cfg: &Config, lpg: &Path, dir: &Path) -> Restoration {
    let t = Instant::now();
    let train = cmd_train(cfg, &dir.join("train"), lpg, None).unwrap();
    let summary = cmd_restore(cfg, &dir.join("restore"), &train.checkpoint, None).unwrap();
    Restoration { summary, checkpoint: train.checkpoint, seconds: t.elapsed().as_secs_f64() }
}

/// Writes straight to the stdout handle, which the test harness does not
/// capture, so verdicts show up as they land.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let skip: Vec<u8> = std::env::var("ADSM_ACCEPTANCE_SKIP")
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let keep = std::env::var_os("ADSM_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();
    let mut verdicts = Vec::new();
    // the harness has already written "test acceptance_criteria ... " without a newline
    report("");
    let mut record = |id: u8, name: &'static str, limit: f64, f: &mut dyn FnMut() -> (bool, String)| {
        if skip.contains(&id) {
            let v = Verdict { id, name, passed: None, detail: "skipped".into(), seconds: 0.0 };
            report(&v.line());
            verdicts.push(v);
            return;
        }
        let t = Instant::now();
        let (ok, detail) = f();
        let seconds = t.elapsed().as_secs_f64();
        let in_time = seconds <= limit;
        let detail = if in_time { detail } else { format!("{detail}; over the {limit:.0} s budget") };
        let v = Verdict { id, name, passed: Some(ok && in_time), detail, seconds };
        report(&v.line());
        verdicts.push(v);
    };

    record(1, "op-count reproduction", 1.0, &mut op_counts);
    record(2, "wavelet correctness", 30.0, &mut wavelet);
    record(3, "gradient suite", 300.0, &mut gradients);
    record(4, "zero-init identities", f64::INFINITY, &mut zero_init);

    let cfg = Config::default();
    let lpg_dir = root.join("lpg");
    let mut lpg_ckpt = None;
    record(5, "prompt generator training", 900.0, &mut || {
        let s = cmd_train_lpg(&cfg, &lpg_dir, None).unwrap();
        lpg_ckpt = Some(s.checkpoint.clone());
        let [t, p, c] = s.accuracy;
        (t >= 0.95 && p >= 0.90, format!("held-out type {:.1}%, property {:.1}%, content {:.1}%", 100.0 * t, 100.0 * p, 100.0 * c))
    });

    let needs_runs = !(skip.contains(&6) && skip.contains(&7));
    let mut prompted = None;
    let mut ablated = None;
    if needs_runs {
        let lpg = lpg_ckpt.clone().unwrap_or_else(|| cmd_train_lpg(&cfg, &lpg_dir, None).unwrap().checkpoint);
        prompted = Some(train_and_restore(&cfg, &lpg, &root.join("prompted")));
        if !skip.contains(&7) {
            let mut off = cfg.clone();
            off.wnenet.ablate_prompts = true;
            ablated = Some(train_and_restore(&off, &lpg, &root.join("ablated")));
        }
    }
    record(6, "end-to-end restoration", 2700.0, &mut || {
        let r = prompted.as_ref().unwrap();
        let s = &r.summary;
        let gain = s.psnr_restored - s.psnr_degraded;
        (
            gain >= 3.0 && s.ssim_restored > s.ssim_degraded && r.seconds <= 2700.0,
            format!(
                "PSNR {:.2} -> {:.2} dB (+{gain:.2}), SSIM {:.3} -> {:.3} over {} pairs, {:.0} s run",
                s.psnr_degraded, s.psnr_restored, s.ssim_degraded, s.ssim_restored, s.pairs, r.seconds
            ),
        )
    });
    record(7, "prompt-ablation direction", f64::INFINITY, &mut || {
        let (p, a) = (&prompted.as_ref().unwrap().summary, &ablated.as_ref().unwrap().summary);
        let gap = p.psnr_restored - a.psnr_restored;
        (gap >= 0.3, format!("prompted {:.2} dB vs ablated {:.2} dB ({gap:+.2})", p.psnr_restored, a.psnr_restored))
    });
    let trained = prompted.as_ref().map(|r| r.checkpoint.clone());
    record(8, "determinism", f64::INFINITY, &mut || determinism(&root.join("repeat"), trained.as_deref()));

    let failed: Vec<_> = verdicts.iter().filter(|v| v.passed == Some(false)).map(|v| v.id).collect();
    let passed = verdicts.iter().filter(|v| v.passed == Some(true)).count();
    report(&format!("acceptance: {passed} passed, {} failed, {} skipped", failed.len(), verdicts.len() - passed - failed.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
