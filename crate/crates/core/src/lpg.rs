//! Latent prompt generators: a frozen ("locked") image encoder, a trainable
//! ("unlocked") copy merged into it through zero-initialised 1×1 convolutions,
//! and three heads producing the type, property and caption prompts.

use crate::blocks::PromptBundle;
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::synthdata::{self, DegradationKind, K_CONTENT, K_PROP, K_TYPE};
use crate::tensor::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Graph, ParamBuilder, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::synthdata::PromptLabels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpgConfig {
    /// Widths of the stride-2 encoder stages.
    pub widths: Vec<usize>,
    pub d_p: usize,
    /// Caption tokens.
    pub m: usize,
    /// Training image side.
    pub image_size: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub train_steps: usize,
    /// Peak learning rate of the prompt-alignment phase, annealed by a
    /// cosine to `min_lr`.
    pub lr: f64,
    pub min_lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Steps between report rows.
    pub report_every: usize,
}

impl Default for LpgConfig {
    fn default() -> Self {
        LpgConfig {
            widths: vec![16, 32, 64, 128],
            d_p: 32,
            m: 4,
            image_size: 48,
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            train_steps: 10_000,
            lr: 2e-3,
            min_lr: 2e-5,
            batch: 20,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            report_every: 100,
        }
    }
}

impl LpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("lpg.widths", "needs at least one positive width"));
        }
        for (k, v) in [("d_p", self.d_p), ("m", self.m), ("batch", self.batch), ("report_every", self.report_every)] {
            if v == 0 {
                return Err(Error::config(format!("lpg.{k}"), "must be positive"));
            }
        }
        if self.image_size == 0 || self.image_size % self.stride() != 0 {
            return Err(Error::config("lpg.image_size", format!("must be a positive multiple of {}", self.stride())));
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::config("lpg.lr", "learning rates must be non-negative and grad_clip positive"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Linear,
    logits: Linear,
}

impl Head {
    fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_p: usize, classes: usize) -> Self {
        let mut s = pb.sub(name);
        Head { hidden: Linear::new(&mut s, "hidden", d_in, d_p), logits: Linear::new(&mut s, "logits", d_p, classes) }
    }

    /// Returns the penultimate feature and the logits.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feat: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, feat)?;
        let h = g.silu(h)?;
        let l = self.logits.forward(g, h)?;
        Ok((h, l))
    }
}

/// Prompts and logits for one image, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LpgOutput {
    pub p_t: Var,
    pub p_p: Var,
    pub p_c: Var,
    pub type_logits: Var,
    pub prop_logits: Var,
    pub content_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Lpg {
    pub config: LpgConfig,
    prefix: String,
    locked: Vec<Conv>,
    unlocked: Vec<Conv>,
    fusion: Vec<Conv>,
    pretrain_head: Linear,
    type_head: Head,
    prop_head: Head,
    caption: Linear,
    content_embed: ParamId,
}

impl Lpg {
    pub fn build<T: Real>(config: &LpgConfig, store: &mut ParamStore<T>, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = ParamBuilder::new(store, &mut rng);
        let mut pb = root.sub(prefix);
        let widths = &config.widths;
        let encoder = |pb: &mut ParamBuilder<'_, T, ChaCha8Rng>, name: &str| {
            let mut s = pb.sub(name);
            let mut c_in = 3;
            widths
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let conv = Conv::he(&mut s, &format!("conv{i}"), c_in, c, 3, 2);
                    c_in = c;
                    conv
                })
                .collect::<Vec<_>>()
        };
        let locked = encoder(&mut pb, "locked");
        let unlocked = encoder(&mut pb, "unlocked");
        let fusion = {
            let mut s = pb.sub("fusion");
            widths.iter().enumerate().map(|(i, &c)| Conv::zeros(&mut s, &format!("zero{i}"), c, c, 1)).collect()
        };
        let feat = *widths.last().expect("validated");
        let (d_p, m) = (config.d_p, config.m);
        let pretrain_head = Linear::new(&mut pb, "pretrain_head", feat, K_CONTENT);
        let type_head = Head::new(&mut pb, "type_head", feat, d_p, K_TYPE);
        let prop_head = Head::new(&mut pb, "prop_head", feat, d_p, K_PROP);
        let caption = Linear::new(&mut pb, "caption_head", feat, m * d_p);
        let content_embed = pb.uniform("content_embed", &[K_CONTENT, d_p], d_p);
        drop(pb);
        let lpg = Lpg {
            config: config.clone(),
            prefix: prefix.to_string(),
            locked,
            unlocked,
            fusion,
            pretrain_head,
            type_head,
            prop_head,
            caption,
            content_embed,
        };
        // the unlocked branch starts as a copy of the locked one
        store.copy_prefix(&lpg.scope("locked."), &lpg.scope("unlocked."))?;
        Ok(lpg)
    }

    fn scope(&self, name: &str) -> String {
        if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) }
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let (c, h, w) = g.value(x).dims3()?;
        let s = self.config.stride();
        if c != 3 || h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!("prompt generator needs 3×H×W with H, W multiples of {s}, got {:?}", g.shape(x))));
        }
        Ok(())
    }

    fn stage<T: Real>(g: &mut Graph<'_, T>, conv: &Conv, x: Var) -> Result<Var> {
        let y = conv.forward(g, x)?;
        g.silu(y)
    }

    /// Pooled locked-encoder features; with `fused` the unlocked features are
    /// added through the zero convolutions after every stage.
    fn features<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, fused: bool) -> Result<Var> {
        self.check_input(g, x)?;
        let mut hl = x;
        let mut hu = x;
        for i in 0..self.locked.len() {
            hl = Self::stage(g, &self.locked[i], hl)?;
            if fused {
                hu = Self::stage(g, &self.unlocked[i], hu)?;
                let delta = self.fusion[i].forward(g, hu)?;
                hl = g.add(hl, delta)?;
            }
        }
        g.mean_inner(hl)
    }

    fn heads<T: Real>(&self, g: &mut Graph<'_, T>, feat: Var) -> Result<LpgOutput> {
        let (p_t, type_logits) = self.type_head.forward(g, feat)?;
        let (p_p, prop_logits) = self.prop_head.forward(g, feat)?;
        let tokens = self.caption.forward(g, feat)?;
        let p_c = g.reshape(tokens, &[self.config.m, self.config.d_p])?;
        let pooled = g.mean_outer(p_c)?;
        let col = g.reshape(pooled, &[self.config.d_p, 1])?;
        let embed = g.param(self.content_embed);
        let scores = g.matmul(embed, col)?;
        let content_logits = g.reshape(scores, &[K_CONTENT])?;
        Ok(LpgOutput { p_t, p_p, p_c, type_logits, prop_logits, content_logits })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<LpgOutput> {
        let feat = self.features(g, x, true)?;
        self.heads(g, feat)
    }

    /// The same heads fed by the locked encoder alone.
    pub fn forward_locked_only<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<LpgOutput> {
        let feat = self.features(g, x, false)?;
        self.heads(g, feat)
    }

    /// Sum of the three head cross-entropies; also returns each term.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, labels: &PromptLabels) -> Result<(Var, [Var; 3], LpgOutput)> {
        let out = self.forward(g, x)?;
        let mut terms = [out.type_logits; 3];
        for (slot, (logits, target)) in terms.iter_mut().zip([
            (out.type_logits, labels.type_id),
            (out.prop_logits, labels.property_id),
            (out.content_logits, labels.content_id),
        ]) {
            let k = g.value(logits).len();
            let row = g.reshape(logits, &[1, k])?;
            *slot = g.cross_entropy(row, &[target])?;
        }
        let s = g.add(terms[0], terms[1])?;
        let total = g.add(s, terms[2])?;
        Ok((total, terms, out))
    }

    /// Prompts and predicted labels for one degraded image in `[0, 1]`.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<(PromptBundle<T>, PromptLabels)> {
        let mut g = Graph::with_params(store);
        let x = g.constant(img.clone());
        let out = self.forward(&mut g, x)?;
        let argmax = |v: Var| {
            let d = g.value(v).data();
            (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
        };
        let labels = PromptLabels {
            type_id: argmax(out.type_logits),
            property_id: argmax(out.prop_logits),
            content_id: argmax(out.content_logits),
        };
        let bundle = PromptBundle { p_t: g.value(out.p_t).clone(), p_p: g.value(out.p_p).clone(), p_c: g.value(out.p_c).clone() };
        Ok((bundle, labels))
    }

    pub fn generate_prompts<T: Real>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<PromptBundle<T>> {
        Ok(self.predict(store, img)?.0)
    }

    /// Pretrains the locked encoder on clean-image content classification,
    /// then freezes it and refreshes the unlocked copy. Returns the final
    /// mean content loss over the last report window.
    pub fn pretrain_locked<T: Real>(&self, store: &mut ParamStore<T>, source: &dyn LabeledSource<T>, seed: u64) -> Result<f64> {
        if source.len() == 0 {
            return Err(Error::Contract("pretraining needs a non-empty dataset".into()));
        }
        let cfg = &self.config;
        let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut window = Vec::new();
        for _ in 0..cfg.pretrain_steps {
            store.zero_grad();
            let mut total = 0.0;
            for _ in 0..cfg.batch {
                let (img, labels) = source.get(rng.random_range(0..source.len()));
                let grads = {
                    let mut g = Graph::with_params(store);
                    let x = g.constant(img);
                    let feat = self.features(&mut g, x, false)?;
                    let logits = self.pretrain_head.forward(&mut g, feat)?;
                    let row = g.reshape(logits, &[1, K_CONTENT])?;
                    let ce = g.cross_entropy(row, &[labels.content_id])?;
                    let loss = g.scale(ce, T::lit(1.0 / cfg.batch as f64))?;
                    total += g.value(loss).data()[0].as_f64();
                    g.backward(loss)?
                };
                store.accumulate(&grads);
            }
            clip_grad_norm(store, cfg.grad_clip);
            opt.step(store, cfg.pretrain_lr);
            window.push(total);
            if window.len() > cfg.report_every {
                window.remove(0);
            }
        }
        store.set_trainable(&self.scope("locked."), false);
        store.set_trainable(&self.scope("pretrain_head."), false);
        store.copy_prefix(&self.scope("locked."), &self.scope("unlocked."))?;
        Ok(window.iter().sum::<f64>() / window.len().max(1) as f64)
    }
}

/// Indexed `(image, labels)` pairs.
pub trait LabeledSource<T> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> (Tensor<T>, PromptLabels);
}

impl<T: Real> LabeledSource<T> for Vec<(Tensor<T>, PromptLabels)> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> (Tensor<T>, PromptLabels) {
        self[index].clone()
    }
}

/// Synthetic samples realised on demand; `clean` yields the undegraded scene.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub n: usize,
    pub size: usize,
    pub kinds: Vec<DegradationKind>,
    pub seed: u64,
    pub clean: bool,
}

impl<T: Real> LabeledSource<T> for SyntheticSource {
    fn len(&self) -> usize {
        self.n
    }

    fn get(&self, index: usize) -> (Tensor<T>, PromptLabels) {
        let s = synthdata::plan(index, &self.kinds, self.seed).realize(self.size, self.size);
        let img = if self.clean { s.clean } else { s.degraded };
        (img.cast(), s.labels)
    }
}

/// One row of the training report: mean losses and batch accuracies over
/// the preceding window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpgReportRow {
    pub step: usize,
    pub loss_type: f64,
    pub loss_prop: f64,
    pub loss_content: f64,
    pub acc_type: f64,
    pub acc_prop: f64,
    pub acc_content: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LpgReport {
    pub rows: Vec<LpgReportRow>,
    /// Total loss of every step.
    pub losses: Vec<f64>,
}

impl LpgReport {
    pub fn render(&self) -> String {
        let mut s = String::from("step loss_type loss_prop loss_content acc_type acc_prop acc_content\n");
        for r in &self.rows {
            s += &format!(
                "{} {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}\n",
                r.step, r.loss_type, r.loss_prop, r.loss_content, r.acc_type, r.acc_prop, r.acc_content
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    /// Peak learning rate, annealed by a cosine to `min_lr`.
    pub lr: f64,
    pub min_lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Minimises the three head cross-entropies with the locked encoder frozen.
pub fn train_lpg<T: Real>(
    lpg: &Lpg,
    store: &mut ParamStore<T>,
    source: &dyn LabeledSource<T>,
    opts: &TrainOptions,
) -> Result<LpgReport> {
    if source.len() == 0 {
        return Err(Error::Contract("prompt generator training needs a non-empty dataset".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Contract("batch must be positive".into()));
    }
    store.set_trainable(&lpg.scope("locked."), false);
    store.set_trainable(&lpg.scope("pretrain_head."), false);
    let cfg = &lpg.config;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = LpgReport::default();
    let mut acc = [0.0f64; 6];
    let mut seen = 0usize;
    let every = cfg.report_every;
    let lr_schedule = CosineSchedule { base: opts.lr, min: opts.min_lr, total: opts.steps };
    for step in 0..opts.steps {
        store.zero_grad();
        let mut total = 0.0;
        for _ in 0..opts.batch {
            let (img, labels) = source.get(rng.random_range(0..source.len()));
            let grads = {
                let mut g = Graph::with_params(store);
                let x = g.constant(img);
                let (loss, terms, out) = lpg.loss(&mut g, x, &labels)?;
                let loss = g.scale(loss, T::lit(1.0 / opts.batch as f64))?;
                total += g.value(loss).data()[0].as_f64();
                for (i, t) in terms.iter().enumerate() {
                    acc[i] += g.value(*t).data()[0].as_f64();
                }
                for (i, (logits, target)) in
                    [(out.type_logits, labels.type_id), (out.prop_logits, labels.property_id), (out.content_logits, labels.content_id)]
                        .into_iter()
                        .enumerate()
                {
                    let d = g.value(logits).data();
                    let best = (0..d.len()).fold(0, |b, j| if d[j] > d[b] { j } else { b });
                    acc[3 + i] += (best == target) as u8 as f64;
                }
                g.backward(loss)?
            };
            store.accumulate(&grads);
            seen += 1;
        }
        clip_grad_norm(store, cfg.grad_clip);
        opt.step(store, lr_schedule.lr(step));
        report.losses.push(total);
        if (step + 1) % every == 0 || step + 1 == opts.steps {
            let n = seen as f64;
            report.rows.push(LpgReportRow {
                step: step + 1,
                loss_type: acc[0] / n,
                loss_prop: acc[1] / n,
                loss_content: acc[2] / n,
                acc_type: acc[3] / n,
                acc_prop: acc[4] / n,
                acc_content: acc[5] / n,
            });
            acc = [0.0; 6];
            seen = 0;
        }
    }
    Ok(report)
}

/// Held-out accuracies of the type, property and content heads.
pub fn evaluate<T: Real>(lpg: &Lpg, store: &ParamStore<T>, source: &dyn LabeledSource<T>) -> Result<[f64; 3]> {
    let mut hits = [0usize; 3];
    for i in 0..source.len() {
        let (img, labels) = source.get(i);
        let (_, pred) = lpg.predict(store, &img)?;
        hits[0] += (pred.type_id == labels.type_id) as usize;
        hits[1] += (pred.property_id == labels.property_id) as usize;
        hits[2] += (pred.content_id == labels.content_id) as usize;
    }
    let n = source.len().max(1) as f64;
    Ok(hits.map(|h| h as f64 / n))
}
