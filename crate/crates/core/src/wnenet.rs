//! U-shaped wavelet-oriented noise estimating network.

use crate::blocks::{CaptionCrossAttention, CaptionRefiner, PromptBundle, PromptFusion, TimeEmbedder, Wfdb, Wfub, Wsrb};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::tensor::{Graph, ParamBuilder, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Position of a stage in the U: `enc{i}`, `middle`, or `dec{i}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageId {
    Encoder(usize),
    Middle,
    Decoder(usize),
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::Encoder(i) => write!(f, "enc{i}"),
            StageId::Middle => write!(f, "middle"),
            StageId::Decoder(i) => write!(f, "dec{i}"),
        }
    }
}

impl std::str::FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("wnenet.cross_attn_stages", format!("unknown stage `{s}`"));
        if s == "middle" {
            return Ok(StageId::Middle);
        }
        let (kind, idx) = s.split_at(s.len().min(3));
        let i: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "enc" => Ok(StageId::Encoder(i)),
            "dec" => Ok(StageId::Decoder(i)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WnenetConfig {
    /// Noisy image plus degraded condition.
    pub in_channels: usize,
    /// Channel width per resolution level; the last level is the middle.
    pub stage_widths: Vec<usize>,
    pub wsrb_per_stage: usize,
    pub d_t: usize,
    pub d_p: usize,
    /// Caption tokens.
    pub m: usize,
    pub cross_attn_stages: Vec<String>,
    /// Zeroes `p_d` and bypasses caption injection.
    pub ablate_prompts: bool,
}

impl Default for WnenetConfig {
    fn default() -> Self {
        WnenetConfig {
            in_channels: 6,
            stage_widths: vec![16, 32, 64],
            wsrb_per_stage: 1,
            d_t: 64,
            d_p: 32,
            m: 4,
            cross_attn_stages: vec!["middle".into(), "dec1".into(), "dec0".into()],
            ablate_prompts: false,
        }
    }
}

impl WnenetConfig {
    /// Checks stage arithmetic and returns the parsed cross-attention stages.
    pub fn validate(&self) -> Result<Vec<StageId>> {
        let key = |k: &str| format!("wnenet.{k}");
        if self.in_channels == 0 {
            return Err(Error::config(key("in_channels"), "must be positive"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::config(key("stage_widths"), "needs at least one positive width"));
        }
        if let Some(w) = self.stage_widths[1..].iter().find(|w| *w % 4 != 0) {
            return Err(Error::config(key("stage_widths"), format!("width {w} after a downsampling must be divisible by 4")));
        }
        for (name, v) in [("wsrb_per_stage", self.wsrb_per_stage), ("d_t", self.d_t), ("d_p", self.d_p), ("m", self.m)] {
            if v == 0 {
                return Err(Error::config(key(name), "must be positive"));
            }
        }
        let levels = self.stage_widths.len();
        let mut out = Vec::new();
        for s in &self.cross_attn_stages {
            let id: StageId = s.parse()?;
            match id {
                StageId::Encoder(_) => {
                    return Err(Error::config(key("cross_attn_stages"), format!("`{s}` is an encoder stage; cross-attention is restricted to the middle and decoder")));
                }
                StageId::Decoder(i) if i + 1 >= levels => {
                    return Err(Error::config(key("cross_attn_stages"), format!("`{s}` does not exist with {levels} levels")));
                }
                _ => {}
            }
            if !out.contains(&id) {
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Spatial extents must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.stage_widths.len()
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    wsrb: Vec<Wsrb>,
    down: Wfdb,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Wfub,
    merge: Conv,
    wsrb: Vec<Wsrb>,
    cross: Option<CaptionCrossAttention>,
}

/// Prompt inputs already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub p_t: Var,
    pub p_p: Var,
    pub p_c: Var,
}

impl PromptVars {
    pub fn constant<T: Real>(g: &mut Graph<'_, T>, bundle: &PromptBundle<T>) -> Self {
        PromptVars { p_t: g.constant(bundle.p_t.clone()), p_p: g.constant(bundle.p_p.clone()), p_c: g.constant(bundle.p_c.clone()) }
    }
}

/// Conditioning after the prompt pathway: `p_d` enters every block's time
/// modulation and the refined caption feeds the cross-attention stages.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning {
    pub p_d: Option<Var>,
    pub caption: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct WneNet {
    pub config: WnenetConfig,
    pub time: TimeEmbedder,
    pub fusion: PromptFusion,
    pub refiner: CaptionRefiner,
    in_conv: Conv,
    encoder: Vec<EncoderStage>,
    middle: Vec<Wsrb>,
    middle_cross: Option<CaptionCrossAttention>,
    decoder: Vec<DecoderStage>,
    out_conv: Conv,
}

impl WneNet {
    /// Registers parameters under `prefix` in `store`; the layout depends only
    /// on `config`, `max_t` and `seed`.
    pub fn build<T: Real>(config: &WnenetConfig, max_t: usize, store: &mut ParamStore<T>, prefix: &str, seed: u64) -> Result<Self> {
        let cross = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = ParamBuilder::new(store, &mut rng);
        let mut pb = root.sub(prefix);
        let w = &config.stage_widths;
        let (d_t, d_p) = (config.d_t, config.d_p);
        let levels = w.len();
        let time = TimeEmbedder::new(&mut pb, max_t, d_t);
        let fusion = PromptFusion::new(&mut pb, d_p, d_t);
        let refiner = CaptionRefiner::new(&mut pb, d_p);
        let in_conv = Conv::new(&mut pb, "in_conv", config.in_channels, w[0], 3, 1);
        let wsrbs = |pb: &mut ParamBuilder<'_, T, ChaCha8Rng>, name: &str, c: usize| {
            (0..config.wsrb_per_stage).map(|j| Wsrb::new(pb, &format!("{name}.wsrb{j}"), c, d_t)).collect::<Vec<_>>()
        };
        let mut encoder = Vec::new();
        for i in 0..levels - 1 {
            let name = format!("enc{i}");
            encoder.push(EncoderStage { wsrb: wsrbs(&mut pb, &name, w[i]), down: Wfdb::new(&mut pb, &format!("{name}.down"), w[i], w[i + 1], d_t)? });
        }
        let middle = wsrbs(&mut pb, "middle", w[levels - 1]);
        let middle_cross =
            cross.contains(&StageId::Middle).then(|| CaptionCrossAttention::new(&mut pb, "middle.cross", d_p, w[levels - 1], true));
        let mut decoder = Vec::new();
        for i in (0..levels - 1).rev() {
            let name = format!("dec{i}");
            decoder.push(DecoderStage {
                up: Wfub::new(&mut pb, &format!("{name}.up"), w[i + 1], w[i], d_t),
                merge: Conv::new(&mut pb, &format!("{name}.merge"), 2 * w[i], w[i], 1, 1),
                wsrb: wsrbs(&mut pb, &name, w[i]),
                cross: cross
                    .contains(&StageId::Decoder(i))
                    .then(|| CaptionCrossAttention::new(&mut pb, &format!("{name}.cross"), d_p, w[i], true)),
            });
        }
        let out_conv = Conv::new(&mut pb, "out_conv", w[0], 3, 3, 1);
        Ok(WneNet { config: config.clone(), time, fusion, refiner, in_conv, encoder, middle, middle_cross, decoder, out_conv })
    }

    /// Runs the prompt pathway: `p_d` from the type/property prompts and the
    /// caption tokens refined by them. Ablation yields no conditioning.
    pub fn condition<T: Real>(&self, g: &mut Graph<'_, T>, prompts: Option<PromptVars>) -> Result<Conditioning> {
        let Some(p) = prompts.filter(|_| !self.config.ablate_prompts) else {
            return Ok(Conditioning::default());
        };
        let fused = self.fusion.forward(g, p.p_t, p.p_p)?;
        let caption = self.refiner.forward(g, fused.type_proj, fused.prop_proj, p.p_c)?;
        Ok(Conditioning { p_d: Some(fused.p_d), caption: Some(caption) })
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, x_t: Var, x_d: Var) -> Result<(usize, usize)> {
        let (c, h, w) = g.value(x_t).dims3()?;
        if g.shape(x_d) != g.shape(x_t) || 2 * c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "noisy image {:?} and condition {:?} do not form {} input channels",
                g.shape(x_t),
                g.shape(x_d),
                self.config.in_channels
            )));
        }
        let s = self.config.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!("extents {h}×{w} are not divisible by the network stride {s}")));
        }
        Ok((h, w))
    }

    /// `ε_θ(x_t; x_d, t, conditioning)`, shape `3×H×W`.
    pub fn forward_conditioned<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var, x_d: Var, t: usize, cond: Conditioning) -> Result<Var> {
        self.check_input(g, x_t, x_d)?;
        let t_emb = self.time.forward(g, t)?;
        let p_d = cond.p_d;
        let input = g.concat(&[x_t, x_d])?;
        let mut h = self.in_conv.forward(g, input)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            for b in &stage.wsrb {
                h = b.forward(g, h, t_emb, p_d)?;
            }
            skips.push(h);
            h = stage.down.forward(g, h, t_emb, p_d)?;
        }
        for b in &self.middle {
            h = b.forward(g, h, t_emb, p_d)?;
        }
        if let (Some(cross), Some(c)) = (&self.middle_cross, cond.caption) {
            h = cross.forward(g, h, c)?;
        }
        for stage in &self.decoder {
            h = stage.up.forward(g, h, t_emb, p_d)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat(&[h, skip])?;
            h = stage.merge.forward(g, cat)?;
            for b in &stage.wsrb {
                h = b.forward(g, h, t_emb, p_d)?;
            }
            if let (Some(cross), Some(c)) = (&stage.cross, cond.caption) {
                h = cross.forward(g, h, c)?;
            }
        }
        self.out_conv.forward(g, h)
    }

    /// Full forward including the prompt pathway.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x_t: Var, x_d: Var, t: usize, prompts: Option<PromptVars>) -> Result<Var> {
        let cond = self.condition(g, prompts)?;
        self.forward_conditioned(g, x_t, x_d, t, cond)
    }

    /// Predicted noise for one image, evaluated without keeping the tape.
    pub fn estimate_noise<T: Real>(
        &self,
        store: &ParamStore<T>,
        x_t: &Tensor<T>,
        x_d: &Tensor<T>,
        t: usize,
        bundle: Option<&PromptBundle<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(store);
        let xt = g.constant(x_t.clone());
        let xd = g.constant(x_d.clone());
        let prompts = bundle.map(|b| PromptVars::constant(&mut g, b));
        let out = self.forward(&mut g, xt, xd, t, prompts)?;
        Ok(g.value(out).clone())
    }
}
