//! Prompt conditioning and wavelet network blocks.
//!
//! All blocks are generic over the element type and hold only parameter
//! handles; the values live in a [`ParamStore`](crate::tensor::ParamStore)
//! attached to the [`Graph`] at forward time.

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Mlp, PixelMlp};
use crate::tensor::{Graph, ParamBuilder, ParamId, Real, Tensor, Var};
use crate::wavelet::WaveletFilter;
use rand::Rng;

/// Raw prompts produced by the latent prompt generators for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle<T> {
    /// Degradation-type prompt, `d_p`.
    pub p_t: Tensor<T>,
    /// Degradation-property prompt, `d_p`.
    pub p_p: Tensor<T>,
    /// Caption prompt, `m×d_p` tokens.
    pub p_c: Tensor<T>,
}

impl<T: Real> PromptBundle<T> {
    pub fn zeros(d_p: usize, m: usize) -> Self {
        PromptBundle { p_t: Tensor::zeros([d_p]), p_p: Tensor::zeros([d_p]), p_c: Tensor::zeros([m, d_p]) }
    }

    pub fn is_finite(&self) -> bool {
        self.p_t.is_finite() && self.p_p.is_finite() && self.p_c.is_finite()
    }

    pub fn cast<U: Real>(&self) -> PromptBundle<U> {
        PromptBundle { p_t: self.p_t.cast(), p_p: self.p_p.cast(), p_c: self.p_c.cast() }
    }
}

/// Sinusoid table with rows `t = 0..=max_t`; entry `2i` is `sin(t·ω_i)` and
/// `2i+1` is `cos(t·ω_i)` with `ω_i = 10000^(-2i/d)`.
pub fn sinusoid_table<T: Real>(max_t: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([max_t + 1, d], |idx| {
        let (t, j) = (idx / d, idx % d);
        let i = j / 2;
        let omega = 10000f64.powf(-2.0 * i as f64 / d as f64);
        let phase = t as f64 * omega;
        T::lit(if j % 2 == 0 { phase.sin() } else { phase.cos() })
    })
}

/// Fixed sinusoid encoding followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub table: ParamId,
    pub mlp: Mlp,
    pub max_t: usize,
    pub d_t: usize,
}

impl TimeEmbedder {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, max_t: usize, d_t: usize) -> Self {
        let mut s = pb.sub("time");
        let table = s.fixed("sinusoid", sinusoid_table(max_t, d_t));
        TimeEmbedder { table, mlp: Mlp::new(&mut s, "mlp", d_t, d_t, d_t), max_t, d_t }
    }

    /// The sinusoid row for `t`, before the MLP.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, t: usize) -> Result<Var> {
        if t > self.max_t {
            return Err(Error::Contract(format!("timestep {t} outside [0, {}]", self.max_t)));
        }
        let table = g.param(self.table);
        let row = g.value(table).data()[t * self.d_t..(t + 1) * self.d_t].to_vec();
        Ok(g.constant(Tensor::new([self.d_t], row)?))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, t: usize) -> Result<Var> {
        let enc = self.encode(g, t)?;
        self.mlp.forward(g, enc)
    }
}

/// Degradation-aware prompt: `p_d = α ⊙ MLP([Linear(p_t), Linear(p_p)])`.
#[derive(Clone, Debug)]
pub struct PromptFusion {
    pub proj_type: Linear,
    pub proj_prop: Linear,
    pub mlp: Mlp,
    pub alpha: ParamId,
    pub d_p: usize,
    pub d_t: usize,
}

/// Outputs of [`PromptFusion::forward`]: the fused prompt and the two projections.
#[derive(Clone, Copy, Debug)]
pub struct FusedPrompt {
    pub p_d: Var,
    pub type_proj: Var,
    pub prop_proj: Var,
}

impl PromptFusion {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d_p: usize, d_t: usize) -> Self {
        let mut s = pb.sub("fusion");
        PromptFusion {
            proj_type: Linear::new(&mut s, "proj_type", d_p, d_p),
            proj_prop: Linear::new(&mut s, "proj_prop", d_p, d_p),
            mlp: Mlp::new(&mut s, "mlp", 2 * d_p, d_t, d_t),
            alpha: s.ones("alpha", &[d_t]),
            d_p,
            d_t,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p_t: Var, p_p: Var) -> Result<FusedPrompt> {
        if g.value(p_t).len() != self.d_p || g.value(p_p).len() != self.d_p {
            return Err(Error::Dimension(format!(
                "prompt fusion expects width {}, got {:?} and {:?}",
                self.d_p,
                g.shape(p_t),
                g.shape(p_p)
            )));
        }
        let type_proj = self.proj_type.forward(g, p_t)?;
        let prop_proj = self.proj_prop.forward(g, p_p)?;
        let cat = g.concat(&[type_proj, prop_proj])?;
        let h = self.mlp.forward(g, cat)?;
        let alpha = g.param(self.alpha);
        let p_d = g.mul(alpha, h)?;
        Ok(FusedPrompt { p_d, type_proj, prop_proj })
    }
}

/// Caption refinement guided by the type/property projections:
/// `A = softmax(β₁ p'_t p'_pᵀ)`, `p_c = Linear(A · Linear(p'_c)) + p'_c`.
#[derive(Clone, Debug)]
pub struct CaptionRefiner {
    /// Token-wise projection producing `p'_c` from the raw caption tokens.
    pub proj_caption: Linear,
    pub inner: Linear,
    pub outer: Linear,
    pub beta: ParamId,
    pub d_p: usize,
}

impl CaptionRefiner {
    /// `outer` starts at zero so the refinement is a pass-through of `p'_c`.
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d_p: usize) -> Self {
        let mut s = pb.sub("caption_refine");
        CaptionRefiner {
            proj_caption: Linear::new(&mut s, "proj_caption", d_p, d_p),
            inner: Linear::new(&mut s, "inner", d_p, d_p),
            outer: Linear::zeros(&mut s, "outer", d_p, d_p),
            beta: s.ones("beta", &[1]),
            d_p,
        }
    }

    /// Row-softmaxed `d_p×d_p` prompt attention.
    pub fn attention<T: Real>(&self, g: &mut Graph<'_, T>, type_proj: Var, prop_proj: Var) -> Result<Var> {
        if g.value(type_proj).len() != g.value(prop_proj).len() {
            return Err(Error::Dimension(format!(
                "caption refinement projections differ: {:?} vs {:?}",
                g.shape(type_proj),
                g.shape(prop_proj)
            )));
        }
        let d = g.value(type_proj).len();
        let col_t = g.reshape(type_proj, &[d, 1])?;
        let col_p = g.reshape(prop_proj, &[d, 1])?;
        let outer = g.matmul_nt(col_t, col_p)?;
        let beta = g.param(self.beta);
        let scaled = g.scale_by(outer, beta)?;
        g.softmax(scaled)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, type_proj: Var, prop_proj: Var, caption: Var) -> Result<Var> {
        let s = g.shape(caption).to_vec();
        if s.len() != 2 || s[1] != self.d_p || g.value(type_proj).len() != self.d_p {
            return Err(Error::Dimension(format!(
                "caption tokens {s:?} / projection {:?} incompatible with width {}",
                g.shape(type_proj),
                self.d_p
            )));
        }
        let attn = self.attention(g, type_proj, prop_proj)?;
        let base = self.proj_caption.forward_rows(g, caption)?;
        let z = self.inner.forward_rows(g, base)?;
        // tokens are rows, so A · Zᵀ is taken as Z · Aᵀ
        let mixed = g.matmul_nt(z, attn)?;
        let out = self.outer.forward_rows(g, mixed)?;
        g.add(out, base)
    }
}

/// Channel attention between caption tokens and image features.
///
/// `Q, K` are `C×m` projections of the caption tokens, `A = softmax(β₂ Q Kᵀ)`
/// is `C×C`, and `x_cross = Conv(A · Conv(x))` with `x` flattened to `C×HW`.
#[derive(Clone, Debug)]
pub struct CaptionCrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Conv,
    pub out: Conv,
    pub beta: ParamId,
    pub channels: usize,
    /// Adds the input back onto `x_cross` when set.
    pub residual: bool,
}

impl CaptionCrossAttention {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_p: usize, channels: usize, residual: bool) -> Self {
        let mut s = pb.sub(name);
        CaptionCrossAttention {
            query: Linear::new(&mut s, "query", d_p, channels),
            key: Linear::new(&mut s, "key", d_p, channels),
            value: Conv::new(&mut s, "value", channels, channels, 1, 1),
            out: Conv::zeros(&mut s, "out", channels, channels, 1),
            beta: s.ones("beta", &[1]),
            channels,
            residual,
        }
    }

    pub fn attention<T: Real>(&self, g: &mut Graph<'_, T>, caption: Var) -> Result<Var> {
        let s = g.shape(caption).to_vec();
        if s.len() != 2 || s[0] < 1 {
            return Err(Error::Contract(format!("caption prompt needs at least one token, got {s:?}")));
        }
        let q = self.query.forward_rows(g, caption)?;
        let k = self.key.forward_rows(g, caption)?;
        // (m×C)ᵀ(m×C) = Q Kᵀ in the C×m layout
        let logits = g.matmul_tn(q, k)?;
        let beta = g.param(self.beta);
        let scaled = g.scale_by(logits, beta)?;
        g.softmax(scaled)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, caption: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.channels {
            return Err(Error::Dimension(format!("cross-attention for {} channels got {:?}", self.channels, g.shape(x))));
        }
        let attn = self.attention(g, caption)?;
        let v = self.value.forward(g, x)?;
        let v = g.reshape(v, &[c, h * w])?;
        let mixed = g.matmul(attn, v)?;
        let mixed = g.reshape(mixed, &[c, h, w])?;
        let cross = self.out.forward(g, mixed)?;
        if self.residual {
            g.add(x, cross)
        } else {
            Ok(cross)
        }
    }
}

/// `t' = t_emb + p_d`; `p_d = None` leaves the time embedding untouched.
pub fn time_prompt<T: Real>(g: &mut Graph<'_, T>, t_emb: Var, p_d: Option<Var>) -> Result<Var> {
    match p_d {
        Some(p) => g.add(t_emb, p),
        None => Ok(t_emb),
    }
}

/// `x ⊙ s + s` with `s` a per-channel projection of `t'` broadcast spatially.
fn modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, proj: &Linear, t_prime: Var) -> Result<Var> {
    let s = proj.forward(g, t_prime)?;
    let scaled = g.channel_mul(x, s)?;
    g.channel_add(scaled, s)
}

fn check_even<T: Real>(g: &Graph<'_, T>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = g.value(x).dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Parity { op, shape: g.shape(x).to_vec() });
    }
    Ok((c, h, w))
}

fn check_channels<T: Real>(g: &Graph<'_, T>, x: Var, expect: usize, op: &str) -> Result<()> {
    if g.shape(x).first() != Some(&expect) {
        return Err(Error::Dimension(format!("{op} expects {expect} channels, got {:?}", g.shape(x))));
    }
    Ok(())
}

/// Wavelet self-attention representation block.
#[derive(Clone, Debug)]
pub struct Wsrb {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub beta: ParamId,
    pub global_out: Conv,
    pub local: Conv,
    pub time_proj: Linear,
    pub mlp: PixelMlp,
    pub skip: Conv,
    pub channels: usize,
    pub filter: WaveletFilter,
}

/// Intermediate tensors of one WSRB pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct WsrbTrace {
    pub attention: Var,
    pub global: Var,
    pub local: Var,
    pub t_prime: Var,
    pub out: Var,
}

impl Wsrb {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize, d_t: usize) -> Self {
        let c4 = 4 * channels;
        let mut s = pb.sub(name);
        Wsrb {
            query: Conv::new(&mut s, "query", c4, c4, 1, 1),
            // a per-channel key bias shifts each attention row uniformly
            key: Conv::without_bias(&mut s, "key", c4, c4, 1),
            value: Conv::new(&mut s, "value", c4, c4, 1, 1),
            beta: s.ones("beta", &[1]),
            global_out: Conv::new(&mut s, "global_out", channels, channels, 1, 1),
            local: Conv::new(&mut s, "local", c4, c4, 3, 1),
            time_proj: Linear::new(&mut s, "time_proj", d_t, channels),
            mlp: PixelMlp::new(&mut s, "mlp", channels, 2 * channels),
            skip: Conv::new(&mut s, "skip", channels, channels, 3, 1),
            channels,
            filter: WaveletFilter::haar(),
        }
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t_emb: Var, p_d: Option<Var>) -> Result<WsrbTrace> {
        let (c, h, w) = check_even(g, x, "wsrb")?;
        check_channels(g, x, self.channels, "wsrb")?;
        let (c4, n) = (4 * c, (h / 2) * (w / 2));
        let bands = g.dwt2(x, &self.filter)?;

        // global branch: attention over N subband tokens of width 4C
        let q = self.query.forward(g, bands)?;
        let k = self.key.forward(g, bands)?;
        let v = self.value.forward(g, bands)?;
        let q = g.reshape(q, &[c4, n])?;
        let k = g.reshape(k, &[c4, n])?;
        let v = g.reshape(v, &[c4, n])?;
        let logits = g.matmul_tn(q, k)?;
        let beta = g.param(self.beta);
        let logits = g.scale_by(logits, beta)?;
        let attention = g.softmax(logits)?;
        let attended = g.matmul_nt(v, attention)?;
        let attended = g.reshape(attended, &[c4, h / 2, w / 2])?;
        let up = g.idwt2(attended, &self.filter)?;
        let global = self.global_out.forward(g, up)?;

        // local branch
        let loc = self.local.forward(g, bands)?;
        let local = g.idwt2(loc, &self.filter)?;

        let merged = g.add(global, local)?;
        let t_prime = time_prompt(g, t_emb, p_d)?;
        let modulated = modulate(g, merged, &self.time_proj, t_prime)?;
        let mlp = self.mlp.forward(g, modulated)?;
        let skip = self.skip.forward(g, x)?;
        let out = g.add(mlp, skip)?;
        Ok(WsrbTrace { attention, global, local, t_prime, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t_emb: Var, p_d: Option<Var>) -> Result<Var> {
        Ok(self.trace(g, x, t_emb, p_d)?.out)
    }
}

/// Wavelet feature down-sampling block: `C×H×W -> C_out×H/2×W/2`.
#[derive(Clone, Debug)]
pub struct Wfdb {
    pub pre: Conv,
    pub bypass: Conv,
    pub time_proj: Linear,
    pub out: Conv,
    pub c_in: usize,
    pub c_out: usize,
    pub filter: WaveletFilter,
}

impl Wfdb {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c_in: usize, c_out: usize, d_t: usize) -> Result<Self> {
        if c_out % 4 != 0 {
            return Err(Error::config(format!("{name}.c_out"), format!("{c_out} is not divisible by 4")));
        }
        let mut s = pb.sub(name);
        Ok(Wfdb {
            pre: Conv::new(&mut s, "pre", c_in, c_out / 4, 3, 1),
            bypass: Conv::new(&mut s, "bypass", c_in, c_out / 4, 3, 1),
            time_proj: Linear::new(&mut s, "time_proj", d_t, c_out),
            out: Conv::new(&mut s, "out", c_out, c_out, 3, 1),
            c_in,
            c_out,
            filter: WaveletFilter::haar(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t_emb: Var, p_d: Option<Var>) -> Result<Var> {
        check_even(g, x, "wfdb")?;
        check_channels(g, x, self.c_in, "wfdb")?;
        let pre = self.pre.forward(g, x)?;
        let down = g.dwt2(pre, &self.filter)?;
        let t_prime = time_prompt(g, t_emb, p_d)?;
        let modulated = modulate(g, down, &self.time_proj, t_prime)?;
        let main = self.out.forward(g, modulated)?;
        let by = self.bypass.forward(g, x)?;
        let by = g.dwt2(by, &self.filter)?;
        g.add(main, by)
    }
}

/// Wavelet feature up-sampling block: `C×H×W -> C_out×2H×2W`.
#[derive(Clone, Debug)]
pub struct Wfub {
    pub pre: Conv,
    pub bypass: Conv,
    pub time_proj: Linear,
    pub out: Conv,
    pub c_in: usize,
    pub c_out: usize,
    pub filter: WaveletFilter,
}

impl Wfub {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c_in: usize, c_out: usize, d_t: usize) -> Self {
        let mut s = pb.sub(name);
        Wfub {
            pre: Conv::new(&mut s, "pre", c_in, 4 * c_out, 3, 1),
            bypass: Conv::new(&mut s, "bypass", c_in, 4 * c_out, 3, 1),
            time_proj: Linear::new(&mut s, "time_proj", d_t, c_out),
            out: Conv::new(&mut s, "out", c_out, c_out, 3, 1),
            c_in,
            c_out,
            filter: WaveletFilter::haar(),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, t_emb: Var, p_d: Option<Var>) -> Result<Var> {
        g.value(x).dims3()?;
        check_channels(g, x, self.c_in, "wfub")?;
        let pre = self.pre.forward(g, x)?;
        let up = g.idwt2(pre, &self.filter)?;
        let t_prime = time_prompt(g, t_emb, p_d)?;
        let modulated = modulate(g, up, &self.time_proj, t_prime)?;
        let main = self.out.forward(g, modulated)?;
        let by = self.bypass.forward(g, x)?;
        let by = g.idwt2(by, &self.filter)?;
        g.add(main, by)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, ParamBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_row_zero_alternates() {
        let t = sinusoid_table::<f64>(10, 8);
        assert_eq!(&t.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn time_embedding_range_and_determinism() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let te = TimeEmbedder::new(&mut ParamBuilder::new(&mut store, &mut rng), 20, 8);
        let mut g = Graph::with_params(&store);
        let a = te.forward(&mut g, 3).unwrap();
        let b = te.forward(&mut g, 3).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(matches!(te.forward(&mut g, 21), Err(Error::Contract(_))));
        let one = te.forward(&mut g, 1).unwrap();
        let two = te.forward(&mut g, 2).unwrap();
        let n1 = g.value(one).sum_sq().sqrt();
        let n2 = g.value(two).sum_sq().sqrt();
        assert!((n1 - n2).abs() > 0.0);
    }

    #[test]
    fn wfdb_rejects_indivisible_width() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(Wfdb::new(&mut pb, "down", 4, 6, 8), Err(Error::Config { .. })));
    }
}
