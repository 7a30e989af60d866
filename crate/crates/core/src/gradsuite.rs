//! 64-bit central-difference checks of every differentiable component.

use crate::blocks::{CaptionCrossAttention, CaptionRefiner, PromptBundle, PromptFusion, TimeEmbedder, Wfdb, Wfub, Wsrb};
use crate::diffusion::{diffusion_loss, make_schedule, TrainItem};
use crate::error::Result;
use crate::lpg::{Lpg, LpgConfig, PromptLabels};
use crate::tensor::gradcheck::grad_check_params;
use crate::tensor::{Graph, InitKind, ParamBuilder, ParamStore, Tensor, Var};
use crate::wnenet::{WneNet, WnenetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const GAIN: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst: String,
    pub coords: usize,
    pub worst_pair: (f64, f64),
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves parameters off their structured initial values (exact zeros and
/// ones) so every branch carries gradient.
fn perturb(store: &mut ParamStore<f64>, seed: u64, spread: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut().filter(|p| p.trainable) {
        match p.init {
            InitKind::One => p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5)),
            InitKind::Zero => p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-spread..spread)),
            _ => {}
        }
    }
}

/// Scales the fan-in initialised weights so deep activations (and with them
/// the attention gradients) stay well above finite-difference roundoff.
fn amplify(store: &mut ParamStore<f64>, gain: f64) {
    for p in store.iter_mut().filter(|p| p.trainable && p.init == InitKind::UniformFanIn) {
        p.value.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
}

/// Random linear readout so the scalar depends on every output coordinate.
fn readout(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y).to_vec(), &mut rng(seed));
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    g.sum(prod)
}

fn case<F>(name: &'static str, store: &ParamStore<f64>, coords: Option<usize>, seed: u64, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    case_with_step(name, store, coords, seed, STEP, f)
}

fn case_with_step<F>(
    name: &'static str,
    store: &ParamStore<f64>,
    coords: Option<usize>,
    seed: u64,
    step: f64,
    f: F,
) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let r = grad_check_params(store, f, step, coords, &mut rng(seed))?;
    Ok(GradCase { name, max_rel_err: r.max_rel_err, worst: r.worst, coords: r.coords_checked, worst_pair: r.worst_pair })
}

fn prompt_pathway(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::<f64>::new();
    let (te, fusion, refine, xattn) = {
        let mut r = rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        (
            TimeEmbedder::new(&mut pb, 10, 6),
            PromptFusion::new(&mut pb, 4, 6),
            CaptionRefiner::new(&mut pb, 4),
            CaptionCrossAttention::new(&mut pb, "xattn", 4, 3, true),
        )
    };
    perturb(&mut store, seed + 1, 0.5);
    let mut r = rng(seed + 2);
    let (pt, pp, pc) = (Tensor::randn([4], &mut r), Tensor::randn([4], &mut r), Tensor::randn([2, 4], &mut r));
    let x = Tensor::randn([3, 4, 4], &mut r);
    case("prompt fusion, caption refinement, cross-attention", &store, None, seed + 3, |g| {
        let temb = te.forward(g, 7)?;
        let (a, b, c) = (g.constant(pt.clone()), g.constant(pp.clone()), g.constant(pc.clone()));
        let fused = fusion.forward(g, a, b)?;
        let caption = refine.forward(g, fused.type_proj, fused.prop_proj, c)?;
        let xv = g.constant(x.clone());
        let y = xattn.forward(g, xv, caption)?;
        let tp = g.add(temb, fused.p_d)?;
        let tp = g.sum(tp)?;
        let s = readout(g, y, seed + 4)?;
        g.add(s, tp)
    })
}

fn wsrb(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::<f64>::new();
    let b = Wsrb::new(&mut ParamBuilder::new(&mut store, &mut rng(seed)), "wsrb", 4, 6);
    perturb(&mut store, seed + 1, 0.5);
    let mut r = rng(seed + 2);
    let (x, t, pd) = (Tensor::randn([4, 8, 8], &mut r), Tensor::randn([6], &mut r), Tensor::randn([6], &mut r));
    case("wavelet self-attention block", &store, None, seed + 3, |g| {
        let (xv, tv, pv) = (g.constant(x.clone()), g.constant(t.clone()), g.constant(pd.clone()));
        let y = b.forward(g, xv, tv, Some(pv))?;
        readout(g, y, seed + 4)
    })
}

fn sampling_blocks(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::<f64>::new();
    let (down, up) = {
        let mut r = rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        (Wfdb::new(&mut pb, "down", 3, 4, 5)?, Wfub::new(&mut pb, "up", 4, 2, 5))
    };
    perturb(&mut store, seed + 1, 0.5);
    let mut r = rng(seed + 2);
    let (x, t, pd) = (Tensor::randn([3, 8, 8], &mut r), Tensor::randn([5], &mut r), Tensor::randn([5], &mut r));
    case("wavelet down/up-sampling blocks", &store, None, seed + 3, |g| {
        let (xv, tv, pv) = (g.constant(x.clone()), g.constant(t.clone()), g.constant(pd.clone()));
        let d = down.forward(g, xv, tv, Some(pv))?;
        let u = up.forward(g, d, tv, Some(pv))?;
        readout(g, u, seed + 4)
    })
}

fn prompt_generator(seed: u64) -> Result<GradCase> {
    let cfg = LpgConfig { widths: vec![4, 6], d_p: 4, m: 2, image_size: 8, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let lpg = Lpg::build(&cfg, &mut store, "lpg", seed)?;
    perturb(&mut store, seed + 1, 0.3);
    let x = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng(seed + 2));
    let labels = PromptLabels { type_id: 3, property_id: 1, content_id: 6 };
    case("latent prompt generator", &store, None, seed + 3, |g| {
        let xv = g.constant(x.clone());
        let (loss, _, out) = lpg.loss(g, xv, &labels)?;
        let a = readout(g, out.p_t, seed + 4)?;
        let b = readout(g, out.p_p, seed + 5)?;
        let c = readout(g, out.p_c, seed + 6)?;
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        g.add(s, loss)
    })
}

fn tiny_net_config() -> WnenetConfig {
    WnenetConfig {
        stage_widths: vec![4, 8],
        d_t: 4,
        d_p: 4,
        m: 2,
        cross_attn_stages: vec!["middle".into(), "dec0".into()],
        ..Default::default()
    }
}

fn tiny_bundle(seed: u64) -> PromptBundle<f64> {
    let mut r = rng(seed);
    PromptBundle { p_t: Tensor::randn([4], &mut r), p_p: Tensor::randn([4], &mut r), p_c: Tensor::randn([2, 4], &mut r) }
}

fn noise_estimator(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::<f64>::new();
    let net = WneNet::build(&tiny_net_config(), 10, &mut store, "net", seed)?;
    perturb(&mut store, seed + 1, 0.5);
    amplify(&mut store, GAIN);
    let mut r = rng(seed + 2);
    let (xt, xd) = (Tensor::randn([3, 8, 8], &mut r), Tensor::randn([3, 8, 8], &mut r));
    let bundle = tiny_bundle(seed + 3);
    case("noise estimating network", &store, Some(12), seed + 4, |g| {
        let (a, b) = (g.constant(xt.clone()), g.constant(xd.clone()));
        let p = crate::wnenet::PromptVars::constant(g, &bundle);
        let y = net.forward(g, a, b, 6, Some(p))?;
        readout(g, y, seed + 5)
    })
}

fn diffusion_objective(seed: u64) -> Result<GradCase> {
    let mut store = ParamStore::<f64>::new();
    let net = WneNet::build(&tiny_net_config(), 10, &mut store, "net", seed)?;
    perturb(&mut store, seed + 1, 0.5);
    amplify(&mut store, GAIN);
    let schedule = make_schedule(10, 1e-4, 0.02)?;
    let mut r = rng(seed + 2);
    let item = TrainItem {
        clean: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut r),
        degraded: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut r),
        prompts: Some(tiny_bundle(seed + 3)),
    };
    let eps = Tensor::randn([3, 8, 8], &mut r);
    // the mean-squared loss is O(1) while some encoder gradients are O(1e-7),
    // so a wider step keeps roundoff below the tolerance
    case_with_step("diffusion training objective", &store, Some(12), seed + 4, 1e-4, |g| {
        diffusion_loss(g, &net, &item, 4, &eps, &schedule)
    })
}

/// Runs every case; a failing case is reported, not raised.
pub fn run(seed: u64) -> Result<Vec<GradCase>> {
    Ok(vec![
        prompt_pathway(seed)?,
        wsrb(seed + 10)?,
        sampling_blocks(seed + 20)?,
        prompt_generator(seed + 30)?,
        noise_estimator(seed + 40)?,
        diffusion_objective(seed + 50)?,
    ])
}
