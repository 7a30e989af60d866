//! Central finite-difference checks of analytic gradients (64-bit).

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max over coordinates of `|analytic - central| / max(|analytic|, |central|, 1e-8)`
/// for the scalar map `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

/// Checks the gradient of `f` with respect to every trainable parameter in
/// `store`. With `max_coords = Some(n)` at most `n` random coordinates per
/// parameter tensor are probed.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        store
            .iter()
            .map(|(id, p)| grads.param(id).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), coords_checked: 0, worst_pair: (0.0, 0.0) };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let (a, n) = (analytic[id.0].data()[i], (up - down) / (2.0 * h));
            let err = rel_err(a, n);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = store.get(id).name.clone();
                report.worst_pair = (a, n);
            }
        }
    }
    Ok(report)
}
