//! Parameterised layers shared by the restorer and the prompt generators.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamBuilder, ParamId, Real, Var};
use rand::Rng;

/// Affine map `y = W x + b`, `W: d_out×d_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        Linear { w: s.uniform("w", &[d_out, d_in], d_in), b: s.uniform("b", &[d_out], d_in), d_in, d_out }
    }

    /// Weights and bias exactly zero.
    pub fn zeros<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        Linear { w: s.zeros("w", &[d_out, d_in]), b: s.zeros("b", &[d_out]), d_in, d_out }
    }

    /// Vector `d_in -> d_out`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).len() != self.d_in {
            return Err(Error::Dimension(format!(
                "linear {}->{} applied to {:?}",
                self.d_in,
                self.d_out,
                g.shape(x)
            )));
        }
        let row = g.reshape(x, &[1, self.d_in])?;
        let y = self.forward_rows(g, row)?;
        g.reshape(y, &[self.d_out])
    }

    /// Row-wise on `m×d_in`.
    pub fn forward_rows<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul_nt(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Square-kernel convolution with `k/2` zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let mut s = pb.sub(name);
        Conv {
            w: s.uniform("w", &[c_out, c_in, k, k], fan_in),
            b: Some(s.uniform("b", &[c_out], fan_in)),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    /// As [`Conv::new`] with He-uniform weights, for deep stacks without
    /// normalisation.
    pub fn he<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let mut s = pb.sub(name);
        Conv {
            w: s.uniform_gain("w", &[c_out, c_in, k, k], fan_in, 6f64.sqrt()),
            b: Some(s.uniform("b", &[c_out], fan_in)),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn zeros<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let mut s = pb.sub(name);
        Conv { w: s.zeros("w", &[c_out, c_in, k, k]), b: Some(s.zeros("b", &[c_out])), c_in, c_out, k, stride: 1 }
    }

    /// Bias-free variant, for projections whose bias cannot affect the output.
    pub fn without_bias<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let mut s = pb.sub(name);
        Conv { w: s.uniform("w", &[c_out, c_in, k, k], c_in * k * k), b: None, c_in, c_out, k, stride: 1 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride)
    }
}

/// Two linear layers with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        Mlp { fc1: Linear::new(&mut s, "fc1", d_in, d_hidden), fc2: Linear::new(&mut s, "fc2", d_hidden, d_out) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Per-pixel MLP: 1×1 conv, SiLU, 1×1 conv.
#[derive(Clone, Debug)]
pub struct PixelMlp {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl PixelMlp {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize, hidden: usize) -> Self {
        let mut s = pb.sub(name);
        PixelMlp { fc1: Conv::new(&mut s, "fc1", c, hidden, 1, 1), fc2: Conv::new(&mut s, "fc2", hidden, c, 1, 1) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, h)
    }
}
