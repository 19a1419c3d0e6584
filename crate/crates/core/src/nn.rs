//! Small building blocks shared by the encoders, fusion blocks and decoder.
//!
//! Each layer holds the ids of its parameters. Ids depend only on insertion
//! order, so a layer built against one store works with any store that was
//! built the same way, including a [`ParamStore::cast`] copy.

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// A tape together with the parameters it reads.
pub struct Fwd<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.tape.constant(Tensor::from_f64(shape, data)?))
    }

    /// Layer norm over the last axis.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let axis = self.tape.shape(x).len().saturating_sub(1);
        self.tape.layer_norm(x, axis, LN_EPS)
    }
}

/// Parameter factory over a store and an RNG.
pub struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.store.insert_uniform(name, shape, fan_in, 1.0, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.insert_const(name, shape, 0.0)
    }
}

/// `x W (+ b)` on `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = init.uniform(&format!("{name}.w"), &[din, dout], din)?;
        let b = if bias {
            Some(init.zeros(&format!("{name}.b"), &[dout])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `Linear -> LayerNorm -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        din: usize,
        dhidden: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(init, &format!("{name}.0"), din, dhidden, true)?,
            out: Linear::new(init, &format!("{name}.1"), dhidden, dout, true)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(f, x)?;
        let h = f.ln(h)?;
        let h = f.tape.relu(h);
        self.out.forward(f, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: init.uniform(&format!("{name}.w"), &[cout, cin, kernel], cin * kernel)?,
            b: init.zeros(&format!("{name}.b"), &[cout])?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        f.tape.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Two kernel-3 convolutions with channel layer norm and a skip connection;
/// the first convolution carries the stride. Input and output are `[B, C, L]`.
#[derive(Debug, Clone)]
pub struct ResBlock1d {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub skip: Option<Conv1d>,
}

impl ResBlock1d {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let skip = if stride != 1 || cin != cout {
            Some(Conv1d::new(init, &format!("{name}.skip"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv1d::new(init, &format!("{name}.conv1"), cin, cout, 3, stride)?,
            conv2: Conv1d::new(init, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            skip,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = f.tape.layer_norm(h, 1, LN_EPS)?;
        let h = f.tape.relu(h);
        let h = self.conv2.forward(f, h)?;
        let h = f.tape.layer_norm(h, 1, LN_EPS)?;
        let s = match &self.skip {
            Some(c) => c.forward(f, x)?,
            None => x,
        };
        let y = f.tape.add(h, s)?;
        Ok(f.tape.relu(y))
    }
}

/// Linear-interpolation matrix `[from, to]` with half-pixel centers, so that
/// `x[.., from] @ M` resamples a sequence to length `to`.
pub fn upsample_matrix(from: usize, to: usize) -> Vec<f64> {
    let mut m = vec![0.0; from * to];
    for i in 0..to {
        let src = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let u = src - lo as f64;
        m[lo * to + i] += 1.0 - u;
        m[hi * to + i] += u;
    }
    m
}

/// Resamples `[B, C, from]` to `[B, C, to]` along the last axis.
pub fn upsample<T: Real>(f: &mut Fwd<T>, x: Var, to: usize) -> Result<Var> {
    let s = f.tape.shape(x).to_vec();
    let (b, c, from) = (s[0], s[1], s[2]);
    let m = f.constant(&[from, to], &upsample_matrix(from, to))?;
    let flat = f.tape.reshape(x, &[b * c, from])?;
    let y = f.tape.matmul(flat, m)?;
    f.tape.reshape(y, &[b, c, to])
}
