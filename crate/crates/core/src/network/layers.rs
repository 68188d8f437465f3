use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::EMBED_MAX_FREQ;

fn weight<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, zero: bool, rng: &mut R) -> Tensor<T> {
    if zero {
        Tensor::zeros(shape)
    } else {
        Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }
}

/// Fully connected layer, weight `(out, in)`.
pub(crate) struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), weight(&[out, inp], inp, zero, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out])));
        Dense { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Stride-1 "same" convolution, weight `(out, in, k, k)`.
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        ks: usize,
        zero: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            weight(&[out, inp, ks, ks], inp * ks * ks, zero, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Conv { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Norm {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.group_norm(x, ga, be, self.groups)
    }
}

/// Largest group count ≤ 8 dividing `channels` with at least two channels per
/// group (one group when `channels` is prime or 1).
fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels / 2))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Sinusoidal features of `ln(σ)/4`: `dim/2` sines and `dim/2` cosines at
/// geometrically spaced frequencies in `[1, EMBED_MAX_FREQ]`. Shape `(B, dim)`.
pub fn sigma_features<T: Real>(sigmas: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(sigmas.len() * dim);
    for &s in sigmas {
        let t = s.ln() / 4.0;
        let freq = |j: usize| {
            if half > 1 {
                (EMBED_MAX_FREQ.ln() * j as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            }
        };
        out.extend((0..half).map(|j| T::of((freq(j) * t).sin())));
        out.extend((0..half).map(|j| T::of((freq(j) * t).cos())));
    }
    Tensor::from_vec(&[sigmas.len(), dim], out).expect("length matches")
}

/// Feature embedding of σ followed by a two-layer MLP.
pub struct SigmaEmbedding {
    dim: usize,
    l1: Dense,
    l2: Dense,
}

impl SigmaEmbedding {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
    ) -> Self {
        SigmaEmbedding {
            dim,
            l1: Dense::new(store, rng, &format!("{name}.l1"), dim, dim, true, false),
            l2: Dense::new(store, rng, &format!("{name}.l2"), dim, dim, true, false),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(B, dim)` embeddings of a batch of noise levels.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, sigmas: &[f64]) -> Result<Var> {
        let f = g.constant(sigma_features(sigmas, self.dim));
        let h = self.l1.forward(g, f)?;
        let h = g.silu(h);
        self.l2.forward(g, h)
    }
}
