//! Consistency function `f(x, σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x, σ)`,
//! the consistency-training loss, the EMA rule and the samplers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{pseudo_huber_from_sq, Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::network::Model;
use crate::scalar::Real;
use crate::schedules::{karras_grid, loss_weight, NoiseGrid, NoiseRange};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScalings {
    sigma_data: f64,
}

impl Default for BoundaryScalings {
    fn default() -> Self {
        BoundaryScalings {
            sigma_data: DEFAULT_SIGMA_DATA,
        }
    }
}

impl BoundaryScalings {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data.is_finite() && sigma_data > 0.0) {
            return Err(invalid!("sigma_data must be positive, got {sigma_data}"));
        }
        Ok(BoundaryScalings { sigma_data })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }
}

/// `(c_skip, c_out)` at noise level `sigma`.
pub fn boundary_scalings(sigma: f64, cfg: &BoundaryScalings, sigma_min: f64) -> Result<(f64, f64)> {
    if !(sigma >= sigma_min) {
        return Err(invalid!("sigma {sigma} below sigma_min {sigma_min}"));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let d = sigma - sigma_min;
    let c_skip = sd2 / (d * d + sd2);
    let c_out = cfg.sigma_data * d / (sigma * sigma + sd2).sqrt();
    Ok((c_skip, c_out))
}

/// Network input scaling `1/√(σ² + σ_data²)`, which keeps the network input
/// at roughly unit variance across noise levels.
pub fn input_scaling(sigma: f64, cfg: &BoundaryScalings) -> f64 {
    1.0 / (sigma * sigma + cfg.sigma_data * cfg.sigma_data).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuberConfig {
    c: f64,
}

impl HuberConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(invalid!("pseudo-Huber c must be nonnegative, got {c}"));
        }
        Ok(HuberConfig { c })
    }

    /// `c = 0.00054·√D` for data of dimensionality `D`.
    pub fn for_dim(dim: usize) -> Self {
        HuberConfig {
            c: 0.00054 * (dim as f64).sqrt(),
        }
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmaConfig {
    mu: f64,
}

impl EmaConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(invalid!("EMA decay must lie in [0, 1], got {mu}"));
        }
        Ok(EmaConfig { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Per-pair loss weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    /// `λ = 1/(σ_hi − σ_lo)`.
    #[default]
    Improved,
    /// `λ = 1`.
    Uniform,
}

impl Weighting {
    pub fn weight(&self, sigma_lo: f64, sigma_hi: f64) -> Result<f64> {
        match self {
            Weighting::Improved => loss_weight(sigma_lo, sigma_hi),
            Weighting::Uniform => Ok(1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Weighting::Improved => "improved",
            Weighting::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair<T> {
    pub x_lo: Tensor<T>,
    pub x_hi: Tensor<T>,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub z: Tensor<T>,
}

/// Two points of one noising trajectory sharing the noise `z`.
pub fn make_pair<T: Real>(x0: &Tensor<T>, z: &Tensor<T>, sigma_lo: f64, sigma_hi: f64) -> Result<TrajectoryPair<T>> {
    if !(sigma_lo < sigma_hi) {
        return Err(invalid!("need sigma_lo < sigma_hi, got {sigma_lo} and {sigma_hi}"));
    }
    let (lo, hi) = (T::of(sigma_lo), T::of(sigma_hi));
    Ok(TrajectoryPair {
        x_lo: x0.zip_map(z, |a, n| a + lo * n)?,
        x_hi: x0.zip_map(z, |a, n| a + hi * n)?,
        sigma_lo,
        sigma_hi,
        z: z.clone(),
    })
}

/// `√(‖a−b‖² + c²) − c` over the flattened difference.
pub fn pseudo_huber<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &HuberConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid!(
            "pseudo-Huber shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(pseudo_huber_from_sq(sq, cfg.c))
}

/// A network bound to its boundary scalings and noise range.
#[derive(Clone, Copy)]
pub struct ConsistencyFunction<'m, T: Real> {
    pub model: &'m Model<T>,
    pub scalings: BoundaryScalings,
    pub range: NoiseRange,
}

impl<'m, T: Real> ConsistencyFunction<'m, T> {
    pub fn new(model: &'m Model<T>, scalings: BoundaryScalings, range: NoiseRange) -> Self {
        ConsistencyFunction { model, scalings, range }
    }

    /// Records `f(x, σ)` on `g`; the graph's store supplies the parameters.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        sigmas: &[f64],
        cond: Option<Var>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        consistency_forward(g, self, x, sigmas, cond, dropout)
    }

    /// `f(x, σ)` with the model's own parameters, no gradient tracking.
    pub fn eval(&self, x: &Tensor<T>, sigmas: &[f64], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.eval_with(self.model.params(), x, sigmas, cond)
    }

    pub fn eval_with(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        sigmas: &[f64],
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(params);
        let xv = g.constant(x.clone());
        let cv = cond.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, xv, sigmas, cv, None)?;
        Ok(g.value(out).clone())
    }
}

pub fn consistency_forward<T: Real>(
    g: &mut Graph<'_, T>,
    f: &ConsistencyFunction<'_, T>,
    x: Var,
    sigmas: &[f64],
    cond: Option<Var>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite("consistency input contains NaN or Inf".into()));
    }
    if let Some(c) = cond {
        if !g.value(c).all_finite() {
            return Err(Error::NonFinite("condition contains NaN or Inf".into()));
        }
    }
    let (smin, smax) = (f.range.sigma_min, f.range.sigma_max);
    let mut skip = Vec::with_capacity(sigmas.len());
    let mut out = Vec::with_capacity(sigmas.len());
    let mut inp = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        if !(s >= smin && s <= smax) {
            return Err(invalid!("sigma {s} outside [{smin}, {smax}]"));
        }
        let (cs, co) = boundary_scalings(s, &f.scalings, smin)?;
        skip.push(T::of(cs));
        out.push(T::of(co));
        inp.push(T::of(input_scaling(s, &f.scalings)));
    }
    if g.shape(x).first() != Some(&sigmas.len()) {
        return Err(invalid!("{} sigmas for input {:?}", sigmas.len(), g.shape(x)));
    }
    let xin = g.scale_rows(x, &inp)?;
    let net = f.model.forward(g, xin, sigmas, cond, dropout)?;
    let a = g.scale_rows(x, &skip)?;
    let b = g.scale_rows(net, &out)?;
    g.add(a, b)
}

/// One consistency-training mini-batch: clean rows, shared noise rows and the
/// noise-level pair of each row.
#[derive(Clone, Debug)]
pub struct CtBatch<T> {
    pub x0: Tensor<T>,
    pub z: Tensor<T>,
    pub sigma_lo: Vec<f64>,
    pub sigma_hi: Vec<f64>,
    pub cond: Option<Tensor<T>>,
}

impl<T: Real> CtBatch<T> {
    /// Pairs `(σ_i, σ_{i+1})` for 0-based pair indices `i`.
    pub fn from_indices(
        x0: Tensor<T>,
        z: Tensor<T>,
        grid: &NoiseGrid,
        indices: &[usize],
        cond: Option<Tensor<T>>,
    ) -> Result<Self> {
        let mut lo = Vec::with_capacity(indices.len());
        let mut hi = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= grid.num_pairs() {
                return Err(invalid!("pair index {i} out of range for {} levels", grid.len()));
            }
            let (a, b) = grid.pair(i);
            lo.push(a);
            hi.push(b);
        }
        Ok(CtBatch {
            x0,
            z,
            sigma_lo: lo,
            sigma_hi: hi,
            cond,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma_hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_hi.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() || self.x0.rows() == 0 {
            return Err(invalid!("empty consistency-training batch"));
        }
        self.x0.check_same_shape(&self.z)?;
        if self.x0.rows() != self.len() || self.sigma_lo.len() != self.len() {
            return Err(invalid!(
                "batch has {} rows but {} / {} sigmas",
                self.x0.rows(),
                self.sigma_lo.len(),
                self.sigma_hi.len()
            ));
        }
        if let Some(c) = &self.cond {
            if c.rows() != self.len() {
                return Err(invalid!(
                    "condition batch has {} rows, expected {}",
                    c.rows(),
                    self.len()
                ));
            }
        }
        for (&a, &b) in self.sigma_lo.iter().zip(&self.sigma_hi) {
            if !(a < b) {
                return Err(invalid!("need sigma_lo < sigma_hi, got {a} and {b}"));
            }
        }
        Ok(())
    }

    /// `(x_lo, x_hi)` for every row.
    pub fn noisy(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut lo = self.x0.clone();
        let mut hi = self.x0.clone();
        for r in 0..self.len() {
            let (sl, sh) = (T::of(self.sigma_lo[r]), T::of(self.sigma_hi[r]));
            let z = self.z.row(r);
            for ((l, h), &n) in lo.row_mut(r).iter_mut().zip(hi.row_mut(r)).zip(z) {
                *l += sl * n;
                *h += sh * n;
            }
        }
        Ok((lo, hi))
    }
}

pub struct CtLoss<T> {
    pub loss: f64,
    /// Gradients aligned with the student's parameter store.
    pub grads: Vec<Tensor<T>>,
}

/// Batch mean of `λ·d(f_θ(x_hi, σ_hi), f_{θ⁻}(x_lo, σ_lo))` and its gradient
/// with respect to the student parameters. The teacher branch is evaluated
/// on `teacher` without gradient tracking and without dropout.
pub fn ct_loss<T: Real>(
    f: &ConsistencyFunction<'_, T>,
    teacher: &ParamStore<T>,
    batch: &CtBatch<T>,
    huber: &HuberConfig,
    weighting: Weighting,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<CtLoss<T>> {
    batch.validate()?;
    if !f.model.params().congruent(teacher) {
        return Err(invalid!("teacher parameters are not congruent with the student"));
    }
    let (x_lo, x_hi) = batch.noisy()?;
    let target = f.eval_with(teacher, &x_lo, &batch.sigma_lo, batch.cond.as_ref())?;
    let weights = batch
        .sigma_lo
        .iter()
        .zip(&batch.sigma_hi)
        .map(|(&a, &b)| weighting.weight(a, b).map(T::of))
        .collect::<Result<Vec<T>>>()?;

    let mut g = Graph::new(f.model.params());
    let xv = g.constant(x_hi);
    let cv = batch.cond.as_ref().map(|c| g.constant(c.clone()));
    let pred = f.forward(&mut g, xv, &batch.sigma_hi, cv, dropout)?;
    let loss = g.pseudo_huber(pred, &target, &weights, T::of(huber.c))?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    Ok(CtLoss { loss: value, grads })
}

/// `θ⁻ ← μ·θ⁻ + (1−μ)·θ`.
pub fn ema_update<T: Real>(theta_minus: &mut ParamStore<T>, theta: &ParamStore<T>, cfg: &EmaConfig) -> Result<()> {
    if !theta_minus.congruent(theta) {
        return Err(invalid!("EMA parameter sets are not congruent"));
    }
    if cfg.mu == 0.0 {
        theta_minus.clone_from(theta);
        return Ok(());
    }
    if cfg.mu == 1.0 {
        return Ok(());
    }
    let (mu, one_minus) = (T::of(cfg.mu), T::of(1.0 - cfg.mu));
    for (dst, src) in theta_minus.tensors_mut().iter_mut().zip(theta.tensors()) {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = mu * *d + one_minus * s;
        }
    }
    Ok(())
}

/// `f(σ_max·z, σ_max)`.
pub fn single_step_sample<T: Real>(
    f: &ConsistencyFunction<'_, T>,
    z: &Tensor<T>,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let smax = f.range.sigma_max;
    let x = z.map(|v| v * T::of(smax));
    f.eval(&x, &vec![smax; z.rows()], cond)
}

/// Multistep consistency sampling along a descending σ list starting at
/// `σ_max`; each later level re-noises the running estimate with fresh noise.
pub fn multi_step_sample<T: Real, R: Rng + ?Sized>(
    f: &ConsistencyFunction<'_, T>,
    sigmas: &[f64],
    z: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let smin = f.range.sigma_min;
    match sigmas.first() {
        None => return Err(invalid!("empty sampling schedule")),
        Some(&s) if s != f.range.sigma_max => {
            return Err(invalid!("sampling schedule must start at sigma_max, got {s}"));
        }
        _ => {}
    }
    for w in sigmas.windows(2) {
        if !(w[1] < w[0]) {
            return Err(invalid!("sampling schedule must be strictly descending"));
        }
    }
    if let Some(&s) = sigmas.iter().find(|&&s| s < smin) {
        return Err(invalid!("sampling level {s} below sigma_min {smin}"));
    }
    let mut x = single_step_sample(f, z, cond)?;
    for &s in &sigmas[1..] {
        let amp = T::of((s * s - smin * smin).sqrt());
        let noise = Tensor::<T>::randn(x.shape(), rng);
        let xn = x.zip_map(&noise, |a, n| a + amp * n)?;
        x = f.eval(&xn, &vec![s; xn.rows()], cond)?;
    }
    Ok(x)
}

/// Descending `nfe`-level schedule taken from a Karras grid with `nfe + 1`
/// levels, dropping `σ_min`.
pub fn karras_schedule(range: &NoiseRange, nfe: usize) -> Result<Vec<f64>> {
    if nfe < 1 {
        return Err(invalid!("nfe must be >= 1"));
    }
    if nfe == 1 {
        return Ok(vec![range.sigma_max]);
    }
    let grid = karras_grid(range, nfe + 1)?;
    Ok(grid.sigmas()[1..].iter().rev().copied().collect())
}
