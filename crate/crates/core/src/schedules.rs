//! Noise-level grids and mini-batch noise-level samplers.
//!
//! Grids are strictly increasing sequences `σ_0 < … < σ_{N−1}`. Samplers draw
//! *pair indices* `i ∈ 0..N−1`, each naming the adjacent pair
//! `(σ_i, σ_{i+1})` used by one consistency-training example.

use rand::seq::index;
use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Gamma, Uniform};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};

/// Noise levels at or above this are "high noise" in reports and run logs.
pub const HIGH_NOISE_THRESHOLD: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRange {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for NoiseRange {
    fn default() -> Self {
        NoiseRange {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl NoiseRange {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        let r = NoiseRange {
            sigma_min,
            sigma_max,
            rho,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(invalid!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min,
                self.sigma_max
            ));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(invalid!("rho must be positive, got {}", self.rho));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.sigma_max - self.sigma_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Karras,
    Sinusoidal,
}

/// Amplitude used by the sinusoidal discretization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SinusoidalAmplitude {
    /// `Δt = σ_max − σ_min`, so the grid spans exactly `[σ_min, σ_max]`.
    SigmaSpan,
    /// A literal amplitude in σ units (e.g. `s1 − s0` read as a number of
    /// steps). The top of the grid is then `σ_min + Δt`, not `σ_max`.
    Fixed(f64),
}

/// A discretized, strictly increasing sequence of noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    sigmas: Vec<f64>,
    kind: GridKind,
}

impl NoiseGrid {
    /// Wraps an explicit sequence after checking it is strictly increasing and positive.
    pub fn from_sigmas(sigmas: Vec<f64>, kind: GridKind) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(invalid!("a grid needs at least 2 levels"));
        }
        if sigmas[0] <= 0.0 || sigmas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid!("grid must be positive and strictly increasing"));
        }
        Ok(NoiseGrid { sigmas, kind })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Number of adjacent pairs, `N − 1`.
    pub fn num_pairs(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_max(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }

    /// `(σ_i, σ_{i+1})` for pair index `i`.
    pub fn pair(&self, i: usize) -> (f64, f64) {
        (self.sigmas[i], self.sigmas[i + 1])
    }

    /// Largest pair index `i` with `σ_i ≤ sigma`, clamped to `0..N−1`.
    pub fn pair_index_at(&self, sigma: f64) -> usize {
        let above = self.sigmas.partition_point(|&s| s <= sigma);
        above.saturating_sub(1).min(self.num_pairs() - 1)
    }

    /// Largest grid level strictly below `sigma`, if any.
    pub fn level_below(&self, sigma: f64) -> Option<f64> {
        let below = self.sigmas.partition_point(|&s| s < sigma);
        below.checked_sub(1).map(|i| self.sigmas[i])
    }
}

/// `σ_i = (σ_min^{1/ρ} + i/(n−1)·(σ_max^{1/ρ} − σ_min^{1/ρ}))^ρ`, `i = 0..n−1`.
pub fn karras_grid(range: &NoiseRange, n: usize) -> Result<NoiseGrid> {
    range.validate()?;
    if n < 2 {
        return Err(invalid!("karras grid needs n >= 2, got {n}"));
    }
    let inv = 1.0 / range.rho;
    let lo = range.sigma_min.powf(inv);
    let hi = range.sigma_max.powf(inv);
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| (lo + i as f64 / (n - 1) as f64 * (hi - lo)).powf(range.rho))
        .collect();
    sigmas[0] = range.sigma_min;
    sigmas[n - 1] = range.sigma_max;
    NoiseGrid::from_sigmas(sigmas, GridKind::Karras)
}

/// `σ(i) = σ_min + (σ_max − σ_min)·sin(π·i / (2(n−1)))`, `i = 0..n−1`.
pub fn sinusoidal_grid(range: &NoiseRange, n: usize) -> Result<NoiseGrid> {
    sinusoidal_grid_with(range, n, SinusoidalAmplitude::SigmaSpan)
}

pub fn sinusoidal_grid_with(range: &NoiseRange, n: usize, amplitude: SinusoidalAmplitude) -> Result<NoiseGrid> {
    range.validate()?;
    if n < 2 {
        return Err(invalid!("sinusoidal grid needs n >= 2, got {n}"));
    }
    let delta = match amplitude {
        SinusoidalAmplitude::SigmaSpan => range.span(),
        SinusoidalAmplitude::Fixed(d) if d > 0.0 && d.is_finite() => d,
        SinusoidalAmplitude::Fixed(d) => return Err(invalid!("amplitude must be positive, got {d}")),
    };
    let denom = 2 * (n - 1);
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| range.sigma_min + delta * sin_pi_ratio(i as u128, denom as u128))
        .collect();
    if amplitude == SinusoidalAmplitude::SigmaSpan {
        sigmas[n - 1] = range.sigma_max;
    }
    NoiseGrid::from_sigmas(sigmas, GridKind::Sinusoidal)
}

pub fn build_grid(kind: GridKind, range: &NoiseRange, n: usize) -> Result<NoiseGrid> {
    match kind {
        GridKind::Karras => karras_grid(range, n),
        GridKind::Sinusoidal => sinusoidal_grid(range, n),
    }
}

/// `sin(π·num/den)` with exact argument reduction, so multiples of `π/2`
/// give exactly `0`, `±1` and odd multiples of `π/6` give exactly `±1/2`.
pub(crate) fn sin_pi_ratio(num: u128, den: u128) -> f64 {
    debug_assert!(den > 0);
    // Work in quarter turns: angle = (π/2)·(2·num/den).
    let two_den = 2 * den;
    let r = (2 * num) % (2 * two_den); // position in [0, 4·(den)) half-quarter units
    let quarter = den;
    let (reduced, sign) = if r <= quarter {
        (r, 1.0)
    } else if r <= 2 * quarter {
        (2 * quarter - r, 1.0)
    } else if r <= 3 * quarter {
        (r - 2 * quarter, -1.0)
    } else {
        (4 * quarter - r, -1.0)
    };
    if reduced == 0 {
        return 0.0;
    }
    if reduced == quarter {
        return sign;
    }
    if 3 * reduced == quarter {
        return sign * 0.5;
    }
    sign * (std::f64::consts::FRAC_PI_2 * (reduced as f64 / quarter as f64)).sin()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LognormalParams {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LognormalParams {
    fn default() -> Self {
        LognormalParams {
            p_mean: -1.1,
            p_std: 2.0,
        }
    }
}

impl LognormalParams {
    pub fn new(p_mean: f64, p_std: f64) -> Result<Self> {
        if !(p_std > 0.0) || !p_mean.is_finite() {
            return Err(invalid!("lognormal needs finite p_mean and p_std > 0"));
        }
        Ok(LognormalParams { p_mean, p_std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(invalid!("beta shapes must be positive, got ({alpha}, {beta})"));
        }
        Ok(BetaParams { alpha, beta })
    }

    fn ln_beta_fn(&self) -> f64 {
        // Small integer shapes: `B(a, b) = (a−1)!(b−1)!/(a+b−1)!` exactly.
        let small = |v: f64| v.fract() == 0.0 && v <= 16.0;
        if small(self.alpha) && small(self.beta) {
            let fact = |n: u64| (1..=n).map(|i| i as f64).product::<f64>();
            let (a, b) = (self.alpha as u64, self.beta as u64);
            return (fact(a - 1) * fact(b - 1) / fact(a + b - 1)).ln();
        }
        ln_gamma(self.alpha) + ln_gamma(self.beta) - ln_gamma(self.alpha + self.beta)
    }

    /// Regularized incomplete beta `P(X ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(self.alpha, self.beta, x)
        }
    }
}

/// Replace a fixed fraction of a mini-batch's noise levels with uniform
/// draws from `[low, high)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighNoiseInjection {
    pub ratio: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for HighNoiseInjection {
    fn default() -> Self {
        HighNoiseInjection {
            ratio: 0.0,
            low: 40.0,
            high: 80.0,
        }
    }
}

impl HighNoiseInjection {
    pub fn new(ratio: f64, low: f64, high: f64) -> Result<Self> {
        let inj = HighNoiseInjection { ratio, low, high };
        inj.validate()?;
        Ok(inj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(invalid!("injection ratio must be in [0, 1], got {}", self.ratio));
        }
        if !(self.low > 0.0 && self.low < self.high && self.high.is_finite()) {
            return Err(invalid!(
                "injection needs 0 < low < high, got [{}, {}]",
                self.low,
                self.high
            ));
        }
        Ok(())
    }

    /// `floor(ratio · batch)`.
    pub fn count(&self, batch: usize) -> usize {
        // The epsilon absorbs representation error, e.g. 0.03 · 100.
        ((self.ratio * batch as f64) + 1e-9).floor() as usize
    }
}

/// Probability of each pair index under the discretized lognormal.
pub fn lognormal_index_pmf(grid: &NoiseGrid, params: &LognormalParams) -> Vec<f64> {
    let scale = std::f64::consts::SQRT_2 * params.p_std;
    let cdf: Vec<f64> = grid
        .sigmas()
        .iter()
        .map(|s| erf((s.ln() - params.p_mean) / scale))
        .collect();
    let raw: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    normalize(raw)
}

/// Exact pair-index probabilities of [`sample_beta_indices`].
pub fn beta_index_pmf(grid: &NoiseGrid, params: &BetaParams) -> Vec<f64> {
    let lo = grid.sigma_min();
    let span = grid.sigma_max() - lo;
    let cdf: Vec<f64> = grid.sigmas().iter().map(|s| params.cdf((s - lo) / span)).collect();
    let raw: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    normalize(raw)
}

pub fn uniform_index_pmf(grid: &NoiseGrid) -> Vec<f64> {
    vec![1.0 / grid.num_pairs() as f64; grid.num_pairs()]
}

fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        for v in &mut p {
            *v /= total;
        }
    } else {
        let n = p.len() as f64;
        p.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    p
}

/// Draws i.i.d. pair indices from an explicit probability vector.
pub fn sample_from_pmf<R: Rng + ?Sized>(pmf: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pmf.len() == 1 {
        return Ok(vec![0; count]);
    }
    let dist = WeightedIndex::new(pmf).map_err(|e| invalid!("bad pmf: {e}"))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

pub fn sample_lognormal<R: Rng + ?Sized>(
    grid: &NoiseGrid,
    params: &LognormalParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(invalid!("count must be >= 1"));
    }
    sample_from_pmf(&lognormal_index_pmf(grid, params), count, rng)
}

/// `f(x) = x^{α−1}(1−x)^{β−1} / B(α, β)` on `[0, 1]`.
pub fn beta_pdf(x: f64, params: &BetaParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid!("beta pdf argument {x} outside [0, 1]"));
    }
    if (x == 0.0 && params.alpha < 1.0) || (x == 1.0 && params.beta < 1.0) {
        return Err(Error::SingularInput(format!(
            "beta({}, {}) density is unbounded at x = {x}",
            params.alpha, params.beta
        )));
    }
    let ln_kernel = |base: f64, expo: f64| {
        if expo == 0.0 {
            0.0
        } else {
            expo * base.ln()
        }
    };
    let ln_f = ln_kernel(x, params.alpha - 1.0) + ln_kernel(1.0 - x, params.beta - 1.0) - params.ln_beta_fn();
    Ok(ln_f.exp())
}

/// `P(X ≥ u)` for `X ~ Beta(α, β)`.
pub fn beta_tail_mass(u: f64, params: &BetaParams) -> f64 {
    1.0 - params.cdf(u)
}

/// Maps a unit-interval draw linearly onto `[σ_min, σ_max]` and snaps it to
/// the pair index below.
pub fn index_for_unit(grid: &NoiseGrid, u: f64) -> usize {
    let sigma = grid.sigma_min() + u * (grid.sigma_max() - grid.sigma_min());
    grid.pair_index_at(sigma)
}

/// One `Beta(α, β)` variate as `X / (X + Y)` with `X ~ Γ(α)`, `Y ~ Γ(β)`.
pub fn sample_beta_unit<R: Rng + ?Sized>(params: &BetaParams, rng: &mut R) -> f64 {
    let ga = Gamma::new(params.alpha, 1.0).expect("validated shape");
    let gb = Gamma::new(params.beta, 1.0).expect("validated shape");
    loop {
        let x: f64 = ga.sample(rng);
        let y: f64 = gb.sample(rng);
        let total = x + y;
        if total > 0.0 {
            return x / total;
        }
    }
}

pub fn sample_beta_indices<R: Rng + ?Sized>(
    grid: &NoiseGrid,
    params: &BetaParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(invalid!("count must be >= 1"));
    }
    Ok((0..count)
        .map(|_| index_for_unit(grid, sample_beta_unit(params, rng)))
        .collect())
}

/// Picks `floor(ratio·len)` distinct positions and a uniform `[low, high)`
/// level for each.
pub fn choose_injections<R: Rng + ?Sized>(
    len: usize,
    inj: &HighNoiseInjection,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    inj.validate()?;
    let count = inj.count(len);
    if count == 0 {
        return Ok(Vec::new());
    }
    let levels = Uniform::new(inj.low, inj.high).map_err(|e| invalid!("{e}"))?;
    let mut positions = index::sample(rng, len, count).into_vec();
    positions.sort_unstable();
    Ok(positions.into_iter().map(|p| (p, levels.sample(rng))).collect())
}

pub fn inject_high_noise<R: Rng + ?Sized>(
    sigma_batch: &[f64],
    inj: &HighNoiseInjection,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma_batch.is_empty() {
        return Err(invalid!("cannot inject into an empty batch"));
    }
    let mut out = sigma_batch.to_vec();
    for (pos, sigma) in choose_injections(out.len(), inj, rng)? {
        out[pos] = sigma;
    }
    Ok(out)
}

/// `λ(σ_i) = 1 / (σ_{i+1} − σ_i)`.
pub fn loss_weight(sigma_i: f64, sigma_next: f64) -> Result<f64> {
    if !(sigma_next > sigma_i) {
        return Err(invalid!(
            "loss weight needs sigma_next > sigma_i, got {sigma_i} and {sigma_next}"
        ));
    }
    Ok(1.0 / (sigma_next - sigma_i))
}

/// Distribution over pair indices used to build a mini-batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LevelSampler {
    Uniform,
    Lognormal(LognormalParams),
    Beta(BetaParams),
}

impl LevelSampler {
    pub fn pmf(&self, grid: &NoiseGrid) -> Vec<f64> {
        match self {
            LevelSampler::Uniform => uniform_index_pmf(grid),
            LevelSampler::Lognormal(p) => lognormal_index_pmf(grid, p),
            LevelSampler::Beta(p) => beta_index_pmf(grid, p),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, grid: &NoiseGrid, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self {
            LevelSampler::Uniform => {
                if count == 0 {
                    return Err(invalid!("count must be >= 1"));
                }
                Ok((0..count).map(|_| rng.random_range(0..grid.num_pairs())).collect())
            }
            LevelSampler::Lognormal(p) => sample_lognormal(grid, p, count, rng),
            LevelSampler::Beta(p) => sample_beta_indices(grid, p, count, rng),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelSampler::Uniform => "uniform",
            LevelSampler::Lognormal(_) => "lognormal",
            LevelSampler::Beta(_) => "beta",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn karras_endpoints_and_two_point_grid() {
        let r = NoiseRange::default();
        let g = karras_grid(&r, 10).unwrap();
        assert_eq!(g.sigmas()[0], 0.002);
        assert_eq!(g.sigmas()[9], 80.0);
        let g2 = karras_grid(&NoiseRange::new(0.5, 3.0, 2.0).unwrap(), 2).unwrap();
        assert_eq!(g2.sigmas(), &[0.5, 3.0]);
        assert!(karras_grid(&r, 1).is_err());
        assert!(sinusoidal_grid(&r, 0).is_err());
    }

    #[test]
    fn sinusoidal_endpoints() {
        let r = NoiseRange::default();
        let g = sinusoidal_grid(&r, 5).unwrap();
        assert_eq!(g.sigmas()[0], 0.002);
        assert_eq!(g.sigmas()[4], 80.0);
        let mid = 0.002 + 79.998 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.sigmas()[2] - mid).abs() < 1e-12);
    }

    #[test]
    fn literal_amplitude_grid_overshoots_range() {
        let r = NoiseRange::default();
        let g = sinusoidal_grid_with(&r, 11, SinusoidalAmplitude::Fixed(230.0)).unwrap();
        assert!((g.sigma_max() - 230.002).abs() < 1e-12);
    }

    #[test]
    fn sin_pi_ratio_exact_quadrants() {
        assert_eq!(sin_pi_ratio(0, 4), 0.0);
        assert_eq!(sin_pi_ratio(2, 4), 1.0);
        assert_eq!(sin_pi_ratio(4, 4), 0.0);
        assert_eq!(sin_pi_ratio(6, 4), -1.0);
        assert_eq!(sin_pi_ratio(8, 4), 0.0);
        assert_eq!(sin_pi_ratio(1, 6), 0.5);
        assert_eq!(sin_pi_ratio(5, 6), 0.5);
        assert_eq!(sin_pi_ratio(7, 6), -0.5);
        assert_eq!(sin_pi_ratio(11, 6), -0.5);
    }

    #[test]
    fn pair_index_lookup_clamps() {
        let g = NoiseGrid::from_sigmas(vec![1.0, 2.0, 4.0, 8.0], GridKind::Karras).unwrap();
        assert_eq!(g.pair_index_at(0.5), 0);
        assert_eq!(g.pair_index_at(1.0), 0);
        assert_eq!(g.pair_index_at(2.0), 1);
        assert_eq!(g.pair_index_at(7.9), 2);
        assert_eq!(g.pair_index_at(8.0), 2);
        assert_eq!(g.level_below(2.0), Some(1.0));
        assert_eq!(g.level_below(1.0), None);
    }

    #[test]
    fn unit_draw_at_zero_maps_to_first_pair() {
        let g = karras_grid(&NoiseRange::default(), 50).unwrap();
        assert_eq!(index_for_unit(&g, 0.0), 0);
        assert_eq!(index_for_unit(&g, 1.0), 48);
    }

    #[test]
    fn degenerate_two_level_grid_samples_single_index() {
        let g = karras_grid(&NoiseRange::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_lognormal(&g, &LognormalParams::default(), 100, &mut rng).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn lognormal_sampling_is_seed_deterministic() {
        let g = karras_grid(&NoiseRange::default(), 100).unwrap();
        let p = LognormalParams::default();
        let a = sample_lognormal(&g, &p, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_lognormal(&g, &p, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_lognormal(&g, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn beta_pdf_closed_forms_and_errors() {
        let uniform = BetaParams::new(1.0, 1.0).unwrap();
        assert!((beta_pdf(0.37, &uniform).unwrap() - 1.0).abs() < 1e-12);
        let b22 = BetaParams::new(2.0, 2.0).unwrap();
        assert!((beta_pdf(0.5, &b22).unwrap() - 1.5).abs() < 1e-12);
        let skew = BetaParams::new(0.5, 5.0).unwrap();
        assert!(matches!(beta_pdf(1.5, &skew), Err(Error::InvalidArgument(_))));
        assert!(matches!(beta_pdf(0.0, &skew), Err(Error::SingularInput(_))));
        let right = BetaParams::new(5.0, 0.5).unwrap();
        assert!(matches!(beta_pdf(1.0, &right), Err(Error::SingularInput(_))));
        assert!(BetaParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn injection_counts_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = vec![1.0; 100];
        let zero = HighNoiseInjection::new(0.0, 40.0, 80.0).unwrap();
        assert_eq!(inject_high_noise(&batch, &zero, &mut rng).unwrap(), batch);
        let full = HighNoiseInjection::new(1.0, 40.0, 80.0).unwrap();
        let out = inject_high_noise(&batch[..8], &full, &mut rng).unwrap();
        assert!(out.iter().all(|s| (40.0..=80.0).contains(s)));
        let bad = HighNoiseInjection {
            ratio: 1.5,
            ..HighNoiseInjection::default()
        };
        assert!(inject_high_noise(&batch, &bad, &mut rng).is_err());
        assert!(inject_high_noise(&[], &zero, &mut rng).is_err());
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(loss_weight(1.0, 1.5).unwrap(), 2.0);
        assert!(loss_weight(2.0, 2.0).is_err());
        assert!(loss_weight(2.0, 1.0).is_err());
    }

    #[test]
    fn karras_weights_strictly_decrease() {
        let g = karras_grid(&NoiseRange::default(), 1281).unwrap();
        let w: Vec<f64> = g
            .sigmas()
            .windows(2)
            .map(|p| loss_weight(p[0], p[1]).unwrap())
            .collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }
}
