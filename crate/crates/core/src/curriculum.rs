//! Discretization curricula: training step `k` → grid size `N(k)`.

use crate::error::{invalid, Result};
use crate::schedules::sin_pi_ratio;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurriculumKind {
    /// Doubling schedule `min(s0·2^⌊k/K'⌋, s1) + 1`.
    Improved,
    /// `min(⌈|s1·sin(3πk/2K) + s0|⌉ + 1, s1 + 1)`.
    Sinusoidal,
    /// Fixed `s1 + 1` levels.
    Constant,
}

impl CurriculumKind {
    pub fn name(&self) -> &'static str {
        match self {
            CurriculumKind::Improved => "improved",
            CurriculumKind::Sinusoidal => "sinusoidal",
            CurriculumKind::Constant => "constant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumConfig {
    s0: u64,
    s1: u64,
    total_steps: u64,
    kind: CurriculumKind,
    /// Hold the sinusoidal schedule at its cap once the first peak is reached.
    monotone_clip: bool,
}

impl CurriculumConfig {
    pub fn new(s0: u64, s1: u64, total_steps: u64, kind: CurriculumKind) -> Result<Self> {
        if s0 < 1 || s0 >= s1 {
            return Err(invalid!("curriculum needs 1 <= s0 < s1, got s0={s0}, s1={s1}"));
        }
        if total_steps < 1 {
            return Err(invalid!("curriculum needs K >= 1"));
        }
        Ok(CurriculumConfig {
            s0,
            s1,
            total_steps,
            kind,
            monotone_clip: false,
        })
    }

    pub fn with_monotone_clip(mut self, clip: bool) -> Self {
        self.monotone_clip = clip;
        self
    }

    pub fn s0(&self) -> u64 {
        self.s0
    }

    pub fn s1(&self) -> u64 {
        self.s1
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn kind(&self) -> CurriculumKind {
        self.kind
    }

    pub fn monotone_clip(&self) -> bool {
        self.monotone_clip
    }

    /// `N(k)` under the configured kind.
    pub fn n_at(&self, k: u64) -> Result<usize> {
        match self.kind {
            CurriculumKind::Improved => improved_n(k, self),
            CurriculumKind::Sinusoidal => sinusoidal_n(k, self),
            CurriculumKind::Constant => {
                self.check_step(k)?;
                Ok(constant_n(self))
            }
        }
    }

    fn check_step(&self, k: u64) -> Result<()> {
        if k > self.total_steps {
            return Err(invalid!("step {k} beyond K = {}", self.total_steps));
        }
        Ok(())
    }

    /// `K' = ⌊K / (log2(s1/s0) + 1)⌋`.
    pub fn doubling_period(&self) -> u64 {
        let stages = (self.s1 as f64 / self.s0 as f64).log2() + 1.0;
        (self.total_steps as f64 / stages).floor() as u64
    }
}

pub fn improved_n(k: u64, cfg: &CurriculumConfig) -> Result<usize> {
    cfg.check_step(k)?;
    let period = cfg.doubling_period();
    let doublings = k.checked_div(period).map_or(63, |d| d.min(63));
    let scaled = cfg.s0.saturating_mul(1u64 << doublings);
    Ok((scaled.min(cfg.s1) + 1) as usize)
}

pub fn sinusoidal_n(k: u64, cfg: &CurriculumConfig) -> Result<usize> {
    cfg.check_step(k)?;
    let cap = cfg.s1 + 1;
    let total = cfg.total_steps as u128;
    // A third of the way through the first peak is reached.
    if cfg.monotone_clip && 3 * k as u128 >= total {
        return Ok(cap as usize);
    }
    let s = sin_pi_ratio(3 * k as u128, 2 * total);
    let raw = (cfg.s1 as f64 * s + cfg.s0 as f64).abs().ceil() as u64 + 1;
    Ok(raw.clamp(2, cap) as usize)
}

pub fn constant_n(cfg: &CurriculumConfig) -> usize {
    (cfg.s1 + 1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinus(k_total: u64) -> CurriculumConfig {
        CurriculumConfig::new(20, 250, k_total, CurriculumKind::Sinusoidal).unwrap()
    }

    #[test]
    fn improved_endpoints() {
        let cfg = CurriculumConfig::new(10, 1280, 400_000, CurriculumKind::Improved).unwrap();
        assert_eq!(improved_n(0, &cfg).unwrap(), 11);
        assert_eq!(improved_n(400_000, &cfg).unwrap(), 1281);
        assert!(improved_n(400_001, &cfg).is_err());
        assert_eq!(cfg.doubling_period(), 50_000);
    }

    #[test]
    fn sinusoidal_anchor_values() {
        let cfg = sinus(3000);
        assert_eq!(sinusoidal_n(0, &cfg).unwrap(), 21);
        assert_eq!(sinusoidal_n(1000, &cfg).unwrap(), 251);
        assert_eq!(sinusoidal_n(2000, &cfg).unwrap(), 21);
        assert_eq!(sinusoidal_n(3000, &cfg).unwrap(), 231);
        assert!(sinusoidal_n(3001, &cfg).is_err());
    }

    #[test]
    fn monotone_clip_holds_cap_after_peak() {
        let cfg = sinus(3000).with_monotone_clip(true);
        assert_eq!(
            sinusoidal_n(999, &cfg).unwrap(),
            sinusoidal_n(999, &sinus(3000)).unwrap()
        );
        for k in [1000, 2000, 3000] {
            assert_eq!(sinusoidal_n(k, &cfg).unwrap(), 251);
        }
    }

    #[test]
    fn constant_kind() {
        let cfg = CurriculumConfig::new(1, 100, 10, CurriculumKind::Constant).unwrap();
        assert_eq!(cfg.n_at(0).unwrap(), 101);
        assert_eq!(cfg.n_at(7).unwrap(), cfg.n_at(3).unwrap());
        assert!(CurriculumConfig::new(1, 1, 10, CurriculumKind::Constant).is_err());
        assert!(CurriculumConfig::new(0, 5, 10, CurriculumKind::Constant).is_err());
        assert!(CurriculumConfig::new(2, 5, 0, CurriculumKind::Constant).is_err());
    }

    #[test]
    fn bounds_hold_for_every_kind() {
        for kind in [
            CurriculumKind::Improved,
            CurriculumKind::Sinusoidal,
            CurriculumKind::Constant,
        ] {
            let cfg = CurriculumConfig::new(20, 250, 997, kind).unwrap();
            for k in 0..=997 {
                let n = cfg.n_at(k).unwrap();
                assert!((2..=251).contains(&n), "{kind:?} k={k} n={n}");
            }
        }
    }

    #[test]
    fn sinusoidal_plateau_and_bounded_increments() {
        let k_total = 30_000;
        let cfg = sinus(k_total);
        let ns: Vec<usize> = (0..=k_total).map(|k| sinusoidal_n(k, &cfg).unwrap()).collect();
        assert!(ns.iter().filter(|&&n| n == 251).count() > 1);
        let bound = (250.0 * 3.0 * std::f64::consts::PI / (2.0 * k_total as f64)).ceil() as i64 + 1;
        for w in ns.windows(2) {
            assert!((w[1] as i64 - w[0] as i64).abs() <= bound);
        }
    }
}
