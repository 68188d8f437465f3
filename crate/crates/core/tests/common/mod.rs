//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const P: usize = 320;
pub const RM: RoundingMode = RoundingMode::ToEven;

/// Thin wrapper so formulas read like arithmetic.
pub struct Hp {
    cc: Consts,
}

impl Hp {
    pub fn new() -> Self {
        Hp {
            cc: Consts::new().unwrap(),
        }
    }
    pub fn num(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, P)
    }
    pub fn int(&self, x: u64) -> BigFloat {
        BigFloat::from_u64(x, P)
    }
    pub fn pi(&mut self) -> BigFloat {
        self.cc.pi(P, RM)
    }
    pub fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(P, RM, &mut self.cc)
    }
    pub fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(P, RM, &mut self.cc)
    }
    pub fn sin(&mut self, x: &BigFloat) -> BigFloat {
        x.sin(P, RM, &mut self.cc)
    }
    pub fn pow(&mut self, x: &BigFloat, e: &BigFloat) -> BigFloat {
        let l = self.ln(x);
        self.exp(&e.mul(&l, P, RM))
    }
    pub fn round_f64(&mut self, x: &BigFloat) -> f64 {
        x.format(Radix::Dec, RM, &mut self.cc).unwrap().parse().unwrap()
    }
    /// `erf` by its Maclaurin series; fine for the |x| < 6 used here.
    pub fn erf(&mut self, x: &BigFloat) -> BigFloat {
        let x2 = x.mul(x, P, RM);
        let mut term = x.clone();
        let mut sum = x.clone();
        let tiny = self.num(1e-80);
        for n in 1..2000u64 {
            term = term.mul(&x2, P, RM).div(&self.int(n), P, RM).neg();
            let add = term.div(&self.int(2 * n + 1), P, RM);
            sum = sum.add(&add, P, RM);
            if add.abs().cmp(&tiny) == Some(-1) {
                break;
            }
        }
        let two = self.int(2);
        let pi = self.pi();
        two.div(&pi.sqrt(P, RM), P, RM).mul(&sum, P, RM)
    }
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// `⌈v⌉` of a high-precision value, treating values within `1e-60` of an
/// integer as that integer.
pub fn exact_ceil(hp: &mut Hp, v: &BigFloat) -> u64 {
    let r = v.round(0, RoundingMode::ToEven);
    let near = v.sub(&r, P, RM).abs().cmp(&hp.num(1e-60)) == Some(-1);
    let c = if near { r } else { v.ceil() };
    hp.round_f64(&c) as u64
}

pub fn exact_floor(hp: &mut Hp, v: &BigFloat) -> u64 {
    let r = v.round(0, RoundingMode::ToEven);
    let near = v.sub(&r, P, RM).abs().cmp(&hp.num(1e-60)) == Some(-1);
    let c = if near { r } else { v.floor() };
    hp.round_f64(&c) as u64
}

pub fn karras_oracle(hp: &mut Hp, smin: f64, smax: f64, rho: f64, n: usize, i: usize) -> f64 {
    let r = hp.num(rho);
    let inv = hp.int(1).div(&r, P, RM);
    let lo = hp.pow(&hp.num(smin), &inv);
    let hi = hp.pow(&hp.num(smax), &inv);
    let frac = hp.int(i as u64).div(&hp.int(n as u64 - 1), P, RM);
    let base = lo.add(&frac.mul(&hi.sub(&lo, P, RM), P, RM), P, RM);
    let v = hp.pow(&base, &r);
    hp.round_f64(&v)
}

pub fn sinusoidal_oracle(hp: &mut Hp, smin: f64, smax: f64, n: usize, i: usize) -> f64 {
    let pi = hp.pi();
    let arg = pi.mul(&hp.int(i as u64), P, RM).div(&hp.int(2 * (n as u64 - 1)), P, RM);
    let s = hp.sin(&arg);
    let delta = hp.num(smax).sub(&hp.num(smin), P, RM);
    let v = hp.num(smin).add(&delta.mul(&s, P, RM), P, RM);
    hp.round_f64(&v)
}

pub fn improved_oracle(hp: &mut Hp, k: u64, s0: u64, s1: u64, total: u64) -> usize {
    let ln2 = hp.ln(&hp.int(2));
    let ratio = hp.int(s1).div(&hp.int(s0), P, RM);
    let stages = hp.ln(&ratio).div(&ln2, P, RM).add(&hp.int(1), P, RM);
    let period = exact_floor(hp, &hp.int(total).div(&stages, P, RM));
    let doublings = k.checked_div(period).map_or(63, |d| d.min(63));
    (s0.saturating_mul(1 << doublings).min(s1) + 1) as usize
}

pub fn sinusoidal_n_oracle(hp: &mut Hp, k: u64, s0: u64, s1: u64, total: u64) -> usize {
    let pi = hp.pi();
    let arg = pi.mul(&hp.int(3 * k), P, RM).div(&hp.int(2 * total), P, RM);
    let s = hp.sin(&arg);
    let v = hp.int(s1).mul(&s, P, RM).add(&hp.int(s0), P, RM).abs();
    let n = exact_ceil(hp, &v) + 1;
    n.min(s1 + 1) as usize
}

/// Composite Simpson's rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Pearson χ² p-value; adjacent cells are pooled until each expects ≥ 5.
pub fn chi2_p(counts: &[usize], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let total: usize = counts.iter().sum();
    let mut cells = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        o += c as f64;
        e += p * total as f64;
        if e >= 5.0 {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    assert!(cells.len() >= 2, "too few cells for a χ² test");
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(stat)
}

pub fn histogram(indices: &[usize], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &i in indices {
        h[i] += 1;
    }
    h
}
