//! Setwise-continuity diagnostics for additive-noise kernels: total
//! variation between two transition laws and a probe that checks
//! `|E_{u_k}V − E_uV| ≤ M·‖P_{u_k} − P_u‖` on bounded step functions.

use crate::error::{Error, Result};
use crate::model::{AdditiveNoise, KernelSpec};
use crate::noise::NoiseDensity;

/// Tail mass excluded from the total-variation root search.
pub const TV_TAIL: f64 = 1e-8;
pub const DEFAULT_TV_PANELS: usize = 20_000;
/// Slack allowed above the total-variation bound before a violation is flagged.
pub const PROBE_SLACK: f64 = 1e-6;
/// Gaps below this are treated as converged.
const CONVERGED_GAP: f64 = 1e-6;

/// `∫ |p₁ − p₂|` for the laws `m₁ + s₁W` and `m₂ + s₂W`, a value in `[0, 2]`.
///
/// The panels only locate sign changes of `p₁ − p₂` on the truncated
/// support; each piece between crossings is then integrated exactly from
/// the noise CDF.
pub(crate) fn l1_between(noise: NoiseDensity, a: (f64, f64), b: (f64, f64), panels: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    match (a.1 > 0.0, b.1 > 0.0) {
        (false, false) => return if a.0 == b.0 { 0.0 } else { 2.0 },
        (true, false) | (false, true) => return 2.0,
        _ => {}
    }
    let k = noise.truncation(TV_TAIL);
    let lo = (a.0 - a.1 * k).min(b.0 - b.1 * k);
    let hi = (a.0 + a.1 * k).max(b.0 + b.1 * k);
    let diff = |z: f64| noise.pdf((z - a.0) / a.1) / a.1 - noise.pdf((z - b.0) / b.1) / b.1;
    let cdf = |law: (f64, f64), z: f64| {
        if z == f64::NEG_INFINITY {
            0.0
        } else if z == f64::INFINITY {
            1.0
        } else {
            noise.cdf((z - law.0) / law.1)
        }
    };

    let panels = panels.max(2);
    let h = (hi - lo) / panels as f64;
    let mut cuts = vec![f64::NEG_INFINITY];
    let mut prev = diff(lo);
    for p in 1..=panels {
        let z = lo + h * p as f64;
        let cur = diff(z);
        if prev != 0.0 && cur != 0.0 && (prev > 0.0) != (cur > 0.0) {
            cuts.push(bisect(&diff, z - h, z));
        } else if cur == 0.0 && prev != 0.0 {
            cuts.push(z);
        }
        prev = cur;
    }
    cuts.push(f64::INFINITY);
    let total: f64 = cuts
        .windows(2)
        .map(|w| {
            let pa = cdf(a, w[1]) - cdf(a, w[0]);
            let pb = cdf(b, w[1]) - cdf(b, w[0]);
            (pa - pb).abs()
        })
        .sum();
    total.clamp(0.0, 2.0)
}

fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `∫ |P(dz | x, u₁) − P(dz | x, u₂)|` for an additive-noise kernel.
pub fn tv_distance(kernel: &KernelSpec, t: usize, x: f64, u1: f64, u2: f64, panels: usize) -> Result<f64> {
    let spec = kernel
        .as_additive()
        .ok_or(Error::Unsupported("total variation needs an additive-noise kernel"))?;
    let s1 = spec.check_floor(t, x, u1)?;
    let s2 = spec.check_floor(t, x, u2)?;
    Ok(l1_between(
        spec.noise,
        (spec.mean(t, x, u1), s1),
        (spec.mean(t, x, u2), s2),
        panels,
    ))
}

/// A real interval with independently open or closed ends; infinite ends are open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            lo_closed: lo.is_finite(),
            hi_closed: hi.is_finite(),
        }
    }

    /// `[lo, hi)`, the natural cell of a step function.
    pub fn half_open(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            lo_closed: lo.is_finite(),
            hi_closed: false,
        }
    }

    pub fn point(x: f64) -> Self {
        Self::closed(x, x)
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lo_closed { x >= self.lo } else { x > self.lo };
        let below = if self.hi_closed { x <= self.hi } else { x < self.hi };
        above && below
    }

    /// `P(lo ⋚ m + sW ⋚ hi)` for `s > 0`; the noise has a density, so
    /// endpoint openness does not matter. Symmetric tails avoid cancellation.
    fn probability(&self, noise: NoiseDensity, m: f64, s: f64) -> f64 {
        if self.hi < self.lo {
            return 0.0;
        }
        let za = (self.lo - m) / s;
        let zb = (self.hi - m) / s;
        let upper = |z: f64| if z == f64::INFINITY { 0.0 } else { noise.cdf(-z) };
        let lower = |z: f64| if z == f64::NEG_INFINITY { 0.0 } else { noise.cdf(z) };
        if za > 0.0 {
            (upper(za) - upper(zb)).max(0.0)
        } else {
            (lower(zb) - lower(za)).max(0.0)
        }
    }
}

/// A finite linear combination `Σ c_j 1_{I_j}` of interval indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub pieces: Vec<(Interval, f64)>,
}

impl StepFunction {
    pub fn new(pieces: Vec<(Interval, f64)>) -> Self {
        Self { pieces }
    }

    pub fn indicator(interval: Interval) -> Self {
        Self::new(vec![(interval, 1.0)])
    }

    pub fn value(&self, x: f64) -> f64 {
        self.pieces
            .iter()
            .filter(|(i, _)| i.contains(x))
            .map(|(_, c)| c)
            .sum()
    }

    /// `sup |V|`, exact: the function is constant between breakpoints.
    pub fn sup_abs(&self) -> f64 {
        let mut bp: Vec<f64> = self
            .pieces
            .iter()
            .flat_map(|(i, _)| [i.lo, i.hi])
            .filter(|v| v.is_finite())
            .collect();
        bp.sort_by(f64::total_cmp);
        bp.dedup();
        let mut probes = bp.clone();
        probes.extend(bp.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        match (bp.first(), bp.last()) {
            (Some(&a), Some(&b)) => probes.extend([a - 1.0, b + 1.0]),
            _ => probes.push(0.0),
        }
        probes.iter().map(|&x| self.value(x).abs()).fold(0.0, f64::max)
    }

    /// `E[V(m + sW)]`; a point mass at `m` when `s = 0`.
    pub fn expectation(&self, noise: NoiseDensity, m: f64, s: f64) -> f64 {
        if s == 0.0 {
            return self.value(m);
        }
        self.pieces
            .iter()
            .map(|(i, c)| c * i.probability(noise, m, s))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub u_k: f64,
    pub function: usize,
    pub expectation_k: f64,
    pub expectation: f64,
    pub gap: f64,
    pub tv: f64,
    /// `M · tv`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub entries: Vec<ProbeEntry>,
    /// Indices into `entries` whose gap exceeds the bound by more than the slack.
    pub violations: Vec<usize>,
    /// Functions whose gaps do not shrink along the sequence.
    pub non_convergent: Vec<usize>,
}

impl ProbeReport {
    pub fn bound_holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn discontinuity_suspected(&self) -> bool {
        !self.non_convergent.is_empty()
    }

    /// Gaps of one function in sequence order.
    pub fn gaps(&self, function: usize) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.function == function)
            .map(|e| e.gap)
            .collect()
    }
}

/// Probes `u_k → u` for every step function in `family`.
///
/// The kernel's noise floor is not enforced here, so degenerate kernels
/// (`σ = 0` somewhere) can be examined; the solver path rejects them.
/// The sequence is expected to approach `u`. A function is reported
/// non-convergent when its last gap is still above 1e-6 and either a
/// halving of `|u_k − u|` among the last three steps raised the gap by
/// more than 10%, or the last gap is at least half the largest one.
pub fn setwise_continuity_probe(
    kernel: &AdditiveNoise,
    t: usize,
    x: f64,
    u: f64,
    u_seq: &[f64],
    family: &[StepFunction],
    bound: f64,
    panels: usize,
) -> Result<ProbeReport> {
    for v in family {
        let sup = v.sup_abs();
        if sup > bound * (1.0 + 1e-12) {
            let x_bad = v
                .pieces
                .iter()
                .map(|(i, _)| if i.lo.is_finite() { i.lo } else { i.hi })
                .find(|&p| v.value(p).abs() == sup)
                .unwrap_or(f64::NAN);
            return Err(Error::Unbounded {
                bound,
                x: x_bad,
                value: sup,
            });
        }
    }
    let law = |v: f64| -> Result<(f64, f64)> {
        let s = kernel.scale(t, x, v);
        let m = kernel.mean(t, x, v);
        if !(s >= 0.0) || !m.is_finite() {
            return Err(Error::Kernel(format!("invalid law at t={t}, x={x}, u={v}: mean {m}, scale {s}")));
        }
        Ok((m, s))
    };
    let base = law(u)?;
    let base_e: Vec<f64> = family.iter().map(|v| v.expectation(kernel.noise, base.0, base.1)).collect();

    let mut entries = Vec::with_capacity(u_seq.len() * family.len());
    let mut violations = Vec::new();
    for &uk in u_seq {
        let lk = law(uk)?;
        let tv = l1_between(kernel.noise, lk, base, panels);
        for (f, v) in family.iter().enumerate() {
            let ek = v.expectation(kernel.noise, lk.0, lk.1);
            let gap = (ek - base_e[f]).abs();
            if gap > bound * tv + PROBE_SLACK {
                violations.push(entries.len());
            }
            entries.push(ProbeEntry {
                u_k: uk,
                function: f,
                expectation_k: ek,
                expectation: base_e[f],
                gap,
                tv,
                bound: bound * tv,
            });
        }
    }

    let non_convergent = (0..family.len())
        .filter(|&f| {
            let seq: Vec<(f64, f64)> = entries
                .iter()
                .filter(|e| e.function == f)
                .map(|e| ((e.u_k - u).abs(), e.gap))
                .collect();
            fails_to_shrink(&seq)
        })
        .collect();

    Ok(ProbeReport {
        entries,
        violations,
        non_convergent,
    })
}

/// `(distance, gap)` pairs in sequence order.
fn fails_to_shrink(seq: &[(f64, f64)]) -> bool {
    let Some(&(_, last)) = seq.last() else {
        return false;
    };
    if last <= CONVERGED_GAP {
        return false;
    }
    let largest = seq.iter().map(|p| p.1).fold(0.0, f64::max);
    let tail_start = seq.len().saturating_sub(4);
    let halving_broken = seq[tail_start..].windows(2).any(|w| {
        let ((d0, g0), (d1, g1)) = (w[0], w[1]);
        d1 <= 0.55 * d0 && g1 > 1.1 * g0 + 1e-12
    });
    halving_broken || last >= 0.5 * largest
}
