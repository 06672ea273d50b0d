//! Discretized mixture likelihoods, rates and fixed-point CDF tables.

use std::sync::OnceLock;

use crate::autodiff::{Graph, NodeId};
use crate::context_model::GmmParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest probability any symbol is assigned when computing rates.
pub const MASS_FLOOR: f64 = 1.0 / 65536.0;
/// Symbol support of both latents.
pub const SUPPORT_MIN: i32 = -255;
pub const SUPPORT_MAX: i32 = 255;
pub const CDF_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_BITS;
pub const MAX_SYMBOLS: usize = 1 << 14;
/// Table windows reach this many scales past the outermost component mean.
const WINDOW_SIGMAS: f64 = 10.0;

/// Mass of the unit bin around `v` under a normal `(mu, sigma)`, computed on
/// the tail that keeps the difference well conditioned.
pub fn gaussian_bin(v: f64, mu: f64, sigma: f64) -> f64 {
    let hi = (v + 0.5 - mu) / sigma;
    let lo = (v - 0.5 - mu) / sigma;
    if lo > 0.0 {
        (-lo).normal_cdf() - (-hi).normal_cdf()
    } else {
        hi.normal_cdf() - lo.normal_cdf()
    }
}

/// Unfloored mixture mass of the bin around `v`.
pub fn gmm_bin<S: Scalar>(v: f64, pi: &[S], mu: &[S], sigma: &[S]) -> f64 {
    let mut m = 0.0;
    for k in 0..pi.len() {
        m += pi[k].as_f64() * gaussian_bin(v, mu[k].as_f64(), sigma[k].as_f64());
    }
    m
}

/// Mixture mass of symbol `v`, floored at [`MASS_FLOOR`].
pub fn gmm_mass<S: Scalar>(v: f64, pi: &[S], mu: &[S], sigma: &[S]) -> f64 {
    gmm_bin(v, pi, mu, sigma).max(MASS_FLOOR)
}

/// `-Σ log2 mass(v_i)` over elements in parameter order.
pub fn rate_bits<S: Scalar>(symbols: &[S], params: &GmmParams<S>) -> Result<f64> {
    if symbols.len() != params.len() {
        return Err(Error::shape(
            "rate_bits",
            format!("{} symbols for {} parameter sets", symbols.len(), params.len()),
        ));
    }
    let mut bits = 0.0;
    for (i, &v) in symbols.iter().enumerate() {
        let (pi, mu, sigma) = params.element(i);
        bits -= gmm_mass(v.as_f64(), pi, mu, sigma).log2();
    }
    Ok(bits)
}

/// Per-channel Gaussian prior of the hyper-latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior<S> {
    pub mean: Vec<S>,
    pub scale: Vec<S>,
}

impl<S: Scalar> FactorizedPrior<S> {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, z: &Tensor<S>) -> Result<usize> {
        if z.rank() != 3 || z.shape()[0] != self.channels() {
            return Err(Error::shape(
                "factorized prior",
                format!("latent {:?} for {} channels", z.shape(), self.channels()),
            ));
        }
        Ok(z.shape()[1] * z.shape()[2])
    }

    /// Pmf of every element of channel `c`.
    pub fn pmf(&self, c: usize) -> DiscretizedPmf {
        DiscretizedPmf::gmm(&[S::one()], &[self.mean[c]], &[self.scale[c]])
    }
}

/// Rate of `z` (`(C, H, W)`) under the per-channel prior.
pub fn factorized_rate<S: Scalar>(z: &Tensor<S>, prior: &FactorizedPrior<S>) -> Result<f64> {
    let per = prior.check(z)?;
    let mut bits = 0.0;
    for (i, &v) in z.data().iter().enumerate() {
        let c = i / per.max(1);
        let m = gaussian_bin(v.as_f64(), prior.mean[c].as_f64(), prior.scale[c].as_f64());
        bits -= m.max(MASS_FLOOR).log2();
    }
    Ok(bits)
}

/// Probability masses over a contiguous integer window plus the mass of
/// everything outside it.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedPmf {
    pub lo: i32,
    pub masses: Vec<f64>,
    pub tail: f64,
}

impl DiscretizedPmf {
    /// Window around the mixture, clipped to the symbol support.
    pub fn gmm<S: Scalar>(pi: &[S], mu: &[S], sigma: &[S]) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..pi.len() {
            let (m, s) = (mu[k].as_f64(), sigma[k].as_f64());
            lo = lo.min((m - WINDOW_SIGMAS * s).floor());
            hi = hi.max((m + WINDOW_SIGMAS * s).ceil());
        }
        let (smin, smax) = (f64::from(SUPPORT_MIN), f64::from(SUPPORT_MAX));
        let lo = lo.clamp(smin, smax) as i32;
        let hi = hi.clamp(smin, smax) as i32;
        let mut masses = vec![0.0; (hi - lo + 1) as usize];
        for k in 0..pi.len() {
            let (w, m, s) = (pi[k].as_f64(), mu[k].as_f64(), sigma[k].as_f64());
            let mut prev = Tail::at((f64::from(lo) - 0.5 - m) / s);
            for (i, mass) in masses.iter_mut().enumerate() {
                let next = Tail::at((f64::from(lo) + i as f64 + 0.5 - m) / s);
                *mass += w * Tail::bin(prev, next);
                prev = next;
            }
        }
        let inside: f64 = masses.iter().sum();
        Self {
            lo,
            masses,
            tail: (1.0 - inside).max(0.0),
        }
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.masses.len() as i32 - 1
    }

    /// Whether the window leaves part of the support uncovered.
    pub fn needs_escape(&self) -> bool {
        self.lo > SUPPORT_MIN || self.hi() < SUPPORT_MAX
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.tail
    }
}

/// Normal CDF at a bin edge, kept on the tail away from the mean.
#[derive(Clone, Copy)]
struct Tail {
    upper: bool,
    /// `Φ(t)` on the lower side, `1 − Φ(t)` on the upper side.
    p: f64,
}

impl Tail {
    /// Beyond this many scales the tail is taken as zero.
    const SATURATE: f64 = 12.0;

    fn at(t: f64) -> Self {
        let upper = t > 0.0;
        let a = t.abs();
        let p = if a > Self::SATURATE { 0.0 } else { (-a).normal_cdf() };
        Self { upper, p }
    }

    /// Mass between consecutive edges, as [`gaussian_bin`] evaluates it.
    fn bin(lo: Self, hi: Self) -> f64 {
        if lo.upper {
            lo.p - hi.p
        } else {
            let top = if hi.upper { 1.0 - hi.p } else { hi.p };
            top - lo.p
        }
    }
}

/// Quantized cumulative counts. `cum[i]` is the running total up to and
/// including symbol `i`; the last entry is `2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub lo: i32,
    pub cum: Vec<u32>,
    /// The last entry stands for every value outside the window.
    pub escape: bool,
}

impl CdfTable {
    pub fn n_symbols(&self) -> usize {
        self.cum.len()
    }

    /// Number of regular (non-escape) symbols.
    pub fn regular(&self) -> usize {
        self.cum.len() - usize::from(self.escape)
    }

    /// `(start, freq)` of entry `i`.
    #[inline]
    pub fn range(&self, i: usize) -> (u32, u32) {
        let start = if i == 0 { 0 } else { self.cum[i - 1] };
        (start, self.cum[i] - start)
    }

    /// Entry whose range contains `target`.
    #[inline]
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target)
    }

    /// Coded cost of value `v` in bits.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let total = f64::from(CDF_TOTAL);
        let off = v - self.lo;
        if off >= 0 && (off as usize) < self.regular() {
            return -(f64::from(self.range(off as usize).1) / total).log2();
        }
        let esc = -(f64::from(self.range(self.n_symbols() - 1).1) / total).log2();
        esc - (f64::from(escape_table().range(0).1) / total).log2()
    }
}

/// Integer counts summing to `2^16`, at least one per symbol, each within one
/// count of `1 + p_i·(2^16 − n)`.
pub fn quantize_masses(masses: &[f64]) -> Result<Vec<u32>> {
    let n = masses.len();
    if n == 0 || n > MAX_SYMBOLS {
        return Err(Error::SupportTooLarge(n));
    }
    let total: f64 = masses.iter().map(|m| m.max(0.0)).sum();
    let spare = f64::from(CDF_TOTAL) - n as f64;
    let targets: Vec<f64> = masses
        .iter()
        .map(|&m| {
            let p = if total > 0.0 { m.max(0.0) / total } else { 1.0 / n as f64 };
            1.0 + p * spare
        })
        .collect();
    let mut counts: Vec<u32> = targets.iter().map(|t| t.floor() as u32).collect();
    let assigned: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    // each floor loses less than one count, so fewer than `n` remain
    let left = u64::from(CDF_TOTAL).saturating_sub(assigned) as usize;
    if left > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        // largest fractional part first, ties to the lower index
        let frac: Vec<f64> = targets.iter().map(|t| t - t.floor()).collect();
        let by_remainder = |&a: &usize, &b: &usize| frac[b].total_cmp(&frac[a]).then(a.cmp(&b));
        if left < n {
            order.select_nth_unstable_by(left - 1, by_remainder);
        }
        for &i in &order[..left.min(n)] {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

fn cumulative(counts: &[u32]) -> Vec<u32> {
    let mut acc = 0;
    counts
        .iter()
        .map(|&c| {
            acc += c;
            acc
        })
        .collect()
}

/// Table for a pmf; an escape entry is appended when the window does not
/// cover the whole support.
pub fn quantize_cdf(pmf: &DiscretizedPmf) -> Result<CdfTable> {
    let escape = pmf.needs_escape();
    let mut masses = pmf.masses.clone();
    if escape {
        masses.push(pmf.tail);
    }
    let counts = quantize_masses(&masses)?;
    Ok(CdfTable {
        lo: pmf.lo,
        cum: cumulative(&counts),
        escape,
    })
}

/// Uniform table over the whole support, used after an escape.
pub fn escape_table() -> &'static CdfTable {
    static T: OnceLock<CdfTable> = OnceLock::new();
    T.get_or_init(|| {
        let n = (SUPPORT_MAX - SUPPORT_MIN + 1) as usize;
        let counts = quantize_masses(&vec![1.0; n]).expect("support fits the coder");
        CdfTable {
            lo: SUPPORT_MIN,
            cum: cumulative(&counts),
            escape: false,
        }
    })
}

/// Rate graph for values `v` `(n, k_m)` (each row repeats one symbol) under
/// mixture parameters of the same shape. Returns a scalar node in bits.
pub fn gmm_rate_node<S: Scalar>(
    g: &mut Graph<S>,
    v: NodeId,
    pi: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> Result<NodeId> {
    let up = g.add_scalar(v, S::of(0.5));
    let dn = g.add_scalar(v, S::of(-0.5));
    let up = g.sub(up, mu)?;
    let dn = g.sub(dn, mu)?;
    let up = g.div(up, sigma)?;
    let dn = g.div(dn, sigma)?;
    let up = g.normal_cdf(up);
    let dn = g.normal_cdf(dn);
    let bin = g.sub(up, dn)?;
    let w = g.mul(pi, bin)?;
    let mass = g.sum_last_axis(w)?;
    let mass = g.clamp_min(mass, S::of(MASS_FLOOR));
    let l = g.ln(mass);
    let s = g.sum(l);
    Ok(g.mul_scalar(s, S::of(-std::f64::consts::LOG2_E)))
}

/// Rate graph of a `(C, H, W)` hyper-latent node under the prior.
pub fn factorized_rate_node<S: Scalar>(
    g: &mut Graph<S>,
    z: NodeId,
    prior: &FactorizedPrior<S>,
) -> Result<NodeId> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 3 || shape[0] != prior.channels() {
        return Err(Error::shape("factorized prior", format!("latent {shape:?}")));
    }
    let per = shape[1] * shape[2];
    let n = shape[0] * per;
    let flat = g.reshape(z, vec![n, 1])?;
    let mu = g.constant(Tensor::from_fn(vec![n, 1], |i| prior.mean[i / per]));
    let sg = g.constant(Tensor::from_fn(vec![n, 1], |i| prior.scale[i / per]));
    let pi = g.constant(Tensor::filled(vec![n, 1], S::one()));
    gmm_rate_node(g, flat, pi, mu, sg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_bin_at_zero() {
        let m = gmm_mass(0.0, &[1.0f64], &[0.0], &[1.0]);
        assert!((m - 0.382_924_922_548_026).abs() < 1e-12);
    }

    #[test]
    fn mass_is_symmetric_and_sums_to_one() {
        let (pi, mu, sg) = ([0.2f64, 0.5, 0.3], [0.0; 3], [0.7, 1.0, 3.0]);
        for v in 0..10 {
            let a = gmm_mass(f64::from(v), &pi, &mu, &sg);
            let b = gmm_mass(-f64::from(v), &pi, &mu, &sg);
            assert!((a - b).abs() < 1e-15);
        }
        let s: f64 = (-20..=20).map(|v| gmm_mass(f64::from(v), &[1.0f64], &[0.0], &[1.0])).sum();
        assert!(s >= 1.0 - 1e-6);
    }

    #[test]
    fn half_mass_is_one_bit() {
        // a bin holding exactly half the mass: mean on a bin edge, tiny scale
        let p = GmmParams::constant(1, &[1.0f64], &[0.5], &[1e-4]);
        let r = rate_bits(&[0.0], &p).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_four_symbol_table() {
        let c = quantize_masses(&[0.25; 4]).unwrap();
        assert_eq!(cumulative(&c), vec![16384, 32768, 49152, 65536]);
    }

    #[test]
    fn degenerate_pmf_keeps_every_symbol() {
        let mut m = vec![0.0; 50];
        m[7] = 1.0;
        let c = quantize_masses(&m).unwrap();
        assert!(c.iter().all(|&x| x >= 1));
        assert_eq!(c.iter().sum::<u32>(), CDF_TOTAL);
        assert!(quantize_masses(&vec![1.0; MAX_SYMBOLS + 1]).is_err());
    }

    #[test]
    fn pmf_window_and_escape() {
        let p = DiscretizedPmf::gmm(&[1.0f64], &[0.0], &[1.0]);
        assert_eq!((p.lo, p.hi()), (-10, 10));
        assert!(p.needs_escape());
        assert!((p.total() - 1.0).abs() < 1e-9);
        let t = quantize_cdf(&p).unwrap();
        assert_eq!(t.n_symbols(), 22);
        let wide = DiscretizedPmf::gmm(&[1.0f64], &[0.0], &[100.0]);
        assert!(!wide.needs_escape());
    }

    #[test]
    fn factorized_rate_cases() {
        let prior = FactorizedPrior { mean: vec![0.0f64], scale: vec![1.0] };
        let z = Tensor::zeros(vec![1, 1, 1]);
        let want = -0.382_924_922_548_026f64.log2();
        assert!((factorized_rate(&z, &prior).unwrap() - want).abs() < 1e-12);
        let empty = Tensor::<f64>::zeros(vec![1, 0, 3]);
        assert_eq!(factorized_rate(&empty, &prior).unwrap(), 0.0);
    }
}
