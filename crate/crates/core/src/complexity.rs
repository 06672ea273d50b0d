//! Analytic multiply-accumulate counts of the context model.
//!
//! One MAC per scalar product term; a dense layer costs `in·out`; softmax,
//! normalization and activations cost nothing. All counts are exact
//! rationals (overlapping windows give fractional per-token multiplicities).

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::context_model::ContextModelConfig;
use crate::error::{Error, Result};
use crate::scheduler::CodingSchedule;

pub type Macs = Ratio<u128>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Every step recomputes all full-width planes decoded so far.
    Naive,
    /// Every step recomputes all half-width group planes decoded so far.
    Egr,
    /// As `Egr`, with the first group taken from the hyperprior.
    EgrSfg,
    /// One masked pass over all planes.
    SinglePass,
    /// Stepwise decoding with cached keys and values.
    Cached,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Naive, Mode::Egr, Mode::EgrSfg, Mode::SinglePass, Mode::Cached];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Egr => "egr",
            Mode::EgrSfg => "egr_sfg",
            Mode::SinglePass => "single_pass",
            Mode::Cached => "cached",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacQuery {
    /// Image height and width in pixels.
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Window stride in latent rows.
    pub s: usize,
    pub n_cs: usize,
    pub d_e: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub layers: usize,
    pub k_m: usize,
    pub m: usize,
    pub mode: Mode,
}

impl MacQuery {
    pub fn from_config(cfg: &ContextModelConfig, h: usize, w: usize, mode: Mode) -> Self {
        Self {
            h,
            w,
            k: cfg.k,
            s: cfg.k,
            n_cs: cfg.n_cs,
            d_e: cfg.d_e,
            d_mlp: cfg.d_mlp,
            heads: cfg.heads,
            layers: cfg.layers,
            k_m: cfg.k_m,
            m: cfg.m,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("H", self.h),
            ("W", self.w),
            ("K", self.k),
            ("s", self.s),
            ("N_cs", self.n_cs),
            ("d_e", self.d_e),
            ("h", self.heads),
            ("k_m", self.k_m),
            ("M", self.m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.s > self.k {
            return Err(Error::Config(format!("stride {} exceeds window {}", self.s, self.k)));
        }
        Ok(())
    }

    fn head_config(&self) -> ContextModelConfig {
        ContextModelConfig {
            m: self.m,
            n_cs: self.n_cs,
            d_e: self.d_e,
            d_mlp: self.d_mlp,
            heads: self.heads,
            k: self.k,
            layers: self.layers,
            k_m: self.k_m,
        }
    }
}

/// Attention cost of one layer: `N_win(2N²d_e + 4N·d_e²)` with
/// `N_win = H·W·N_cs / (256 s²)` and `N = K²N_cs`.
pub fn attention_macs(q: &MacQuery) -> Result<Macs> {
    q.validate()?;
    let (k, s, n_cs, d) = (q.k as u128, q.s as u128, q.n_cs as u128, q.d_e as u128);
    let n_win = Ratio::new((q.h * q.w) as u128 * n_cs, 256 * s * s);
    let n = k * k * n_cs;
    Ok(n_win * (2 * n * n * d + 4 * n * d * d))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub mode: Mode,
    pub h: usize,
    pub w: usize,
    pub embedding: Macs,
    /// Query, key, value and output projections.
    pub projections: Macs,
    /// Scores and weighted sums.
    pub attention: Macs,
    pub mlp: Macs,
    pub head: Macs,
    pub total: Macs,
}

impl MacReport {
    pub fn kmac_per_px(&self) -> f64 {
        ratio_f64(&self.total) / (self.h * self.w) as f64 / 1000.0
    }

    pub const CSV_HEADER: &'static str = "mode,height,width,embedding,projections,attention,mlp,head,total,kmac_per_px";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.4}",
            self.mode,
            self.h,
            self.w,
            self.embedding,
            self.projections,
            self.attention,
            self.mlp,
            self.head,
            self.total,
            self.kmac_per_px()
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Corrupt(format!("report row has {} fields", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Corrupt(format!("`{s}`: {e}")));
        let mac = |s: &str| s.parse::<Macs>().map_err(|e| Error::Corrupt(format!("`{s}`: {e}")));
        let r = Self {
            mode: f[0].parse()?,
            h: int(f[1])?,
            w: int(f[2])?,
            embedding: mac(f[3])?,
            projections: mac(f[4])?,
            attention: mac(f[5])?,
            mlp: mac(f[6])?,
            head: mac(f[7])?,
            total: mac(f[8])?,
        };
        if r.total != r.embedding + r.projections + r.attention + r.mlp + r.head {
            return Err(Error::Corrupt("report total differs from its components".into()));
        }
        Ok(r)
    }
}

pub fn ratio_f64(r: &Macs) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Work of one pass in which `queries` planes issue queries, `kv` planes are
/// embedded and projected, and `pairs` query-key products are scored.
#[derive(Default)]
struct Work {
    queries: Macs,
    kv: Macs,
    pairs: Macs,
}

/// Whole-model MACs under `q.mode`.
///
/// A "plane" is one coding group on the rearranged half-width grid, holding
/// `P = H_l·W_l/2` tokens; a window spans `K × K/2` tokens of each plane.
pub fn model_macs(q: &MacQuery) -> Result<MacReport> {
    q.validate()?;
    if q.h % 16 != 0 || q.w % 32 != 0 {
        return Err(Error::Config(format!(
            "{}×{} image does not give an even-width latent",
            q.h, q.w
        )));
    }
    if q.k % 2 != 0 {
        return Err(Error::Config(format!("K={} must be even", q.k)));
    }
    if q.d_e % q.heads != 0 {
        return Err(Error::Config(format!("d_e={} not divisible by h={}", q.d_e, q.heads)));
    }
    if q.m % q.n_cs != 0 {
        return Err(Error::Config(format!("M={} not divisible by N_cs={}", q.m, q.n_cs)));
    }
    let one = |v: usize| Macs::from_integer(v as u128);
    let g_total = 2 * q.n_cs;
    let p = one((q.h / 16) * (q.w / 32));
    let nw = one(q.k * q.k / 2);
    // Each token lies in (K/s)² overlapping windows.
    let overlap = Ratio::new((q.k * q.k) as u128, (q.s * q.s) as u128);

    // A pass over `n` planes in which every token queries its whole window.
    let full = |n: usize| Work {
        queries: p * one(n),
        kv: p * one(n),
        pairs: p * one(n) * one(n) * nw,
    };
    let sum = |steps: &mut dyn Iterator<Item = Work>| {
        steps.fold(Work::default(), |a, b| Work {
            queries: a.queries + b.queries,
            kv: a.kv + b.kv,
            pairs: a.pairs + b.pairs,
        })
    };
    let work = match q.mode {
        Mode::Naive => sum(&mut (0..g_total).map(|g| full(2 * (g / 2 + 1)))),
        Mode::Egr => sum(&mut (0..g_total).map(|g| full(g + 1))),
        Mode::EgrSfg => sum(&mut (1..g_total).map(full)),
        Mode::SinglePass => Work {
            queries: p * one(g_total - 1),
            kv: p * one(g_total),
            pairs: p * one(g_total - 1) * one(g_total) * nw,
        },
        Mode::Cached => Work {
            queries: p * one(g_total - 1),
            kv: p * one(g_total - 1),
            pairs: (1..g_total).map(|g| p * one(g) * nw).sum(),
        },
    };

    let (d, l) = (one(q.d_e), one(q.layers));
    let p_cs = one(q.m / q.n_cs);
    let embedding = work.kv * p_cs * d;
    let projections = (work.queries + work.kv) * one(2) * d * d * l * overlap;
    let attention = work.pairs * one(2) * d * l * overlap;
    let mlp = work.queries * one(2) * d * one(q.d_mlp) * l * overlap;
    let cfg = q.head_config();
    let per_token = (cfg.d1() * cfg.hidden1() + cfg.hidden1() * cfg.hidden2() + cfg.hidden2() * cfg.d2()) as u128;
    let head = p * one(g_total) * Macs::from_integer(per_token);
    Ok(MacReport {
        mode: q.mode,
        h: q.h,
        w: q.w,
        total: embedding + projections + attention + mlp + head,
        embedding,
        projections,
        attention,
        mlp,
        head,
    })
}

/// Sequential context-model steps of a full decode.
pub fn count_ar_steps(sched: &CodingSchedule) -> usize {
    2 * sched.n_cs() - usize::from(sched.sfg())
}

/// Fraction of steps removed by taking the first group from the hyperprior.
pub fn sfg_step_reduction(n_cs: usize) -> Ratio<usize> {
    Ratio::new(1, 2 * n_cs)
}
