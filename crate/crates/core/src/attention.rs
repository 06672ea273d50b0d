//! Window and shifted-window spatio-channel attention.
//!
//! Windows are `K` rows by `K/2` columns of the rearranged grid and span all
//! group planes, so a window holds `N_cs·K²` token slots. Slots are numbered
//! group-major: `(g·K + du)·K/2 + dx`. Shifted windows use a tiling displaced
//! by `(K/2, K/4)`; slots falling outside the grid are padding.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_e: usize,
    pub heads: usize,
    /// Spatial kernel size `K` (even).
    pub k: usize,
    pub n_cs: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_e == 0 || self.d_e % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_e={} is not divisible into {} heads",
                self.d_e, self.heads
            )));
        }
        if self.k < 2 || self.k % 2 != 0 {
            return Err(Error::Config(format!("K={} must be even and >= 2", self.k)));
        }
        if self.n_cs == 0 {
            return Err(Error::Config("n_cs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_e / self.heads
    }

    pub fn planes(&self) -> usize {
        2 * self.n_cs
    }

    /// Tokens per window, `N = N_cs·K²`.
    pub fn seq_len(&self) -> usize {
        self.n_cs * self.k * self.k
    }

    /// Window extent `(rows, cols)` on the rearranged grid.
    pub fn window(&self) -> (usize, usize) {
        (self.k, self.k / 2)
    }

    pub fn shift(&self) -> (usize, usize) {
        (self.k / 2, self.k / 4)
    }

    pub fn scale<S: Scalar>(&self) -> S {
        S::of(1.0 / (self.d_k() as f64).sqrt())
    }

    /// Per-head relative bias extents over `(Δu, Δx, Δg)`.
    pub fn bias_extents(&self) -> [usize; 3] {
        [2 * self.k - 1, self.k - 1, 4 * self.n_cs - 1]
    }

    pub fn bias_len(&self) -> usize {
        self.bias_extents().iter().product()
    }

    /// Offset into one head's bias table for query-minus-key displacements.
    #[inline]
    pub fn rel_index(&self, du: isize, dx: isize, dg: isize) -> usize {
        let [_, ex, eg] = self.bias_extents();
        let a = (du + self.k as isize - 1) as usize;
        let b = (dx + (self.k / 2) as isize - 1) as usize;
        let c = (dg + (2 * self.n_cs) as isize - 1) as usize;
        (a * ex + b) * eg + c
    }
}

/// Window tiling of a `(planes, h, w)` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    kh: usize,
    kw: usize,
    su: usize,
    sw: usize,
    rows: usize,
    cols: usize,
}

impl WindowGrid {
    pub fn new(cfg: &AttentionConfig, planes: usize, h: usize, w: usize, shifted: bool) -> Self {
        let (kh, kw) = cfg.window();
        let (su, sw) = if shifted { cfg.shift() } else { (0, 0) };
        Self {
            planes,
            h,
            w,
            kh,
            kw,
            su,
            sw,
            rows: (h + su).div_ceil(kh),
            cols: (w + sw).div_ceil(kw),
        }
    }

    pub fn n_windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn seq_len(&self) -> usize {
        self.planes * self.kh * self.kw
    }

    pub fn slots_per_plane(&self) -> usize {
        self.kh * self.kw
    }

    /// Window containing grid cell `(u, x)` and the cell's offset inside it.
    #[inline]
    pub fn locate(&self, u: usize, x: usize) -> (usize, usize, usize) {
        let (uu, xx) = (u + self.su, x + self.sw);
        ((uu / self.kh) * self.cols + xx / self.kw, uu % self.kh, xx % self.kw)
    }

    #[inline]
    pub fn slot(&self, g: usize, du: usize, dx: usize) -> usize {
        (g * self.kh + du) * self.kw + dx
    }

    /// Grid position `(g, u, x)` of a slot, or `None` for padding.
    pub fn position(&self, window: usize, slot: usize) -> Option<(usize, usize, usize)> {
        let (wr, wc) = (window / self.cols, window % self.cols);
        let g = slot / (self.kh * self.kw);
        let du = (slot / self.kw) % self.kh;
        let dx = slot % self.kw;
        let u = (wr * self.kh + du).checked_sub(self.su)?;
        let x = (wc * self.kw + dx).checked_sub(self.sw)?;
        (u < self.h && x < self.w).then_some((g, u, x))
    }

    /// Real slots of a window in slot order, with their grid positions.
    pub fn members(&self, window: usize) -> Vec<(usize, (usize, usize, usize))> {
        (0..self.seq_len())
            .filter_map(|s| self.position(window, s).map(|p| (s, p)))
            .collect()
    }
}

/// Tokens gathered into windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<S> {
    /// `(n_windows, seq_len, d)`; padding slots hold zeros.
    pub tokens: Tensor<S>,
    /// Group plane of every slot.
    pub groups: Vec<usize>,
    /// Padding flag per `(window, slot)`.
    pub pad: Vec<bool>,
    pub grid: WindowGrid,
}

impl<S: Scalar> WindowBatch<S> {
    pub fn n_windows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    fn row(&self, win: usize, slot: usize) -> &[S] {
        let d = self.dim();
        let i = (win * self.seq_len() + slot) * d;
        &self.tokens.data()[i..i + d]
    }

    fn with_tokens(&self, tokens: Tensor<S>) -> Self {
        Self {
            tokens,
            groups: self.groups.clone(),
            pad: self.pad.clone(),
            grid: self.grid,
        }
    }
}

/// Splits a `(planes, h, w, d)` token grid into windows.
pub fn window_partition<S: Scalar>(
    x: &Tensor<S>,
    cfg: &AttentionConfig,
    shifted: bool,
) -> Result<WindowBatch<S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("window_partition", format!("expected rank 4, got {s:?}")));
    }
    let grid = WindowGrid::new(cfg, s[0], s[1], s[2], shifted);
    let d = s[3];
    let (nw, seq) = (grid.n_windows(), grid.seq_len());
    let mut tokens = vec![S::zero(); nw * seq * d];
    let mut pad = vec![true; nw * seq];
    for win in 0..nw {
        for (slot, (g, u, xx)) in grid.members(win) {
            let src = ((g * grid.h + u) * grid.w + xx) * d;
            let dst = (win * seq + slot) * d;
            tokens[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            pad[win * seq + slot] = false;
        }
    }
    Ok(WindowBatch {
        tokens: Tensor::new(vec![nw, seq, d], tokens)?,
        groups: (0..seq).map(|s| s / grid.slots_per_plane()).collect(),
        pad,
        grid,
    })
}

/// Inverse of [`window_partition`]; padding slots are dropped.
pub fn window_merge<S: Scalar>(b: &WindowBatch<S>) -> Tensor<S> {
    let g = b.grid;
    let d = b.dim();
    let mut out = Tensor::zeros(vec![g.planes, g.h, g.w, d]);
    for win in 0..g.n_windows() {
        for (slot, (p, u, x)) in g.members(win) {
            let dst = ((p * g.h + u) * g.w + x) * d;
            out.data_mut()[dst..dst + d].copy_from_slice(b.row(win, slot));
        }
    }
    out
}

/// Dense layer `x·W + b` with `W` stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(
                "Dense",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the layer to `rows` stacked input rows.
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let (k, n) = (self.d_in(), self.d_out());
        kernels::linear(x, self.weight.data(), self.bias.data(), x.len() / k, k, n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Norm<S> {
    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::filled(vec![d], S::one()),
            bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn apply(&self, x: &[S]) -> Vec<S> {
        kernels::layer_norm(x, self.weight.data(), self.bias.data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<S> {
    pub q: Dense<S>,
    pub k: Dense<S>,
    pub v: Dense<S>,
    pub proj: Dense<S>,
    /// `(heads, 2K−1, K−1, 4N_cs−1)`.
    pub rel_bias: Tensor<S>,
}

impl<S: Scalar> AttentionWeights<S> {
    /// Identity projections and zero bias.
    pub fn identity(cfg: &AttentionConfig) -> Self {
        let eye = |d: usize| Dense {
            weight: Tensor::from_fn(vec![d, d], |i| if i / d == i % d { S::one() } else { S::zero() }),
            bias: Tensor::zeros(vec![d]),
        };
        let mut ext = vec![cfg.heads];
        ext.extend(cfg.bias_extents());
        Self {
            q: eye(cfg.d_e),
            k: eye(cfg.d_e),
            v: eye(cfg.d_e),
            proj: eye(cfg.d_e),
            rel_bias: Tensor::zeros(ext),
        }
    }

    #[inline]
    pub fn bias(&self, cfg: &AttentionConfig, head: usize, du: isize, dx: isize, dg: isize) -> S {
        self.rel_bias.data()[head * cfg.bias_len() + cfg.rel_index(du, dx, dg)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<S> {
    pub fc1: Dense<S>,
    pub fc2: Dense<S>,
}

impl<S: Scalar> MlpWeights<S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let mut hdn = self.fc1.apply(x);
        hdn.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.fc2.apply(&hdn)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub norm1: Norm<S>,
    pub attn: AttentionWeights<S>,
    pub norm2: Norm<S>,
    pub mlp: MlpWeights<S>,
}

/// Attention of one query row over `keys`/`values` (already projected).
///
/// `logit_bias(head, j)` is added to each scaled score and `mask`, if given,
/// is added on top (0 or `-inf`). The concatenated head outputs go to `out`.
/// Both the single-pass and the cached decoder call this with keys in slot
/// order, which keeps their results bit-identical.
pub fn attend_row<S: Scalar>(
    cfg: &AttentionConfig,
    q: &[S],
    keys: &[&[S]],
    values: &[&[S]],
    logit_bias: impl Fn(usize, usize) -> S,
    mask: Option<&[S]>,
    scores: &mut Vec<S>,
    probs: &mut Vec<S>,
    out: &mut [S],
) {
    let dk = cfg.d_k();
    let scale: S = cfg.scale();
    out.iter_mut().for_each(|o| *o = S::zero());
    for hd in 0..cfg.heads {
        let r = hd * dk..(hd + 1) * dk;
        scores.clear();
        for (j, k) in keys.iter().enumerate() {
            scores.push(kernels::dot(&q[r.clone()], &k[r.clone()]) * scale + logit_bias(hd, j));
        }
        probs.clear();
        probs.resize(scores.len(), S::zero());
        kernels::softmax_row(scores, mask, probs);
        let o = &mut out[r.clone()];
        for (&p, v) in probs.iter().zip(values) {
            for (oc, &vc) in o.iter_mut().zip(&v[r.clone()]) {
                *oc = *oc + p * vc;
            }
        }
    }
}

/// Multi-head attention of `query` windows over `memory` windows.
///
/// `mask` is `(seq, seq)` or `(n_windows, seq, seq)`; padding slots of the
/// memory are masked out in addition, and padding query slots yield zeros.
pub fn multi_head_attention<S: Scalar>(
    cfg: &AttentionConfig,
    query: &WindowBatch<S>,
    memory: &WindowBatch<S>,
    w: &AttentionWeights<S>,
    mask: &Tensor<S>,
) -> Result<WindowBatch<S>> {
    cfg.validate()?;
    let (nw, seq, d) = (query.n_windows(), query.seq_len(), query.dim());
    if d != cfg.d_e || memory.tokens.shape() != query.tokens.shape() {
        return Err(Error::shape(
            "multi_head_attention",
            format!("query {:?}, memory {:?}", query.tokens.shape(), memory.tokens.shape()),
        ));
    }
    let per_window = match mask.shape() {
        [a, b] if *a == seq && *b == seq => false,
        [n, a, b] if *n == nw && *a == seq && *b == seq => true,
        other => {
            return Err(Error::shape("multi_head_attention", format!("mask {other:?}")));
        }
    };
    let mut out = vec![S::zero(); nw * seq * d];
    let mut concat = vec![S::zero(); seq * d];
    let (mut sc, mut pr) = (Vec::new(), Vec::new());
    let mut mrow = vec![S::zero(); seq];
    for win in 0..nw {
        let span = win * seq * d..(win + 1) * seq * d;
        let qs = w.q.apply(&query.tokens.data()[span.clone()]);
        let ks = w.k.apply(&memory.tokens.data()[span.clone()]);
        let vs = w.v.apply(&memory.tokens.data()[span.clone()]);
        let krows: Vec<&[S]> = ks.chunks(d).collect();
        let vrows: Vec<&[S]> = vs.chunks(d).collect();
        let pos: Vec<(isize, isize, isize)> = (0..seq)
            .map(|s| {
                let (kh, kw) = cfg.window();
                ((s / kw % kh) as isize, (s % kw) as isize, (s / (kh * kw)) as isize)
            })
            .collect();
        concat.iter_mut().for_each(|v| *v = S::zero());
        for i in 0..seq {
            if query.pad[win * seq + i] {
                continue;
            }
            let m0 = if per_window { win * seq * seq } else { 0 } + i * seq;
            for j in 0..seq {
                mrow[j] = if memory.pad[win * seq + j] {
                    S::neg_infinity()
                } else {
                    mask.data()[m0 + j]
                };
            }
            let (ui, xi, gi) = pos[i];
            attend_row(
                cfg,
                &qs[i * d..(i + 1) * d],
                &krows,
                &vrows,
                |hd, j| {
                    let (uj, xj, gj) = pos[j];
                    w.bias(cfg, hd, ui - uj, xi - xj, gi - gj)
                },
                Some(&mrow),
                &mut sc,
                &mut pr,
                &mut concat[i * d..(i + 1) * d],
            );
        }
        let projected = w.proj.apply(&concat);
        for i in 0..seq {
            if !query.pad[win * seq + i] {
                let dst = (win * seq + i) * d;
                out[dst..dst + d].copy_from_slice(&projected[i * d..(i + 1) * d]);
            }
        }
    }
    Ok(query.with_tokens(Tensor::new(vec![nw, seq, d], out)?))
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_layer<S: Scalar>(
    cfg: &AttentionConfig,
    x: &WindowBatch<S>,
    w: &LayerWeights<S>,
    mask: &Tensor<S>,
) -> Result<WindowBatch<S>> {
    let normed = x.with_tokens(Tensor::new(x.tokens.shape().to_vec(), w.norm1.apply(x.tokens.data()))?);
    let a = multi_head_attention(cfg, &normed, &normed, &w.attn, mask)?;
    let mut y: Vec<S> = x.tokens.data().iter().zip(a.tokens.data()).map(|(&p, &q)| p + q).collect();
    let m = w.mlp.apply(&w.norm2.apply(&y));
    let d = x.dim();
    for (i, (v, &mv)) in y.iter_mut().zip(&m).enumerate() {
        if !x.pad[i / d] {
            *v = *v + mv;
        }
    }
    Ok(x.with_tokens(Tensor::new(x.tokens.shape().to_vec(), y)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, n_cs: usize, d_e: usize, heads: usize) -> AttentionConfig {
        AttentionConfig { d_e, heads, k, n_cs }
    }

    #[test]
    fn single_window_when_grid_matches_kernel() {
        let c = cfg(4, 2, 4, 1);
        let x = Tensor::<f32>::from_fn(vec![4, 4, 2, 4], |i| i as f32);
        let b = window_partition(&x, &c, false).unwrap();
        assert_eq!(b.n_windows(), 1);
        assert_eq!(b.seq_len(), c.seq_len());
        assert!(b.pad.iter().all(|&p| !p));
    }

    #[test]
    fn shifted_eight_by_four_plane_gives_four_windows() {
        // an 8×8 latent becomes 8×4 planes; K=8 windows are 8×4
        let c = cfg(8, 1, 2, 1);
        let x = Tensor::<f32>::from_fn(vec![2, 8, 4, 2], |i| i as f32 + 1.0);
        let plain = window_partition(&x, &c, false).unwrap();
        assert_eq!(plain.n_windows(), 1);
        let b = window_partition(&x, &c, true).unwrap();
        assert_eq!(b.n_windows(), 4);
        // rows shift by 4, cols by 2: each window keeps a 4×2 corner per plane
        for win in 0..4 {
            let real = (0..b.seq_len()).filter(|&s| !b.pad[win * b.seq_len() + s]).count();
            assert_eq!(real, 2 * 4 * 2);
        }
        assert_eq!(window_merge(&b), x);
    }

    #[test]
    fn single_token_identity_attention_returns_value() {
        let c = cfg(2, 1, 3, 1);
        // one real token: a 1×1 grid with two planes, second plane masked out
        let x = Tensor::<f64>::new(vec![2, 1, 1, 3], vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let b = window_partition(&x, &c, false).unwrap();
        let seq = b.seq_len();
        let mut mask = Tensor::<f64>::filled(vec![seq, seq], f64::NEG_INFINITY);
        mask.data_mut()[0] = 0.0;
        let out = multi_head_attention(&c, &b, &b, &AttentionWeights::identity(&c), &mask).unwrap();
        assert_eq!(&out.tokens.data()[..3], &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn fully_masked_row_gives_zero() {
        let c = cfg(2, 1, 2, 1);
        let x = Tensor::<f64>::from_fn(vec![2, 2, 1, 2], |i| i as f64);
        let b = window_partition(&x, &c, false).unwrap();
        let seq = b.seq_len();
        let mask = Tensor::<f64>::filled(vec![seq, seq], f64::NEG_INFINITY);
        let mut w = AttentionWeights::identity(&c);
        w.proj.bias = Tensor::zeros(vec![2]);
        let out = multi_head_attention(&c, &b, &b, &w, &mask).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_token_single_head_by_hand() {
        // tokens t0 (plane 0) and t1 (plane 1), query t1 attends both
        let c = cfg(2, 1, 2, 1);
        let x = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = window_partition(&x, &c, false).unwrap();
        let seq = b.seq_len();
        let mut mask = Tensor::<f64>::zeros(vec![seq, seq]);
        let w = AttentionWeights::identity(&c);
        let out = multi_head_attention(&c, &b, &b, &w, &mask).unwrap();
        let slot1 = b.grid.slot(1, 0, 0);
        let s = 1.0 / 2f64.sqrt();
        // q = (0,2): scores 0 and 4/√2
        let (e0, e1) = (0f64.exp(), (4.0 * s).exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let got = &out.tokens.data()[slot1 * 2..slot1 * 2 + 2];
        assert!((got[0] - p0).abs() < 1e-12 && (got[1] - 2.0 * p1).abs() < 1e-12);
        mask.data_mut().iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        let out = multi_head_attention(&c, &b, &b, &w, &mask).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rel_index_covers_table() {
        let c = cfg(4, 2, 4, 1);
        let [a, b, g] = c.bias_extents();
        assert_eq!((a, b, g), (7, 3, 7));
        assert_eq!(c.rel_index(-3, -1, -3), 0);
        assert_eq!(c.rel_index(3, 1, 3), c.bias_len() - 1);
    }
}
