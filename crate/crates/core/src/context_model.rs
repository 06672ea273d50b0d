//! The context model: token embedding, window attention layers and the
//! entropy-parameters head.
//!
//! Keys and values come from the embedded latent tokens. Queries come from a
//! separate stream that starts at a learned per-group vector and never sees
//! the value of its own token, so a token's parameters depend only on tokens
//! of strictly earlier groups. Each layer updates the query stream with
//! `h += proj(Attn(LN1(h), LN_kv(E)))` and `h += MLP(LN2(h))`.
//!
//! Two evaluation paths share the same row kernels and produce identical
//! parameters: [`ContextModel::forward_masked`] evaluates every group in one
//! masked pass, [`DecodeSession`] evaluates one group at a time against cached
//! keys and values.

use crate::attention::{
    attend_row, AttentionConfig, AttentionWeights, Dense, MlpWeights, Norm, WindowGrid,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::scheduler::{egr_column, egr_rearrange, CodingSchedule, MaskRule};
use crate::tensor::Tensor;
use crate::weights::{init_dense, init_norm, uniform, WeightStore};

pub const SIGMA_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextModelConfig {
    /// Latent channels `M`.
    pub m: usize,
    pub n_cs: usize,
    pub d_e: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub k: usize,
    pub layers: usize,
    pub k_m: usize,
}

impl ContextModelConfig {
    /// Full-size configuration.
    pub fn full() -> Self {
        Self {
            m: 192,
            n_cs: 4,
            d_e: 384,
            d_mlp: 1536,
            heads: 12,
            k: 8,
            layers: 8,
            k_m: 3,
        }
    }

    /// Small configuration used by tests and quick runs.
    pub fn desk() -> Self {
        Self {
            m: 16,
            n_cs: 4,
            d_e: 16,
            d_mlp: 32,
            heads: 2,
            k: 4,
            layers: 2,
            k_m: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cs == 0 || self.m == 0 || self.m % self.n_cs != 0 {
            return Err(Error::Config(format!(
                "M={} must be a positive multiple of n_cs={}",
                self.m, self.n_cs
            )));
        }
        if self.k_m == 0 || self.d_mlp == 0 {
            return Err(Error::Config("k_m and d_mlp must be positive".into()));
        }
        self.attention().validate()
    }

    pub fn p_cs(&self) -> usize {
        self.m / self.n_cs
    }

    pub fn planes(&self) -> usize {
        2 * self.n_cs
    }

    /// Head input width: context vector plus hyper features.
    pub fn d1(&self) -> usize {
        2 * self.m + self.d_e
    }

    /// Head output width.
    pub fn d2(&self) -> usize {
        4 * self.k_m * self.m / self.n_cs
    }

    pub fn hidden1(&self) -> usize {
        (2 * self.d1() + self.d2()) / 3
    }

    pub fn hidden2(&self) -> usize {
        (self.d1() + 2 * self.d2()) / 3
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_e: self.d_e,
            heads: self.heads,
            k: self.k,
            n_cs: self.n_cs,
        }
    }

    /// Adds freshly initialized context-model and head tensors to `store`.
    pub fn init_weights(&self, seed: u64, store: &mut WeightStore) {
        let (d, p) = (self.d_e, self.p_cs());
        init_dense(store, seed, "ctx.embed", p, d);
        store.insert(
            "ctx.query_embed",
            uniform(seed, "ctx.query_embed", vec![self.planes(), d], 1.0),
        );
        let a = self.attention();
        for l in 0..self.layers {
            let pre = format!("ctx.layers.{l}");
            for n in ["norm1", "norm_kv", "norm2"] {
                init_norm(store, &format!("{pre}.{n}"), d);
            }
            for n in ["q", "k", "v", "proj"] {
                init_dense(store, seed, &format!("{pre}.attn.{n}"), d, d);
            }
            let mut ext = vec![self.heads];
            ext.extend(a.bias_extents());
            let name = format!("{pre}.attn.rel_bias");
            store.insert(&name, uniform(seed, &name, ext, 0.1));
            init_dense(store, seed, &format!("{pre}.mlp.fc1"), d, self.d_mlp);
            init_dense(store, seed, &format!("{pre}.mlp.fc2"), self.d_mlp, d);
        }
        init_norm(store, "ctx.norm", d);
        init_dense(store, seed, "ep.fc1", self.d1(), self.hidden1());
        init_dense(store, seed, "ep.fc2", self.hidden1(), self.hidden2());
        init_dense(store, seed, "ep.fc3", self.hidden2(), self.d2());
        // uniform mixture weights, zero means, scales log-spaced over [0.5, 64]
        let km = self.k_m * p;
        let k_m = self.k_m as f32;
        let bias = Tensor::from_fn(vec![self.d2()], |i| {
            if (2 * km..3 * km).contains(&i) {
                let k = (i % self.k_m) as f32;
                0.5f32.ln() + 128f32.ln() * (k + 0.5) / k_m
            } else {
                0.0
            }
        });
        store.insert("ep.fc3.bias", bias);
    }
}

/// Per-element Gaussian mixture parameters, `k_m` components each.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams<S> {
    pub k_m: usize,
    pub pi: Vec<S>,
    pub mu: Vec<S>,
    pub sigma: Vec<S>,
}

impl<S: Scalar> GmmParams<S> {
    pub fn new(k_m: usize) -> Self {
        Self {
            k_m,
            pi: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
        }
    }

    /// Same parameters for `n` elements.
    pub fn constant(n: usize, pi: &[S], mu: &[S], sigma: &[S]) -> Self {
        let rep = |v: &[S]| v.iter().copied().cycle().take(n * v.len()).collect();
        Self {
            k_m: pi.len(),
            pi: rep(pi),
            mu: rep(mu),
            sigma: rep(sigma),
        }
    }

    pub fn len(&self) -> usize {
        self.pi.len() / self.k_m
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn element(&self, i: usize) -> (&[S], &[S], &[S]) {
        let r = i * self.k_m..(i + 1) * self.k_m;
        (&self.pi[r.clone()], &self.mu[r.clone()], &self.sigma[r])
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let r = range.start * self.k_m..range.end * self.k_m;
        Self {
            k_m: self.k_m,
            pi: self.pi[r.clone()].to_vec(),
            mu: self.mu[r.clone()].to_vec(),
            sigma: self.sigma[r].to_vec(),
        }
    }

    pub fn append(&mut self, other: &Self) {
        self.pi.extend_from_slice(&other.pi);
        self.mu.extend_from_slice(&other.mu);
        self.sigma.extend_from_slice(&other.sigma);
    }

    /// Largest absolute difference over all parameters.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let d = |a: &[S], b: &[S]| {
            a.iter()
                .zip(b)
                .fold(0f64, |m, (&x, &y)| m.max((x - y).abs().as_f64()))
        };
        d(&self.pi, &other.pi)
            .max(d(&self.mu, &other.mu))
            .max(d(&self.sigma, &other.sigma))
    }

    /// Parses head output rows (`D2` wide) for `p_cs` channels per token.
    fn push_head_rows(&mut self, rows: &[S], d2: usize, p_cs: usize) {
        let km = self.k_m;
        for row in rows.chunks(d2) {
            for j in 0..p_cs {
                let logits = &row[j * km..(j + 1) * km];
                let mut p = vec![S::zero(); km];
                kernels::softmax_row(logits, None, &mut p);
                self.pi.extend_from_slice(&p);
                self.mu
                    .extend_from_slice(&row[(p_cs + j) * km..(p_cs + j + 1) * km]);
                for &raw in &row[(2 * p_cs + j) * km..(2 * p_cs + j + 1) * km] {
                    self.sigma.push(raw.exp().max(S::of(SIGMA_MIN)));
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextLayer<S> {
    pub norm1: Norm<S>,
    pub norm_kv: Norm<S>,
    pub norm2: Norm<S>,
    pub attn: AttentionWeights<S>,
    pub mlp: MlpWeights<S>,
}

#[derive(Clone, Debug)]
pub struct EntropyHead<S> {
    pub fc1: Dense<S>,
    pub fc2: Dense<S>,
    pub fc3: Dense<S>,
}

impl<S: Scalar> EntropyHead<S> {
    /// GMM parameters for tokens given context rows and hyper rows.
    pub fn apply(&self, cfg: &ContextModelConfig, ctx: &[S], hyper: &[S]) -> GmmParams<S> {
        let (de, h2) = (cfg.d_e, 2 * cfg.m);
        let n = hyper.len() / h2;
        let mut input = Vec::with_capacity(n * cfg.d1());
        for t in 0..n {
            input.extend_from_slice(&ctx[t * de..(t + 1) * de]);
            input.extend_from_slice(&hyper[t * h2..(t + 1) * h2]);
        }
        let mut a = self.fc1.apply(&input);
        a.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut b = self.fc2.apply(&a);
        b.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let out = self.fc3.apply(&b);
        let mut p = GmmParams::new(cfg.k_m);
        p.push_head_rows(&out, cfg.d2(), cfg.p_cs());
        p
    }

    pub fn macs(cfg: &ContextModelConfig) -> u128 {
        (cfg.d1() * cfg.hidden1() + cfg.hidden1() * cfg.hidden2() + cfg.hidden2() * cfg.d2())
            as u128
    }
}

/// Token layout of a rearranged latent: planes × rows × half-width columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub planes: usize,
    pub h: usize,
    pub wr: usize,
}

impl TokenGrid {
    pub fn for_latent(cfg: &ContextModelConfig, h: usize, w: usize) -> Result<Self> {
        if w % 2 != 0 {
            return Err(Error::shape("context model", format!("latent width {w} is odd")));
        }
        Ok(Self {
            planes: cfg.planes(),
            h,
            wr: w / 2,
        })
    }

    pub fn len(&self) -> usize {
        self.planes * self.h * self.wr
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_plane(&self) -> usize {
        self.h * self.wr
    }

    #[inline]
    pub fn token(&self, g: usize, u: usize, x: usize) -> usize {
        (g * self.h + u) * self.wr + x
    }

    #[inline]
    pub fn position(&self, t: usize) -> (usize, usize, usize) {
        (t / self.per_plane(), (t / self.wr) % self.h, t % self.wr)
    }

    pub fn window_grid(&self, a: &AttentionConfig, layer: usize) -> WindowGrid {
        WindowGrid::new(a, self.planes, self.h, self.wr, layer % 2 == 1)
    }
}

/// Flat indices into a `(2M, H, W)` hyper tensor that gather one `2M` row per
/// token through the EGR column mapping.
pub fn hyper_token_index(sched: &CodingSchedule, grid: &TokenGrid, m2: usize) -> Vec<usize> {
    let w = 2 * grid.wr;
    let mut idx = Vec::with_capacity(grid.len() * m2);
    for t in 0..grid.len() {
        let (g, u, x) = grid.position(t);
        let v = egr_column(u, x, sched.group(g).phase);
        for c in 0..m2 {
            idx.push((c * grid.h + u) * w + v);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct ContextModel<S> {
    pub cfg: ContextModelConfig,
    pub embed: Dense<S>,
    /// `(2·N_cs, d_e)` starting query per group.
    pub query_embed: Tensor<S>,
    pub layers: Vec<ContextLayer<S>>,
    pub norm: Norm<S>,
    pub head: EntropyHead<S>,
    rule: MaskRule,
}

/// Graph nodes holding per-element mixture parameters, `(n, k_m)` each.
#[derive(Clone, Copy, Debug)]
pub struct GmmNodes {
    pub pi: NodeId,
    pub mu: NodeId,
    pub sigma: NodeId,
}

struct Member {
    token: usize,
    g: usize,
    u: usize,
    x: usize,
}

impl<S: Scalar> ContextModel<S> {
    pub fn from_store(cfg: ContextModelConfig, store: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_e;
        let dense = |name: &str, i: usize, o: usize| -> Result<Dense<S>> {
            Dense::new(
                store.fetch(&format!("{name}.weight"), &[i, o])?,
                store.fetch(&format!("{name}.bias"), &[o])?,
            )
        };
        let norm = |name: &str| -> Result<Norm<S>> {
            Ok(Norm {
                weight: store.fetch(&format!("{name}.weight"), &[d])?,
                bias: store.fetch(&format!("{name}.bias"), &[d])?,
            })
        };
        let a = cfg.attention();
        let mut bias_shape = vec![cfg.heads];
        bias_shape.extend(a.bias_extents());
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = format!("ctx.layers.{l}");
            layers.push(ContextLayer {
                norm1: norm(&format!("{pre}.norm1"))?,
                norm_kv: norm(&format!("{pre}.norm_kv"))?,
                norm2: norm(&format!("{pre}.norm2"))?,
                attn: AttentionWeights {
                    q: dense(&format!("{pre}.attn.q"), d, d)?,
                    k: dense(&format!("{pre}.attn.k"), d, d)?,
                    v: dense(&format!("{pre}.attn.v"), d, d)?,
                    proj: dense(&format!("{pre}.attn.proj"), d, d)?,
                    rel_bias: store.fetch(&format!("{pre}.attn.rel_bias"), &bias_shape)?,
                },
                mlp: MlpWeights {
                    fc1: dense(&format!("{pre}.mlp.fc1"), d, cfg.d_mlp)?,
                    fc2: dense(&format!("{pre}.mlp.fc2"), cfg.d_mlp, d)?,
                },
            });
        }
        if store.names().any(|n| n == format!("ctx.layers.{}.norm1.weight", cfg.layers)) {
            return Err(Error::Mismatch(format!(
                "weights hold more than the configured {} layers",
                cfg.layers
            )));
        }
        Ok(Self {
            cfg,
            embed: dense("ctx.embed", cfg.p_cs(), d)?,
            query_embed: store.fetch("ctx.query_embed", &[cfg.planes(), d])?,
            layers,
            norm: norm("ctx.norm")?,
            head: EntropyHead {
                fc1: dense("ep.fc1", cfg.d1(), cfg.hidden1())?,
                fc2: dense("ep.fc2", cfg.hidden1(), cfg.hidden2())?,
                fc3: dense("ep.fc3", cfg.hidden2(), cfg.d2())?,
            },
            rule: MaskRule::StrictlyEarlier,
        })
    }

    /// Replaces the group mask used by the single-pass path.
    pub fn with_mask_rule(mut self, rule: MaskRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn mask_rule(&self) -> MaskRule {
        self.rule
    }

    fn check_inputs(&self, latent: &Tensor<S>, hyper: &Tensor<S>) -> Result<TokenGrid> {
        let (ls, hs) = (latent.shape(), hyper.shape());
        if ls.len() != 3 || ls[0] != self.cfg.m {
            return Err(Error::shape("context model", format!("latent {ls:?}, M={}", self.cfg.m)));
        }
        if hs != [2 * self.cfg.m, ls[1], ls[2]] {
            return Err(Error::shape(
                "context model",
                format!("hyper features {hs:?} for latent {ls:?}"),
            ));
        }
        TokenGrid::for_latent(&self.cfg, ls[1], ls[2])
    }

    fn hyper_tokens(&self, sched: &CodingSchedule, grid: &TokenGrid, hyper: &Tensor<S>) -> Vec<S> {
        hyper_token_index(sched, grid, 2 * self.cfg.m)
            .into_iter()
            .map(|i| hyper.data()[i])
            .collect()
    }

    fn check_schedule(&self, sched: &CodingSchedule) -> Result<()> {
        if sched.n_cs() != self.cfg.n_cs {
            return Err(Error::Config(format!(
                "schedule has {} segments, model {}",
                sched.n_cs(),
                self.cfg.n_cs
            )));
        }
        Ok(())
    }

    /// Parameters for every latent element in one masked pass.
    ///
    /// The result is in coding order: group by group, row-major within a
    /// group plane, channel fastest.
    pub fn forward_masked(
        &self,
        latent: &Tensor<S>,
        hyper: &Tensor<S>,
        sched: &CodingSchedule,
    ) -> Result<GmmParams<S>> {
        self.check_schedule(sched)?;
        let grid = self.check_inputs(latent, hyper)?;
        let r = egr_rearrange(latent, sched)?;
        let hyper_rows = self.hyper_tokens(sched, &grid, hyper);
        let cfg = &self.cfg;
        let a = cfg.attention();
        let d = cfg.d_e;
        let first = usize::from(sched.sfg());
        let q_tokens: Vec<usize> = (first * grid.per_plane()..grid.len()).collect();
        let nq = q_tokens.len();

        let e = self.embed.apply(r.data());
        let mut h = Vec::with_capacity(nq * d);
        for &t in &q_tokens {
            let g = grid.position(t).0;
            h.extend_from_slice(&self.query_embed.data()[g * d..(g + 1) * d]);
        }
        let (mut sc, mut pr, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for (l, layer) in self.layers.iter().enumerate() {
            let wg = grid.window_grid(&a, l);
            let members = window_members(&wg, &grid);
            let kv = layer.norm_kv.apply(&e);
            let ks = layer.attn.k.apply(&kv);
            let vs = layer.attn.v.apply(&kv);
            let qs = layer.attn.q.apply(&layer.norm1.apply(&h));
            let mut concat = vec![S::zero(); nq * d];
            for (i, &t) in q_tokens.iter().enumerate() {
                let (g, u, x) = grid.position(t);
                let mem = &members[wg.locate(u, x).0];
                let krows: Vec<&[S]> = mem.iter().map(|m| &ks[m.token * d..(m.token + 1) * d]).collect();
                let vrows: Vec<&[S]> = mem.iter().map(|m| &vs[m.token * d..(m.token + 1) * d]).collect();
                mask.clear();
                mask.extend(mem.iter().map(|m| {
                    if self.rule.allows(g, m.g) {
                        S::zero()
                    } else {
                        S::neg_infinity()
                    }
                }));
                attend_row(
                    &a,
                    &qs[i * d..(i + 1) * d],
                    &krows,
                    &vrows,
                    |hd, j| bias_between(&a, &layer.attn, hd, (g, u, x), &mem[j]),
                    Some(&mask),
                    &mut sc,
                    &mut pr,
                    &mut concat[i * d..(i + 1) * d],
                );
            }
            residual_mlp(layer, &mut h, &concat);
        }
        let ctx_q = self.norm.apply(&h);
        let mut ctx = vec![S::zero(); first * grid.per_plane() * d];
        ctx.extend_from_slice(&ctx_q);
        Ok(self.head.apply(cfg, &ctx, &hyper_rows))
    }

    /// Starts a cached decode over a latent of `h × w` elements.
    pub fn decode_session<'a>(
        &'a self,
        sched: &CodingSchedule,
        hyper: &Tensor<S>,
    ) -> Result<DecodeSession<'a, S>> {
        self.check_schedule(sched)?;
        let hs = hyper.shape();
        if hs.len() != 3 || hs[0] != 2 * self.cfg.m {
            return Err(Error::shape("decode session", format!("hyper features {hs:?}")));
        }
        let grid = TokenGrid::for_latent(&self.cfg, hs[1], hs[2])?;
        let a = self.cfg.attention();
        let grids: Vec<WindowGrid> = (0..self.layers.len()).map(|l| grid.window_grid(&a, l)).collect();
        let cache = grids
            .iter()
            .map(|wg| LayerCache {
                k: Vec::new(),
                v: Vec::new(),
                pos: Vec::new(),
                windows: vec![Vec::new(); wg.n_windows()],
            })
            .collect();
        Ok(DecodeSession {
            model: self,
            sched: sched.clone(),
            hyper_rows: self.hyper_tokens(sched, &grid, hyper),
            grid,
            grids,
            cache,
            committed: 0,
            invocations: 0,
            macs: 0,
        })
    }

    /// Builds the masked single pass into `g`.
    ///
    /// `content` is `(T, p_cs)` in coding order and `hyper_rows` is
    /// `(T, 2M)`. Weights enter as constants.
    pub fn build_graph(
        &self,
        gr: &mut Graph<S>,
        content: NodeId,
        hyper_rows: NodeId,
        sched: &CodingSchedule,
        grid: &TokenGrid,
    ) -> Result<GmmNodes> {
        self.check_schedule(sched)?;
        let cfg = &self.cfg;
        let a = cfg.attention();
        let (d, dk) = (cfg.d_e, a.d_k());
        let n_tok = grid.len();
        let first = usize::from(sched.sfg());
        let q0 = first * grid.per_plane();
        let nq = n_tok - q0;
        let c = |gr: &mut Graph<S>, t: &Tensor<S>| gr.constant(t.clone());
        let lin = |gr: &mut Graph<S>, x: NodeId, w: &Dense<S>| -> Result<NodeId> {
            let wn = gr.constant(w.weight.clone());
            let bn = gr.constant(w.bias.clone());
            gr.linear(x, wn, bn)
        };
        let ln = |gr: &mut Graph<S>, x: NodeId, n: &Norm<S>| -> Result<NodeId> {
            let wn = gr.constant(n.weight.clone());
            let bn = gr.constant(n.bias.clone());
            gr.layer_norm(x, wn, bn)
        };

        let e = lin(gr, content, &self.embed)?;
        let h0 = Tensor::from_fn(vec![nq, d], |i| {
            let g = grid.position(q0 + i / d).0;
            self.query_embed.data()[g * d + i % d]
        });
        let mut h = c(gr, &h0);
        for (l, layer) in self.layers.iter().enumerate() {
            let wg = grid.window_grid(&a, l);
            let kv = ln(gr, e, &layer.norm_kv)?;
            let ks = lin(gr, kv, &layer.attn.k)?;
            let vs = lin(gr, kv, &layer.attn.v)?;
            let an = ln(gr, h, &layer.norm1)?;
            let qs = lin(gr, an, &layer.attn.q)?;
            let mut acc: Option<NodeId> = None;
            for mem in window_members(&wg, grid) {
                let queries: Vec<&Member> = mem.iter().filter(|m| m.token >= q0).collect();
                if queries.is_empty() {
                    continue;
                }
                let (nqw, nk) = (queries.len(), mem.len());
                let mut bias = vec![S::zero(); nqw * nk];
                let mask = Tensor::from_fn(vec![nqw, nk], |i| {
                    if self.rule.allows(queries[i / nk].g, mem[i % nk].g) {
                        S::zero()
                    } else {
                        S::neg_infinity()
                    }
                });
                let mask = c(gr, &mask);
                for hd in 0..cfg.heads {
                    let cols = |tok: usize| (0..dk).map(move |j| tok * d + hd * dk + j);
                    let qidx: Vec<usize> = queries.iter().flat_map(|m| cols(m.token - q0)).collect();
                    let kidx: Vec<usize> = mem.iter().flat_map(|m| cols(m.token)).collect();
                    for (i, q) in queries.iter().enumerate() {
                        for (j, k) in mem.iter().enumerate() {
                            bias[i * nk + j] = bias_between(&a, &layer.attn, hd, (q.g, q.u, q.x), k);
                        }
                    }
                    let qw = gr.gather(qs, qidx.clone(), vec![nqw, dk])?;
                    let kw = gr.gather(ks, kidx.clone(), vec![nk, dk])?;
                    let vw = gr.gather(vs, kidx, vec![nk, dk])?;
                    let kt = gr.transpose(kw)?;
                    let s = gr.matmul(qw, kt)?;
                    let s = gr.mul_scalar(s, a.scale());
                    let bn = c(gr, &Tensor::new(vec![nqw, nk], bias.clone())?);
                    let s = gr.add(s, bn)?;
                    let p = gr.masked_softmax(s, mask)?;
                    let o = gr.matmul(p, vw)?;
                    let o = gr.scatter_add(o, qidx, vec![nq, d])?;
                    acc = Some(match acc {
                        Some(prev) => gr.add(prev, o)?,
                        None => o,
                    });
                }
            }
            let concat = match acc {
                Some(n) => n,
                None => c(gr, &Tensor::zeros(vec![nq, d])),
            };
            let proj = lin(gr, concat, &layer.attn.proj)?;
            h = gr.add(h, proj)?;
            let b = ln(gr, h, &layer.norm2)?;
            let m1 = lin(gr, b, &layer.mlp.fc1)?;
            let m1 = gr.gelu(m1);
            let m2 = lin(gr, m1, &layer.mlp.fc2)?;
            h = gr.add(h, m2)?;
        }
        let ctx = ln(gr, h, &self.norm)?;
        let ctx = if q0 > 0 {
            gr.scatter_add(ctx, (q0 * d..n_tok * d).collect(), vec![n_tok, d])?
        } else {
            ctx
        };
        let x = gr.concat(ctx, hyper_rows)?;
        let x = lin(gr, x, &self.head.fc1)?;
        let x = gr.gelu(x);
        let x = lin(gr, x, &self.head.fc2)?;
        let x = gr.gelu(x);
        let out = lin(gr, x, &self.head.fc3)?;

        let (km, p, d2) = (cfg.k_m, cfg.p_cs(), cfg.d2());
        let block = |b: usize| -> Vec<usize> {
            (0..n_tok * p)
                .flat_map(|e| {
                    let (t, j) = (e / p, e % p);
                    (0..km).map(move |k| t * d2 + (b * p + j) * km + k)
                })
                .collect()
        };
        let shape = vec![n_tok * p, km];
        let logits = gr.gather(out, block(0), shape.clone())?;
        let pi = gr.softmax(logits);
        let mu = gr.gather(out, block(1), shape.clone())?;
        let raw = gr.gather(out, block(2), shape)?;
        let sg = gr.exp(raw);
        let sigma = gr.clamp_min(sg, S::of(SIGMA_MIN));
        Ok(GmmNodes { pi, mu, sigma })
    }
}

fn window_members(wg: &WindowGrid, grid: &TokenGrid) -> Vec<Vec<Member>> {
    (0..wg.n_windows())
        .map(|w| {
            wg.members(w)
                .into_iter()
                .map(|(_, (g, u, x))| Member {
                    token: grid.token(g, u, x),
                    g,
                    u,
                    x,
                })
                .collect()
        })
        .collect()
}

#[inline]
fn bias_between<S: Scalar>(
    a: &AttentionConfig,
    w: &AttentionWeights<S>,
    hd: usize,
    (g, u, x): (usize, usize, usize),
    k: &Member,
) -> S {
    w.bias(
        a,
        hd,
        u as isize - k.u as isize,
        x as isize - k.x as isize,
        g as isize - k.g as isize,
    )
}

fn residual_mlp<S: Scalar>(layer: &ContextLayer<S>, h: &mut [S], concat: &[S]) {
    let proj = layer.attn.proj.apply(concat);
    h.iter_mut().zip(&proj).for_each(|(v, &p)| *v = *v + p);
    let m = layer.mlp.apply(&layer.norm2.apply(h));
    h.iter_mut().zip(&m).for_each(|(v, &p)| *v = *v + p);
}

struct LayerCache<S> {
    k: Vec<S>,
    v: Vec<S>,
    pos: Vec<(usize, usize, usize)>,
    /// Cache entries per window, in slot order.
    windows: Vec<Vec<usize>>,
}

/// Stepwise decoder state: per-layer keys and values of committed groups.
pub struct DecodeSession<'a, S> {
    model: &'a ContextModel<S>,
    sched: CodingSchedule,
    grid: TokenGrid,
    hyper_rows: Vec<S>,
    grids: Vec<WindowGrid>,
    cache: Vec<LayerCache<S>>,
    committed: usize,
    invocations: usize,
    macs: u128,
}

impl<S: Scalar> DecodeSession<'_, S> {
    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    /// Context-model invocations so far.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    /// Groups whose keys and values are cached.
    pub fn committed(&self) -> usize {
        self.committed
    }

    /// Cached tokens in `layer`.
    pub fn cache_len(&self, layer: usize) -> usize {
        self.cache[layer].pos.len()
    }

    /// Multiply-accumulates executed so far.
    pub fn macs(&self) -> u128 {
        self.macs
    }

    fn group_hyper(&self, g: usize) -> &[S] {
        let n = self.grid.per_plane() * 2 * self.model.cfg.m;
        &self.hyper_rows[g * n..(g + 1) * n]
    }

    /// Parameters of the first group from hyper features alone.
    pub fn hyperprior_params(&mut self) -> Result<GmmParams<S>> {
        if !self.sched.sfg() {
            return Err(Error::Config("schedule does not skip the first group".into()));
        }
        let cfg = &self.model.cfg;
        let n = self.grid.per_plane();
        self.macs += n as u128 * EntropyHead::<S>::macs(cfg);
        let ctx = vec![S::zero(); n * cfg.d_e];
        Ok(self.model.head.apply(cfg, &ctx, self.group_hyper(0)))
    }

    /// Appends keys and values of decoded group `g` (a `(H, W/2, p_cs)` plane).
    pub fn commit(&mut self, g: usize, plane: &[S]) -> Result<()> {
        let cfg = &self.model.cfg;
        if g != self.committed || g >= self.grid.planes {
            return Err(Error::Mismatch(format!(
                "cannot cache group {g}: {} groups cached",
                self.committed
            )));
        }
        let n = self.grid.per_plane();
        if plane.len() != n * cfg.p_cs() {
            return Err(Error::shape("commit", format!("plane of {} values", plane.len())));
        }
        let d = cfg.d_e;
        let e = self.model.embed.apply(plane);
        self.macs += (n * cfg.p_cs() * d) as u128;
        for (l, layer) in self.model.layers.iter().enumerate() {
            let kv = layer.norm_kv.apply(&e);
            let c = &mut self.cache[l];
            let base = c.pos.len();
            c.k.extend(layer.attn.k.apply(&kv));
            c.v.extend(layer.attn.v.apply(&kv));
            for i in 0..n {
                let (u, x) = (i / self.grid.wr, i % self.grid.wr);
                c.pos.push((g, u, x));
                c.windows[self.grids[l].locate(u, x).0].push(base + i);
            }
            self.macs += (n * 2 * d * d) as u128;
        }
        self.committed += 1;
        Ok(())
    }

    /// Parameters of group `g`, after caching every earlier group from `prefix`
    /// (the rearranged latent with groups `< g` filled in).
    pub fn decode_step(&mut self, g: usize, prefix: &Tensor<S>) -> Result<GmmParams<S>> {
        let cfg = self.model.cfg;
        if g >= self.grid.planes {
            return Err(Error::Config(format!("group {g} out of range")));
        }
        if self.sched.hyperprior_only(g) {
            return Err(Error::Config("the first group is coded from the hyperprior".into()));
        }
        if self.committed > g {
            return Err(Error::Mismatch(format!(
                "cache already holds {} groups, cannot step group {g}",
                self.committed
            )));
        }
        let want = [self.grid.planes, self.grid.h, self.grid.wr, cfg.p_cs()];
        if prefix.shape() != want {
            return Err(Error::shape("decode_step", format!("prefix {:?}", prefix.shape())));
        }
        let plane = self.grid.per_plane() * cfg.p_cs();
        for gg in self.committed..g {
            self.commit(gg, &prefix.data()[gg * plane..(gg + 1) * plane])?;
        }
        self.invocations += 1;

        let a = cfg.attention();
        let d = cfg.d_e;
        let n = self.grid.per_plane();
        let model = self.model;
        let mut h = Vec::with_capacity(n * d);
        for _ in 0..n {
            h.extend_from_slice(&model.query_embed.data()[g * d..(g + 1) * d]);
        }
        let (mut sc, mut pr) = (Vec::new(), Vec::new());
        let mut pairs = 0u128;
        for (l, layer) in model.layers.iter().enumerate() {
            let c = &self.cache[l];
            let qs = layer.attn.q.apply(&layer.norm1.apply(&h));
            let mut concat = vec![S::zero(); n * d];
            for i in 0..n {
                let (u, x) = (i / self.grid.wr, i % self.grid.wr);
                let entries = &c.windows[self.grids[l].locate(u, x).0];
                let krows: Vec<&[S]> = entries.iter().map(|&e| &c.k[e * d..(e + 1) * d]).collect();
                let vrows: Vec<&[S]> = entries.iter().map(|&e| &c.v[e * d..(e + 1) * d]).collect();
                pairs += entries.len() as u128;
                attend_row(
                    &a,
                    &qs[i * d..(i + 1) * d],
                    &krows,
                    &vrows,
                    |hd, j| {
                        let (kg, ku, kx) = c.pos[entries[j]];
                        let m = Member { token: 0, g: kg, u: ku, x: kx };
                        bias_between(&a, &layer.attn, hd, (g, u, x), &m)
                    },
                    None,
                    &mut sc,
                    &mut pr,
                    &mut concat[i * d..(i + 1) * d],
                );
            }
            residual_mlp(layer, &mut h, &concat);
        }
        let ctx = model.norm.apply(&h);
        let per_query = 2 * d * d + 2 * d * cfg.d_mlp;
        self.macs += (n * per_query * model.layers.len()) as u128
            + pairs * 2 * d as u128
            + n as u128 * EntropyHead::<S>::macs(&cfg);
        Ok(model.head.apply(&cfg, &ctx, self.group_hyper(g)))
    }
}
