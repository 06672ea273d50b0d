//! Linear patch transforms standing in for the analysis, synthesis and hyper
//! networks.
//!
//! * analysis: each 16×16 RGB patch (768 values) maps to `M` latent channels
//! * synthesis: `M` channels map back to a 16×16 patch
//! * hyper analysis: each 4×4 block of the latent (`16·M` values) maps to
//!   `N_h` channels; the latent is extended by edge replication to a multiple
//!   of 4 first
//! * hyper synthesis: `N_h` channels map to a 4×4 block of `2M` features,
//!   cropped to the latent size
//!
//! Every map is a gather into patch rows, a dense layer, and a gather back.

use crate::attention::Dense;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights::{init_dense, WeightStore};

pub const PATCH: usize = 16;
pub const HYPER_PATCH: usize = 4;
const PATCH_DIM: usize = 3 * PATCH * PATCH;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformConfig {
    pub m: usize,
    pub n_h: usize,
    /// Gain of the analysis basis; larger values give finer quantization.
    pub latent_scale: f64,
}

impl TransformConfig {
    /// Adds transform and prior tensors to `store`.
    ///
    /// The analysis rows are the lowest-frequency 2-D DCT atoms of each colour
    /// channel, scaled by `latent_scale`; synthesis is their transpose divided
    /// by the same gain, with the pixel mean restored. Hyper transforms are
    /// seeded.
    pub fn init_weights(&self, seed: u64, store: &mut WeightStore) -> Result<()> {
        if self.m == 0 || self.m > PATCH_DIM {
            return Err(Error::Config(format!("M={} must be in 1..={PATCH_DIM}", self.m)));
        }
        let basis = dct_basis(self.m);
        let s = self.latent_scale;
        let m = self.m;
        store.insert(
            "ga.weight",
            Tensor::from_fn(vec![PATCH_DIM, m], |i| (s * basis[i % m][i / m]) as f32),
        );
        store.insert("ga.bias", Tensor::from_fn(vec![m], |c| {
            (-s * 0.5 * basis[c].iter().sum::<f64>()) as f32
        }));
        store.insert(
            "gs.weight",
            Tensor::from_fn(vec![m, PATCH_DIM], |i| (basis[i / PATCH_DIM][i % PATCH_DIM] / s) as f32),
        );
        store.insert("gs.bias", Tensor::filled(vec![PATCH_DIM], 0.5));
        let hp = HYPER_PATCH * HYPER_PATCH;
        init_dense(store, seed, "ha", hp * m, self.n_h);
        init_dense(store, seed, "hs", self.n_h, hp * 2 * m);
        store.insert("prior.mean", Tensor::filled(vec![self.n_h], 0.0));
        store.insert("prior.scale", Tensor::filled(vec![self.n_h], 16.0));
        Ok(())
    }
}

/// First `m` orthonormal patch atoms, lowest frequency first, colour channels
/// interleaved at each frequency.
fn dct_basis(m: usize) -> Vec<Vec<f64>> {
    let n = PATCH as f64;
    let atom = |k: usize, i: usize| {
        let a = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos()
    };
    let mut freqs: Vec<(usize, usize)> = (0..PATCH).flat_map(|u| (0..PATCH).map(move |v| (u, v))).collect();
    freqs.sort_by_key(|&(u, v)| (u + v, u.max(v), u));
    let mut rows = Vec::with_capacity(m);
    'outer: for (u, v) in freqs {
        for c in 0..3 {
            if rows.len() == m {
                break 'outer;
            }
            let mut r = vec![0.0; PATCH_DIM];
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    r[(c * PATCH + dy) * PATCH + dx] = atom(u, dy) * atom(v, dx);
                }
            }
            rows.push(r);
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct Transforms<S> {
    pub m: usize,
    pub n_h: usize,
    pub ga: Dense<S>,
    pub gs: Dense<S>,
    pub ha: Dense<S>,
    pub hs: Dense<S>,
}

/// Flat index lists for the four patch maps.
mod index {
    use super::{HYPER_PATCH, PATCH};

    /// Rows of image patches: `(patches, 3·16·16)` gathered from `(3, H, W)`.
    pub fn image_patches(h: usize, w: usize) -> Vec<usize> {
        let (ph, pw) = (h / PATCH, w / PATCH);
        let mut idx = Vec::with_capacity(3 * h * w);
        for pu in 0..ph {
            for pv in 0..pw {
                for c in 0..3 {
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            idx.push((c * h + pu * PATCH + dy) * w + pv * PATCH + dx);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse of [`image_patches`]: image layout gathered from patch rows.
    pub fn patches_to_image(h: usize, w: usize) -> Vec<usize> {
        let pw = w / PATCH;
        let dim = 3 * PATCH * PATCH;
        let mut idx = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let p = (y / PATCH) * pw + x / PATCH;
                    idx.push(p * dim + (c * PATCH + y % PATCH) * PATCH + x % PATCH);
                }
            }
        }
        idx
    }

    /// `(positions, C)` rows from a `(C, H, W)` tensor.
    pub fn channel_rows(c: usize, h: usize, w: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(c * h * w);
        for p in 0..h * w {
            for ch in 0..c {
                idx.push(ch * h * w + p);
            }
        }
        idx
    }

    /// `(C, H, W)` layout gathered from `(positions, C)` rows.
    pub fn rows_to_channels(c: usize, h: usize, w: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for p in 0..h * w {
                idx.push(p * c + ch);
            }
        }
        idx
    }

    /// 4×4 blocks of a `(C, H, W)` latent with edge replication.
    pub fn latent_blocks(c: usize, h: usize, w: usize) -> Vec<usize> {
        let (bh, bw) = (h.div_ceil(HYPER_PATCH), w.div_ceil(HYPER_PATCH));
        let mut idx = Vec::new();
        for bu in 0..bh {
            for bv in 0..bw {
                for ch in 0..c {
                    for dy in 0..HYPER_PATCH {
                        for dx in 0..HYPER_PATCH {
                            let y = (bu * HYPER_PATCH + dy).min(h - 1);
                            let x = (bv * HYPER_PATCH + dx).min(w - 1);
                            idx.push((ch * h + y) * w + x);
                        }
                    }
                }
            }
        }
        idx
    }

    /// `(C, H, W)` features gathered from 4×4 block rows, cropped.
    pub fn blocks_to_features(c: usize, h: usize, w: usize) -> Vec<usize> {
        let bw = w.div_ceil(HYPER_PATCH);
        let dim = c * HYPER_PATCH * HYPER_PATCH;
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let b = (y / HYPER_PATCH) * bw + x / HYPER_PATCH;
                    idx.push(b * dim + (ch * HYPER_PATCH + y % HYPER_PATCH) * HYPER_PATCH + x % HYPER_PATCH);
                }
            }
        }
        idx
    }
}

fn gather<S: Copy>(src: &[S], idx: &[usize]) -> Vec<S> {
    idx.iter().map(|&i| src[i]).collect()
}

impl<S: Scalar> Transforms<S> {
    pub fn from_store(m: usize, n_h: usize, store: &WeightStore) -> Result<Self> {
        let dense = |name: &str, i: usize, o: usize| -> Result<Dense<S>> {
            Dense::new(
                store.fetch(&format!("{name}.weight"), &[i, o])?,
                store.fetch(&format!("{name}.bias"), &[o])?,
            )
        };
        let hp = HYPER_PATCH * HYPER_PATCH;
        Ok(Self {
            m,
            n_h,
            ga: dense("ga", PATCH_DIM, m)?,
            gs: dense("gs", m, PATCH_DIM)?,
            ha: dense("ha", hp * m, n_h)?,
            hs: dense("hs", n_h, hp * 2 * m)?,
        })
    }

    fn image_dims(&self, x: &Tensor<S>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(
                "analyze",
                format!("image {s:?} must be (3, H, W) with H, W positive multiples of 32"),
            ));
        }
        Ok((s[1], s[2]))
    }

    fn latent_dims(&self, y: &Tensor<S>, c: usize, what: &str) -> Result<(usize, usize)> {
        let s = y.shape();
        if s.len() != 3 || s[0] != c || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(what, format!("tensor {s:?}, expected {c} channels")));
        }
        Ok((s[1], s[2]))
    }

    /// `(3, H, W)` image in `[0, 1]` to the `(M, H/16, W/16)` latent.
    pub fn analyze(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = self.image_dims(x)?;
        let (hl, wl) = (h / PATCH, w / PATCH);
        let rows = self.ga.apply(&gather(x.data(), &index::image_patches(h, w)));
        Tensor::new(vec![self.m, hl, wl], gather(&rows, &index::rows_to_channels(self.m, hl, wl)))
    }

    pub fn synthesize(&self, y: &Tensor<S>) -> Result<Tensor<S>> {
        let (hl, wl) = self.latent_dims(y, self.m, "synthesize")?;
        let rows = self.gs.apply(&gather(y.data(), &index::channel_rows(self.m, hl, wl)));
        let (h, w) = (hl * PATCH, wl * PATCH);
        Tensor::new(vec![3, h, w], gather(&rows, &index::patches_to_image(h, w)))
    }

    pub fn hyper_analyze(&self, y: &Tensor<S>) -> Result<Tensor<S>> {
        let (hl, wl) = self.latent_dims(y, self.m, "hyper_analyze")?;
        let rows = self.ha.apply(&gather(y.data(), &index::latent_blocks(self.m, hl, wl)));
        let (hz, wz) = (hl.div_ceil(HYPER_PATCH), wl.div_ceil(HYPER_PATCH));
        Tensor::new(vec![self.n_h, hz, wz], gather(&rows, &index::rows_to_channels(self.n_h, hz, wz)))
    }

    /// `(N_h, ⌈H_l/4⌉, ⌈W_l/4⌉)` hyper-latent to `(2M, H_l, W_l)` features.
    pub fn hyper_synthesize(&self, z: &Tensor<S>, hl: usize, wl: usize) -> Result<Tensor<S>> {
        let (hz, wz) = self.latent_dims(z, self.n_h, "hyper_synthesize")?;
        check_hyper_grid(hz, wz, hl, wl)?;
        let rows = self.hs.apply(&gather(z.data(), &index::channel_rows(self.n_h, hz, wz)));
        let m2 = 2 * self.m;
        Tensor::new(vec![m2, hl, wl], gather(&rows, &index::blocks_to_features(m2, hl, wl)))
    }

    pub fn synthesize_node(&self, g: &mut Graph<S>, y: NodeId) -> Result<NodeId> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[0] != self.m {
            return Err(Error::shape("synthesize", format!("node {s:?}")));
        }
        let (hl, wl) = (s[1], s[2]);
        let rows = g.gather(y, index::channel_rows(self.m, hl, wl), vec![hl * wl, self.m])?;
        let rows = dense_node(g, rows, &self.gs)?;
        let (h, w) = (hl * PATCH, wl * PATCH);
        g.gather(rows, index::patches_to_image(h, w), vec![3, h, w])
    }

    pub fn hyper_synthesize_node(&self, g: &mut Graph<S>, z: NodeId, hl: usize, wl: usize) -> Result<NodeId> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[0] != self.n_h {
            return Err(Error::shape("hyper_synthesize", format!("node {s:?}")));
        }
        let (hz, wz) = (s[1], s[2]);
        check_hyper_grid(hz, wz, hl, wl)?;
        let rows = g.gather(z, index::channel_rows(self.n_h, hz, wz), vec![hz * wz, self.n_h])?;
        let rows = dense_node(g, rows, &self.hs)?;
        let m2 = 2 * self.m;
        g.gather(rows, index::blocks_to_features(m2, hl, wl), vec![m2, hl, wl])
    }
}

fn check_hyper_grid(hz: usize, wz: usize, hl: usize, wl: usize) -> Result<()> {
    if hz != hl.div_ceil(HYPER_PATCH) || wz != wl.div_ceil(HYPER_PATCH) {
        return Err(Error::shape(
            "hyper_synthesize",
            format!("{hz}×{wz} hyper grid cannot cover a {hl}×{wl} latent"),
        ));
    }
    Ok(())
}

fn dense_node<S: Scalar>(g: &mut Graph<S>, x: NodeId, d: &Dense<S>) -> Result<NodeId> {
    let w = g.constant(d.weight.clone());
    let b = g.constant(d.bias.clone());
    g.linear(x, w, b)
}
