//! Encoder-side refinement of the latents under the rate-distortion loss.
//!
//! The loss is measured in bits over the original pixels:
//!
//! ```text
//! L = R(ŷ) + R(ẑ) + λ·N_px·MSE
//! ```
//!
//! with MSE on the 8-bit scale, so `L / N_px` is `bpp + λ·MSE`.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::codec::{pad_replicate, quantize, Codec, PAD_MULTIPLE};
use crate::context_model::{hyper_token_index, TokenGrid};
use crate::entropy::{factorized_rate_node, gmm_rate_node};
use crate::error::{Error, Result};
use crate::scalar::{round_half_away, Scalar};
use crate::scheduler::egr_rearrange;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.014;
/// Steps whose learning rate falls below this no longer count as effective.
pub const MIN_EFFECTIVE_LR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrdoConfig {
    pub alpha0: f64,
    pub gamma: f64,
    pub steps: usize,
    pub lambda: f64,
}

impl Default for OrdoConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.062,
            gamma: 0.72,
            steps: 26,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl OrdoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.alpha0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }

    /// Steps whose rate stays above [`MIN_EFFECTIVE_LR`].
    pub fn effective_steps(&self) -> usize {
        (0..self.steps).take_while(|&n| lr_at(self, n) > MIN_EFFECTIVE_LR).count()
    }
}

/// `α₀·γⁿ`.
pub fn lr_at(cfg: &OrdoConfig, n: usize) -> f64 {
    cfg.alpha0 * cfg.gamma.powi(n as i32)
}

/// Rounds half away from zero. In a graph, [`Graph::round_ste`] passes the
/// gradient through unchanged.
pub fn ste_quantize<S: Scalar>(v: &Tensor<S>) -> Tensor<S> {
    v.map(round_half_away)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub rate_y: f64,
    pub rate_z: f64,
    /// Mean squared error on the 8-bit scale over the original pixels.
    pub mse: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct OrdoResult<S> {
    pub y_hat: Tensor<S>,
    pub z_hat: Tensor<S>,
    /// Loss before the first step and after each step.
    pub trace: Vec<LossTerms>,
    pub forward_evals: usize,
    pub gradient_evals: usize,
}

impl<S> OrdoResult<S> {
    pub fn initial(&self) -> &LossTerms {
        &self.trace[0]
    }

    pub fn last(&self) -> &LossTerms {
        &self.trace[self.trace.len() - 1]
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,rate_y,rate_z,mse,total\n");
        for (i, t) in self.trace.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", t.rate_y, t.rate_z, t.mse, t.total));
        }
        s
    }
}

/// The loss as a graph over leaves `y` and `z`.
pub struct OrdoLoss<S> {
    graph: Graph<S>,
    total: NodeId,
    pixels: f64,
}

impl<S: Scalar> OrdoLoss<S> {
    /// `padded` is the padded image; distortion covers its top-left
    /// `height × width` pixels. With `ste` false, rounding is dropped and the
    /// loss is the continuous relaxation.
    pub fn new(
        codec: &Codec<S>,
        padded: &Tensor<S>,
        height: usize,
        width: usize,
        lambda: f64,
        ste: bool,
    ) -> Result<Self> {
        let cfg = codec.config();
        let m = &cfg.model;
        let sched = codec.schedule();
        let tf = codec.transforms();
        let ps = padded.shape().to_vec();
        if ps.len() != 3 || ps[0] != 3 || ps[1] < height || ps[2] < width {
            return Err(Error::shape("ordo", format!("image {ps:?} for {height}×{width} pixels")));
        }
        let (hl, wl) = (ps[1] / 16, ps[2] / 16);
        let (hz, wz) = (hl.div_ceil(4), wl.div_ceil(4));
        let grid = TokenGrid::for_latent(m, hl, wl)?;

        let mut g = Graph::new();
        let y = g.leaf("y", vec![m.m, hl, wl]);
        let z = g.leaf("z", vec![cfg.n_h, hz, wz]);
        let (yq, zq) = if ste { (g.round_ste(y), g.round_ste(z)) } else { (y, z) };

        let rate_z = factorized_rate_node(&mut g, zq, codec.prior())?;
        let feats = tf.hyper_synthesize_node(&mut g, zq, hl, wl)?;
        let order = Tensor::from_fn(vec![m.m, hl, wl], |i| i);
        let order = egr_rearrange(&order, sched)?;
        let content = g.gather(yq, order.data().to_vec(), vec![grid.len(), m.p_cs()])?;
        let hyper_rows = g.gather(
            feats,
            hyper_token_index(sched, &grid, 2 * m.m),
            vec![grid.len(), 2 * m.m],
        )?;
        let p = codec.model().build_graph(&mut g, content, hyper_rows, sched, &grid)?;
        let n = grid.len() * m.p_cs();
        let rep: Vec<usize> = (0..n * m.k_m).map(|i| i / m.k_m).collect();
        let v = g.gather(content, rep, vec![n, m.k_m])?;
        let rate_y = gmm_rate_node(&mut g, v, p.pi, p.mu, p.sigma)?;

        let xhat = tf.synthesize_node(&mut g, yq)?;
        let x = g.constant(padded.clone());
        let mask = Tensor::from_fn(ps.clone(), |i| {
            let (r, c) = ((i / ps[2]) % ps[1], i % ps[2]);
            if r < height && c < width {
                S::one()
            } else {
                S::zero()
            }
        });
        let mask = g.constant(mask);
        let diff = g.sub(xhat, x)?;
        let diff = g.mul(diff, mask)?;
        let sq = g.mul(diff, diff)?;
        let sse = g.sum(sq);

        // λ·N_px·MSE = λ·255²/3·SSE on the unit scale.
        let dist = g.mul_scalar(sse, S::of(lambda * 255.0 * 255.0 / 3.0));
        let rates = g.add(rate_y, rate_z)?;
        let total = g.add(rates, dist)?;
        g.set_output("rate_y", rate_y);
        g.set_output("rate_z", rate_z);
        g.set_output("sse", sse);
        g.set_output("total", total);
        Ok(Self {
            graph: g,
            total,
            pixels: (height * width) as f64,
        })
    }

    pub fn graph(&self) -> &Graph<S> {
        &self.graph
    }

    pub fn total_node(&self) -> NodeId {
        self.total
    }

    fn bind(y: &Tensor<S>, z: &Tensor<S>) -> HashMap<String, Tensor<S>> {
        HashMap::from([("y".to_string(), y.clone()), ("z".to_string(), z.clone())])
    }

    fn terms(&self, eval: &crate::autodiff::Evaluation<S>) -> LossTerms {
        let get = |k: &str| eval.output(k).map(|t| t.data()[0].as_f64()).unwrap_or(f64::NAN);
        let mse = get("sse") * 255.0 * 255.0 / (3.0 * self.pixels);
        LossTerms {
            rate_y: get("rate_y"),
            rate_z: get("rate_z"),
            mse,
            total: get("total"),
        }
    }

    pub fn eval(&self, y: &Tensor<S>, z: &Tensor<S>) -> Result<LossTerms> {
        Ok(self.terms(&self.graph.evaluate(&Self::bind(y, z))?))
    }

    /// Loss and its gradients with respect to `y` and `z`.
    pub fn grad(&self, y: &Tensor<S>, z: &Tensor<S>) -> Result<(LossTerms, Tensor<S>, Tensor<S>)> {
        let eval = self.graph.evaluate(&Self::bind(y, z))?;
        let mut g = self.graph.gradients(&eval, self.total, &["y", "z"])?;
        let gy = g.remove("y").expect("gradient of a bound leaf");
        let gz = g.remove("z").expect("gradient of a bound leaf");
        Ok((self.terms(&eval), gy, gz))
    }
}

/// Refines the latents of a `(3, H, W)` image in `[0, 1]`.
pub fn optimize<S: Scalar>(codec: &Codec<S>, image: &Tensor<S>, cfg: &OrdoConfig) -> Result<OrdoResult<S>> {
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ordo", format!("image {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let padded = pad_replicate(image, PAD_MULTIPLE)?;
    let (mut y, mut z) = codec.analyze(&padded)?;
    let loss = OrdoLoss::new(codec, &padded, h, w, cfg.lambda, true)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let (mut forwards, mut grads) = (0, 0);
    for n in 0..cfg.steps {
        let (t, gy, gz) = loss.grad(&y, &z)?;
        forwards += 1;
        grads += 1;
        if !t.total.is_finite() {
            return Err(Error::NonFinite { step: n });
        }
        trace.push(t);
        let a = S::of(lr_at(cfg, n));
        y = Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] - a * gy.data()[i]);
        z = Tensor::from_fn(z.shape().to_vec(), |i| z.data()[i] - a * gz.data()[i]);
    }
    let t = loss.eval(&y, &z)?;
    forwards += 1;
    if !t.total.is_finite() {
        return Err(Error::NonFinite { step: cfg.steps });
    }
    trace.push(t);
    Ok(OrdoResult {
        y_hat: quantize(&y),
        z_hat: quantize(&z),
        trace,
        forward_evals: forwards,
        gradient_evals: grads,
    })
}

/// Grid point minimizing `objective(α₀, γ)`; ties go to the point with fewer
/// effective steps, then to the earlier point.
pub fn grid_search(
    alphas: &[f64],
    gammas: &[f64],
    steps: usize,
    mut objective: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("empty search grid".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.02..=0.08).contains(*a)) {
        return Err(Error::Config(format!("initial rate {a} outside [0.02, 0.08]")));
    }
    if let Some(g) = gammas.iter().find(|g| !(0.5..=0.75).contains(*g)) {
        return Err(Error::Config(format!("decay {g} outside [0.5, 0.75]")));
    }
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for &a in alphas {
        for &g in gammas {
            let loss = objective(a, g)?;
            let eff = OrdoConfig { alpha0: a, gamma: g, steps, lambda: 0.0 }.effective_steps();
            let better = match best {
                None => true,
                Some((bl, be, _, _)) => loss < bl || (loss == bl && eff < be),
            };
            if better {
                best = Some((loss, eff, a, g));
            }
        }
    }
    let (_, _, a, g) = best.expect("non-empty grid");
    Ok((a, g))
}

/// Grid search over the mean final loss of `images`.
pub fn grid_search_images<S: Scalar>(
    codec: &Codec<S>,
    images: &[Tensor<S>],
    base: &OrdoConfig,
    alphas: &[f64],
    gammas: &[f64],
) -> Result<(f64, f64)> {
    grid_search(alphas, gammas, base.steps, |alpha0, gamma| {
        let cfg = OrdoConfig { alpha0, gamma, ..*base };
        let mut sum = 0.0;
        for im in images {
            sum += optimize(codec, im, &cfg)?.last().total;
        }
        Ok(sum / images.len().max(1) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::weights::uniform;

    #[test]
    fn learning_rate_schedule() {
        let c = OrdoConfig::default();
        assert_eq!(lr_at(&c, 0), 0.062);
        assert!((lr_at(&c, 1) - 0.04464).abs() < 1e-15);
        assert!((1..40).all(|n| lr_at(&c, n) < lr_at(&c, n - 1)));
    }

    #[test]
    fn rounding_convention() {
        let t = Tensor::new(vec![4], vec![1.4f64, -1.5, 2.5, -0.4]).unwrap();
        assert_eq!(ste_quantize(&t).data(), &[1.0, -2.0, 3.0, -0.0]);
    }

    #[test]
    fn zero_steps_is_plain_encoding() {
        let cfg = CodecConfig::desk();
        let codec: Codec<f64> = Codec::from_store(cfg, &cfg.init_weights(1).unwrap()).unwrap();
        let x = uniform(2, "x", vec![3, 32, 32], 0.5).cast::<f64>().map(|v| v + 0.5);
        let r = optimize(&codec, &x, &OrdoConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(r.trace.len(), 1);
        let e = codec.encode(&x).unwrap();
        assert_eq!(r.y_hat, e.y_hat);
        assert_eq!(r.z_hat, e.z_hat);
        assert!((r.trace[0].rate_y - e.rate_y).abs() < 1e-6 * e.rate_y);
        assert!((r.trace[0].rate_z - e.rate_z).abs() < 1e-6 * e.rate_z.max(1.0));
    }

    #[test]
    fn grid_search_picks_minimum_inside_grid() {
        assert_eq!(grid_search(&[0.05], &[0.6], 10, |_, _| Ok(1.0)).unwrap(), (0.05, 0.6));
        let alphas = [0.02, 0.04, 0.062, 0.08];
        let gammas = [0.5, 0.6, 0.72];
        let best = grid_search(&alphas, &gammas, 26, |a, g| {
            Ok((a - 0.062).powi(2) + (g - 0.6).powi(2))
        })
        .unwrap();
        assert_eq!(best, (0.062, 0.6));
        assert!(grid_search(&[0.1], &[0.6], 5, |_, _| Ok(0.0)).is_err());
        // equal losses: the faster-decaying schedule wins
        assert_eq!(grid_search(&[0.05], &[0.5, 0.7], 60, |_, _| Ok(0.0)).unwrap(), (0.05, 0.5));
    }
}
