//! End-to-end image codec: transforms, hyperprior, context model and coder.

use crate::coder::{Bitstream, Header, RangeDecoder, RangeEncoder};
use crate::context_model::{ContextModel, ContextModelConfig, GmmParams};
use crate::entropy::{factorized_rate, quantize_cdf, rate_bits, CdfTable, DiscretizedPmf, FactorizedPrior};
use crate::error::{Error, Result};
use crate::scalar::{round_half_away, Scalar};
use crate::scheduler::{egr_rearrange, inverse_egr, CodingSchedule, MaskRule, Order};
use crate::tensor::Tensor;
use crate::transforms::{TransformConfig, Transforms, HYPER_PATCH, PATCH};
use crate::weights::WeightStore;

/// Images are padded to a multiple of this many pixels.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    pub model: ContextModelConfig,
    pub n_h: usize,
    pub latent_scale: f64,
    pub order: Order,
    pub sfg: bool,
}

impl CodecConfig {
    pub fn full() -> Self {
        Self {
            model: ContextModelConfig::full(),
            n_h: 192,
            latent_scale: 16.0,
            order: Order::Cfo,
            sfg: true,
        }
    }

    /// Small configuration that runs in milliseconds.
    pub fn desk() -> Self {
        Self {
            model: ContextModelConfig::desk(),
            n_h: 8,
            latent_scale: 16.0,
            order: Order::Cfo,
            sfg: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_h == 0 {
            return Err(Error::Config("N_h must be positive".into()));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::Config(format!("latent scale {} must be positive", self.latent_scale)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<CodingSchedule> {
        CodingSchedule::build(self.model.n_cs, self.order, self.sfg)
    }

    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig {
            m: self.model.m,
            n_h: self.n_h,
            latent_scale: self.latent_scale,
        }
    }

    /// Fresh seeded weights for every network.
    pub fn init_weights(&self, seed: u64) -> Result<WeightStore> {
        self.validate()?;
        let mut store = WeightStore::new();
        self.model.init_weights(seed, &mut store);
        self.transform_config().init_weights(seed, &mut store)?;
        Ok(store)
    }

    fn check_header(&self, h: &Header) -> Result<()> {
        let m = &self.model;
        let pairs = [
            ("M", h.m as usize, m.m),
            ("N_cs", h.n_cs as usize, m.n_cs),
            ("K", h.k as usize, m.k),
            ("L", h.layers as usize, m.layers),
            ("k_m", h.k_m as usize, m.k_m),
        ];
        for (name, got, want) in pairs {
            if got != want {
                return Err(Error::Mismatch(format!("stream {name}={got}, configuration {want}")));
            }
        }
        if h.order != self.order || h.sfg != self.sfg {
            return Err(Error::Mismatch(format!(
                "stream schedule ({}, sfg={}) differs from configuration ({}, sfg={})",
                h.order, h.sfg, self.order, self.sfg
            )));
        }
        let (ph, pw) = (h.padded_height as usize, h.padded_width as usize);
        if ph == 0
            || pw == 0
            || ph % PAD_MULTIPLE != 0
            || pw % PAD_MULTIPLE != 0
            || ph != padded_len(h.height as usize)
            || pw != padded_len(h.width as usize)
        {
            return Err(Error::Corrupt(format!(
                "image {}×{} cannot pad to {ph}×{pw}",
                h.height, h.width
            )));
        }
        Ok(())
    }
}

/// How the encoder obtains latent parameters. Both give identical streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParamPath {
    #[default]
    SinglePass,
    Cached,
}

#[derive(Clone, Debug)]
pub struct Encoded<S> {
    pub stream: Bitstream,
    pub bytes: Vec<u8>,
    pub y_hat: Tensor<S>,
    pub z_hat: Tensor<S>,
    /// Model rate of the latent, in bits.
    pub rate_y: f64,
    /// Model rate of the hyper-latent, in bits.
    pub rate_z: f64,
}

impl<S> Encoded<S> {
    pub fn bpp(&self) -> f64 {
        let h = &self.stream.header;
        8.0 * self.bytes.len() as f64 / (f64::from(h.height) * f64::from(h.width))
    }

    pub fn payload_bits(&self) -> usize {
        8 * self.stream.payload.len()
    }
}

#[derive(Clone, Debug)]
pub struct Decoded<S> {
    pub header: Header,
    pub y_hat: Tensor<S>,
    pub z_hat: Tensor<S>,
    /// Reconstruction at the original size, unclamped.
    pub image: Tensor<S>,
    pub invocations: usize,
    pub macs: u128,
}

#[derive(Clone, Debug)]
pub struct LatentDecode<S> {
    pub y_hat: Tensor<S>,
    pub z_hat: Tensor<S>,
    pub invocations: usize,
    pub macs: u128,
}

pub struct Codec<S> {
    cfg: CodecConfig,
    sched: CodingSchedule,
    transforms: Transforms<S>,
    model: ContextModel<S>,
    prior: FactorizedPrior<S>,
    digest: [u8; 32],
}

impl<S: Scalar> Codec<S> {
    pub fn from_store(cfg: CodecConfig, store: &WeightStore) -> Result<Self> {
        cfg.validate()?;
        let n_h = cfg.n_h;
        let prior = FactorizedPrior {
            mean: store.fetch::<S>("prior.mean", &[n_h])?.into_data(),
            scale: store.fetch::<S>("prior.scale", &[n_h])?.into_data(),
        };
        if prior.scale.iter().any(|s| !(s.as_f64() > 0.0)) {
            return Err(Error::Mismatch("prior scales must be positive".into()));
        }
        Ok(Self {
            sched: cfg.schedule()?,
            transforms: Transforms::from_store(cfg.model.m, n_h, store)?,
            model: ContextModel::from_store(cfg.model, store)?,
            prior,
            digest: store.digest(),
            cfg,
        })
    }

    /// Swaps the group mask of the single-pass path (fault injection).
    pub fn with_mask_rule(mut self, rule: MaskRule) -> Self {
        self.model = self.model.with_mask_rule(rule);
        self
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &CodingSchedule {
        &self.sched
    }

    pub fn transforms(&self) -> &Transforms<S> {
        &self.transforms
    }

    pub fn model(&self) -> &ContextModel<S> {
        &self.model
    }

    pub fn prior(&self) -> &FactorizedPrior<S> {
        &self.prior
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Continuous `(y, z)` of a padded image; `z` is taken from the rounded latent.
    pub fn analyze(&self, padded: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let y = self.transforms.analyze(padded)?;
        let z = self.transforms.hyper_analyze(&quantize(&y))?;
        Ok((y, z))
    }

    pub fn hyper_features(&self, z_hat: &Tensor<S>, hl: usize, wl: usize) -> Result<Tensor<S>> {
        self.transforms.hyper_synthesize(z_hat, hl, wl)
    }

    /// Parameters of every latent element, in coding order.
    pub fn latent_params(&self, y_hat: &Tensor<S>, z_hat: &Tensor<S>, path: ParamPath) -> Result<GmmParams<S>> {
        let (hl, wl) = latent_dims(y_hat)?;
        let feats = self.hyper_features(z_hat, hl, wl)?;
        match path {
            ParamPath::SinglePass => self.model.forward_masked(y_hat, &feats, &self.sched),
            ParamPath::Cached => {
                let r = egr_rearrange(y_hat, &self.sched)?;
                let mut s = self.model.decode_session(&self.sched, &feats)?;
                let mut out = GmmParams::new(self.cfg.model.k_m);
                for g in 0..self.sched.len() {
                    let p = if self.sched.hyperprior_only(g) {
                        s.hyperprior_params()?
                    } else {
                        s.decode_step(g, &r)?
                    };
                    out.append(&p);
                }
                Ok(out)
            }
        }
    }

    /// Model rates `(R(ŷ), R(ẑ))` in bits.
    pub fn rates(&self, y_hat: &Tensor<S>, z_hat: &Tensor<S>) -> Result<(f64, f64)> {
        let params = self.latent_params(y_hat, z_hat, ParamPath::SinglePass)?;
        let symbols = egr_rearrange(y_hat, &self.sched)?;
        Ok((rate_bits(symbols.data(), &params)?, factorized_rate(z_hat, &self.prior)?))
    }

    fn prior_tables(&self) -> Result<Vec<CdfTable>> {
        (0..self.cfg.n_h).map(|c| quantize_cdf(&self.prior.pmf(c))).collect()
    }

    /// Range-coded payload of quantized latents (hyper-latent first, then the
    /// latent in coding order) and the latent parameters used.
    pub fn code_latents(
        &self,
        y_hat: &Tensor<S>,
        z_hat: &Tensor<S>,
        path: ParamPath,
    ) -> Result<(Vec<u8>, GmmParams<S>)> {
        let (hl, wl) = latent_dims(y_hat)?;
        let want_z = [self.cfg.n_h, hl.div_ceil(HYPER_PATCH), wl.div_ceil(HYPER_PATCH)];
        if z_hat.shape() != want_z {
            return Err(Error::shape("encode", format!("hyper-latent {:?}, expected {want_z:?}", z_hat.shape())));
        }
        let params = self.latent_params(y_hat, z_hat, path)?;
        let symbols = egr_rearrange(y_hat, &self.sched)?;
        let mut enc = RangeEncoder::new();
        let per = want_z[1] * want_z[2];
        let ztables = self.prior_tables()?;
        for (i, &v) in z_hat.data().iter().enumerate() {
            enc.encode_symbol(&ztables[i / per], symbol(v)?)?;
        }
        for (i, &v) in symbols.data().iter().enumerate() {
            enc.encode_symbol(&element_table(&params, i)?, symbol(v)?)?;
        }
        Ok((enc.finish(), params))
    }

    /// Codes quantized latents of an image originally `height × width`.
    pub fn encode_latents(
        &self,
        y_hat: &Tensor<S>,
        z_hat: &Tensor<S>,
        height: usize,
        width: usize,
        path: ParamPath,
    ) -> Result<Encoded<S>> {
        let (ph, pw) = (padded_len(height), padded_len(width));
        let (hl, wl) = latent_dims(y_hat)?;
        if height == 0 || width == 0 || (hl * PATCH, wl * PATCH) != (ph, pw) {
            return Err(Error::shape(
                "encode",
                format!("latent {hl}×{wl} does not belong to a {height}×{width} image"),
            ));
        }
        let (payload, params) = self.code_latents(y_hat, z_hat, path)?;
        let symbols = egr_rearrange(y_hat, &self.sched)?;
        let stream = Bitstream {
            header: self.header(height, width),
            payload,
        };
        Ok(Encoded {
            bytes: stream.to_bytes(),
            stream,
            rate_y: rate_bits(symbols.data(), &params)?,
            rate_z: factorized_rate(z_hat, &self.prior)?,
            y_hat: y_hat.clone(),
            z_hat: z_hat.clone(),
        })
    }

    /// Pads, analyzes, quantizes and codes a `(3, H, W)` image in `[0, 1]`.
    pub fn encode(&self, image: &Tensor<S>) -> Result<Encoded<S>> {
        let (h, w) = image_dims(image)?;
        let (y, z) = self.analyze(&pad_replicate(image, PAD_MULTIPLE)?)?;
        self.encode_latents(&quantize(&y), &quantize(&z), h, w, ParamPath::SinglePass)
    }

    fn header(&self, height: usize, width: usize) -> Header {
        let m = &self.cfg.model;
        Header {
            height: height as u32,
            width: width as u32,
            padded_height: padded_len(height) as u32,
            padded_width: padded_len(width) as u32,
            m: m.m as u32,
            n_cs: m.n_cs as u32,
            k: m.k as u32,
            layers: m.layers as u32,
            k_m: m.k_m as u32,
            order: self.cfg.order,
            sfg: self.cfg.sfg,
            weights_digest: self.digest,
        }
    }

    /// Decodes a stream with the cached stepwise path.
    pub fn decode(&self, bytes: &[u8]) -> Result<Decoded<S>> {
        let stream = Bitstream::from_bytes(bytes)?;
        let header = stream.header;
        if header.weights_digest != self.digest {
            return Err(Error::Mismatch("stream was coded with different weights".into()));
        }
        self.cfg.check_header(&header)?;
        let (hl, wl) = (header.padded_height as usize / PATCH, header.padded_width as usize / PATCH);
        let l = self.decode_latents(&stream.payload, hl, wl)?;
        let image = self.reconstruct(&l.y_hat, header.height as usize, header.width as usize)?;
        Ok(Decoded {
            header,
            y_hat: l.y_hat,
            z_hat: l.z_hat,
            image,
            invocations: l.invocations,
            macs: l.macs,
        })
    }

    /// Inverse of [`Codec::code_latents`] for an `hl × wl` latent, using the
    /// cached stepwise path.
    pub fn decode_latents(&self, payload: &[u8], hl: usize, wl: usize) -> Result<LatentDecode<S>> {
        let (hz, wz) = (hl.div_ceil(HYPER_PATCH), wl.div_ceil(HYPER_PATCH));
        let mut dec = RangeDecoder::new(payload)?;

        let ztables = self.prior_tables()?;
        let per = hz * wz;
        let mut z = Vec::with_capacity(self.cfg.n_h * per);
        for i in 0..self.cfg.n_h * per {
            z.push(S::of(f64::from(dec.decode_symbol(&ztables[i / per])?)));
        }
        let z_hat = Tensor::new(vec![self.cfg.n_h, hz, wz], z)?;
        let feats = self.hyper_features(&z_hat, hl, wl)?;

        let m = &self.cfg.model;
        let mut session = self.model.decode_session(&self.sched, &feats)?;
        let p_cs = m.p_cs();
        let plane = hl * (wl / 2) * p_cs;
        let mut r = Tensor::zeros(vec![self.sched.len(), hl, wl / 2, p_cs]);
        for g in 0..self.sched.len() {
            let params = if self.sched.hyperprior_only(g) {
                session.hyperprior_params()?
            } else {
                session.decode_step(g, &r)?
            };
            for i in 0..plane {
                let v = dec.decode_symbol(&element_table(&params, i)?)?;
                r.data_mut()[g * plane + i] = S::of(f64::from(v));
            }
        }
        Ok(LatentDecode {
            y_hat: inverse_egr(&r, &self.sched)?,
            z_hat,
            invocations: session.invocations(),
            macs: session.macs(),
        })
    }

    /// Synthesized image cropped to `height × width`.
    pub fn reconstruct(&self, y_hat: &Tensor<S>, height: usize, width: usize) -> Result<Tensor<S>> {
        crop(&self.transforms.synthesize(y_hat)?, height, width)
    }
}

fn element_table<S: Scalar>(params: &GmmParams<S>, i: usize) -> Result<CdfTable> {
    let (pi, mu, sigma) = params.element(i);
    quantize_cdf(&DiscretizedPmf::gmm(pi, mu, sigma))
}

fn symbol<S: Scalar>(v: S) -> Result<i32> {
    let f = v.as_f64();
    if f.fract() != 0.0 || !f.is_finite() {
        return Err(Error::Corrupt(format!("latent value {f} is not an integer")));
    }
    Ok(f as i32)
}

fn latent_dims<S: Copy>(t: &Tensor<S>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("latent", format!("rank {} tensor", s.len())));
    }
    Ok((s[1], s[2]))
}

fn image_dims<S: Copy>(t: &Tensor<S>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("image", format!("{s:?} is not a non-empty (3, H, W) image")));
    }
    Ok((s[1], s[2]))
}

pub fn padded_len(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE).max(1) * PAD_MULTIPLE
}

/// Rounds half away from zero and clamps to the symbol support.
pub fn quantize<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (lo, hi) = (S::of(-255.0), S::of(255.0));
    t.map(|v| round_half_away(v).max(lo).min(hi))
}

/// Extends a `(C, H, W)` tensor by repeating its last row and column.
pub fn pad_replicate<S: Copy>(t: &Tensor<S>, multiple: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("pad", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let d = t.data();
    Ok(Tensor::from_fn(vec![c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        d[(ch * h + y.min(h - 1)) * w + x.min(w - 1)]
    }))
}

pub fn crop<S: Copy>(t: &Tensor<S>, height: usize, width: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 3 || s[1] < height || s[2] < width {
        return Err(Error::shape("crop", format!("{s:?} to {height}×{width}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(Tensor::from_fn(vec![s[0], height, width], |i| {
        let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
        d[(ch * h + y) * w + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::uniform;

    fn codec(seed: u64) -> Codec<f64> {
        let cfg = CodecConfig::desk();
        Codec::from_store(cfg, &cfg.init_weights(seed).unwrap()).unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        uniform(seed, "img", vec![3, h, w], 0.5).cast::<f64>().map(|v| v + 0.5)
    }

    #[test]
    fn padding() {
        assert_eq!(padded_len(1), 32);
        assert_eq!(padded_len(32), 32);
        assert_eq!(padded_len(33), 64);
        let t = Tensor::new(vec![1, 2, 2], vec![1, 2, 3, 4]).unwrap();
        let p = pad_replicate(&t, 3).unwrap();
        assert_eq!(p.data(), &[1, 2, 2, 3, 4, 4, 3, 4, 4]);
        assert_eq!(crop(&p, 2, 2).unwrap(), t);
    }

    #[test]
    fn roundtrip_with_odd_size() {
        let c = codec(1);
        let x = image(2, 40, 50);
        let e = c.encode(&x).unwrap();
        assert_eq!(e.stream.header.padded_height, 64);
        let d = c.decode(&e.bytes).unwrap();
        assert_eq!(d.y_hat, e.y_hat);
        assert_eq!(d.z_hat, e.z_hat);
        assert_eq!(d.image.shape(), &[3, 40, 50]);
        assert_eq!(d.invocations, c.schedule().context_invocations());
        assert_eq!(c.decode(&e.bytes).unwrap().image, d.image);
    }

    #[test]
    fn both_parameter_paths_give_the_same_stream() {
        let c = codec(3);
        let x = pad_replicate(&image(4, 32, 64), PAD_MULTIPLE).unwrap();
        let (y, z) = c.analyze(&x).unwrap();
        let (y, z) = (quantize(&y), quantize(&z));
        let a = c.encode_latents(&y, &z, 32, 64, ParamPath::SinglePass).unwrap();
        let b = c.encode_latents(&y, &z, 32, 64, ParamPath::Cached).unwrap();
        assert_eq!(a.bytes, b.bytes);
    }

    #[test]
    fn decoder_rejects_foreign_streams() {
        let c = codec(5);
        let e = c.encode(&image(6, 32, 32)).unwrap();
        assert!(matches!(codec(6).decode(&e.bytes), Err(Error::Mismatch(_))));
        let cut = &e.bytes[..e.bytes.len() - 3];
        assert!(c.decode(cut).is_err());
        assert!(matches!(c.decode(&e.bytes[..10]), Err(Error::Truncated)));
    }
}
