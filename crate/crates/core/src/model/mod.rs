//! Encoders, decoder, patch discriminators and heads.
//!
//! All parameters sit in one [`VarStore`] under eight top-level groups
//! (see [`GROUPS`]). Images are `[B, 3, S, S]` tensors with values in
//! `[0, 1]`; features are `[B, d]`.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{Path, VarStore};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::synthetic::Domain;

pub use layers::{l2_normalize, Conv, Linear};
use layers::{leaky_relu, param_count};

pub const AU_ENCODER: &str = "au_encoder";
pub const DM_ENCODER_SOURCE: &str = "dm_encoder_source";
pub const DM_ENCODER_TARGET: &str = "dm_encoder_target";
pub const DECODER: &str = "decoder";
pub const DISCRIMINATOR_SOURCE: &str = "discriminator_source";
pub const DISCRIMINATOR_TARGET: &str = "discriminator_target";
pub const AU_HEAD: &str = "au_head";
pub const ICL_PROJECTOR: &str = "icl_projector";

pub const GROUPS: [&str; 8] = [
    AU_ENCODER,
    DM_ENCODER_SOURCE,
    DM_ENCODER_TARGET,
    DECODER,
    DISCRIMINATOR_SOURCE,
    DISCRIMINATOR_TARGET,
    AU_HEAD,
    ICL_PROJECTOR,
];

/// Number of decoder convolutions.
pub const DECODER_CONVS: usize = 7;
const ENCODER_STRIDES: [i64; 8] = [1, 2, 1, 2, 1, 2, 2, 1];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side; a power of two in `[8, 256]`.
    pub image_size: usize,
    /// Base channel width `w` of encoders, decoder and discriminators.
    pub width: usize,
    pub d_au: usize,
    pub d_dm: usize,
    pub d_proj: usize,
    pub proj_hidden: usize,
    /// Width of the decoder's domain branch, re-concatenated before every conv.
    pub dm_branch: usize,
    pub num_aus: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            width: 32,
            d_au: 64,
            d_dm: 64,
            d_proj: 32,
            proj_hidden: 64,
            dm_branch: 8,
            num_aus: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if !(s.is_power_of_two() && (8..=256).contains(&s)) {
            return Err(Error::invalid("image_size", format!("{s} is not a power of two in [8, 256]")));
        }
        for (name, v) in [
            ("width", self.width),
            ("d_au", self.d_au),
            ("d_dm", self.d_dm),
            ("d_proj", self.d_proj),
            ("proj_hidden", self.proj_hidden),
            ("dm_branch", self.dm_branch),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.width % 2 != 0 {
            return Err(Error::invalid("width", format!("{} must be even", self.width)));
        }
        if !(crate::synthetic::types::MIN_AUS..=crate::synthetic::types::MAX_AUS)
            .contains(&self.num_aus)
        {
            return Err(Error::invalid("num_aus", format!("{} outside [3, 10]", self.num_aus)));
        }
        Ok(())
    }

    /// Side of the discriminator's patch grid: three stride-2 convolutions.
    pub fn patch_grid(&self) -> usize {
        self.image_size / 8
    }

    fn upsamplings(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }
}

fn check_images(what: &str, x: &Tensor, size: usize) -> Result<()> {
    let s = x.size();
    let size = size as i64;
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::Shape(format!("{what}: expected [B, 3, {size}, {size}], got {s:?}")));
    }
    Ok(())
}

/// Unit-norm features enter every consumer multiplied by `sqrt(d)`, which
/// gives coordinates of order one (a fixed reparametrization of the first
/// linear layer of the consumer).
fn gain(x: &Tensor) -> Tensor {
    x * (x.size()[1] as f64).sqrt()
}

fn check_features(what: &str, x: &Tensor, dim: usize) -> Result<()> {
    let s = x.size();
    if s.len() != 2 || s[1] != dim as i64 {
        return Err(Error::Shape(format!("{what}: expected [B, {dim}], got {s:?}")));
    }
    Ok(())
}

/// Eight 3x3 convolutions with LeakyReLU, the last one a 1x1 projection to
/// the feature dimension, then ReLU, global average pooling and L2
/// normalization.
///
/// Pooled features are non-negative, so the signed cosine of the
/// orthogonality term is minimized at orthogonality rather than at
/// anti-alignment. Unit norm keeps the squared-distance cycle terms from
/// being satisfied by shrinking every feature towards zero.
#[derive(Debug)]
pub struct Encoder {
    convs: Vec<Conv>,
}

impl Encoder {
    fn new(p: &Path, width: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = width as i64;
        let chans = [3, w, w, 2 * w, 2 * w, 3 * w, 3 * w, 4 * w, d_out as i64];
        let convs = (0..8)
            .map(|i| {
                let last = i == 7;
                let (k, pad) = if last { (1, 0) } else { (3, 1) };
                Conv::new(
                    p,
                    &format!("conv{i}"),
                    chans[i],
                    chans[i + 1],
                    k,
                    ENCODER_STRIDES[i],
                    pad,
                    rng,
                )
            })
            .collect();
        Self { convs }
    }

    pub fn forward(&self, images: &Tensor) -> Tensor {
        let mut x = images * 2.0 - 1.0;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x);
            x = if i + 1 < self.convs.len() { leaky_relu(&x) } else { x.relu() };
        }
        l2_normalize(&x.mean_dim([2i64, 3].as_slice(), false, None::<Kind>))
    }

    pub fn num_params(&self) -> i64 {
        let ts: Vec<&Tensor> = self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect();
        param_count(&ts)
    }
}

/// Linear seed to a 4x4 map, then seven convolutions interleaved with
/// nearest-neighbour upsampling. A projected copy of the domain feature is
/// broadcast and concatenated before every convolution.
#[derive(Debug)]
pub struct Decoder {
    seed: Linear,
    branch: Linear,
    convs: Vec<Conv>,
    /// Upsample before conv `i`.
    upsample_before: Vec<bool>,
    seed_channels: i64,
    d_au: usize,
    d_dm: usize,
}

impl Decoder {
    fn new(p: &Path, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width as i64;
        let b = cfg.dm_branch as i64;
        let seed_channels = 4 * w;
        let seed = Linear::new(p, "seed", (cfg.d_au + cfg.d_dm) as i64, seed_channels * 16, rng);
        let branch = Linear::new(p, "dm_branch", cfg.d_dm as i64, b, rng);
        let outs = [4 * w, 3 * w, 2 * w, 2 * w, w, w, 3];
        let n_up = cfg.upsamplings();
        let upsample_before: Vec<bool> = (0..DECODER_CONVS).map(|i| i >= 1 && i <= n_up).collect();
        let mut c_in = seed_channels;
        let convs = outs
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::new(p, &format!("conv{i}"), c_in + b, c_out, 3, 1, 1, rng);
                c_in = c_out;
                conv
            })
            .collect();
        Self {
            seed,
            branch,
            convs,
            upsample_before,
            seed_channels,
            d_au: cfg.d_au,
            d_dm: cfg.d_dm,
        }
    }

    pub fn forward(&self, au: &Tensor, dm: &Tensor) -> Result<Tensor> {
        check_features("decoder AU input", au, self.d_au)?;
        check_features("decoder domain input", dm, self.d_dm)?;
        let n = au.size()[0];
        if dm.size()[0] != n {
            return Err(Error::Shape(format!(
                "decoder batch mismatch: {n} AU rows vs {} domain rows",
                dm.size()[0]
            )));
        }
        let dm = gain(dm);
        let z = Tensor::cat(&[&gain(au), &dm], 1);
        let mut x = leaky_relu(&self.seed.forward(&z)).reshape([n, self.seed_channels, 4, 4]);
        let branch = self.branch.forward(&dm);
        let b = branch.size()[1];
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            if self.upsample_before[i] {
                let s = x.size();
                x = x.upsample_nearest2d([s[2] * 2, s[3] * 2].as_slice(), None, None);
            }
            let s = x.size();
            let side = branch.reshape([n, b, 1, 1]).expand([n, b, s[2], s[3]], false);
            x = conv.forward(&Tensor::cat(&[&x, &side], 1));
            x = if i == last { x.sigmoid() } else { leaky_relu(&x) };
        }
        Ok(x)
    }
}

/// Three 4x4 stride-2 convolutions and a 3x3 scoring conv with sigmoid:
/// an `S/8 x S/8` grid of patch probabilities.
#[derive(Debug)]
pub struct PatchDiscriminator {
    convs: Vec<Conv>,
}

impl PatchDiscriminator {
    fn new(p: &Path, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = width as i64;
        let convs = vec![
            Conv::new(p, "conv0", 3, w, 4, 2, 1, rng),
            Conv::new(p, "conv1", w, 2 * w, 4, 2, 1, rng),
            Conv::new(p, "conv2", 2 * w, 4 * w, 4, 2, 1, rng),
            Conv::new(p, "score", 4 * w, 1, 3, 1, 1, rng),
        ];
        Self { convs }
    }

    /// `[B, 1, S/8, S/8]` scores in `(0, 1)`.
    pub fn forward(&self, images: &Tensor) -> Tensor {
        let mut x = images * 2.0 - 1.0;
        for conv in &self.convs[..3] {
            x = leaky_relu(&conv.forward(&x));
        }
        self.convs[3].forward(&x).sigmoid()
    }
}

/// AU encoder output, domain encoder output.
pub struct Features {
    pub au: Tensor,
    pub dm: Tensor,
}

impl Features {
    pub fn shallow_clone(&self) -> Self {
        Self {
            au: self.au.shallow_clone(),
            dm: self.dm.shallow_clone(),
        }
    }
}

/// The full set of learnable components.
pub struct D2ca {
    pub vs: VarStore,
    pub config: ModelConfig,
    pub au_encoder: Encoder,
    pub dm_encoder_source: Encoder,
    pub dm_encoder_target: Encoder,
    pub decoder: Decoder,
    pub discriminator_source: PatchDiscriminator,
    pub discriminator_target: PatchDiscriminator,
    pub au_head: Linear,
    pub projector: (Linear, Linear),
}

impl D2ca {
    /// Builds a model with parameters drawn from a ChaCha stream keyed on
    /// `seed`; the libtorch global generator is not used.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let au_encoder = Encoder::new(&(&root / AU_ENCODER), w, config.d_au, &mut rng);
        let dm_encoder_source = Encoder::new(&(&root / DM_ENCODER_SOURCE), w, config.d_dm, &mut rng);
        let dm_encoder_target = Encoder::new(&(&root / DM_ENCODER_TARGET), w, config.d_dm, &mut rng);
        let decoder = Decoder::new(&(&root / DECODER), config, &mut rng);
        let discriminator_source = PatchDiscriminator::new(&(&root / DISCRIMINATOR_SOURCE), w, &mut rng);
        let discriminator_target = PatchDiscriminator::new(&(&root / DISCRIMINATOR_TARGET), w, &mut rng);
        let au_head = Linear::new(&(&root / AU_HEAD), "linear", config.d_au as i64, config.num_aus as i64, &mut rng);
        let proj = &root / ICL_PROJECTOR;
        let projector = (
            Linear::new(&proj, "fc0", (config.d_au + config.d_dm) as i64, config.proj_hidden as i64, &mut rng),
            Linear::new(&proj, "fc1", config.proj_hidden as i64, config.d_proj as i64, &mut rng),
        );
        Ok(Self {
            vs,
            config: config.clone(),
            au_encoder,
            dm_encoder_source,
            dm_encoder_target,
            decoder,
            discriminator_source,
            discriminator_target,
            au_head,
            projector,
        })
    }

    pub fn kind(&self) -> Kind {
        self.vs.kind()
    }

    /// Switches every parameter to `f64`; inputs must then be `f64` too.
    pub fn to_double(&mut self) {
        self.vs.double();
    }

    pub fn encode_au(&self, images: &Tensor) -> Result<Tensor> {
        check_images("encode_au", images, self.config.image_size)?;
        Ok(self.au_encoder.forward(images))
    }

    pub fn dm_encoder(&self, domain: Domain) -> &Encoder {
        match domain {
            Domain::Source => &self.dm_encoder_source,
            Domain::Target => &self.dm_encoder_target,
        }
    }

    pub fn encode_domain(&self, images: &Tensor, domain: Domain) -> Result<Tensor> {
        check_images("encode_domain", images, self.config.image_size)?;
        Ok(self.dm_encoder(domain).forward(images))
    }

    /// AU and domain features of a batch from one domain.
    pub fn encode(&self, images: &Tensor, domain: Domain) -> Result<Features> {
        Ok(Features {
            au: self.encode_au(images)?,
            dm: self.encode_domain(images, domain)?,
        })
    }

    pub fn decode(&self, au: &Tensor, dm: &Tensor) -> Result<Tensor> {
        self.decoder.forward(au, dm)
    }

    pub fn discriminator(&self, domain: Domain) -> &PatchDiscriminator {
        match domain {
            Domain::Source => &self.discriminator_source,
            Domain::Target => &self.discriminator_target,
        }
    }

    pub fn discriminate(&self, images: &Tensor, domain: Domain) -> Result<Tensor> {
        check_images("discriminate", images, self.config.image_size)?;
        Ok(self.discriminator(domain).forward(images))
    }

    /// Per-AU probabilities `[B, K]`.
    pub fn predict_au(&self, au: &Tensor) -> Result<Tensor> {
        check_features("predict_au", au, self.config.d_au)?;
        Ok(self.au_head.forward(&gain(au)).sigmoid())
    }

    /// Unit-norm embedding of the concatenated AU and domain features.
    pub fn project_contrastive(&self, au: &Tensor, dm: &Tensor) -> Result<Tensor> {
        check_features("projector AU input", au, self.config.d_au)?;
        check_features("projector domain input", dm, self.config.d_dm)?;
        let h = self.projector.0.forward(&Tensor::cat(&[gain(au), gain(dm)], 1)).relu();
        Ok(l2_normalize(&self.projector.1.forward(&h)))
    }

    /// All variables as `(name, tensor)`, sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut vars: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    /// Sorted variables whose top-level group is one of `groups`.
    pub fn group_parameters(&self, groups: &[&str]) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| groups.iter().any(|g| group_of(name) == *g))
            .collect()
    }

    pub fn num_params(&self, groups: &[&str]) -> i64 {
        self.group_parameters(groups)
            .iter()
            .map(|(_, t)| t.numel() as i64)
            .sum()
    }

    /// Marks a group set as (non-)trainable for subsequent graph building.
    pub fn set_requires_grad(&self, groups: &[&str], requires_grad: bool) {
        for (_, t) in self.group_parameters(groups) {
            let _ = t.set_requires_grad(requires_grad);
        }
    }

    /// SHA-256 over the sorted parameter names, shapes and raw bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_parameters() {
            h.update(name.as_bytes());
            for d in t.size() {
                h.update(d.to_le_bytes());
            }
            h.update(tensor_bytes(&t));
        }
        hex::encode(h.finalize())
    }

    /// Copies parameter values from `(name, tensor)` pairs. Every model
    /// variable must be present with a matching shape.
    pub fn load_parameters(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let vars = self.vs.variables();
        if params.len() != vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                params.len(),
                vars.len()
            )));
        }
        tch::no_grad(|| {
            for (name, src) in params {
                let mut dst = vars
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?
                    .shallow_clone();
                if dst.size() != src.size() {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        src.size(),
                        dst.size()
                    )));
                }
                dst.copy_(&src.to_kind(dst.kind()));
            }
            Ok(())
        })
    }
}

/// Top-level group of a variable name, e.g. `decoder` for `decoder.conv0.weight`.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Raw little-endian bytes of a contiguous CPU tensor.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let t = t.contiguous();
    let numel = t.numel();
    let mut out = vec![0u8; numel * t.kind().elt_size_in_bytes()];
    t.copy_data_u8(&mut out, numel);
    out
}

/// Stacks `[n, 3, H, W]` float images from a flat CHW buffer.
pub fn images_to_tensor(data: &[f32], n: usize, height: usize, width: usize) -> Tensor {
    Tensor::from_slice(data).reshape([n as i64, 3, height as i64, width as i64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            width: 8,
            d_au: 16,
            d_dm: 16,
            d_proj: 8,
            proj_hidden: 16,
            dm_branch: 4,
            num_aus: 3,
        }
    }

    fn images(n: i64, s: i64, seed: i64) -> Tensor {
        tch::Tensor::arange(n * 3 * s * s, (Kind::Float, Device::Cpu))
            .f_mul_scalar(0.37 + seed as f64)
            .unwrap()
            .sin()
            .abs()
            .reshape([n, 3, s, s])
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().max().double_value(&[])
    }

    #[test]
    fn encoder_parameter_budget() {
        let m = D2ca::new(&ModelConfig::default(), 0).unwrap();
        let n = m.au_encoder.num_params();
        assert_eq!(n, m.num_params(&[AU_ENCODER]));
        let rel = (n as f64 - 350_000.0).abs() / 350_000.0;
        assert!(rel <= 0.2, "{n} parameters");
    }

    #[test]
    fn shapes_and_ranges() {
        let cfg = small();
        let m = D2ca::new(&cfg, 1).unwrap();
        let x = images(5, 16, 0);
        let f = m.encode(&x, Domain::Source).unwrap();
        assert_eq!(f.au.size(), [5, 16]);
        assert_eq!(f.dm.size(), [5, 16]);
        let y = m.decode(&f.au, &f.dm).unwrap();
        assert_eq!(y.size(), x.size());
        assert!(y.min().double_value(&[]) >= 0.0 && y.max().double_value(&[]) <= 1.0);
        let d = m.discriminate(&x, Domain::Target).unwrap();
        assert_eq!(d.size(), [5, 1, 2, 2]);
        assert!(d.min().double_value(&[]) > 0.0 && d.max().double_value(&[]) < 1.0);
        let p = m.predict_au(&f.au).unwrap();
        assert_eq!(p.size(), [5, 3]);
        let e = m.project_contrastive(&f.au, &f.dm).unwrap();
        let norms = e.square().sum_dim_intlist(1, false, None::<Kind>).sqrt();
        assert!(max_abs(&(norms - 1.0)) < 1e-6);
    }

    #[test]
    fn default_patch_grid() {
        let m = D2ca::new(&ModelConfig::default(), 0).unwrap();
        let d = m.discriminate(&images(1, 64, 0), Domain::Source).unwrap();
        assert_eq!(d.size(), [1, 1, 8, 8]);
        assert_eq!(ModelConfig::default().patch_grid(), 8);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = D2ca::new(&small(), 0).unwrap();
        assert!(matches!(m.encode_au(&images(2, 8, 0)), Err(Error::Shape(_))));
        let a = Tensor::zeros([2, 15], (Kind::Float, Device::Cpu));
        let b = Tensor::zeros([2, 16], (Kind::Float, Device::Cpu));
        assert!(m.decode(&a, &b).is_err());
        assert!(m.predict_au(&a).is_err());
        assert!(m.project_contrastive(&b, &a).is_err());
    }

    #[test]
    fn single_au_encoder_parameter_set() {
        let m = D2ca::new(&small(), 0).unwrap();
        let groups: std::collections::BTreeSet<&str> = m
            .named_parameters()
            .iter()
            .map(|(n, _)| group_of(n).to_string())
            .collect::<Vec<_>>()
            .iter()
            .map(|s| GROUPS.iter().find(|g| **g == s.as_str()).copied().unwrap())
            .collect();
        assert_eq!(groups.len(), GROUPS.len());
        // Every AU-encoder variable is the very tensor the encoder uses.
        let vars = m.group_parameters(&[AU_ENCODER]);
        assert_eq!(vars.len(), 16);
        for (conv, pair) in m.au_encoder.convs.iter().zip(vars.chunks(2)) {
            assert_eq!(conv.bias.data_ptr(), pair[0].1.data_ptr());
            assert_eq!(conv.weight.data_ptr(), pair[1].1.data_ptr());
        }
    }

    #[test]
    fn domain_routing_is_private() {
        let m = D2ca::new(&small(), 2).unwrap();
        let x = images(3, 16, 1);
        let before = m.encode_domain(&x, Domain::Source).unwrap();
        let other = m.encode_domain(&x, Domain::Target).unwrap();
        assert!(max_abs(&(&before - &other)) > 0.0);
        tch::no_grad(|| {
            for (_, mut t) in m.group_parameters(&[DM_ENCODER_TARGET]) {
                let _ = t.f_add_scalar_(0.5).unwrap();
            }
        });
        let after = m.encode_domain(&x, Domain::Source).unwrap();
        assert_eq!(max_abs(&(&before - &after)), 0.0);
        assert!(max_abs(&(other - m.encode_domain(&x, Domain::Target).unwrap())) > 0.0);
    }

    #[test]
    fn decoder_uses_domain_branch() {
        let m = D2ca::new(&small(), 3).unwrap();
        let f = m.encode(&images(2, 16, 2), Domain::Source).unwrap();
        let y0 = m.decode(&f.au, &f.dm).unwrap();
        let y1 = m.decode(&f.au, &(&f.dm + 0.5)).unwrap();
        assert!((y0 - y1).abs().mean(None::<Kind>).double_value(&[]) > 0.0);
    }

    #[test]
    fn projector_sees_both_inputs() {
        let m = D2ca::new(&small(), 4).unwrap();
        let f = m.encode(&images(2, 16, 3), Domain::Target).unwrap();
        let e = m.project_contrastive(&f.au, &f.dm).unwrap();
        let e_au = m.project_contrastive(&(&f.au + 0.3), &f.dm).unwrap();
        let e_dm = m.project_contrastive(&f.au, &(&f.dm + 0.3)).unwrap();
        assert!(max_abs(&(&e - e_au)) > 0.0);
        assert!(max_abs(&(&e - e_dm)) > 0.0);
        assert_eq!(max_abs(&(&e - m.project_contrastive(&f.au, &f.dm).unwrap())), 0.0);
    }

    #[test]
    fn zero_head_gives_half() {
        let m = D2ca::new(&small(), 5).unwrap();
        tch::no_grad(|| {
            for (_, mut t) in m.group_parameters(&[AU_HEAD]) {
                let _ = t.zero_();
            }
        });
        let p = m.predict_au(&Tensor::zeros([2, 16], (Kind::Float, Device::Cpu))).unwrap();
        assert_eq!(max_abs(&(p - 0.5)), 0.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = D2ca::new(&small(), 9).unwrap();
        let b = D2ca::new(&small(), 9).unwrap();
        let c = D2ca::new(&small(), 10).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn load_parameters_round_trip() {
        let a = D2ca::new(&small(), 11).unwrap();
        let mut b = D2ca::new(&small(), 12).unwrap();
        let params = a.named_parameters();
        b.load_parameters(&params).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(b.load_parameters(&params[1..]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.image_size = 24;
        assert!(D2ca::new(&c, 0).is_err());
        let mut c = small();
        c.num_aus = 0;
        assert!(D2ca::new(&c, 0).is_err());
    }
}
