//! A scaled-down structure/texture autoencoder with the shape contract of the
//! full-size base model: 16x spatial downsampling to a sliced structure
//! tensor, global pooling to a texture vector, a texture-modulated decoder,
//! an image discriminator, and a patch co-occurrence discriminator.
//!
//! Every Siamese decoding branch reads the single decoder parameter set; the
//! branches exist only as differently masked inputs, never as copies.

use crate::autodiff::{Tape, Var};
use crate::nn::{ConvLayer, LinearLayer, LoadedParams, Modulation, ParamStore, LEAKY_SLOPE};
use crate::util::derive_seed;
use ndarray::{Array1, Array2, Array4, Array5, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch { what: &'static str, expected: Vec<usize>, actual: Vec<usize> },
    #[error("{what} contains non-finite values")]
    NonFinite { what: &'static str },
    #[error("patch side {side} is invalid for image side {image_side} (must be even, >= 4, <= image side)")]
    BadPatchSize { side: usize, image_side: usize },
    #[error("co-occurrence input needs at least one patch per image")]
    NoPatches,
}

/// Sizing of the whole model family; one value per knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image side H in pixels; power of two, at least 32.
    pub image_side: usize,
    /// Structure tensor channel count C_s.
    pub structure_channels: usize,
    /// Texture vector width C_t.
    pub texture_channels: usize,
    /// Channel multiplier for the conv stacks.
    pub base_width: usize,
    /// Side of co-occurrence patches.
    pub patch_size: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Collects every constraint violation instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if !self.image_side.is_power_of_two() || self.image_side < 32 {
            problems.push(format!(
                "image_side must be a power of two >= 32, got {}",
                self.image_side
            ));
        }
        if self.image_side % 16 != 0 {
            problems.push(format!("image_side must be divisible by 16, got {}", self.image_side));
        }
        if self.structure_channels == 0 {
            problems.push("structure_channels must be positive".into());
        }
        if self.texture_channels == 0 {
            problems.push("texture_channels must be positive".into());
        }
        if self.base_width == 0 {
            problems.push("base_width must be positive".into());
        }
        if self.patch_size < 4 || self.patch_size % 2 != 0 || self.patch_size > self.image_side {
            problems.push(format!(
                "patch_size must be even, >= 4 and <= image_side, got {}",
                self.patch_size
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(problems))
        }
    }

    /// Spatial side of the structure tensor (H/16).
    pub fn structure_side(&self) -> usize {
        self.image_side / 16
    }
}

/// The four parameter collections plus the config they were built for.
///
/// There is exactly one decoder store; every Siamese branch reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    pub discriminator: ParamStore,
    pub cooccur: ParamStore,
}

impl ModelParams {
    pub fn num_scalars(&self) -> usize {
        self.encoder.num_scalars()
            + self.decoder.num_scalars()
            + self.discriminator.num_scalars()
            + self.cooccur.num_scalars()
    }
}

struct Encoder {
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    body: ConvLayer,
    structure_head: ConvLayer,
    tex1: LinearLayer,
    tex2: LinearLayer,
}

struct Decoder {
    entry: ConvLayer,
    blocks: Vec<(Modulation, ConvLayer)>,
    head_mod: Modulation,
    head: ConvLayer,
}

struct Discriminator {
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    out: LinearLayer,
}

struct CooccurDisc {
    stem: ConvLayer,
    conv2: ConvLayer,
    fc1: LinearLayer,
    out: LinearLayer,
}

/// Encoder/decoder/discriminator wiring plus the parameter stores.
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    discriminator: Discriminator,
    cooccur: CooccurDisc,
    params: ModelParams,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn build_encoder(store: &mut ParamStore, cfg: &ModelConfig) -> Encoder {
    let w = cfg.base_width;
    let widths = [w, 2 * w, 4 * w, 4 * w, 4 * w];
    let seed = |name: &str| derive_seed(cfg.seed, name, 0);
    let stem = ConvLayer::init(store, "enc.stem", 3, widths[0], 3, SQRT2, seed("enc.stem"));
    let mut downs = Vec::new();
    for i in 0..4 {
        let name = format!("enc.down{}", i + 1);
        downs.push(ConvLayer::init(store, &name, widths[i], widths[i + 1], 3, SQRT2, seed(&name)));
    }
    let body = ConvLayer::init(store, "enc.body", widths[4], widths[4], 3, SQRT2, seed("enc.body"));
    let structure_head = ConvLayer::init(
        store,
        "enc.structure",
        widths[4],
        cfg.structure_channels,
        1,
        1.0,
        seed("enc.structure"),
    );
    let tex1 = LinearLayer::init(store, "enc.tex1", widths[4], widths[4], SQRT2, seed("enc.tex1"));
    let tex2 = LinearLayer::init(store, "enc.tex2", widths[4], cfg.texture_channels, 1.0, seed("enc.tex2"));
    Encoder { stem, downs, body, structure_head, tex1, tex2 }
}

fn build_decoder(store: &mut ParamStore, cfg: &ModelConfig) -> Decoder {
    let w = cfg.base_width;
    // Widths per resolution, from H/16 up to H.
    let widths = [4 * w, 4 * w, 2 * w, w, w];
    let seed = |name: &str| derive_seed(cfg.seed, name, 0);
    let entry = ConvLayer::init(store, "dec.entry", cfg.structure_channels, widths[0], 3, SQRT2, seed("dec.entry"));
    let mut blocks = Vec::new();
    for i in 0..4 {
        let mod_name = format!("dec.mod{}", i + 1);
        let conv_name = format!("dec.up{}", i + 1);
        let modulation = Modulation::init(store, &mod_name, cfg.texture_channels, widths[i], seed(&mod_name));
        let conv = ConvLayer::init(store, &conv_name, widths[i], widths[i + 1], 3, SQRT2, seed(&conv_name));
        blocks.push((modulation, conv));
    }
    let head_mod = Modulation::init(store, "dec.mod_head", cfg.texture_channels, widths[4], seed("dec.mod_head"));
    let head = ConvLayer::init(store, "dec.head", widths[4], 3, 1, 1.0, seed("dec.head"));
    Decoder { entry, blocks, head_mod, head }
}

fn build_discriminator(store: &mut ParamStore, cfg: &ModelConfig) -> Discriminator {
    let w = cfg.base_width;
    let widths = [w, 2 * w, 4 * w, 4 * w, 4 * w];
    let seed = |name: &str| derive_seed(cfg.seed, name, 0);
    let stem = ConvLayer::init(store, "disc.stem", 3, widths[0], 3, SQRT2, seed("disc.stem"));
    let mut downs = Vec::new();
    for i in 0..4 {
        let name = format!("disc.down{}", i + 1);
        downs.push(ConvLayer::init(store, &name, widths[i], widths[i + 1], 3, SQRT2, seed(&name)));
    }
    let out = LinearLayer::init(store, "disc.out", widths[4], 1, 1.0, seed("disc.out"));
    Discriminator { stem, downs, out }
}

fn build_cooccur(store: &mut ParamStore, cfg: &ModelConfig) -> CooccurDisc {
    let w = cfg.base_width;
    let seed = |name: &str| derive_seed(cfg.seed, name, 0);
    let stem = ConvLayer::init(store, "cooc.stem", 3, w, 3, SQRT2, seed("cooc.stem"));
    let conv2 = ConvLayer::init(store, "cooc.conv2", w, 2 * w, 3, SQRT2, seed("cooc.conv2"));
    let fc1 = LinearLayer::init(store, "cooc.fc1", 4 * w, 4 * w, SQRT2, seed("cooc.fc1"));
    let out = LinearLayer::init(store, "cooc.out", 4 * w, 1, 1.0, seed("cooc.out"));
    CooccurDisc { stem, conv2, fc1, out }
}

/// Seed-deterministic initialization; parameter shapes depend only on config.
pub fn init_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut encoder_store = ParamStore::new();
    let mut decoder_store = ParamStore::new();
    let mut discriminator_store = ParamStore::new();
    let mut cooccur_store = ParamStore::new();
    let encoder = build_encoder(&mut encoder_store, &config);
    let decoder = build_decoder(&mut decoder_store, &config);
    let discriminator = build_discriminator(&mut discriminator_store, &config);
    let cooccur = build_cooccur(&mut cooccur_store, &config);
    Ok(Model {
        config,
        encoder,
        decoder,
        discriminator,
        cooccur,
        params: ModelParams {
            config,
            encoder: encoder_store,
            decoder: decoder_store,
            discriminator: discriminator_store,
            cooccur: cooccur_store,
        },
    })
}

impl Model {
    /// Rebuilds the layer wiring around an existing parameter set.
    pub fn from_params(params: ModelParams) -> Result<Model, ModelError> {
        let rebuilt = init_model(params.config)?;
        for (fresh, loaded) in [
            (&rebuilt.params.encoder, &params.encoder),
            (&rebuilt.params.decoder, &params.decoder),
            (&rebuilt.params.discriminator, &params.discriminator),
            (&rebuilt.params.cooccur, &params.cooccur),
        ] {
            if fresh.len() != loaded.len() {
                return Err(ModelError::InvalidConfig(vec![
                    "parameter store does not match the config's architecture".into(),
                ]));
            }
            for (a, b) in fresh.iter().zip(loaded.iter()) {
                if a.0 != b.0 || a.1.shape() != b.1.shape() {
                    return Err(ModelError::InvalidConfig(vec![format!(
                        "parameter tensor mismatch: {} vs {}",
                        a.0, b.0
                    )]));
                }
            }
        }
        Ok(Model { params, ..rebuilt })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    // ---- tape-level forward passes (training path) ----

    /// Encoder forward on an existing tape. Returns (structure, texture) vars.
    pub fn encode_on(&self, tape: &mut Tape, p: &LoadedParams, x: Var) -> (Var, Var) {
        let e = &self.encoder;
        let mut h = e.stem.forward(tape, p, x);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for down in &e.downs {
            h = tape.avg_pool2(h);
            h = down.forward(tape, p, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        h = e.body.forward(tape, p, h);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        let structure = e.structure_head.forward(tape, p, h);
        let pooled = tape.global_avg_pool(h);
        let t = e.tex1.forward(tape, p, pooled);
        let t = tape.leaky_relu(t, LEAKY_SLOPE);
        let texture = e.tex2.forward(tape, p, t);
        (structure, texture)
    }

    /// Decoder forward; output is sigmoid-mapped into [0,1].
    pub fn decode_on(&self, tape: &mut Tape, p: &LoadedParams, s: Var, t: Var) -> Var {
        let d = &self.decoder;
        let mut h = d.entry.forward(tape, p, s);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for (modulation, conv) in &d.blocks {
            h = modulation.forward(tape, p, h, t);
            h = tape.upsample_nearest2(h);
            h = conv.forward(tape, p, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        h = d.head_mod.forward(tape, p, h, t);
        h = d.head.forward(tape, p, h);
        tape.sigmoid(h)
    }

    /// Image discriminator forward, returning (B,) logits.
    pub fn discriminate_on(&self, tape: &mut Tape, p: &LoadedParams, x: Var) -> Var {
        let d = &self.discriminator;
        let mut h = d.stem.forward(tape, p, x);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for down in &d.downs {
            h = tape.avg_pool2(h);
            h = down.forward(tape, p, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = tape.global_avg_pool(h);
        let logits = d.out.forward(tape, p, pooled);
        let batch = tape.value(logits).shape()[0];
        tape.reshape(logits, &[batch])
    }

    /// Patch feature extractor: (N,3,p,p) -> (N,2w) features.
    fn patch_features_on(&self, tape: &mut Tape, p: &LoadedParams, patches: Var) -> Var {
        let c = &self.cooccur;
        let mut h = c.stem.forward(tape, p, patches);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        h = tape.avg_pool2(h);
        h = c.conv2.forward(tape, p, h);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        tape.global_avg_pool(h)
    }

    /// Co-occurrence forward over already-cropped patch stacks.
    ///
    /// `cand` and `reference` are (B*K,3,p,p) with rows grouped per image;
    /// returns one logit per image.
    pub fn cooccur_on(
        &self,
        tape: &mut Tape,
        p: &LoadedParams,
        cand: Var,
        reference: Var,
        patches_per_image: usize,
    ) -> Var {
        let c = &self.cooccur;
        let cand_feat = self.patch_features_on(tape, p, cand);
        let cand_feat = tape.mean_groups(cand_feat, patches_per_image);
        let ref_feat = self.patch_features_on(tape, p, reference);
        let ref_feat = tape.mean_groups(ref_feat, patches_per_image);
        let joint = tape.concat_cols(cand_feat, ref_feat);
        let h = c.fc1.forward(tape, p, joint);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let logits = c.out.forward(tape, p, h);
        let batch = tape.value(logits).shape()[0];
        tape.reshape(logits, &[batch])
    }

    // ---- array-level public API (evaluation path) ----

    fn check_image_batch(&self, x: &Array4<f64>, what: &'static str) -> Result<(), ModelError> {
        let h = self.config.image_side;
        let sh = x.shape();
        if sh[1] != 3 || sh[2] != h || sh[3] != h {
            return Err(ModelError::ShapeMismatch {
                what,
                expected: vec![sh[0], 3, h, h],
                actual: sh.to_vec(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { what });
        }
        Ok(())
    }

    /// Runs the image discriminator; returns one realness logit per image.
    pub fn discriminate(&self, x: &Array4<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_image_batch(x, "discriminator input")?;
        let mut tape = Tape::new();
        let p = self.params.discriminator.load(&mut tape);
        let xv = tape.leaf(x.clone().into_dyn());
        let logits = self.discriminate_on(&mut tape, &p, xv);
        Ok(to_array1(tape.value(logits)))
    }

    /// Runs the co-occurrence discriminator on (B,K,3,p,p) patch stacks.
    pub fn cooccur_discriminate(
        &self,
        patches: &Array5<f64>,
        ref_patches: &Array5<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        let sh = patches.shape();
        if ref_patches.shape() != sh {
            return Err(ModelError::ShapeMismatch {
                what: "reference patches",
                expected: sh.to_vec(),
                actual: ref_patches.shape().to_vec(),
            });
        }
        let (b, k, c, p1, p2) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        if k == 0 {
            return Err(ModelError::NoPatches);
        }
        if c != 3 || p1 != p2 {
            return Err(ModelError::ShapeMismatch {
                what: "patches",
                expected: vec![b, k, 3, p1, p1],
                actual: sh.to_vec(),
            });
        }
        if p1 > self.config.image_side || p1 < 4 || p1 % 2 != 0 {
            return Err(ModelError::BadPatchSize { side: p1, image_side: self.config.image_side });
        }
        let mut tape = Tape::new();
        let loaded = self.params.cooccur.load(&mut tape);
        let flat = |a: &Array5<f64>| {
            ArrayD::from_shape_vec(IxDyn(&[b * k, 3, p1, p1]), a.iter().copied().collect()).unwrap()
        };
        let cand = tape.leaf(flat(patches));
        let reference = tape.leaf(flat(ref_patches));
        let logits = self.cooccur_on(&mut tape, &loaded, cand, reference, k);
        Ok(to_array1(tape.value(logits)))
    }
}

fn to_array1(a: &ArrayD<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().copied())
}

fn to_array2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
}

fn to_array4(a: &ArrayD<f64>) -> Array4<f64> {
    a.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned()
}

/// Batch encode/decode interface shared by the trained model and test stubs.
pub trait Autoencoder: Sync {
    /// Image side H.
    fn image_side(&self) -> usize;
    /// (C_s, h_s) of the structure tensor.
    fn structure_dims(&self) -> (usize, usize);
    /// Texture vector width C_t.
    fn texture_dim(&self) -> usize;
    /// (B,3,H,H) in [0,1] -> structure (B,C_s,h_s,h_s) and texture (B,C_t).
    fn encode_batch(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array2<f64>), ModelError>;
    /// Structure and texture batches -> images (B,3,H,H) in [0,1].
    fn decode_batch(&self, s: &Array4<f64>, t: &Array2<f64>) -> Result<Array4<f64>, ModelError>;
}

impl Autoencoder for Model {
    fn image_side(&self) -> usize {
        self.config.image_side
    }

    fn structure_dims(&self) -> (usize, usize) {
        (self.config.structure_channels, self.config.structure_side())
    }

    fn texture_dim(&self) -> usize {
        self.config.texture_channels
    }

    fn encode_batch(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array2<f64>), ModelError> {
        self.check_image_batch(x, "encoder input")?;
        let mut tape = Tape::new();
        let p = self.params.encoder.load(&mut tape);
        let xv = tape.leaf(x.clone().into_dyn());
        let (s, t) = self.encode_on(&mut tape, &p, xv);
        Ok((to_array4(tape.value(s)), to_array2(tape.value(t))))
    }

    fn decode_batch(&self, s: &Array4<f64>, t: &Array2<f64>) -> Result<Array4<f64>, ModelError> {
        let (cs, hs) = self.structure_dims();
        let sh = s.shape();
        if sh[1] != cs || sh[2] != hs || sh[3] != hs {
            return Err(ModelError::ShapeMismatch {
                what: "structure batch",
                expected: vec![sh[0], cs, hs, hs],
                actual: sh.to_vec(),
            });
        }
        let th = t.shape();
        if th[0] != sh[0] || th[1] != self.config.texture_channels {
            return Err(ModelError::ShapeMismatch {
                what: "texture batch",
                expected: vec![sh[0], self.config.texture_channels],
                actual: th.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let p = self.params.decoder.load(&mut tape);
        let sv = tape.leaf(s.clone().into_dyn());
        let tv = tape.leaf(t.clone().into_dyn());
        let out = self.decode_on(&mut tape, &p, sv, tv);
        Ok(to_array4(tape.value(out)))
    }
}

/// Splits a batch of latents into per-sample pairs.
pub fn unstack_latents(s: &Array4<f64>, t: &Array2<f64>) -> Vec<crate::latent::LatentPair> {
    s.axis_iter(Axis(0))
        .zip(t.axis_iter(Axis(0)))
        .map(|(si, ti)| crate::latent::LatentPair {
            structure: crate::latent::StructureTensor(si.to_owned()),
            texture: crate::latent::TextureVector(ti.to_owned()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            image_side: 32,
            structure_channels: 8,
            texture_channels: 16,
            base_width: 4,
            patch_size: 4,
            seed: 7,
        }
    }

    fn rand_images(b: usize, h: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, h, h), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(toy_config()).unwrap();
        let b = init_model(toy_config()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = toy_config();
        other.seed = 8;
        let c = init_model(other).unwrap();
        assert_ne!(a.params().encoder, c.params().encoder);
    }

    #[test]
    fn config_h32_has_structure_side_2() {
        assert_eq!(toy_config().structure_side(), 2);
    }

    #[test]
    fn config_h128_encodes_to_8x8x8() {
        let cfg = ModelConfig {
            image_side: 128,
            structure_channels: 8,
            texture_channels: 16,
            base_width: 2,
            patch_size: 16,
            seed: 0,
        };
        let model = init_model(cfg).unwrap();
        let x = rand_images(1, 128, 0);
        let (s, t) = model.encode_batch(&x).unwrap();
        assert_eq!(s.shape(), &[1, 8, 8, 8]);
        assert_eq!(t.shape(), &[1, 16]);
    }

    #[test]
    fn invalid_config_reports_all_violations() {
        let cfg = ModelConfig {
            image_side: 20,
            structure_channels: 0,
            texture_channels: 0,
            base_width: 0,
            patch_size: 3,
            seed: 0,
        };
        match cfg.validate() {
            Err(ModelError::InvalidConfig(problems)) => {
                assert!(problems.len() >= 4, "got {problems:?}");
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn encode_is_deterministic_and_batch_independent() {
        let model = init_model(toy_config()).unwrap();
        let x = rand_images(3, 32, 1);
        let (s1, t1) = model.encode_batch(&x).unwrap();
        let (s2, t2) = model.encode_batch(&x).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);

        // Duplicated images produce identical latent rows.
        let mut dup = x.clone();
        dup.index_axis_mut(Axis(0), 1).assign(&x.index_axis(Axis(0), 0));
        let (sd, td) = model.encode_batch(&dup).unwrap();
        assert_eq!(sd.index_axis(Axis(0), 0), sd.index_axis(Axis(0), 1));
        assert_eq!(td.index_axis(Axis(0), 0), td.index_axis(Axis(0), 1));

        // Perturbing one image leaves the other rows untouched.
        let mut pert = x.clone();
        pert[[2, 0, 5, 5]] += 0.25;
        let (sp, tp) = model.encode_batch(&pert).unwrap();
        assert_eq!(sp.index_axis(Axis(0), 0), s1.index_axis(Axis(0), 0));
        assert_eq!(tp.index_axis(Axis(0), 1), t1.index_axis(Axis(0), 1));
        assert_ne!(sp.index_axis(Axis(0), 2), s1.index_axis(Axis(0), 2));
    }

    #[test]
    fn decode_round_trip_preserves_shape_and_range() {
        let model = init_model(toy_config()).unwrap();
        let x = rand_images(2, 32, 2);
        let (s, t) = model.encode_batch(&x).unwrap();
        let y = model.decode_batch(&s, &t).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn encode_rejects_bad_shape_and_non_finite() {
        let model = init_model(toy_config()).unwrap();
        let wrong = rand_images(1, 16, 3);
        assert!(matches!(
            model.encode_batch(&wrong),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let mut bad = rand_images(1, 32, 4);
        bad[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(model.encode_batch(&bad), Err(ModelError::NonFinite { .. })));
    }

    #[test]
    fn discriminator_outputs_finite_logit_per_image() {
        let model = init_model(toy_config()).unwrap();
        let x = rand_images(4, 32, 5);
        let l1 = model.discriminate(&x).unwrap();
        let l2 = model.discriminate(&x).unwrap();
        assert_eq!(l1.len(), 4);
        assert_eq!(l1, l2);
        assert!(l1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cooccur_contract_holds() {
        let model = init_model(toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patches = Array5::from_shape_fn((2, 3, 3, 4, 4), |_| rng.gen_range(0.0..1.0));
        let refs = Array5::from_shape_fn((2, 3, 3, 4, 4), |_| rng.gen_range(0.0..1.0));
        let l1 = model.cooccur_discriminate(&patches, &refs).unwrap();
        let l2 = model.cooccur_discriminate(&patches, &refs).unwrap();
        assert_eq!(l1.len(), 2);
        assert_eq!(l1, l2);
        assert!(l1.iter().all(|v| v.is_finite()));

        // Swapping candidate and reference is not forced to be symmetric;
        // only shape and finiteness are asserted.
        let swapped = model.cooccur_discriminate(&refs, &patches).unwrap();
        assert_eq!(swapped.len(), 2);
        assert!(swapped.iter().all(|v| v.is_finite()));

        let empty = Array5::from_shape_fn((2, 0, 3, 4, 4), |_| 0.0);
        assert!(matches!(
            model.cooccur_discriminate(&empty, &empty),
            Err(ModelError::NoPatches)
        ));

        let huge = Array5::from_shape_fn((1, 1, 3, 64, 64), |_| 0.5);
        assert!(matches!(
            model.cooccur_discriminate(&huge, &huge),
            Err(ModelError::BadPatchSize { .. })
        ));
    }

    #[test]
    fn decoder_mutation_is_visible_through_every_branch() {
        let mut model = init_model(toy_config()).unwrap();
        let scheme = SliceScheme::face5();
        let x = rand_images(1, 32, 7);
        let (s, t) = model.encode_batch(&x).unwrap();

        let mut branch_outputs = Vec::new();
        for i in 0..scheme.num_regions() {
            let masked = mask_batch(&s, i, &scheme);
            branch_outputs.push(model.decode_batch(&masked, &t).unwrap());
        }
        // Nudge one decoder weight; every branch output must move.
        {
            let store = &mut model.params_mut().decoder;
            let id = store.ids().next().unwrap();
            store.value_mut(id)[[0, 0, 0, 0]] += 0.5;
        }
        for (i, before) in branch_outputs.iter().enumerate() {
            let masked = mask_batch(&s, i, &scheme);
            let after = model.decode_batch(&masked, &t).unwrap();
            assert_ne!(&after, before, "branch {i} did not see the decoder update");
        }
    }

    fn mask_batch(s: &Array4<f64>, index: usize, scheme: &SliceScheme) -> Array4<f64> {
        use crate::latent::{mask_structure, StructureTensor};
        let mut out = Array4::zeros(s.raw_dim());
        for (b, sample) in s.axis_iter(Axis(0)).enumerate() {
            let masked = mask_structure(&StructureTensor(sample.to_owned()), index, scheme).unwrap();
            out.index_axis_mut(Axis(0), b).assign(&masked.0);
        }
        out
    }

    use crate::latent::SliceScheme;
}
