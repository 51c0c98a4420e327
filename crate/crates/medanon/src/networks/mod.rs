//! The six parametric functions of the pipeline: encoder, decoder, disease
//! classifier, identity classifier (multiclass or Siamese embedding),
//! discriminator, and the identity VAE.

pub mod checkpoint;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Element, ParamId, ParamSet, Tape, Tensor, Var};
use crate::IdentityMode;

const LEAKY_SLOPE: f64 = 0.2;
const GN_EPS: f64 = 1e-5;

/// Structural hyperparameters of every network in the bundle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub channels: usize,
    pub d_id: usize,
    pub d_med: usize,
    pub d_rest: usize,
    /// Number of downsampling stages in encoder/decoder/discriminator.
    pub stages: usize,
    pub base_width: usize,
    pub disc_width: usize,
    /// Hidden width of the classifier heads.
    pub head_hidden: usize,
    pub dropout: f64,
    /// VAE latent dimension d_v.
    pub vae_latent: usize,
    pub vae_hidden: usize,
    pub num_classes: usize,
    pub num_identities: usize,
    pub identity_mode: IdentityMode,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 32,
            channels: 1,
            d_id: 32,
            d_med: 16,
            d_rest: 80,
            stages: 3,
            base_width: 32,
            disc_width: 16,
            head_hidden: 64,
            dropout: 0.3,
            vae_latent: 8,
            vae_hidden: 64,
            num_classes: 2,
            num_identities: 8,
            identity_mode: IdentityMode::Siamese,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.stages;
        if self.image_size % factor != 0 || self.image_size / factor < 2 {
            return Err(Error::config(format!(
                "image size {} not expressible with {} downsampling stages (needs a multiple of {} with quotient >= 2)",
                self.image_size, self.stages, factor
            )));
        }
        for (name, v) in [
            ("d_id", self.d_id),
            ("d_med", self.d_med),
            ("d_rest", self.d_rest),
            ("base_width", self.base_width),
            ("disc_width", self.disc_width),
            ("head_hidden", self.head_hidden),
            ("vae_latent", self.vae_latent),
            ("vae_hidden", self.vae_hidden),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.base_width % 4 != 0 || self.disc_width % 4 != 0 {
            return Err(Error::config("widths must be multiples of 4 (group norm)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn latent_total(&self) -> usize {
        self.d_id + self.d_med + self.d_rest
    }

    /// Spatial side lengths along the encoder path, e.g. 32→16→8→4.
    pub fn spatial_path(&self) -> Vec<usize> {
        (0..=self.stages).map(|i| self.image_size >> i).collect()
    }

    /// Channel widths before each downsampling step; capped at 4×base.
    fn widths(&self, base: usize) -> Vec<usize> {
        (0..=self.stages).map(|i| (base << i).min(base * 4)).collect()
    }

    /// Hash of the serialized config; stored in checkpoint manifests.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("serializable config");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<E: Element>(
        ps: &mut ParamSet<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add_he_normal(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = ps.add_zeros(format!("{name}.b"), &[cout]);
        Conv { w, b, stride, pad: k / 2 }
    }

    fn forward<E: Element>(&self, t: &mut Tape<E>, ps: &ParamSet<E>, x: Var, bind: Binding) -> Var {
        let w = t.param(ps, self.w, bind);
        let b = t.param(ps, self.b, bind);
        let y = t.conv2d(x, w, self.stride, self.pad);
        t.bias_add(y, b)
    }
}

#[derive(Debug, Clone)]
struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    fn new<E: Element>(ps: &mut ParamSet<E>, name: &str, channels: usize) -> Self {
        let groups = if channels % 4 == 0 { 4 } else { 1 };
        GroupNorm {
            gamma: ps.add_ones(format!("{name}.gamma"), &[channels]),
            beta: ps.add_zeros(format!("{name}.beta"), &[channels]),
            groups,
        }
    }

    fn forward<E: Element>(&self, t: &mut Tape<E>, ps: &ParamSet<E>, x: Var, bind: Binding) -> Var {
        let g = t.param(ps, self.gamma, bind);
        let b = t.param(ps, self.beta, bind);
        t.group_norm(x, g, b, self.groups, E::from_f64(GN_EPS))
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<E: Element>(
        ps: &mut ParamSet<E>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Dense {
            w: ps.add_he_normal(format!("{name}.w"), &[output, input], input, rng),
            b: ps.add_zeros(format!("{name}.b"), &[output]),
        }
    }

    fn forward<E: Element>(&self, t: &mut Tape<E>, ps: &ParamSet<E>, x: Var, bind: Binding) -> Var {
        let w = t.param(ps, self.w, bind);
        let b = t.param(ps, self.b, bind);
        let y = t.matvec(w, x);
        t.add(y, b)
    }
}

/// Residual block: x + conv-gn-lrelu-conv-gn, then lrelu.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    gn1: GroupNorm,
    conv2: Conv,
    gn2: GroupNorm,
}

impl ResBlock {
    fn new<E: Element>(ps: &mut ParamSet<E>, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv::new(ps, &format!("{name}.conv1"), ch, ch, 3, 1, rng),
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), ch),
            conv2: Conv::new(ps, &format!("{name}.conv2"), ch, ch, 3, 1, rng),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), ch),
        }
    }

    fn forward<E: Element>(&self, t: &mut Tape<E>, ps: &ParamSet<E>, x: Var, bind: Binding) -> Var {
        let slope = E::from_f64(LEAKY_SLOPE);
        let h = self.conv1.forward(t, ps, x, bind);
        let h = self.gn1.forward(t, ps, h, bind);
        let h = t.leaky_relu(h, slope);
        let h = self.conv2.forward(t, ps, h, bind);
        let h = self.gn2.forward(t, ps, h, bind);
        let s = t.add(x, h);
        t.leaky_relu(s, slope)
    }
}

/// One-hidden-layer perceptron with dropout before the output layer.
#[derive(Debug, Clone)]
struct Mlp {
    l1: Dense,
    l2: Dense,
    hidden: usize,
    dropout: f64,
}

impl Mlp {
    fn new<E: Element>(
        ps: &mut ParamSet<E>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            l1: Dense::new(ps, &format!("{name}.l1"), input, hidden, rng),
            l2: Dense::new(ps, &format!("{name}.l2"), hidden, output, rng),
            hidden,
            dropout,
        }
    }

    fn forward<E: Element>(
        &self,
        t: &mut Tape<E>,
        ps: &ParamSet<E>,
        x: Var,
        bind: Binding,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let h = self.l1.forward(t, ps, x, bind);
        let h = t.leaky_relu(h, E::from_f64(LEAKY_SLOPE));
        let h = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let mask = dropout_mask::<E>(self.hidden, self.dropout, rng);
                let m = t.leaf(mask);
                t.mul(h, m)
            }
            _ => h,
        };
        self.l2.forward(t, ps, h, bind)
    }
}

/// Inverted-scaling dropout mask: 0 with probability `rate`, else 1/(1-rate).
pub fn dropout_mask<E: Element>(dim: usize, rate: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    use rand::Rng;
    let keep = E::from_f64(1.0 / (1.0 - rate));
    ArrayD::from_shape_fn(IxDyn(&[dim]), |_| {
        if rng.gen::<f64>() < rate {
            E::zero()
        } else {
            keep
        }
    })
}

// ---------------------------------------------------------------------------
// latent triple
// ---------------------------------------------------------------------------

/// The encoder's three feature vectors. Concatenation order is always
/// (z_id, z_med, z_rest).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTriple<E: Element> {
    pub z_id: Tensor<E>,
    pub z_med: Tensor<E>,
    pub z_rest: Tensor<E>,
}

impl<E: Element> LatentTriple<E> {
    pub fn concat(&self) -> Tensor<E> {
        let mut v = Vec::with_capacity(self.z_id.len() + self.z_med.len() + self.z_rest.len());
        v.extend(self.z_id.iter().copied());
        v.extend(self.z_med.iter().copied());
        v.extend(self.z_rest.iter().copied());
        ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap()
    }

    pub fn split(cfg: &NetworkConfig, full: &Tensor<E>) -> Result<Self> {
        if full.len() != cfg.latent_total() {
            return Err(Error::contract(format!(
                "latent length {} != configured total {}",
                full.len(),
                cfg.latent_total()
            )));
        }
        let v = full.as_slice().unwrap();
        let id = v[..cfg.d_id].to_vec();
        let med = v[cfg.d_id..cfg.d_id + cfg.d_med].to_vec();
        let rest = v[cfg.d_id + cfg.d_med..].to_vec();
        Ok(LatentTriple {
            z_id: ArrayD::from_shape_vec(IxDyn(&[cfg.d_id]), id).unwrap(),
            z_med: ArrayD::from_shape_vec(IxDyn(&[cfg.d_med]), med).unwrap(),
            z_rest: ArrayD::from_shape_vec(IxDyn(&[cfg.d_rest]), rest).unwrap(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.z_id
            .iter()
            .chain(self.z_med.iter())
            .chain(self.z_rest.iter())
            .all(|v| v.is_finite())
    }
}

/// Tape-level handles to the three latent slices of one encoding pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z_id: Var,
    pub z_med: Var,
    pub z_rest: Var,
}

/// Mean squared difference between two identity embeddings. Symmetric, zero
/// iff the vectors are equal; this normalization keeps the Siamese margin and
/// match threshold dimension-independent.
pub fn siamese_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "siamese_distance dim mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("siamese_distance on empty vectors"));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

pub struct Encoder<E: Element> {
    pub params: ParamSet<E>,
    stem: Conv,
    stem_gn: GroupNorm,
    blocks: Vec<(ResBlock, Conv, GroupNorm)>,
    head: Dense,
    flat_dim: usize,
}

impl<E: Element> Encoder<E> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new("encoder");
        let widths = cfg.widths(cfg.base_width);
        let stem = Conv::new(&mut ps, "stem", cfg.channels, widths[0], 3, 1, rng);
        let stem_gn = GroupNorm::new(&mut ps, "stem_gn", widths[0]);
        let mut blocks = Vec::new();
        for i in 0..cfg.stages {
            let rb = ResBlock::new(&mut ps, &format!("stage{i}.res"), widths[i], rng);
            let down = Conv::new(&mut ps, &format!("stage{i}.down"), widths[i], widths[i + 1], 3, 2, rng);
            let gn = GroupNorm::new(&mut ps, &format!("stage{i}.gn"), widths[i + 1]);
            blocks.push((rb, down, gn));
        }
        let side = cfg.image_size >> cfg.stages;
        let flat_dim = widths[cfg.stages] * side * side;
        let head = Dense::new(&mut ps, "head", flat_dim, cfg.latent_total(), rng);
        Encoder { params: ps, stem, stem_gn, blocks, head, flat_dim }
    }

    /// Full latent projection (before the triple split).
    pub fn forward(&self, t: &mut Tape<E>, x: Var, bind: Binding) -> Var {
        let slope = E::from_f64(LEAKY_SLOPE);
        let ps = &self.params;
        let h = self.stem.forward(t, ps, x, bind);
        let h = self.stem_gn.forward(t, ps, h, bind);
        let mut h = t.leaky_relu(h, slope);
        for (rb, down, gn) in &self.blocks {
            h = rb.forward(t, ps, h, bind);
            h = down.forward(t, ps, h, bind);
            h = gn.forward(t, ps, h, bind);
            h = t.leaky_relu(h, slope);
        }
        let flat = t.reshape(h, &[self.flat_dim]);
        self.head.forward(t, ps, flat, bind)
    }

    /// Latent projection split into the (z_id, z_med, z_rest) slices.
    pub fn forward_triple(&self, t: &mut Tape<E>, cfg: &NetworkConfig, x: Var, bind: Binding) -> LatentVars {
        let full = self.forward(t, x, bind);
        split_latent(t, cfg, full)
    }
}

/// Slices a full latent vector into the triple; slicing then re-concatenating
/// reproduces the projection bitwise.
pub fn split_latent<E: Element>(t: &mut Tape<E>, cfg: &NetworkConfig, full: Var) -> LatentVars {
    LatentVars {
        z_id: t.slice(full, 0, cfg.d_id),
        z_med: t.slice(full, cfg.d_id, cfg.d_med),
        z_rest: t.slice(full, cfg.d_id + cfg.d_med, cfg.d_rest),
    }
}

pub struct Decoder<E: Element> {
    pub params: ParamSet<E>,
    head: Dense,
    start_shape: [usize; 3],
    blocks: Vec<(ResBlock, Conv, GroupNorm)>,
    final_conv: Conv,
}

impl<E: Element> Decoder<E> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new("decoder");
        let widths = cfg.widths(cfg.base_width);
        let side = cfg.image_size >> cfg.stages;
        let top = widths[cfg.stages];
        let head = Dense::new(&mut ps, "head", cfg.latent_total(), top * side * side, rng);
        let mut blocks = Vec::new();
        for i in (0..cfg.stages).rev() {
            let rb = ResBlock::new(&mut ps, &format!("stage{i}.res"), widths[i + 1], rng);
            let up = Conv::new(&mut ps, &format!("stage{i}.up"), widths[i + 1], widths[i], 3, 1, rng);
            let gn = GroupNorm::new(&mut ps, &format!("stage{i}.gn"), widths[i]);
            blocks.push((rb, up, gn));
        }
        let final_conv = Conv::new(&mut ps, "final", widths[0], cfg.channels, 3, 1, rng);
        Decoder { params: ps, head, start_shape: [top, side, side], blocks, final_conv }
    }

    /// Decodes a concatenated latent vector into an image in (0,1).
    pub fn forward(&self, t: &mut Tape<E>, latent: Var, bind: Binding) -> Var {
        let slope = E::from_f64(LEAKY_SLOPE);
        let ps = &self.params;
        let h = self.head.forward(t, ps, latent, bind);
        let h = t.reshape(h, &self.start_shape);
        let mut h = t.leaky_relu(h, slope);
        for (rb, up, gn) in &self.blocks {
            h = rb.forward(t, ps, h, bind);
            h = t.upsample2(h);
            h = up.forward(t, ps, h, bind);
            h = gn.forward(t, ps, h, bind);
            h = t.leaky_relu(h, slope);
        }
        let y = self.final_conv.forward(t, ps, h, bind);
        t.sigmoid(y)
    }
}

pub struct Discriminator<E: Element> {
    pub params: ParamSet<E>,
    convs: Vec<(Conv, Option<GroupNorm>)>,
    head: Dense,
    flat_dim: usize,
}

impl<E: Element> Discriminator<E> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new("discriminator");
        let widths = cfg.widths(cfg.disc_width);
        let mut convs = Vec::new();
        let mut cin = cfg.channels;
        for (i, &w) in widths.iter().enumerate().take(cfg.stages + 1) {
            let conv = Conv::new(&mut ps, &format!("conv{i}"), cin, w, 3, 2, rng);
            let gn = if i > 0 { Some(GroupNorm::new(&mut ps, &format!("gn{i}"), w)) } else { None };
            convs.push((conv, gn));
            cin = w;
        }
        let side = cfg.image_size >> (cfg.stages + 1);
        let flat_dim = cin * side * side;
        let head = Dense::new(&mut ps, "head", flat_dim, 1, rng);
        Discriminator { params: ps, convs, head, flat_dim }
    }

    /// Realness logit; apply `Tape::sigmoid` for the probability.
    pub fn forward_logit(&self, t: &mut Tape<E>, x: Var, bind: Binding) -> Var {
        let slope = E::from_f64(LEAKY_SLOPE);
        let ps = &self.params;
        let mut h = x;
        for (conv, gn) in &self.convs {
            h = conv.forward(t, ps, h, bind);
            if let Some(gn) = gn {
                h = gn.forward(t, ps, h, bind);
            }
            h = t.leaky_relu(h, slope);
        }
        let flat = t.reshape(h, &[self.flat_dim]);
        self.head.forward(t, ps, flat, bind)
    }
}

/// Classification head over one latent slice (disease or multiclass identity).
pub struct ClassifierHead<E: Element> {
    pub params: ParamSet<E>,
    mlp: Mlp,
}

impl<E: Element> ClassifierHead<E> {
    fn new(name: &str, input: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new(name);
        let mlp = Mlp::new(&mut ps, "mlp", input, hidden, classes, dropout, rng);
        ClassifierHead { params: ps, mlp }
    }

    /// Standalone head for external evaluation (no dropout).
    pub fn new_external(name: &str, input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(name, input, hidden, classes, 0.0, rng)
    }

    pub fn forward_logits(
        &self,
        t: &mut Tape<E>,
        x: Var,
        bind: Binding,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        self.mlp.forward(t, &self.params, x, bind, dropout_rng)
    }
}

/// Identity supervision head: a classifier in multiclass mode, or the raw
/// embedding in Siamese mode.
pub enum IdentityHead<E: Element> {
    Multiclass(ClassifierHead<E>),
    Siamese,
}

impl<E: Element> IdentityHead<E> {
    pub fn is_multiclass(&self) -> bool {
        matches!(self, IdentityHead::Multiclass(_))
    }
}

/// VAE over identity vectors: MLP encoder to (μ, logσ²) and MLP decoder back
/// to a d_id-dimensional synthetic identity.
pub struct IdentityVae<E: Element> {
    pub params: ParamSet<E>,
    enc: Mlp,
    dec: Mlp,
    pub d_v: usize,
    pub d_id: usize,
}

impl<E: Element> IdentityVae<E> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new("identity_vae");
        let enc = Mlp::new(&mut ps, "enc", cfg.d_id, cfg.vae_hidden, 2 * cfg.vae_latent, cfg.dropout, rng);
        let dec = Mlp::new(&mut ps, "dec", cfg.vae_latent, cfg.vae_hidden, cfg.d_id, cfg.dropout, rng);
        IdentityVae { params: ps, enc, dec, d_v: cfg.vae_latent, d_id: cfg.d_id }
    }

    /// (μ, logσ²) heads of the encoder.
    pub fn encode(
        &self,
        t: &mut Tape<E>,
        z_id: Var,
        bind: Binding,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        let out = self.enc.forward(t, &self.params, z_id, bind, dropout_rng);
        let mu = t.slice(out, 0, self.d_v);
        let logvar = t.slice(out, self.d_v, self.d_v);
        (mu, logvar)
    }

    pub fn decode(
        &self,
        t: &mut Tape<E>,
        x: Var,
        bind: Binding,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        self.dec.forward(t, &self.params, x, bind, dropout_rng)
    }

    /// Decodes a noise vector with dropout off (inference).
    pub fn decode_value(&self, noise: &Tensor<E>) -> Result<Tensor<E>> {
        if noise.len() != self.d_v {
            return Err(Error::contract(format!(
                "vae noise dim {} != d_v {}",
                noise.len(),
                self.d_v
            )));
        }
        let mut t = Tape::<E>::new();
        let x = t.leaf(noise.clone());
        let y = self.decode(&mut t, x, Binding::Frozen, None);
        Ok(t.value(y).clone())
    }
}

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

/// All networks of the disentanglement model (the identity VAE lives apart;
/// it is trained in a second phase against a frozen bundle).
pub struct NetworkBundle<E: Element> {
    pub cfg: NetworkConfig,
    pub encoder: Encoder<E>,
    pub decoder: Decoder<E>,
    pub c_med: ClassifierHead<E>,
    pub c_id: IdentityHead<E>,
    pub discriminator: Discriminator<E>,
}

/// Builds all networks with a named, seeded initialization (He-normal).
pub fn build_networks<E: Element>(cfg: &NetworkConfig) -> Result<NetworkBundle<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let encoder = Encoder::new(cfg, &mut rng);
    let decoder = Decoder::new(cfg, &mut rng);
    let c_med = ClassifierHead::new("c_med", cfg.d_med, cfg.head_hidden, cfg.num_classes, cfg.dropout, &mut rng);
    let c_id = match cfg.identity_mode {
        IdentityMode::Multiclass => IdentityHead::Multiclass(ClassifierHead::new(
            "c_id",
            cfg.d_id,
            cfg.head_hidden,
            cfg.num_identities,
            cfg.dropout,
            &mut rng,
        )),
        IdentityMode::Siamese => IdentityHead::Siamese,
    };
    let discriminator = Discriminator::new(cfg, &mut rng);
    Ok(NetworkBundle { cfg: cfg.clone(), encoder, decoder, c_med, c_id, discriminator })
}

impl<E: Element> NetworkBundle<E> {
    fn check_image(&self, image: &Tensor<E>) -> Result<()> {
        let want = [self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        if image.shape() != want {
            return Err(Error::contract(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Inference-mode encoding (dropout off, no gradients).
    pub fn encode(&self, image: &Tensor<E>) -> Result<LatentTriple<E>> {
        self.check_image(image)?;
        let mut t = Tape::<E>::new();
        let x = t.leaf(image.clone());
        let full = self.encoder.forward(&mut t, x, Binding::Frozen);
        LatentTriple::split(&self.cfg, t.value(full))
    }

    /// Inference-mode decoding; output has the training image shape with
    /// values in (0,1).
    pub fn decode(&self, triple: &LatentTriple<E>) -> Result<Tensor<E>> {
        if triple.z_id.len() != self.cfg.d_id
            || triple.z_med.len() != self.cfg.d_med
            || triple.z_rest.len() != self.cfg.d_rest
        {
            return Err(Error::contract(format!(
                "latent dims ({}, {}, {}) do not match configured ({}, {}, {})",
                triple.z_id.len(),
                triple.z_med.len(),
                triple.z_rest.len(),
                self.cfg.d_id,
                self.cfg.d_med,
                self.cfg.d_rest
            )));
        }
        let mut t = Tape::<E>::new();
        let latent = t.leaf(triple.concat());
        let y = self.decoder.forward(&mut t, latent, Binding::Frozen);
        Ok(t.value(y).clone())
    }

    /// Disease class probabilities for a medical latent.
    pub fn med_probs(&self, z_med: &Tensor<E>) -> Result<Vec<f64>> {
        if z_med.len() != self.cfg.d_med {
            return Err(Error::contract(format!(
                "z_med dim {} != configured {}",
                z_med.len(),
                self.cfg.d_med
            )));
        }
        let mut t = Tape::<E>::new();
        let x = t.leaf(z_med.clone());
        let logits = self.c_med.forward_logits(&mut t, x, Binding::Frozen, None);
        let p = t.softmax(logits);
        Ok(t.value(p).iter().map(|v| v.as_f64()).collect())
    }

    /// Identity probabilities (multiclass mode only).
    pub fn id_probs(&self, z_id: &Tensor<E>) -> Result<Option<Vec<f64>>> {
        match &self.c_id {
            IdentityHead::Siamese => Ok(None),
            IdentityHead::Multiclass(head) => {
                if z_id.len() != self.cfg.d_id {
                    return Err(Error::contract(format!(
                        "z_id dim {} != configured {}",
                        z_id.len(),
                        self.cfg.d_id
                    )));
                }
                let mut t = Tape::<E>::new();
                let x = t.leaf(z_id.clone());
                let logits = head.forward_logits(&mut t, x, Binding::Frozen, None);
                let p = t.softmax(logits);
                Ok(Some(t.value(p).iter().map(|v| v.as_f64()).collect()))
            }
        }
    }

    /// Probability that `image` is real, in (0,1).
    pub fn discriminate(&self, image: &Tensor<E>) -> Result<f64> {
        self.check_image(image)?;
        let mut t = Tape::<E>::new();
        let x = t.leaf(image.clone());
        let logit = self.discriminator.forward_logit(&mut t, x, Binding::Frozen);
        let p = t.sigmoid(logit);
        Ok(t.value(p).iter().next().unwrap().as_f64())
    }

    /// Parameter sets updated by the generator-side optimizer.
    pub fn generator_sets(&self) -> Vec<&ParamSet<E>> {
        let mut v = vec![&self.encoder.params, &self.decoder.params, &self.c_med.params];
        if let IdentityHead::Multiclass(h) = &self.c_id {
            v.push(&h.params);
        }
        v
    }
}

/// Casts an f64 image (C,H,W) into the working element type.
pub fn image_to_element<E: Element>(img: &ArrayD<f64>) -> Tensor<E> {
    img.mapv(E::from_f64)
}

/// Casts back to f64 for metric computation.
pub fn image_to_f64<E: Element>(img: &Tensor<E>) -> ArrayD<f64> {
    img.mapv(|v| v.as_f64())
}
