//! Generator and two-headed discriminator.
//!
//! The generator encodes an image to an identity feature `f_id`, builds the
//! latent `f_l = [f_id, z, C]`, and decodes it through transposed-convolution
//! stages. Every stage is normalized by AIM conditioned on `f_id` (plain batch
//! norm in the ablations without modulation) and may be linked to the encoder
//! map of the same resolution by a connection followed by a 1×1 fusion conv.
//!
//! Stage layout for image side `s` and base width `b`:
//!
//! | stage | resolution | channels | encoder block |
//! |-------|------------|----------|---------------|
//! | 0     | s/16       | 8b       | 3             |
//! | 1     | s/8        | 4b       | 2             |
//! | 2     | s/4        | 2b       | 1             |
//! | 3     | s/2        | b        | 0             |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aim::{Aim, BatchNorm};
use crate::autodiff::{Graph, Var};
use crate::cnc::{Cnc, Window};
use crate::error::{Error, Result};
use crate::params::{Binding, Conv, ConvTranspose, Dense, ParamStore};
use crate::tensor::Real;

const BLOCKS: usize = 4;
const KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Local connections and AIM.
    Full,
    /// No connections, unmodulated batch norm.
    Vanilla,
    /// Connections attend over the whole encoder map.
    GlobalNc,
    /// Same-location concatenation instead of attention.
    Unet,
    /// Local connections, unmodulated batch norm.
    CncOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::Vanilla,
        Ablation::GlobalNc,
        Ablation::Unet,
        Ablation::CncOnly,
    ];

    fn modulated(self) -> bool {
        matches!(self, Ablation::Full | Ablation::GlobalNc | Ablation::Unet)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::Vanilla => "vanilla",
            Ablation::GlobalNc => "global_nc",
            Ablation::Unet => "unet",
            Ablation::CncOnly => "cnc_only",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// A connection at the decoder stage of the given spatial resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkSpec {
    pub resolution: usize,
    pub radius: usize,
}

impl fmt::Display for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.resolution, self.radius)
    }
}

impl FromStr for LinkSpec {
    type Err = Error;

    /// Parses `resolution:radius`, e.g. `16:4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("link '{s}' is not resolution:radius"));
        let (res, rad) = s.split_once(':').ok_or_else(bad)?;
        Ok(LinkSpec {
            resolution: res.trim().parse().map_err(|_| bad())?,
            radius: rad.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub id_dim: usize,
    pub noise_dim: usize,
    pub num_ids: usize,
    pub num_attrs: usize,
    pub ablation: Ablation,
    pub links: Vec<LinkSpec>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            base_channels: 64,
            id_dim: 128,
            noise_dim: 128,
            num_ids: 10,
            num_attrs: 5,
            ablation: Ablation::Full,
            links: vec![LinkSpec {
                resolution: 16,
                radius: 4,
            }],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image size {s} is not a positive multiple of 16"
            )));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("id_dim", self.id_dim),
            ("noise_dim", self.noise_dim),
            ("num_ids", self.num_ids),
            ("num_attrs", self.num_attrs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            self.stage_of(link.resolution)?;
            if self.links[..i]
                .iter()
                .any(|l| l.resolution == link.resolution)
            {
                return Err(Error::Config(format!(
                    "duplicate link at resolution {}",
                    link.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.id_dim + self.noise_dim + self.num_attrs
    }

    /// Spatial side of decoder stage `k` (0 = seed).
    pub fn stage_resolution(&self, k: usize) -> usize {
        (self.image_size / 16) << k
    }

    /// Channels of decoder stage `k`, equal to those of encoder block `3 - k`.
    pub fn stage_channels(&self, k: usize) -> usize {
        self.encoder_channels(BLOCKS - 1 - k)
    }

    pub fn encoder_channels(&self, block: usize) -> usize {
        self.base_channels << block
    }

    fn stage_of(&self, resolution: usize) -> Result<usize> {
        (0..BLOCKS)
            .find(|k| self.stage_resolution(*k) == resolution)
            .ok_or_else(|| {
                let valid: Vec<usize> = (0..BLOCKS).map(|k| self.stage_resolution(k)).collect();
                Error::Config(format!(
                    "no decoder stage at resolution {resolution}; valid: {valid:?}"
                ))
            })
    }

    /// Number of features entering the discriminator heads.
    fn trunk_features(&self) -> usize {
        let side = self.image_size / 16;
        self.encoder_channels(BLOCKS - 1) * side * side
    }
}

/// Per-stage normalization.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Norm {
    Aim(Aim),
    Plain(BatchNorm),
}

impl Norm {
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binding<T>,
        x: Var,
        f_id: Var,
    ) -> Result<Var> {
        match self {
            Norm::Aim(aim) => aim.forward(g, p, x, f_id),
            Norm::Plain(bn) => bn.forward(g, p, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LinkKind {
    Attend { cnc: Cnc, window: Window },
    Concat,
}

#[derive(Clone, Debug)]
pub struct Link {
    pub stage: usize,
    pub kind: LinkKind,
    pub fusion: Conv,
}

/// Encoder outputs: identity feature and every block's map.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub f_id: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: NetConfig,
    pub encoder: Vec<Conv>,
    /// Hidden layer before `id_head` that brings unmodulated variants up to
    /// the full model's parameter count.
    pub id_pad: Option<Dense>,
    pub id_head: Dense,
    pub seed: Dense,
    pub ups: Vec<ConvTranspose>,
    pub norms: Vec<Norm>,
    pub links: Vec<Link>,
}

impl Generator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &NetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let pad = if config.ablation.modulated() {
            0
        } else {
            Self::pad_width(config)?
        };
        Self::build(store, config, rng, pad)
    }

    /// Width of the padding layer that matches the full model's count.
    fn pad_width(c: &NetConfig) -> Result<usize> {
        let count = |config: &NetConfig| -> Result<usize> {
            let mut store = ParamStore::<f32>::new();
            Self::build(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0), 0)?;
            Ok(store.num_params())
        };
        let full = count(&NetConfig {
            ablation: Ablation::Full,
            ..c.clone()
        })?;
        let deficit = full.saturating_sub(count(c)?);
        // A cin -> h -> id_dim stack adds h(cin + id_dim + 1) - cin * id_dim.
        let cin = c.encoder_channels(BLOCKS - 1);
        let per_unit = cin + c.id_dim + 1;
        Ok(((deficit + cin * c.id_dim + per_unit / 2) / per_unit).max(1))
    }

    fn build<T: Real>(
        store: &mut ParamStore<T>,
        config: &NetConfig,
        rng: &mut impl Rng,
        pad: usize,
    ) -> Result<Self> {
        let c = config;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for k in 0..BLOCKS {
            let cout = c.encoder_channels(k);
            encoder.push(Conv::new(
                store,
                &format!("enc{k}"),
                cin,
                cout,
                KERNEL,
                2,
                1,
                true,
                rng,
            ));
            cin = cout;
        }
        let id_pad = (pad > 0).then(|| Dense::new(store, "enc.id_pad", cin, pad, rng));
        let id_in = if pad > 0 { pad } else { cin };
        let id_head = Dense::new(store, "enc.id", id_in, c.id_dim, rng);
        let side = c.stage_resolution(0);
        let seed = Dense::new(
            store,
            "dec.seed",
            c.latent_dim(),
            c.stage_channels(0) * side * side,
            rng,
        );

        let mut ups = Vec::new();
        let mut norms = Vec::new();
        for k in 0..BLOCKS {
            let ch = c.stage_channels(k);
            let name = format!("dec{k}.norm");
            norms.push(if c.ablation.modulated() {
                Norm::Aim(Aim::new(store, &name, ch, c.id_dim, rng))
            } else {
                Norm::Plain(BatchNorm::new(store, &name, ch))
            });
            let last = k + 1 == BLOCKS;
            let cout = if last { 3 } else { c.stage_channels(k + 1) };
            ups.push(ConvTranspose::new(
                store,
                &format!("dec{k}.up"),
                ch,
                cout,
                KERNEL,
                2,
                1,
                last,
                rng,
            ));
        }

        let mut links = Vec::new();
        if c.ablation != Ablation::Vanilla {
            let mut specs = c.links.clone();
            specs.sort_by_key(|l| l.resolution);
            for spec in specs {
                let stage = c.stage_of(spec.resolution)?;
                let ch = c.stage_channels(stage);
                let name = format!("link{}", spec.resolution);
                let (kind, extra) = match c.ablation {
                    Ablation::Unet => (LinkKind::Concat, ch),
                    ablation => {
                        let hidden = (ch / 2).max(1);
                        let cnc = Cnc::new(store, &name, ch, ch, hidden, spec.radius, rng);
                        let window = if ablation == Ablation::GlobalNc {
                            Window::Global
                        } else {
                            Window::Local(spec.radius)
                        };
                        (LinkKind::Attend { cnc, window }, hidden)
                    }
                };
                let fusion = Conv::new(
                    store,
                    &format!("{name}.fuse"),
                    ch + extra,
                    ch,
                    1,
                    1,
                    0,
                    true,
                    rng,
                );
                links.push(Link {
                    stage,
                    kind,
                    fusion,
                });
            }
        }
        Ok(Generator {
            config: c.clone(),
            encoder,
            id_pad,
            id_head,
            seed,
            ups,
            norms,
            links,
        })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, image: Var) -> Result<Encoded> {
        let s = self.config.image_size;
        let shape = g.shape(image);
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::dim(format!(
                "expected [N, 3, {s}, {s}] images, got {shape:?}"
            )));
        }
        let mut h = image;
        let mut skips = Vec::with_capacity(BLOCKS);
        for conv in &self.encoder {
            let pre = conv.forward(g, p, h)?;
            h = g.leaky_relu(pre)?;
            skips.push(h);
        }
        let mut pooled = g.spatial_mean(h)?;
        if let Some(pad) = &self.id_pad {
            let pre = pad.forward(g, p, pooled)?;
            pooled = g.leaky_relu(pre)?;
        }
        let f_id = self.id_head.forward(g, p, pooled)?;
        Ok(Encoded { f_id, skips })
    }

    /// `f_l = [f_id, z, C]`.
    pub fn latent<T: Real>(&self, g: &mut Graph<T>, f_id: Var, z: Var, code: Var) -> Result<Var> {
        let n = g.shape(f_id)[0];
        let c = &self.config;
        if g.shape(z) != [n, c.noise_dim] || g.shape(code) != [n, c.num_attrs] {
            return Err(Error::dim(format!(
                "noise {:?} / code {:?} for batch {n}, noise {} and {} attributes",
                g.shape(z),
                g.shape(code),
                c.noise_dim,
                c.num_attrs
            )));
        }
        g.concat(&[f_id, z, code])
    }

    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binding<T>,
        latent: Var,
        enc: &Encoded,
    ) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(latent)[0];
        let side = c.stage_resolution(0);
        let seed = self.seed.forward(g, p, latent)?;
        let mut h = g.reshape(seed, &[n, c.stage_channels(0), side, side])?;
        for k in 0..BLOCKS {
            let normed = self.norms[k].forward(g, p, h, enc.f_id)?;
            h = g.relu(normed)?;
            for link in self.links.iter().filter(|l| l.stage == k) {
                let x = enc.skips[BLOCKS - 1 - k];
                let fused = match &link.kind {
                    LinkKind::Attend { cnc, window } => match window {
                        Window::Global => cnc.forward_global(g, p, x, h)?,
                        Window::Local(_) => cnc.forward(g, p, x, h)?,
                    },
                    LinkKind::Concat => g.concat_channels(h, x)?,
                };
                h = link.fusion.forward(g, p, fused)?;
            }
            h = self.ups[k].forward(g, p, h)?;
        }
        g.tanh(h)
    }

    /// `I_f = Dec([Enc(I), z, C])`.
    pub fn generate<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binding<T>,
        image: Var,
        z: Var,
        code: Var,
    ) -> Result<Var> {
        let enc = self.encode(g, p, image)?;
        let latent = self.latent(g, enc.f_id, z, code)?;
        self.decode(g, p, latent, &enc)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub trunk: Vec<Conv>,
    pub id_head: Dense,
    pub attr_head: Dense,
    pub image_size: usize,
}

impl Discriminator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &NetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::new();
        let mut cin = 3;
        for k in 0..BLOCKS {
            let cout = config.encoder_channels(k);
            trunk.push(Conv::new(
                store,
                &format!("disc{k}"),
                cin,
                cout,
                KERNEL,
                2,
                1,
                true,
                rng,
            ));
            cin = cout;
        }
        let features = config.trunk_features();
        Ok(Discriminator {
            trunk,
            id_head: Dense::new(store, "disc.id", features, config.num_ids + 1, rng),
            attr_head: Dense::new(store, "disc.attr", features, config.num_attrs, rng),
            image_size: config.image_size,
        })
    }

    /// Identity logits `[N, N_i + 1]` (last class = fake) and attribute logits `[N, N_a]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding<T>, x: Var) -> Result<(Var, Var)> {
        let s = self.image_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::dim(format!(
                "expected [N, 3, {s}, {s}] images, got {shape:?}"
            )));
        }
        let mut h = x;
        for conv in &self.trunk {
            let pre = conv.forward(g, p, h)?;
            h = g.leaky_relu(pre)?;
        }
        let flat = g.flatten(h)?;
        let id = self.id_head.forward(g, p, flat)?;
        let attr = self.attr_head.forward(g, p, flat)?;
        Ok((id, attr))
    }
}
