//! Free-form networks `F(x, σ)`: an MLP for point data, a U-Net for images
//! and a condition-gated U-Net. Parameters live in a [`ParamStore`]; the
//! network structs only hold [`ParamId`]s, so one structure can be evaluated
//! against any congruent store (student or teacher).

pub mod checkpoint;
mod layers;
mod unet;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use layers::{sigma_features, SigmaEmbedding};
pub use unet::{wag_forward, Wag, WagOutput};

use layers::Dense;
use unet::{CondUNet, UNet};

/// Largest angular frequency of the σ feature embedding.
pub const EMBED_MAX_FREQ: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub res_blocks_per_stage: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Spatial sizes (square side) at which self-attention is inserted.
    pub attention_resolutions: Vec<usize>,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            res_blocks_per_stage: 1,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            attention_resolutions: vec![8],
            dropout: 0.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res_blocks_per_stage < 1 {
            return Err(invalid!("res_blocks_per_stage must be >= 1"));
        }
        if self.base_channels < 8 {
            return Err(invalid!("base_channels must be >= 8, got {}", self.base_channels));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(invalid!("channel_multipliers must be nonempty and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Width of the σ embedding fed to every residual block.
    pub fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WagConfig {
    /// Scale applied to the projected condition features.
    pub weight: f64,
    pub inter_channels: usize,
}

impl Default for WagConfig {
    fn default() -> Self {
        WagConfig {
            weight: 0.8,
            inter_channels: 8,
        }
    }
}

impl WagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(invalid!("WAG weight must lie in [0, 1], got {}", self.weight));
        }
        if self.inter_channels < 1 {
            return Err(invalid!("WAG inter_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Channels, height and width of one image sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetSpec {
    Mlp {
        dim: usize,
        hidden: Vec<usize>,
        emb_dim: usize,
    },
    UNet {
        image: ImageShape,
        net: NetConfig,
    },
    CondUNet {
        image: ImageShape,
        cond_channels: usize,
        net: NetConfig,
        wag: WagConfig,
    },
}

impl NetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            NetSpec::Mlp { .. } => "mlp",
            NetSpec::UNet { .. } => "unet",
            NetSpec::CondUNet { .. } => "cond_unet",
        }
    }

    /// Shape of a single (unbatched) sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            NetSpec::Mlp { dim, .. } => vec![*dim],
            NetSpec::UNet { image, .. } | NetSpec::CondUNet { image, .. } => image.dims(),
        }
    }

    pub fn cond_shape(&self) -> Option<Vec<usize>> {
        match self {
            NetSpec::CondUNet {
                image, cond_channels, ..
            } => Some(vec![*cond_channels, image.height, image.width]),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Mlp { dim, hidden, emb_dim } => {
                if *dim < 1 {
                    return Err(invalid!("mlp input dimension must be >= 1"));
                }
                if hidden.contains(&0) {
                    return Err(invalid!("mlp hidden sizes must be positive"));
                }
                if *emb_dim < 2 || emb_dim % 2 != 0 {
                    return Err(invalid!("embedding dimension must be even and >= 2"));
                }
                Ok(())
            }
            NetSpec::UNet { image, net } => check_image(image, net),
            NetSpec::CondUNet {
                image,
                cond_channels,
                net,
                wag,
            } => {
                wag.validate()?;
                if *cond_channels < 1 {
                    return Err(invalid!("cond_channels must be >= 1"));
                }
                check_image(image, net)
            }
        }
    }

    /// Flat key/value description, stored in checkpoint manifests.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut out = vec![("arch".to_string(), self.name().to_string())];
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match self {
            NetSpec::Mlp { dim, hidden, emb_dim } => {
                put("mlp.dim", dim.to_string());
                put("mlp.hidden", join(hidden));
                put("mlp.emb_dim", emb_dim.to_string());
            }
            NetSpec::UNet { image, net } => {
                put_image(&mut put, image);
                put_net(&mut put, net);
            }
            NetSpec::CondUNet {
                image,
                cond_channels,
                net,
                wag,
            } => {
                put_image(&mut put, image);
                put("image.cond_channels", cond_channels.to_string());
                put_net(&mut put, net);
                put("wag.weight", format!("{:?}", wag.weight));
                put("wag.inter_channels", wag.inter_channels.to_string());
            }
        }
        out
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing network key {k}")))
        };
        let spec = match get("arch")? {
            "mlp" => NetSpec::Mlp {
                dim: parse_num(get("mlp.dim")?)?,
                hidden: parse_list(get("mlp.hidden")?)?,
                emb_dim: parse_num(get("mlp.emb_dim")?)?,
            },
            arch @ ("unet" | "cond_unet") => {
                let image = ImageShape::new(
                    parse_num(get("image.channels")?)?,
                    parse_num(get("image.height")?)?,
                    parse_num(get("image.width")?)?,
                );
                let net = NetConfig {
                    res_blocks_per_stage: parse_num(get("net.res_blocks")?)?,
                    base_channels: parse_num(get("net.base_channels")?)?,
                    channel_multipliers: parse_list(get("net.channel_multipliers")?)?,
                    attention_resolutions: parse_list(get("net.attention_resolutions")?)?,
                    dropout: parse_num(get("net.dropout")?)?,
                };
                if arch == "unet" {
                    NetSpec::UNet { image, net }
                } else {
                    NetSpec::CondUNet {
                        image,
                        cond_channels: parse_num(get("image.cond_channels")?)?,
                        net,
                        wag: WagConfig {
                            weight: parse_num(get("wag.weight")?)?,
                            inter_channels: parse_num(get("wag.inter_channels")?)?,
                        },
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown arch {other}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_image(image: &ImageShape, net: &NetConfig) -> Result<()> {
    net.validate()?;
    if image.channels < 1 {
        return Err(invalid!("image needs at least one channel"));
    }
    let div = 1usize << (net.levels() - 1);
    if !image.height.is_multiple_of(div) || !image.width.is_multiple_of(div) || image.height < div {
        return Err(invalid!(
            "image {}x{} not divisible by {div} for {} levels",
            image.height,
            image.width,
            net.levels()
        ));
    }
    Ok(())
}

fn put_image(put: &mut impl FnMut(&str, String), image: &ImageShape) {
    put("image.channels", image.channels.to_string());
    put("image.height", image.height.to_string());
    put("image.width", image.width.to_string());
}

fn put_net(put: &mut impl FnMut(&str, String), net: &NetConfig) {
    put("net.res_blocks", net.res_blocks_per_stage.to_string());
    put("net.base_channels", net.base_channels.to_string());
    put("net.channel_multipliers", join(&net.channel_multipliers));
    put("net.attention_resolutions", join(&net.attention_resolutions));
    put("net.dropout", format!("{:?}", net.dropout));
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {s:?}")))
}

/// Parses a comma-separated list; the empty string is the empty list.
pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    let s = s.trim().trim_start_matches('[').trim_end_matches(']');
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_num).collect()
}

struct Mlp {
    emb: SigmaEmbedding,
    hidden: Vec<(Dense, Dense)>,
    out: Dense,
}

enum Net {
    Mlp(Mlp),
    UNet(UNet),
    Cond(CondUNet),
}

/// A network structure together with its parameters.
pub struct Model<T: Real> {
    spec: NetSpec,
    net: Net,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn build<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let net = match &spec {
            NetSpec::Mlp { dim, hidden, emb_dim } => {
                let p = &mut params;
                let emb = SigmaEmbedding::new(p, rng, "emb", *emb_dim);
                let mut layers = Vec::new();
                let mut width = *dim;
                for (i, &h) in hidden.iter().enumerate() {
                    let main = Dense::new(p, rng, &format!("mlp.{i}"), width, h, true, false);
                    let proj = Dense::new(p, rng, &format!("mlp.{i}.emb"), *emb_dim, h, false, false);
                    layers.push((main, proj));
                    width = h;
                }
                let out = Dense::new(p, rng, "mlp.out", width, *dim, true, false);
                Net::Mlp(Mlp {
                    emb,
                    hidden: layers,
                    out,
                })
            }
            NetSpec::UNet { image, net } => Net::UNet(UNet::new(&mut params, rng, image, net)),
            NetSpec::CondUNet {
                image,
                cond_channels,
                net,
                wag,
            } => Net::Cond(CondUNet::new(&mut params, rng, image, *cond_channels, net, wag)),
        };
        Ok(Model { spec, net, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces the parameters with a congruent store.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if !self.params.congruent(&params) {
            return Err(Error::CheckpointMismatch(
                "parameter names or shapes differ".to_string(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.spec.sample_shape()
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.net, Net::Cond(_))
    }

    /// Zeroes the output layer so that `F ≡ 0`.
    pub fn zero_output(&mut self) {
        let ids = match &self.net {
            Net::Mlp(m) => m.out.ids(),
            Net::UNet(u) => u.out_ids(),
            Net::Cond(c) => c.out_ids(),
        };
        for id in ids {
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    /// The σ embedding vector (length = embedding width) for one noise level.
    pub fn sigma_embedding(&self, sigma: f64) -> Result<Vec<T>> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid!("noise level must be positive, got {sigma}"));
        }
        let emb = match &self.net {
            Net::Mlp(m) => &m.emb,
            Net::UNet(u) => u.embedding(),
            Net::Cond(c) => c.embedding(),
        };
        let mut g = Graph::inference(&self.params);
        let v = emb.forward(&mut g, &[sigma])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Evaluates `F(x, σ)` on `g`, whose store must be congruent with this
    /// model's. `dropout` supplies the randomness for dropout masks; without
    /// it dropout is disabled.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        sigmas: &[f64],
        cond: Option<Var>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[1..] != self.sample_shape()[..] {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs sample shape {:?}",
                shape,
                self.sample_shape()
            )));
        }
        let batch = shape[0];
        if sigmas.len() != batch {
            return Err(invalid!("{} sigmas for batch of {batch}", sigmas.len()));
        }
        if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(invalid!("noise level must be positive and finite, got {s}"));
        }
        match (&self.net, cond) {
            (Net::Cond(_), None) => return Err(invalid!("conditional network needs a condition")),
            (Net::Cond(_), Some(c)) => {
                let want = self.spec.cond_shape().unwrap_or_default();
                let got = g.shape(c);
                if got.len() < 2 || got[0] != batch || got[1..] != want[..] {
                    return Err(Error::ShapeMismatch(format!(
                        "condition {:?} vs expected [{batch}, {:?}]",
                        got, want
                    )));
                }
            }
            (_, Some(_)) => return Err(invalid!("unconditional network got a condition")),
            _ => {}
        }
        match &self.net {
            Net::Mlp(m) => {
                let emb = m.emb.forward(g, sigmas)?;
                let mut h = x;
                for (main, proj) in &m.hidden {
                    let a = main.forward(g, h)?;
                    let e = proj.forward(g, emb)?;
                    let s = g.add(a, e)?;
                    h = g.silu(s);
                }
                m.out.forward(g, h)
            }
            Net::UNet(u) => u.forward(g, x, sigmas, dropout),
            Net::Cond(c) => c.forward(g, x, sigmas, cond.expect("checked above"), dropout),
        }
    }

    /// Convenience evaluation without gradient tracking.
    pub fn eval(&self, x: &Tensor<T>, sigmas: &[f64], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(&self.params);
        let xv = g.constant(x.clone());
        let cv = cond.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, xv, sigmas, cv, None)?;
        Ok(g.value(out).clone())
    }
}

pub fn build_mlp<T: Real, R: Rng + ?Sized>(
    hidden: &[usize],
    in_dim: usize,
    emb_dim: usize,
    rng: &mut R,
) -> Result<Model<T>> {
    Model::build(
        NetSpec::Mlp {
            dim: in_dim,
            hidden: hidden.to_vec(),
            emb_dim,
        },
        rng,
    )
}

/// Builds an image U-Net whose output has the input's shape.
pub fn build_unet<T: Real, R: Rng + ?Sized>(cfg: &NetConfig, image: ImageShape, rng: &mut R) -> Result<Model<T>> {
    Model::build(
        NetSpec::UNet {
            image,
            net: cfg.clone(),
        },
        rng,
    )
}

pub fn build_conditional_unet<T: Real, R: Rng + ?Sized>(
    cfg: &NetConfig,
    wag: &WagConfig,
    image: ImageShape,
    cond_channels: usize,
    rng: &mut R,
) -> Result<Model<T>> {
    Model::build(
        NetSpec::CondUNet {
            image,
            cond_channels,
            net: cfg.clone(),
            wag: *wag,
        },
        rng,
    )
}

#[cfg(test)]
mod tests;
