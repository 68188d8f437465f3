//! Flat `key = value` training configuration.
//!
//! One key per line, `#` starts a comment, dotted keys group related
//! settings. A run's configuration is the defaults, then a preset, then the
//! file, then command-line overrides, later layers winning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::consistency::{BoundaryScalings, EmaConfig, HuberConfig, Weighting};
use crate::curriculum::{CurriculumConfig, CurriculumKind};
use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::network::{parse_list, ImageShape, NetConfig, NetSpec, WagConfig};
use crate::schedules::{
    BetaParams, GridKind, HighNoiseInjection, LevelSampler, LognormalParams, NoiseRange, SinusoidalAmplitude,
};

use super::optim::{AdamParams, OptimizerKind};

/// Every recognized key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("total_steps", "1000"),
    ("batch_size", "256"),
    ("learning_rate", "1e-4"),
    ("optimizer", "radam"),
    ("adam.beta1", "0.9"),
    ("adam.beta2", "0.999"),
    ("adam.eps", "1e-8"),
    ("seed", "0"),
    ("checkpoint_every", "0"),
    ("grad_clip", "10"),
    ("sigma_data", "0.5"),
    ("weighting", "improved"),
    ("ema.mu", "0"),
    ("huber.c", "auto"),
    ("curriculum.kind", "sinusoidal"),
    ("curriculum.s0", "20"),
    ("curriculum.s1", "250"),
    ("curriculum.total_steps", "auto"),
    ("curriculum.monotone_clip", "false"),
    ("grid.kind", "karras"),
    ("grid.sigma_min", "0.002"),
    ("grid.sigma_max", "80"),
    ("grid.rho", "7"),
    ("grid.amplitude", "span"),
    ("sampler.kind", "beta"),
    ("sampler.p_mean", "-1.1"),
    ("sampler.p_std", "2.0"),
    ("sampler.alpha", "0.5"),
    ("sampler.beta", "5"),
    ("inject.ratio", "0"),
    ("inject.low", "40"),
    ("inject.high", "80"),
    ("net.arch", "mlp"),
    ("net.hidden", "128,128,128"),
    ("net.emb_dim", "32"),
    ("net.res_blocks", "1"),
    ("net.base_channels", "16"),
    ("net.channel_multipliers", "1,2,2"),
    ("net.attention_resolutions", "8"),
    ("net.dropout", "0"),
    ("wag.weight", "0.8"),
    ("wag.inter_channels", "8"),
    ("data.kind", "gauss2d"),
    ("data.n", "8192"),
    ("data.holdout", "2000"),
    ("data.modes", "8"),
    ("data.size", "32"),
    ("data.channels", "1"),
    ("data.ellipses", "2,5"),
    ("data.dose_sigma", "0.15"),
    ("data.path", ""),
    ("eval.samples", "2000"),
    ("eval.projections", "128"),
    ("eval.nfe", "1"),
];

pub const PRESETS: &[&str] = &["toy2d", "phantom64", "image32"];

/// Key overrides applied on top of the defaults by a named preset.
pub fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "toy2d" => Ok(&[
            ("total_steps", "20000"),
            ("batch_size", "256"),
            ("learning_rate", "1e-3"),
            ("curriculum.kind", "sinusoidal"),
            ("sampler.kind", "beta"),
            ("net.arch", "mlp"),
            ("net.hidden", "128,128,128"),
            ("data.kind", "gauss2d"),
            ("data.n", "8192"),
            ("data.holdout", "2000"),
        ]),
        "phantom64" => Ok(&[
            ("total_steps", "2000"),
            ("batch_size", "8"),
            ("learning_rate", "1e-3"),
            ("curriculum.kind", "sinusoidal"),
            ("curriculum.s0", "1"),
            ("curriculum.s1", "4"),
            ("sampler.kind", "beta"),
            ("net.arch", "cond_unet"),
            ("net.res_blocks", "1"),
            ("net.base_channels", "8"),
            ("net.channel_multipliers", "1,2,2"),
            ("net.attention_resolutions", "16"),
            ("data.kind", "phantom"),
            ("data.n", "512"),
            ("data.holdout", "32"),
            ("data.size", "64"),
            ("eval.samples", "32"),
        ]),
        "image32" => Ok(&[
            ("total_steps", "2000"),
            ("batch_size", "16"),
            ("learning_rate", "2e-4"),
            ("net.arch", "unet"),
            ("net.base_channels", "16"),
            ("net.channel_multipliers", "1,2,2"),
            ("net.attention_resolutions", "8"),
            ("data.kind", "image_dir"),
            ("data.size", "32"),
            ("data.channels", "3"),
            ("data.holdout", "0"),
            ("eval.samples", "64"),
        ]),
        _ => Err(Error::Config(format!(
            "unknown preset {name:?} (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Parses config text into key/value pairs, in file order.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got {line:?}", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override must be key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Gauss2d { modes: usize },
    Phantom(PhantomConfig),
    ImageDir(PathBuf),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training rows for generated sources.
    pub n: usize,
    /// Rows held out for evaluation.
    pub holdout: usize,
    pub size: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub projections: usize,
    pub nfe: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchConfig {
    Mlp { hidden: Vec<usize>, emb_dim: usize },
    UNet(NetConfig),
    CondUNet(NetConfig, WagConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub seed: u64,
    /// `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// `0` disables clipping.
    pub grad_clip: f64,
    pub scalings: BoundaryScalings,
    pub weighting: Weighting,
    pub ema: EmaConfig,
    /// `None` selects `0.00054·√D` from the data dimensionality.
    pub huber_c: Option<f64>,
    pub curriculum: CurriculumConfig,
    pub grid_kind: GridKind,
    pub amplitude: SinusoidalAmplitude,
    pub range: NoiseRange,
    pub sampler: LevelSampler,
    pub injection: HighNoiseInjection,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    map: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from_layers(None, &[]).expect("defaults are valid")
    }
}

struct Fields<'a>(&'a BTreeMap<String, String>);

impl Fields<'_> {
    fn raw(&self, k: &str) -> &str {
        self.0.get(k).map(String::as_str).expect("every key has a default")
    }

    fn num<N: std::str::FromStr>(&self, k: &str) -> Result<N> {
        let v = self.raw(k);
        v.parse()
            .map_err(|_| Error::Config(format!("{k}: cannot parse {v:?} as a number")))
    }

    fn real(&self, k: &str) -> Result<f64> {
        let v: f64 = self.num(k)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{k} must be finite")));
        }
        Ok(v)
    }

    fn flag(&self, k: &str) -> Result<bool> {
        match self.raw(k) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("{k}: expected true/false, got {v:?}"))),
        }
    }

    fn list(&self, k: &str) -> Result<Vec<usize>> {
        parse_list(self.raw(k)).map_err(|e| Error::Config(format!("{k}: {e}")))
    }
}

fn config_err(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        Error::InvalidArgument(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    }
}

impl TrainConfig {
    /// Builds a configuration from an optional preset and ordered key/value
    /// layers. Unknown keys are rejected.
    pub fn from_layers(preset_name: Option<&str>, layers: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(p) = preset_name {
            for (k, v) in preset(p)? {
                map.insert(k.to_string(), v.to_string());
            }
        }
        for (k, v) in layers {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let f = Fields(&map);
        let total_steps: u64 = f.num("total_steps")?;
        let batch_size: usize = f.num("batch_size")?;
        if batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let adam = AdamParams {
            lr: f.real("learning_rate")?,
            beta1: f.real("adam.beta1")?,
            beta2: f.real("adam.beta2")?,
            eps: f.real("adam.eps")?,
        };
        adam.validate().map_err(config_err("adam"))?;
        if !(adam.lr > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", adam.lr)));
        }
        let grad_clip = f.real("grad_clip")?;
        if grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        let weighting = match f.raw("weighting") {
            "improved" => Weighting::Improved,
            "uniform" => Weighting::Uniform,
            v => return Err(Error::Config(format!("weighting: unknown {v:?} (improved|uniform)"))),
        };
        let huber_c = match f.raw("huber.c") {
            "auto" => None,
            _ => {
                let c = f.real("huber.c")?;
                HuberConfig::new(c).map_err(config_err("huber.c"))?;
                Some(c)
            }
        };

        let ckind = match f.raw("curriculum.kind") {
            "improved" => CurriculumKind::Improved,
            "sinusoidal" => CurriculumKind::Sinusoidal,
            "constant" => CurriculumKind::Constant,
            v => {
                return Err(Error::Config(format!(
                    "curriculum.kind: unknown {v:?} (improved|sinusoidal|constant)"
                )))
            }
        };
        let ck = match f.raw("curriculum.total_steps") {
            "auto" => total_steps.max(1),
            _ => f.num("curriculum.total_steps")?,
        };
        let curriculum = CurriculumConfig::new(f.num("curriculum.s0")?, f.num("curriculum.s1")?, ck, ckind)
            .map_err(config_err("curriculum"))?
            .with_monotone_clip(f.flag("curriculum.monotone_clip")?);

        let grid_kind = match f.raw("grid.kind") {
            "karras" => GridKind::Karras,
            "sinusoidal" => GridKind::Sinusoidal,
            v => return Err(Error::Config(format!("grid.kind: unknown {v:?} (karras|sinusoidal)"))),
        };
        let amplitude = match f.raw("grid.amplitude") {
            "span" => SinusoidalAmplitude::SigmaSpan,
            _ => SinusoidalAmplitude::Fixed(f.real("grid.amplitude")?),
        };
        let range = NoiseRange::new(
            f.real("grid.sigma_min")?,
            f.real("grid.sigma_max")?,
            f.real("grid.rho")?,
        )
        .map_err(config_err("grid"))?;
        let sampler = match f.raw("sampler.kind") {
            "uniform" => LevelSampler::Uniform,
            "lognormal" => LevelSampler::Lognormal(
                LognormalParams::new(f.real("sampler.p_mean")?, f.real("sampler.p_std")?)
                    .map_err(config_err("sampler"))?,
            ),
            "beta" => LevelSampler::Beta(
                BetaParams::new(f.real("sampler.alpha")?, f.real("sampler.beta")?).map_err(config_err("sampler"))?,
            ),
            v => {
                return Err(Error::Config(format!(
                    "sampler.kind: unknown {v:?} (uniform|lognormal|beta)"
                )))
            }
        };
        let injection = HighNoiseInjection::new(f.real("inject.ratio")?, f.real("inject.low")?, f.real("inject.high")?)
            .map_err(config_err("inject"))?;
        if injection.ratio > 0.0 && !(injection.high <= range.sigma_max && injection.low > range.sigma_min) {
            return Err(Error::Config(format!(
                "inject: [{}, {}] must lie inside (sigma_min, sigma_max]",
                injection.low, injection.high
            )));
        }

        let net = NetConfig {
            res_blocks_per_stage: f.num("net.res_blocks")?,
            base_channels: f.num("net.base_channels")?,
            channel_multipliers: f.list("net.channel_multipliers")?,
            attention_resolutions: f.list("net.attention_resolutions")?,
            dropout: f.real("net.dropout")?,
        };
        let wag = WagConfig {
            weight: f.real("wag.weight")?,
            inter_channels: f.num("wag.inter_channels")?,
        };
        let arch = match f.raw("net.arch") {
            "mlp" => ArchConfig::Mlp {
                hidden: f.list("net.hidden")?,
                emb_dim: f.num("net.emb_dim")?,
            },
            "unet" => ArchConfig::UNet(net),
            "cond_unet" => ArchConfig::CondUNet(net, wag),
            v => return Err(Error::Config(format!("net.arch: unknown {v:?} (mlp|unet|cond_unet)"))),
        };

        let path = || -> Result<PathBuf> {
            match f.raw("data.path") {
                "" => Err(Error::Config("data.path is required for this data.kind".into())),
                p => Ok(PathBuf::from(p)),
            }
        };
        let size: usize = f.num("data.size")?;
        let source = match f.raw("data.kind") {
            "gauss2d" => DataSource::Gauss2d {
                modes: f.num("data.modes")?,
            },
            "phantom" => {
                let e = f.list("data.ellipses")?;
                if e.len() != 2 {
                    return Err(Error::Config("data.ellipses must be `min,max`".into()));
                }
                DataSource::Phantom(PhantomConfig {
                    size,
                    ellipses: (e[0], e[1]),
                    dose_sigma: f.real("data.dose_sigma")?,
                })
            }
            "image_dir" => DataSource::ImageDir(path()?),
            "manifest" => DataSource::Manifest(path()?),
            v => {
                return Err(Error::Config(format!(
                    "data.kind: unknown {v:?} (gauss2d|phantom|image_dir|manifest)"
                )))
            }
        };
        let data = DataConfig {
            source,
            n: f.num("data.n")?,
            holdout: f.num("data.holdout")?,
            size,
            channels: f.num("data.channels")?,
        };
        let eval = EvalConfig {
            samples: f.num("eval.samples")?,
            projections: f.num("eval.projections")?,
            nfe: f.num("eval.nfe")?,
        };
        if eval.projections < 1 || eval.nfe < 1 {
            return Err(Error::Config("eval.projections and eval.nfe must be >= 1".into()));
        }

        let cfg = TrainConfig {
            total_steps,
            batch_size,
            optimizer: OptimizerKind::parse(f.raw("optimizer"))?,
            adam,
            seed: f.num("seed")?,
            checkpoint_every: f.num("checkpoint_every")?,
            grad_clip,
            scalings: BoundaryScalings::new(f.real("sigma_data")?).map_err(config_err("sigma_data"))?,
            weighting,
            ema: EmaConfig::new(f.real("ema.mu")?).map_err(config_err("ema.mu"))?,
            huber_c,
            curriculum,
            grid_kind,
            amplitude,
            range,
            sampler,
            injection,
            arch,
            data,
            eval,
            map,
        };
        cfg.net_spec()?;
        Ok(cfg)
    }

    /// Returns a copy with further overrides applied.
    pub fn with(&self, overrides: &[(&str, &str)]) -> Result<Self> {
        let layers: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut map = self.map.clone();
        for (k, v) in layers {
            if !map.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            map.insert(k, v);
        }
        Self::from_map(map)
    }

    /// Canonical key/value form (every key, sorted).
    pub fn to_map(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical form, truncated to 16 digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Shape of one sample and of its condition, if any.
    pub fn sample_dims(&self) -> (Vec<usize>, Option<Vec<usize>>) {
        match &self.data.source {
            DataSource::Gauss2d { .. } => (vec![2], None),
            DataSource::Phantom(p) => (vec![1, p.size, p.size], Some(vec![1, p.size, p.size])),
            DataSource::ImageDir(_) | DataSource::Manifest(_) => {
                (vec![self.data.channels, self.data.size, self.data.size], None)
            }
        }
    }

    /// The network the configured data calls for.
    pub fn net_spec(&self) -> Result<NetSpec> {
        let (dims, cond) = self.sample_dims();
        let spec = match (&self.arch, dims.as_slice()) {
            (ArchConfig::Mlp { hidden, emb_dim }, [d]) => NetSpec::Mlp {
                dim: *d,
                hidden: hidden.clone(),
                emb_dim: *emb_dim,
            },
            (ArchConfig::UNet(net), [c, h, w]) => NetSpec::UNet {
                image: ImageShape::new(*c, *h, *w),
                net: net.clone(),
            },
            (ArchConfig::CondUNet(net, wag), [c, h, w]) => {
                let cond_channels = cond
                    .as_ref()
                    .map(|s| s[0])
                    .ok_or_else(|| Error::Config("cond_unet needs a conditioned data.kind (phantom)".into()))?;
                NetSpec::CondUNet {
                    image: ImageShape::new(*c, *h, *w),
                    cond_channels,
                    net: net.clone(),
                    wag: *wag,
                }
            }
            (arch, _) => {
                return Err(Error::Config(format!(
                    "net.arch {} cannot model {}-dimensional samples",
                    match arch {
                        ArchConfig::Mlp { .. } => "mlp",
                        ArchConfig::UNet(_) => "unet",
                        ArchConfig::CondUNet(..) => "cond_unet",
                    },
                    dims.len()
                )))
            }
        };
        spec.validate().map_err(config_err("net"))?;
        Ok(spec)
    }

    /// Noise range the consistency function is defined on. The literal
    /// sinusoidal amplitude can push the top level past `grid.sigma_max`.
    pub fn model_range(&self) -> NoiseRange {
        match (self.grid_kind, self.amplitude) {
            (GridKind::Sinusoidal, SinusoidalAmplitude::Fixed(d)) => NoiseRange {
                sigma_max: self.range.sigma_min + d,
                ..self.range
            },
            _ => self.range,
        }
    }

    pub fn huber(&self) -> HuberConfig {
        match self.huber_c {
            Some(c) => HuberConfig::new(c).expect("validated"),
            None => HuberConfig::for_dim(self.sample_dims().0.iter().product()),
        }
    }
}
