use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::layers::{Conv, Dense, Norm, SigmaEmbedding};
use super::{ImageShape, NetConfig, WagConfig};

struct ResBlock {
    n1: Norm,
    c1: Conv,
    emb: Dense,
    n2: Norm,
    c2: Conv,
    shortcut: Option<Conv>,
    dropout: f64,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        emb_dim: usize,
        dropout: f64,
    ) -> Self {
        ResBlock {
            n1: Norm::new(p, &format!("{name}.n1"), inp),
            c1: Conv::new(p, rng, &format!("{name}.c1"), inp, out, 3, false),
            emb: Dense::new(p, rng, &format!("{name}.emb"), emb_dim, out, true, false),
            n2: Norm::new(p, &format!("{name}.n2"), out),
            c2: Conv::new(p, rng, &format!("{name}.c2"), out, out, 3, true),
            shortcut: (inp != out).then(|| Conv::new(p, rng, &format!("{name}.skip"), inp, out, 1, false)),
            dropout,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, emb: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.n1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.c1.forward(g, h)?;
        let e = self.emb.forward(g, emb)?;
        let h = g.add_channel(h, e)?;
        let h = self.n2.forward(g, h)?;
        let mut h = g.silu(h);
        if let (Some(rng), true) = (rng, self.dropout > 0.0) {
            let keep = 1.0 - self.dropout;
            let shape = g.shape(h).to_vec();
            let n: usize = shape.iter().product();
            let mask: Vec<T> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        T::of(1.0 / keep)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let m = g.constant(Tensor::from_vec(&shape, mask)?);
            h = g.mul(h, m)?;
        }
        let h = self.c2.forward(g, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Single-head spatial self-attention with a residual connection.
struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl Attention {
    fn new<T: Real, R: Rng + ?Sized>(p: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize) -> Self {
        Attention {
            norm: Norm::new(p, &format!("{name}.norm"), ch),
            q: Conv::new(p, rng, &format!("{name}.q"), ch, ch, 1, false),
            k: Conv::new(p, rng, &format!("{name}.k"), ch, ch, 1, false),
            v: Conv::new(p, rng, &format!("{name}.v"), ch, ch, 1, false),
            proj: Conv::new(p, rng, &format!("{name}.proj"), ch, ch, 1, true),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let n = self.norm.forward(g, x)?;
        let flat = [b, c, hw];
        let q = self.q.forward(g, n)?;
        let q = g.reshape(q, &flat)?;
        let k = self.k.forward(g, n)?;
        let k = g.reshape(k, &flat)?;
        let v = self.v.forward(g, n)?;
        let v = g.reshape(v, &flat)?;
        // scores[i, j] = <q_i, k_j> / sqrt(c)
        let s = g.bmm(q, true, k, false)?;
        let s = g.scale(s, T::of(1.0 / (c as f64).sqrt()));
        let a = g.softmax(s);
        let o = g.bmm(v, false, a, true)?;
        let o = g.reshape(o, &shape)?;
        let o = self.proj.forward(g, o)?;
        g.add(x, o)
    }
}

struct Stage {
    blocks: Vec<(ResBlock, Option<Attention>)>,
}

impl Stage {
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        i: usize,
        h: Var,
        emb: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (res, attn) = &self.blocks[i];
        let h = res.forward(g, h, emb, rng)?;
        match attn {
            Some(a) => a.forward(g, h),
            None => Ok(h),
        }
    }
}

/// Downsampling path. Every intermediate feature map is recorded as a skip.
struct Encoder {
    conv_in: Conv,
    stages: Vec<Stage>,
}

/// Channel counts of the skips an encoder produces, in push order.
fn skip_channels(cfg: &NetConfig) -> Vec<usize> {
    let mut out = vec![cfg.base_channels];
    for (l, m) in cfg.channel_multipliers.iter().enumerate() {
        for _ in 0..cfg.res_blocks_per_stage {
            out.push(cfg.base_channels * m);
        }
        if l + 1 < cfg.levels() {
            out.push(cfg.base_channels * m);
        }
    }
    out
}

fn wants_attention(cfg: &NetConfig, image: &ImageShape, level: usize) -> bool {
    cfg.attention_resolutions.contains(&(image.height >> level))
}

impl Encoder {
    fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        image: &ImageShape,
        cfg: &NetConfig,
    ) -> Self {
        let base = cfg.base_channels;
        let conv_in = Conv::new(p, rng, &format!("{name}.in"), in_ch, base, 3, false);
        let mut ch = base;
        let mut stages = Vec::new();
        for (l, m) in cfg.channel_multipliers.iter().enumerate() {
            let out = base * m;
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks_per_stage {
                let nm = format!("{name}.{l}.{r}");
                let res = ResBlock::new(p, rng, &nm, ch, out, cfg.emb_dim(), cfg.dropout);
                let attn = wants_attention(cfg, image, l).then(|| Attention::new(p, rng, &format!("{nm}.attn"), out));
                blocks.push((res, attn));
                ch = out;
            }
            stages.push(Stage { blocks });
        }
        Encoder { conv_in, stages }
    }

    /// Returns the bottom feature map and the skips in push order.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        emb: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = self.conv_in.forward(g, x)?;
        let mut skips = vec![h];
        for (l, stage) in self.stages.iter().enumerate() {
            for i in 0..stage.blocks.len() {
                h = stage.forward(g, i, h, emb, rng.as_deref_mut())?;
                skips.push(h);
            }
            if l + 1 < self.stages.len() {
                h = g.avg_pool2(h)?;
                skips.push(h);
            }
        }
        Ok((h, skips))
    }
}

/// Weighted attention gate on one skip connection.
pub struct Wag {
    wg: Conv,
    wx: Conv,
    psi: Conv,
    pub(crate) phi: Conv,
    weight: f64,
}

pub struct WagOutput {
    pub out: Var,
    /// Sigmoid gate `ψ`, shape `(B, 1, H, W)`.
    pub psi: Var,
    /// Squared gate `ψ²`.
    pub map: Var,
}

impl Wag {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        skip_ch: usize,
        gate_ch: usize,
        cond_ch: usize,
        cfg: &WagConfig,
    ) -> Self {
        let inter = cfg.inter_channels;
        Wag {
            wg: Conv::new(p, rng, &format!("{name}.wg"), gate_ch, inter, 1, false),
            wx: Conv::new(p, rng, &format!("{name}.wx"), skip_ch, inter, 1, false),
            psi: Conv::new(p, rng, &format!("{name}.psi"), inter, 1, 1, false),
            phi: Conv::new(p, rng, &format!("{name}.phi"), cond_ch, skip_ch, 1, false),
            weight: cfg.weight,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Weight and bias of the final `ψ` projection.
    pub fn psi_params(&self) -> (ParamId, ParamId) {
        (self.psi.weight(), self.psi.bias())
    }
}

/// `skip ⊙ ψ² + w·φ(cond)`, with `ψ = sigmoid(W_ψ·relu(W_g·gate + W_x·skip))`.
/// A gate or condition map at half the skip resolution is upsampled first.
pub fn wag_forward<T: Real>(
    g: &mut Graph<'_, T>,
    wag: &Wag,
    skip: Var,
    gate: Var,
    cond_feat: Var,
) -> Result<WagOutput> {
    let gate = match_resolution(g, skip, gate, "gate")?;
    let a = wag.wg.forward(g, gate)?;
    let b = wag.wx.forward(g, skip)?;
    let s = g.add(a, b)?;
    let s = g.relu(s);
    let s = wag.psi.forward(g, s)?;
    let psi = g.sigmoid(s);
    let map = g.square(psi);
    let mut out = g.mul_broadcast(skip, map)?;
    if wag.weight != 0.0 {
        let cond_feat = match_resolution(g, skip, cond_feat, "condition")?;
        let c = wag.phi.forward(g, cond_feat)?;
        let c = g.scale(c, T::of(wag.weight));
        out = g.add(out, c)?;
    }
    Ok(WagOutput { out, psi, map })
}

fn match_resolution<T: Real>(g: &mut Graph<'_, T>, skip: Var, v: Var, what: &str) -> Result<Var> {
    let s = g.shape(skip).to_vec();
    let t = g.shape(v).to_vec();
    if s.len() != 4 || t.len() != 4 || s[0] != t[0] {
        return Err(invalid!("{what} {t:?} incompatible with skip {s:?}"));
    }
    if s[2..] == t[2..] {
        Ok(v)
    } else if s[2] == 2 * t[2] && s[3] == 2 * t[3] {
        g.upsample2(v)
    } else {
        Err(invalid!(
            "{what} spatial size {:?} does not match skip {:?}",
            &t[2..],
            &s[2..]
        ))
    }
}

/// Upsampling path: consumes skips in reverse push order.
struct Decoder {
    stages: Vec<(Stage, Option<Conv>)>,
    norm_out: Norm,
    conv_out: Conv,
}

impl Decoder {
    /// `on_skip(index, in_ch, gate_ch)` lets the caller attach per-skip
    /// modules; `index` counts skips in consumption order.
    fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        out_ch: usize,
        image: &ImageShape,
        cfg: &NetConfig,
        on_skip: &mut SkipBuilder<'_, T, R>,
    ) -> Self {
        let base = cfg.base_channels;
        let mut skips = skip_channels(cfg);
        let mut ch = base * cfg.channel_multipliers.last().copied().unwrap_or(1);
        let mut stages = Vec::new();
        let mut idx = 0;
        for l in (0..cfg.levels()).rev() {
            let out = base * cfg.channel_multipliers[l];
            let mut blocks = Vec::new();
            for r in 0..=cfg.res_blocks_per_stage {
                let sc = skips.pop().expect("skip count matches topology");
                on_skip(p, rng, idx, sc, ch);
                idx += 1;
                let nm = format!("dec.{l}.{r}");
                let res = ResBlock::new(p, rng, &nm, ch + sc, out, cfg.emb_dim(), cfg.dropout);
                let attn = wants_attention(cfg, image, l).then(|| Attention::new(p, rng, &format!("{nm}.attn"), out));
                blocks.push((res, attn));
                ch = out;
            }
            let up = (l > 0).then(|| Conv::new(p, rng, &format!("dec.{l}.up"), ch, ch, 3, false));
            stages.push((Stage { blocks }, up));
        }
        Decoder {
            stages,
            norm_out: Norm::new(p, "out.norm", ch),
            conv_out: Conv::new(p, rng, "out.conv", ch, out_ch, 3, true),
        }
    }
}

struct Middle {
    a: ResBlock,
    attn: Attention,
    b: ResBlock,
}

/// Shared body of the plain and the conditional U-Net.
struct Core {
    emb: SigmaEmbedding,
    enc: Encoder,
    mid: Middle,
    dec: Decoder,
}

/// Called once per skip with `(index, skip channels, gate channels)`.
type SkipBuilder<'a, T, R> = dyn FnMut(&mut ParamStore<T>, &mut R, usize, usize, usize) + 'a;

type SkipHook<'a, 'p, T> = dyn FnMut(&mut Graph<'p, T>, usize, Var, Var) -> Result<Var> + 'a;

impl Core {
    fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        image: &ImageShape,
        cfg: &NetConfig,
        on_skip: &mut SkipBuilder<'_, T, R>,
    ) -> Self {
        let emb = SigmaEmbedding::new(p, rng, "emb", cfg.emb_dim());
        let enc = Encoder::new(p, rng, "enc", image.channels, image, cfg);
        let ch = cfg.base_channels * cfg.channel_multipliers.last().copied().unwrap_or(1);
        let ed = cfg.emb_dim();
        let mid = Middle {
            a: ResBlock::new(p, rng, "mid.a", ch, ch, ed, cfg.dropout),
            attn: Attention::new(p, rng, "mid.attn", ch),
            b: ResBlock::new(p, rng, "mid.b", ch, ch, ed, cfg.dropout),
        };
        let dec = Decoder::new(p, rng, image.channels, image, cfg, on_skip);
        Core { emb, enc, mid, dec }
    }

    /// Embedding after the shared SiLU that precedes every block projection.
    fn embed<T: Real>(&self, g: &mut Graph<'_, T>, sigmas: &[f64]) -> Result<Var> {
        let e = self.emb.forward(g, sigmas)?;
        Ok(g.silu(e))
    }

    fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        x: Var,
        emb: Var,
        mut rng: Option<&mut ChaCha8Rng>,
        hook: &mut SkipHook<'_, 'p, T>,
    ) -> Result<Var> {
        let (mut h, mut skips) = self.enc.forward(g, x, emb, rng.as_deref_mut())?;
        h = self.mid.a.forward(g, h, emb, rng.as_deref_mut())?;
        h = self.mid.attn.forward(g, h)?;
        h = self.mid.b.forward(g, h, emb, rng.as_deref_mut())?;
        let mut idx = 0;
        for (stage, up) in &self.dec.stages {
            for i in 0..stage.blocks.len() {
                let skip = skips.pop().expect("skip count matches topology");
                let skip = hook(g, idx, skip, h)?;
                idx += 1;
                let cat = g.concat(h, skip)?;
                h = stage.forward(g, i, cat, emb, rng.as_deref_mut())?;
            }
            if let Some(conv) = up {
                let u = g.upsample2(h)?;
                h = conv.forward(g, u)?;
            }
        }
        let h = self.dec.norm_out.forward(g, h)?;
        let h = g.silu(h);
        self.dec.conv_out.forward(g, h)
    }

    fn out_ids(&self) -> Vec<ParamId> {
        self.dec.conv_out.ids()
    }
}

pub(crate) struct UNet {
    core: Core,
}

impl UNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        image: &ImageShape,
        cfg: &NetConfig,
    ) -> Self {
        UNet {
            core: Core::new(p, rng, image, cfg, &mut |_, _, _, _, _| {}),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        sigmas: &[f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let emb = self.core.embed(g, sigmas)?;
        self.core.forward(g, x, emb, rng, &mut |_, _, s, _| Ok(s))
    }

    pub fn out_ids(&self) -> Vec<ParamId> {
        self.core.out_ids()
    }

    pub fn embedding(&self) -> &SigmaEmbedding {
        &self.core.emb
    }
}

/// U-Net whose skips pass through weighted attention gates fed by a separate
/// encoder of the condition image.
pub(crate) struct CondUNet {
    core: Core,
    cond_enc: Encoder,
    wags: Vec<Wag>,
}

impl CondUNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        image: &ImageShape,
        cond_channels: usize,
        cfg: &NetConfig,
        wag: &WagConfig,
    ) -> Self {
        let mut wags = Vec::new();
        let core = Core::new(p, rng, image, cfg, &mut |p, rng, idx, sc, gate_ch| {
            wags.push(Wag::new(p, rng, &format!("wag.{idx}"), sc, gate_ch, sc, wag));
        });
        let cond_enc = Encoder::new(p, rng, "cond", cond_channels, image, cfg);
        CondUNet { core, cond_enc, wags }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        sigmas: &[f64],
        cond: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let emb = self.core.embed(g, sigmas)?;
        let needs_cond = self.wags.iter().any(|w| w.weight != 0.0);
        let mut cond_skips = if needs_cond {
            self.cond_enc.forward(g, cond, emb, rng.as_deref_mut())?.1
        } else {
            Vec::new()
        };
        let wags = &self.wags;
        self.core.forward(g, x, emb, rng, &mut |g, idx, skip, gate| {
            // With a zero weight the condition branch is never evaluated, so
            // any placeholder works.
            let cf = cond_skips.pop().unwrap_or(skip);
            Ok(wag_forward(g, &wags[idx], skip, gate, cf)?.out)
        })
    }

    pub fn out_ids(&self) -> Vec<ParamId> {
        self.core.out_ids()
    }

    pub fn embedding(&self) -> &SigmaEmbedding {
        &self.core.emb
    }
}
