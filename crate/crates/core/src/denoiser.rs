//! Noise-prediction network.
//!
//! Activations inside the residual stack are kept channel-last as
//! `h [B, T, D, C]`. Each block adds a projected step embedding, runs the
//! temporal module per feature (frequency features fused with the input,
//! then attention or a gated TCN over time), attention across features, and
//! a gated filter that mixes in the conditional features and side
//! information before splitting into residual and skip outputs.

use serde::{Deserialize, Serialize};
use spectra_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::fbp::{DecompositionConfig, FbpConfig, FbpKind, FbpModule};
use crate::nn::{
    add_encoder_layer, add_layer_norm, add_linear, add_zero_linear, encoder_layer, layer_norm, linear,
    linear_with, sinusoid, ForwardCtx, Init, ParamStore,
};
use crate::spectral::WindowSpec;

pub type DenoiserParams<E> = ParamStore<E>;

/// Sequence model used inside the temporal module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Attention,
    Conv,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Attention, Backbone::Conv];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Attention => "attention",
            Backbone::Conv => "conv",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Backbone::Attention),
            "conv" => Ok(Backbone::Conv),
            _ => Err(Error::Config(format!("unknown temporal backbone {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub backbone: Backbone,
    pub fbp: FbpKind,
    pub decomposition_kernel: usize,
    pub fbp_dropout: f64,
    pub max_bins: Option<usize>,
    pub window: Option<WindowSpec>,
    pub tcn_layers: usize,
    pub tcn_dilation_base: usize,
    pub tcn_kernel: usize,
    pub time_embed_dim: usize,
    pub feature_embed_dim: usize,
    pub cond_channels: usize,
    pub step_embed_dim: usize,
    pub diffusion_steps: usize,
    pub seq_len: usize,
    pub features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 4,
            heads: 8,
            backbone: Backbone::Attention,
            fbp: FbpKind::Dft,
            decomposition_kernel: 25,
            fbp_dropout: 0.1,
            max_bins: None,
            window: None,
            tcn_layers: 4,
            tcn_dilation_base: 2,
            tcn_kernel: 3,
            time_embed_dim: 128,
            feature_embed_dim: 16,
            cond_channels: 32,
            step_embed_dim: 128,
            diffusion_steps: 50,
            seq_len: 96,
            features: 7,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("{} channels do not split into {} heads", self.channels, self.heads));
        }
        if self.blocks == 0 {
            return fail("at least one residual block is required".into());
        }
        if self.cond_channels == 0 {
            return fail("conditional feature channels must be at least 1".into());
        }
        if self.decomposition_kernel % 2 == 0 {
            return fail(format!("decomposition kernel {} must be odd", self.decomposition_kernel));
        }
        if self.tcn_kernel % 2 == 0 || self.tcn_layers == 0 || self.tcn_dilation_base == 0 {
            return fail("TCN needs an odd kernel, at least one layer and a positive dilation base".into());
        }
        if self.step_embed_dim < 2 || self.time_embed_dim < 2 {
            return fail("embedding widths must be at least 2".into());
        }
        if self.seq_len < 2 || self.features == 0 {
            return fail(format!("series shape T={} D={} is too small", self.seq_len, self.features));
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion needs at least one step".into());
        }
        if !(0.0..1.0).contains(&self.fbp_dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.fbp_dropout));
        }
        if let Some(w) = self.window {
            WindowSpec::new(w.length(), w.hop())?;
        }
        Ok(())
    }

    /// Dilation of TCN layer `layer`.
    pub fn dilation(&self, layer: usize) -> usize {
        self.tcn_dilation_base.pow(layer as u32)
    }

    fn fbp_config(&self) -> FbpConfig {
        FbpConfig {
            kind: self.fbp,
            decomposition: DecompositionConfig {
                kernel: self.decomposition_kernel,
            },
            dropout: self.fbp_dropout,
            max_bins: self.max_bins,
            window: self.window,
        }
    }

    fn side_channels(&self) -> usize {
        self.time_embed_dim + self.feature_embed_dim + 1
    }
}

/// Fixed time embedding, learned feature embedding and the conditional mask.
#[derive(Debug, Clone)]
pub struct SideInfo<E: Element> {
    /// `[T, d_time]`
    pub time: Tensor<E>,
    /// `[D, d_feat]`
    pub feature: Tensor<E>,
    /// `[B, T, D]`
    pub mask: Tensor<E>,
}

/// Everything the network conditions on besides the noisy target.
#[derive(Debug, Clone)]
pub struct Conditioning<E: Element> {
    /// Channel-last conditional features `[B, T, D, C_cf]`.
    pub features: Tensor<E>,
    pub side: SideInfo<E>,
}

/// Intermediate outputs of one block.
pub struct BlockOutput<E: Element> {
    pub next: Tensor<E>,
    pub skip: Tensor<E>,
}

pub struct Denoiser<E: Element> {
    cfg: DenoiserConfig,
    fbp: Vec<FbpModule<E>>,
    time_embedding: Tensor<E>,
}

impl<E: Element> Denoiser<E> {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let fbp = (0..cfg.blocks)
            .map(|i| FbpModule::new(cfg.fbp_config(), cfg.seq_len, format!("blocks.{i}.fbp")))
            .collect::<Result<Vec<_>>>()?;
        let mut time = Vec::with_capacity(cfg.seq_len * cfg.time_embed_dim);
        for t in 0..cfg.seq_len {
            time.extend(sinusoid(t as f64, cfg.time_embed_dim));
        }
        let time_embedding = Tensor::from_f64(&time, &[cfg.seq_len, cfg.time_embed_dim])?;
        Ok(Self {
            cfg,
            fbp,
            time_embedding,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Fresh parameters. Every layer uses `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// except the last output projection, which starts at zero so the
    /// initial noise prediction is exactly zero.
    pub fn init_params(&self, seed: u64) -> Result<DenoiserParams<E>> {
        let c = &self.cfg;
        let ch = c.channels;
        let mut s = ParamStore::new();
        let mut init = Init::new(seed);
        add_linear(&mut s, &mut init, "step.proj1", c.step_embed_dim, c.step_embed_dim)?;
        add_linear(&mut s, &mut init, "step.proj2", c.step_embed_dim, c.step_embed_dim)?;
        add_linear(&mut s, &mut init, "input", 2, ch)?;
        add_linear(&mut s, &mut init, "cond", 2, c.cond_channels)?;
        s.insert("feature_embed", init.uniform(&[c.features, c.feature_embed_dim], 1.0)?)?;
        for (i, fbp) in self.fbp.iter().enumerate() {
            let b = format!("blocks.{i}");
            add_linear(&mut s, &mut init, &format!("{b}.step"), c.step_embed_dim, ch)?;
            fbp.init_params(&mut s, &mut init)?;
            match c.backbone {
                Backbone::Attention => add_encoder_layer(&mut s, &mut init, &format!("{b}.time"), ch)?,
                Backbone::Conv => {
                    for j in 0..c.tcn_layers {
                        let l = format!("{b}.tcn.{j}");
                        add_conv(&mut s, &mut init, &format!("{l}.filter"), ch, ch, c.tcn_kernel)?;
                        add_conv(&mut s, &mut init, &format!("{l}.gate"), ch, ch, c.tcn_kernel)?;
                        add_linear(&mut s, &mut init, &format!("{l}.res"), ch, ch)?;
                        add_layer_norm(&mut s, &format!("{l}.norm"), ch)?;
                        add_linear(&mut s, &mut init, &format!("{l}.skip"), ch, ch)?;
                    }
                    add_linear(&mut s, &mut init, &format!("{b}.tcn.inter"), ch, ch)?;
                    add_linear(&mut s, &mut init, &format!("{b}.tcn.final"), ch, ch)?;
                }
            }
            add_encoder_layer(&mut s, &mut init, &format!("{b}.feature"), ch)?;
            add_linear(&mut s, &mut init, &format!("{b}.mid"), ch, 2 * ch)?;
            add_linear(&mut s, &mut init, &format!("{b}.cond"), c.cond_channels + c.side_channels(), 2 * ch)?;
            add_linear(&mut s, &mut init, &format!("{b}.out"), ch, 2 * ch)?;
        }
        add_linear(&mut s, &mut init, "output.proj1", ch, ch)?;
        add_zero_linear(&mut s, "output.proj2", ch, 1)?;
        Ok(s)
    }

    /// Sinusoidal embedding of step `s` through two SiLU-activated layers.
    pub fn step_embed(&self, s: usize, params: &DenoiserParams<E>) -> Result<Tensor<E>> {
        if s == 0 || s > self.cfg.diffusion_steps {
            return Err(Error::Config(format!(
                "diffusion step {s} outside [1, {}]",
                self.cfg.diffusion_steps
            )));
        }
        let raw = Tensor::from_f64(&sinusoid(s as f64, self.cfg.step_embed_dim), &[self.cfg.step_embed_dim])?;
        let h = linear(&raw, params, "step.proj1")?.silu();
        Ok(linear(&h, params, "step.proj2")?.silu())
    }

    fn check_series(&self, name: &str, x: &Tensor<E>) -> Result<usize> {
        match *x.shape() {
            [b, t, d] if t == self.cfg.seq_len && d == self.cfg.features => Ok(b),
            _ => Err(Error::Config(format!(
                "{name} has shape {:?}, expected [B, {}, {}]",
                x.shape(),
                self.cfg.seq_len,
                self.cfg.features
            ))),
        }
    }

    /// Channel-last conditional features `[B, T, D, C_cf]`: a pointwise
    /// layer over `(x_co, m_co)` followed by ReLU.
    fn cond_features_last(&self, x_co: &Tensor<E>, m_co: &Tensor<E>, params: &DenoiserParams<E>) -> Result<Tensor<E>> {
        let b = self.check_series("conditional values", x_co)?;
        if m_co.shape() != x_co.shape() {
            return Err(Error::Config(format!(
                "conditional mask {:?} does not match values {:?}",
                m_co.shape(),
                x_co.shape()
            )));
        }
        let (t, d) = (self.cfg.seq_len, self.cfg.features);
        let stacked = Tensor::concat(&[x_co.reshape(&[b, t, d, 1])?, m_co.reshape(&[b, t, d, 1])?], 3)?;
        Ok(linear(&stacked, params, "cond")?.relu())
    }

    /// Conditional features in `[B, C_cf, T, D]` layout.
    pub fn cond_features(&self, x_co: &Tensor<E>, m_co: &Tensor<E>, params: &DenoiserParams<E>) -> Result<Tensor<E>> {
        Ok(self.cond_features_last(x_co, m_co, params)?.permute(&[0, 3, 1, 2])?)
    }

    pub fn side_info(&self, m_co: &Tensor<E>, params: &DenoiserParams<E>) -> Result<SideInfo<E>> {
        self.check_series("conditional mask", m_co)?;
        Ok(SideInfo {
            time: self.time_embedding.clone(),
            feature: params.get("feature_embed")?.clone(),
            mask: m_co.clone(),
        })
    }

    /// Conditioning for observed values `x_co` (zero outside `m_co`).
    pub fn condition(&self, x_co: &Tensor<E>, m_co: &Tensor<E>, params: &DenoiserParams<E>) -> Result<Conditioning<E>> {
        Ok(Conditioning {
            features: self.cond_features_last(x_co, m_co, params)?,
            side: self.side_info(m_co, params)?,
        })
    }

    /// Temporal module on `v [B, D, C, T]`: frequency features are added to
    /// the input, then the backbone runs along time for every feature.
    pub fn temporal_module(
        &self,
        block: usize,
        v: &Tensor<E>,
        params: &DenoiserParams<E>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<E>> {
        let (b, d, c, t) = match *v.shape() {
            [b, d, c, t] => (b, d, c, t),
            _ => return Err(Error::Config(format!("temporal module expects [B, D, C, T], got {:?}", v.shape()))),
        };
        let fused = match self.fbp[block].features(v, params, ctx)? {
            Some(f) => v.add(&f)?,
            None => v.clone(),
        };
        let name = format!("blocks.{block}");
        match self.cfg.backbone {
            Backbone::Attention => {
                let tokens = fused.permute(&[0, 1, 3, 2])?.reshape(&[b * d, t, c])?;
                let out = encoder_layer(&tokens, params, &format!("{name}.time"), self.cfg.heads)?;
                Ok(out.reshape(&[b, d, t, c])?.permute(&[0, 1, 3, 2])?)
            }
            Backbone::Conv => {
                let out = self.tcn(&fused.reshape(&[b * d, c, t])?, params, &format!("{name}.tcn"))?;
                Ok(out.reshape(&[b, d, c, t])?)
            }
        }
    }

    /// Gated dilated TCN on `[N, C, T]`.
    ///
    /// Layer `j`: `y = tanh(conv_f(v)) * sigmoid(conv_g(v))`,
    /// `v <- norm(v + res(y))`, `skip += skip_j(y)`; the module returns
    /// `final(relu(inter(relu(skip))))`. Channel LayerNorm replaces batch
    /// normalization so outputs do not depend on batch composition.
    fn tcn(&self, v: &Tensor<E>, params: &DenoiserParams<E>, name: &str) -> Result<Tensor<E>> {
        let mut cur = v.clone();
        let mut skip: Option<Tensor<E>> = None;
        for j in 0..self.cfg.tcn_layers {
            let l = format!("{name}.{j}");
            let dil = self.cfg.dilation(j);
            let f = conv(&cur, params, &format!("{l}.filter"), dil)?.tanh();
            let g = conv(&cur, params, &format!("{l}.gate"), dil)?.sigmoid();
            // Pointwise layers run channel-last.
            let y = f.mul(&g)?.permute(&[0, 2, 1])?;
            let last = cur.permute(&[0, 2, 1])?.add(&linear(&y, params, &format!("{l}.res"))?)?;
            cur = layer_norm(&last, params, &format!("{l}.norm"))?.permute(&[0, 2, 1])?;
            let s = linear(&y, params, &format!("{l}.skip"))?;
            skip = Some(match skip {
                Some(acc) => acc.add(&s)?,
                None => s,
            });
        }
        let s = skip.expect("at least one TCN layer").relu();
        let h = linear(&s, params, &format!("{name}.inter"))?.relu();
        Ok(linear(&h, params, &format!("{name}.final"))?.permute(&[0, 2, 1])?)
    }

    /// Attention across features on `v [B, T, D, C]`, with residual.
    pub fn feature_attention(&self, block: usize, v: &Tensor<E>, params: &DenoiserParams<E>) -> Result<Tensor<E>> {
        let (b, t, d, c) = match *v.shape() {
            [b, t, d, c] => (b, t, d, c),
            _ => return Err(Error::Config(format!("feature attention expects [B, T, D, C], got {:?}", v.shape()))),
        };
        let tokens = v.reshape(&[b * t, d, c])?;
        let out = encoder_layer(&tokens, params, &format!("blocks.{block}.feature"), self.cfg.heads)?;
        Ok(out.reshape(&[b, t, d, c])?)
    }

    /// Projection of conditional features and side information to `2C`
    /// channels, `[B, T, D, 2C]`. Equivalent to one pointwise layer over
    /// the channel concatenation `[x_cf, time, feature, mask]`.
    fn cond_projection(&self, block: usize, cond: &Conditioning<E>, params: &DenoiserParams<E>) -> Result<Tensor<E>> {
        let c = &self.cfg;
        let name = format!("blocks.{block}.cond");
        let w = params.get(&format!("{name}.weight"))?;
        let bias = params.get(&format!("{name}.bias"))?;
        let b = cond.side.mask.dim(0);
        let (t, d, out) = (c.seq_len, c.features, 2 * c.channels);
        let mut offset = 0;
        let mut cols = |n: usize| -> Result<Tensor<E>> {
            let part = w.narrow(1, offset, n)?;
            offset += n;
            Ok(part)
        };
        let w_cf = cols(c.cond_channels)?;
        let w_time = cols(c.time_embed_dim)?;
        let w_feat = cols(c.feature_embed_dim)?;
        let w_mask = cols(1)?;
        let x = linear_with(&cond.features, &w_cf, Some(bias))?;
        let time = linear_with(&cond.side.time, &w_time, None)?.reshape(&[1, t, 1, out])?;
        let feat = linear_with(&cond.side.feature, &w_feat, None)?.reshape(&[1, 1, d, out])?;
        let mask = cond.side.mask.reshape(&[b, t, d, 1])?.mul(&w_mask.reshape(&[out])?)?;
        Ok(x.add(&time)?.add(&feat)?.add(&mask)?)
    }

    /// One residual block on channel-last `h [B, T, D, C]`.
    pub fn residual_block(
        &self,
        block: usize,
        h: &Tensor<E>,
        step: &Tensor<E>,
        cond: &Conditioning<E>,
        params: &DenoiserParams<E>,
        ctx: &mut ForwardCtx,
    ) -> Result<BlockOutput<E>> {
        let ch = self.cfg.channels;
        let name = format!("blocks.{block}");
        let y = h.add(&linear(step, params, &format!("{name}.step"))?)?;
        let v = y.permute(&[0, 2, 3, 1])?;
        let y = self.temporal_module(block, &v, params, ctx)?.permute(&[0, 3, 1, 2])?;
        let y = self.feature_attention(block, &y, params)?;
        let z = linear(&y, params, &format!("{name}.mid"))?.add(&self.cond_projection(block, cond, params)?)?;
        let gated = z.narrow(3, 0, ch)?.sigmoid().mul(&z.narrow(3, ch, ch)?.tanh())?;
        let out = linear(&gated, params, &format!("{name}.out"))?;
        let next = h.add(&out.narrow(3, 0, ch)?)?.scale(E::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2));
        Ok(BlockOutput {
            next,
            skip: out.narrow(3, ch, ch)?,
        })
    }

    /// Noise prediction `[B, T, D]` from `x_in [B, 2, T, D]` (conditional
    /// values, noisy target) at step `s`.
    pub fn predict_eps(
        &self,
        x_in: &Tensor<E>,
        s: usize,
        cond: &Conditioning<E>,
        params: &DenoiserParams<E>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<E>> {
        let c = &self.cfg;
        let b = match *x_in.shape() {
            [b, 2, t, d] if t == c.seq_len && d == c.features => b,
            _ => {
                return Err(Error::Config(format!(
                    "denoiser input has shape {:?}, expected [B, 2, {}, {}]",
                    x_in.shape(),
                    c.seq_len,
                    c.features
                )))
            }
        };
        if cond.side.mask.dim(0) != b || cond.features.dim(0) != b {
            return Err(Error::Config("conditioning batch size differs from input".into()));
        }
        let step = self.step_embed(s, params)?;
        let mut h = linear(&x_in.permute(&[0, 2, 3, 1])?, params, "input")?.relu();
        let mut skips: Option<Tensor<E>> = None;
        for i in 0..c.blocks {
            let out = self.residual_block(i, &h, &step, cond, params, ctx)?;
            h = out.next;
            skips = Some(match skips {
                Some(acc) => acc.add(&out.skip)?,
                None => out.skip,
            });
        }
        let total = skips
            .expect("at least one block")
            .scale(E::from_f64_lossy(1.0 / (c.blocks as f64).sqrt()));
        let h = linear(&total.relu(), params, "output.proj1")?.relu();
        let eps = linear(&h, params, "output.proj2")?;
        Ok(eps.reshape(&[b, c.seq_len, c.features])?)
    }
}

fn add_conv<E: Element>(
    store: &mut ParamStore<E>,
    init: &mut Init,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    store.insert(format!("{name}.weight"), init.uniform(&[cout, cin, k], bound)?)?;
    store.insert(format!("{name}.bias"), init.uniform(&[cout], bound)?)?;
    Ok(())
}

/// Same-padded dilated convolution on `[N, Cin, T]` plus a per-channel bias.
fn conv<E: Element>(x: &Tensor<E>, params: &ParamStore<E>, name: &str, dilation: usize) -> Result<Tensor<E>> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    let y = x.conv1d(w, dilation)?;
    Ok(y.add(&b.reshape(&[b.numel(), 1])?)?)
}
