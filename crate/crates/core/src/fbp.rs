//! Trend/residual decomposition and the Fourier bias projection head.
//!
//! Each branch is transformed to the spectral domain, its real and imaginary
//! parts are projected onto fixed cosine/sine bases, and the flattened
//! `F x L` map is sent back to `T` samples by a learned linear layer. The
//! trend and residual outputs are summed.
//!
//! For the DFT and STFT everything before the linear layer is a fixed linear
//! map of the input, so it is folded into one constant `T x (F*L)` operator
//! and the head costs two small matrix products. Synchrosqueezing moves
//! coefficients between bins depending on the input and is evaluated per row.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use spectra_tensor::{Element, Tensor, TensorId};

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Init, ParamStore};
use crate::spectral::{self, reassign_bins, SpectralGram, SpectralKind, WindowSpec};

/// Spectral backend of the bias projection; `None` disables the module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FbpKind {
    None,
    Dft,
    Stft,
    Frsst,
}

impl FbpKind {
    pub const ALL: [FbpKind; 4] = [FbpKind::None, FbpKind::Dft, FbpKind::Stft, FbpKind::Frsst];

    pub fn spectral(self) -> Option<SpectralKind> {
        match self {
            FbpKind::None => None,
            FbpKind::Dft => Some(SpectralKind::Dft),
            FbpKind::Stft => Some(SpectralKind::Stft),
            FbpKind::Frsst => Some(SpectralKind::Frsst),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FbpKind::None => "none",
            FbpKind::Dft => "dft",
            FbpKind::Stft => "stft",
            FbpKind::Frsst => "frsst",
        }
    }
}

impl std::str::FromStr for FbpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FbpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown frequency module {s:?}")))
    }
}

/// Moving-average width for the trend/residual split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub kernel: usize,
}

impl DecompositionConfig {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("decomposition kernel {kernel} must be odd")));
        }
        Ok(Self { kernel })
    }
}

/// Splits `x` along its last axis into an edge-padded moving-average trend
/// and the residual `x - trend`.
pub fn decompose<E: Element>(x: &Tensor<E>, cfg: &DecompositionConfig) -> Result<(Tensor<E>, Tensor<E>)> {
    if cfg.kernel % 2 == 0 {
        return Err(Error::Config(format!("decomposition kernel {} must be odd", cfg.kernel)));
    }
    if x.shape().last().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("decomposition needs at least one sample".into()));
    }
    let trend = x.moving_average(cfg.kernel)?;
    let residual = x.sub(&trend)?;
    Ok((trend, residual))
}

/// `cos[f, l] = cos(2 pi f l / L)`, `sin[f, l] = -sin(2 pi f l / L)`.
#[derive(Debug, Clone)]
pub struct FourierBases<E: Element> {
    pub cos: Tensor<E>,
    pub sin: Tensor<E>,
}

impl<E: Element> FourierBases<E> {
    pub fn new(bins: usize, len: usize) -> Result<Self> {
        let mut c = Vec::with_capacity(bins * len);
        let mut s = Vec::with_capacity(bins * len);
        for f in 0..bins {
            for l in 0..len {
                let a = 2.0 * std::f64::consts::PI * (f * l) as f64 / len as f64;
                c.push(a.cos());
                s.push(-a.sin());
            }
        }
        Ok(Self {
            cos: Tensor::from_f64(&c, &[bins, len])?,
            sin: Tensor::from_f64(&s, &[bins, len])?,
        })
    }

    pub fn bins(&self) -> usize {
        self.cos.dim(0)
    }

    pub fn len(&self) -> usize {
        self.cos.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.cos.numel() == 0
    }
}

/// `Re(X) * cos + Im(X) * sin`, giving `[..., F, L]`.
///
/// A DFT gram `[..., F]` is broadcast over the `L = T` basis columns.
pub fn bias_project<E: Element>(gram: &SpectralGram<E>, bases: &FourierBases<E>) -> Result<Tensor<E>> {
    let (re, im) = (&gram.coeffs.re, &gram.coeffs.im);
    let shape = re.shape();
    let (re, im) = match gram.frames {
        None => {
            if shape.last() != Some(&bases.bins()) {
                return Err(Error::Spectral(format!(
                    "gram with {:?} bins does not match {} basis rows",
                    shape.last(),
                    bases.bins()
                )));
            }
            let mut s = shape.to_vec();
            s.push(1);
            (re.reshape(&s)?, im.reshape(&s)?)
        }
        Some(frames) => {
            let n = shape.len();
            if n < 2 || shape[n - 2] != bases.bins() || frames != bases.len() {
                return Err(Error::Spectral(format!(
                    "gram {:?} does not match bases {}x{}",
                    shape,
                    bases.bins(),
                    bases.len()
                )));
            }
            (re.clone(), im.clone())
        }
    };
    Ok(re.mul(&bases.cos)?.add(&im.mul(&bases.sin)?)?)
}

/// Shape and hyperparameters of one bias-projection module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbpConfig {
    pub kind: FbpKind,
    pub decomposition: DecompositionConfig,
    pub dropout: f64,
    /// Keep only the lowest `max_bins` frequency rows when set.
    pub max_bins: Option<usize>,
    /// STFT/FrSST analysis window; the series default when unset.
    pub window: Option<WindowSpec>,
}

impl FbpConfig {
    pub fn new(kind: FbpKind) -> Self {
        Self {
            kind,
            decomposition: DecompositionConfig { kernel: 25 },
            dropout: 0.1,
            max_bins: None,
            window: None,
        }
    }
}

enum Operator<E: Element> {
    /// Input series `[rows, T]` times this `[T, F*L]` matrix gives the
    /// flattened projected map.
    Fused(Tensor<E>),
    Squeezed {
        stft_re: Tensor<E>,
        stft_im: Tensor<E>,
        cos: Tensor<E>,
        sin: Tensor<E>,
        window: WindowSpec,
    },
}

/// Decomposition plus two bias-projection heads for series of length `T`.
pub struct FbpModule<E: Element> {
    cfg: FbpConfig,
    prefix: String,
    seq_len: usize,
    window: WindowSpec,
    bins: usize,
    kept_bins: usize,
    frames: usize,
    op: Option<Operator<E>>,
    // `G W^T` for weights that do not require gradients, keyed by weight id.
    fused_cache: Mutex<Vec<(TensorId, Tensor<E>)>>,
}

const BRANCHES: [&str; 2] = ["trend", "residual"];

fn identity_rows(t: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        data[i * t + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, &[t, t])?)
}

impl<E: Element> FbpModule<E> {
    pub fn new(cfg: FbpConfig, seq_len: usize, prefix: impl Into<String>) -> Result<Self> {
        DecompositionConfig::new(cfg.decomposition.kernel)?;
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        let window = match cfg.window {
            Some(w) => w,
            None => WindowSpec::for_series(seq_len)?,
        };
        let (bins, frames) = match cfg.kind {
            FbpKind::None => (0, 0),
            FbpKind::Dft => (seq_len / 2 + 1, seq_len),
            FbpKind::Stft | FbpKind::Frsst => (window.bins(), window.frames(seq_len)),
        };
        let kept_bins = cfg.max_bins.map_or(bins, |m| m.min(bins));
        if cfg.kind != FbpKind::None && kept_bins == 0 {
            return Err(Error::Config("bias projection keeps no frequency bins".into()));
        }
        let mut module = Self {
            cfg,
            prefix: prefix.into(),
            seq_len,
            window,
            bins,
            kept_bins,
            frames,
            op: None,
            fused_cache: Mutex::new(Vec::new()),
        };
        module.op = module.build_operator()?;
        Ok(module)
    }

    fn build_operator(&self) -> Result<Option<Operator<E>>> {
        let Some(kind) = self.cfg.kind.spectral() else {
            return Ok(None);
        };
        let t = self.seq_len;
        let eye = identity_rows(t)?;
        let bases = FourierBases::<f64>::new(self.bins, self.frames)?;
        let width = self.kept_bins * self.frames;
        match kind {
            SpectralKind::Dft | SpectralKind::Stft => {
                let gram = spectral::transform(&eye, kind, &self.window)?;
                let total = bias_project(&gram, &bases)?.narrow(1, 0, self.kept_bins)?;
                Ok(Some(Operator::Fused(total.reshape(&[t, width])?.cast())))
            }
            SpectralKind::Frsst => {
                if self.frames < 2 {
                    return Err(Error::Spectral(format!(
                        "synchrosqueezing needs at least 2 frames, window gives {}",
                        self.frames
                    )));
                }
                let gram = spectral::stft(&eye, &self.window)?;
                let full = self.bins * self.frames;
                Ok(Some(Operator::Squeezed {
                    stft_re: gram.coeffs.re.reshape(&[t, full])?.cast(),
                    stft_im: gram.coeffs.im.reshape(&[t, full])?.cast(),
                    cos: bases.cos.reshape(&[full])?.cast(),
                    sin: bases.sin.reshape(&[full])?.cast(),
                    window: self.window,
                }))
            }
        }
    }

    pub fn config(&self) -> &FbpConfig {
        &self.cfg
    }

    pub fn kind(&self) -> FbpKind {
        self.cfg.kind
    }

    /// Flattened feature count `F' * L` seen by each linear head.
    pub fn feature_width(&self) -> usize {
        self.kept_bins * self.frames
    }

    pub fn window(&self) -> &WindowSpec {
        &self.window
    }

    /// Registers both heads with `U(-1/sqrt(F*L), 1/sqrt(F*L))` weights and
    /// zero biases. Nothing is registered for `FbpKind::None`.
    pub fn init_params(&self, store: &mut ParamStore<E>, init: &mut Init) -> Result<()> {
        if self.cfg.kind == FbpKind::None {
            return Ok(());
        }
        let width = self.feature_width();
        let bound = 1.0 / (width as f64).sqrt();
        for branch in BRANCHES {
            let name = format!("{}.{branch}", self.prefix);
            store.insert(format!("{name}.weight"), init.uniform(&[self.seq_len, width], bound)?)?;
            store.insert(format!("{name}.bias"), Tensor::zeros(&[self.seq_len]))?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<usize> {
        match x.shape().last() {
            Some(&t) if t == self.seq_len => Ok(x.numel() / t),
            _ => Err(Error::Config(format!(
                "bias projection built for length {} got {:?}",
                self.seq_len,
                x.shape()
            ))),
        }
    }

    /// Frequency-aware features with the input's shape, or `None` when the
    /// module is disabled.
    pub fn features(
        &self,
        x: &Tensor<E>,
        params: &ParamStore<E>,
        ctx: &mut ForwardCtx,
    ) -> Result<Option<Tensor<E>>> {
        let Some(op) = &self.op else {
            return Ok(None);
        };
        let rows = self.check_input(x)?;
        let (trend, residual) = decompose(x, &self.cfg.decomposition)?;
        let mut out: Option<Tensor<E>> = None;
        for (branch, part) in BRANCHES.iter().zip([trend, residual]) {
            let name = format!("{}.{branch}", self.prefix);
            let mut w = params.get(&format!("{name}.weight"))?.clone();
            let b = params.get(&format!("{name}.bias"))?;
            // One mask per flattened feature, shared by every row in the batch.
            if let Some(mask) = ctx.dropout_mask::<E>(&[self.feature_width()], self.cfg.dropout)? {
                w = w.mul(&mask)?;
            }
            let z = part.reshape(&[rows, self.seq_len])?;
            let y = match op {
                Operator::Fused(g) => z.matmul(&self.fused(g, &w)?)?,
                Operator::Squeezed { .. } => self.squeezed_features(&z, op, ctx)?.matmul_nt(&w)?,
            };
            let y = y.add(b)?.reshape(x.shape())?;
            out = Some(match out {
                Some(acc) => acc.add(&y)?,
                None => y,
            });
        }
        Ok(out)
    }

    fn fused(&self, g: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        if w.requires_grad() {
            return Ok(g.matmul_nt(w)?);
        }
        let mut cache = self.fused_cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, m)) = cache.iter().find(|(id, _)| *id == w.id()) {
            return Ok(m.clone());
        }
        let m = g.matmul_nt(w)?;
        if cache.len() == 2 * BRANCHES.len() {
            cache.remove(0);
        }
        cache.push((w.id(), m.clone()));
        Ok(m)
    }

    /// Projected synchrosqueezed map `[rows, F'*L]` of `z [rows, T]`.
    fn squeezed_features(&self, z: &Tensor<E>, op: &Operator<E>, ctx: &mut ForwardCtx) -> Result<Tensor<E>> {
        let Operator::Squeezed {
            stft_re,
            stft_im,
            cos,
            sin,
            window,
        } = op
        else {
            unreachable!("squeezed operator expected");
        };
        let rows = z.dim(0);
        let full = self.bins * self.frames;
        let re = z.matmul(stft_re)?;
        let im = z.matmul(stft_im)?;
        let frames = self.frames;
        let index = ctx.reassignment(|| {
            let mut index = Vec::with_capacity(rows * full);
            for (r, (a, b)) in re.data().chunks(full).zip(im.data().chunks(full)).enumerate() {
                index.extend(reassign_bins(a, b, window, frames).into_iter().map(|i| i + r * full));
            }
            index
        })?;
        let re = re.scatter_add(Arc::clone(&index), &[rows, full])?;
        let im = im.scatter_add(index, &[rows, full])?;
        let total = re.mul(cos)?.add(&im.mul(sin)?)?;
        Ok(total.narrow(1, 0, self.feature_width())?)
    }

    /// Module output: `x` unchanged for `FbpKind::None`, otherwise the sum of
    /// the trend and residual head outputs.
    pub fn forward(&self, x: &Tensor<E>, params: &ParamStore<E>, ctx: &mut ForwardCtx) -> Result<Tensor<E>> {
        Ok(self.features(x, params, ctx)?.unwrap_or_else(|| x.clone()))
    }

    /// Step-by-step evaluation through the spectral functions: transform,
    /// bias projection, truncation, flatten, linear. No dropout, no graph.
    pub fn forward_reference(&self, x: &Tensor<E>, params: &ParamStore<E>) -> Result<Tensor<E>> {
        let Some(kind) = self.cfg.kind.spectral() else {
            return Ok(x.detach());
        };
        let rows = self.check_input(x)?;
        let (trend, residual) = decompose(&x.detach(), &self.cfg.decomposition)?;
        let bases = FourierBases::<E>::new(self.bins, self.frames)?;
        let mut out = Tensor::<E>::zeros(&[rows, self.seq_len]);
        for (branch, part) in BRANCHES.iter().zip([trend, residual]) {
            let name = format!("{}.{branch}", self.prefix);
            let w = params.get(&format!("{name}.weight"))?.detach();
            let b = params.get(&format!("{name}.bias"))?.detach();
            let gram = spectral::transform(&part.reshape(&[rows, self.seq_len])?, kind, &self.window)?;
            let flat = bias_project(&gram, &bases)?
                .narrow(1, 0, self.kept_bins)?
                .reshape(&[rows, self.feature_width()])?;
            out = out.add(&flat.matmul_nt(&w)?.add(&b)?)?;
        }
        Ok(out.reshape(x.shape())?)
    }
}
