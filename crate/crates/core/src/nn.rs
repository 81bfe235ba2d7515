//! Parameter storage and the small set of layers the denoiser is built from.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Named trainable tensors in insertion order.
///
/// Every stored tensor is a gradient leaf. Updates replace tensors wholesale;
/// nothing is mutated in place while a graph may still reference it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    params: IndexMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value.detach().with_grad());
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.detach().with_grad();
        Ok(())
    }

    /// Copy with the values swapped for `values`, in parameter order. The
    /// given tensors are stored as they are, so gradients taken through the
    /// copy are keyed by the caller's tensors.
    pub fn with_values(&self, values: &[Tensor<E>]) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        let mut params = IndexMap::with_capacity(values.len());
        for ((name, old), new) in self.params.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::Config(format!("parameter {name}: shape {:?}", new.shape())));
            }
            params.insert(name.clone(), new.clone());
        }
        Ok(Self { params })
    }

    /// Same values as constants, so forward passes record no graph.
    pub fn frozen(&self) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    pub fn values(&self) -> Vec<Tensor<E>> {
        self.params.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Same names and values converted to another element type.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<F>().with_grad()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform values in `[-bound, bound]`, drawn in `f64`.
    pub fn uniform<E: Element>(&mut self, shape: &[usize], bound: f64) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Ok(Tensor::from_f64(&data, shape)?)
    }
}

/// Registers `{name}.weight [out, in]` and `{name}.bias [out]` with
/// `U(-1/sqrt(in), 1/sqrt(in))` weights and biases.
pub fn add_linear<E: Element>(
    store: &mut ParamStore<E>,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), init.uniform(&[fan_out, fan_in], bound)?)?;
    store.insert(format!("{name}.bias"), init.uniform(&[fan_out], bound)?)?;
    Ok(())
}

/// Linear layer with all-zero weight and bias.
pub fn add_zero_linear<E: Element>(
    store: &mut ParamStore<E>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::zeros(&[fan_out, fan_in]))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn add_layer_norm<E: Element>(store: &mut ParamStore<E>, name: &str, width: usize) -> Result<()> {
    store.insert(format!("{name}.gain"), Tensor::ones(&[width]))?;
    store.insert(format!("{name}.shift"), Tensor::zeros(&[width]))?;
    Ok(())
}

/// How the synchrosqueezing bin assignment is obtained during a forward pass.
///
/// The assignment rounds an estimated frequency, so it is piecewise constant
/// in the input. Recording it once and replaying it lets finite differences
/// probe the smooth part of the network.
#[derive(Debug, Clone, Default)]
pub enum ReassignTrace {
    #[default]
    Compute,
    Record(Vec<Arc<Vec<usize>>>),
    Replay(Vec<Arc<Vec<usize>>>, usize),
}

/// Per-forward state: train/eval switch, dropout generator, reassignment trace.
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
    trace: ReassignTrace,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            trace: ReassignTrace::Compute,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: ReassignTrace::Compute,
        }
    }

    pub fn with_trace(mut self, trace: ReassignTrace) -> Self {
        self.trace = trace;
        self
    }

    pub fn into_trace(self) -> ReassignTrace {
        self.trace
    }

    /// Returns the recorded assignment in replay mode, otherwise computes
    /// (and records, if asked) a fresh one.
    pub fn reassignment(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Result<Arc<Vec<usize>>> {
        match &mut self.trace {
            ReassignTrace::Compute => Ok(Arc::new(compute())),
            ReassignTrace::Record(list) => {
                let index = Arc::new(compute());
                list.push(Arc::clone(&index));
                Ok(index)
            }
            ReassignTrace::Replay(list, cursor) => {
                let index = list
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::Numeric("reassignment trace exhausted".into()))?;
                *cursor += 1;
                Ok(index)
            }
        }
    }

    /// Inverted-dropout keep mask of `shape`, scaled by `1/(1-p)`; `None`
    /// when dropout is inactive.
    pub fn dropout_mask<E: Element>(&mut self, shape: &[usize], p: f64) -> Result<Option<Tensor<E>>> {
        if !self.training || p <= 0.0 {
            return Ok(None);
        }
        let keep = E::from_f64_lossy(1.0 / (1.0 - p));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { E::zero() } else { keep })
            .collect();
        Ok(Some(Tensor::from_vec(data, shape)?))
    }
}

/// `x @ W^T + b` over the last axis of `x`; `W` is `[out, in]`.
pub fn linear<E: Element>(x: &Tensor<E>, params: &ParamStore<E>, name: &str) -> Result<Tensor<E>> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    linear_with(x, w, Some(b))
}

pub fn linear_with<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let shape = x.shape();
    let width = *shape
        .last()
        .ok_or_else(|| Error::Config("linear layer applied to a scalar".into()))?;
    let rows = x.numel() / width.max(1);
    let mut y = x.reshape(&[rows, width])?.matmul_nt(w)?;
    if let Some(b) = b {
        y = y.add(b)?;
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = w.dim(0);
    Ok(y.reshape(&out_shape)?)
}

pub fn layer_norm<E: Element>(x: &Tensor<E>, params: &ParamStore<E>, name: &str) -> Result<Tensor<E>> {
    let y = x.layer_norm(E::from_f64_lossy(1e-5))?;
    let y = y.mul(params.get(&format!("{name}.gain"))?)?;
    Ok(y.add(params.get(&format!("{name}.shift"))?)?)
}

pub fn add_attention<E: Element>(
    store: &mut ParamStore<E>,
    init: &mut Init,
    name: &str,
    width: usize,
) -> Result<()> {
    add_linear(store, init, &format!("{name}.in_proj"), width, 3 * width)?;
    add_linear(store, init, &format!("{name}.out_proj"), width, width)
}

/// Scaled dot-product multi-head self-attention over axis 1 of `x [N, L, C]`.
pub fn self_attention<E: Element>(
    x: &Tensor<E>,
    params: &ParamStore<E>,
    name: &str,
    heads: usize,
) -> Result<Tensor<E>> {
    let (n, l, c) = match *x.shape() {
        [n, l, c] => (n, l, c),
        _ => return Err(Error::Config(format!("attention expects [N, L, C], got {:?}", x.shape()))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;
    let qkv = linear(x, params, &format!("{name}.in_proj"))?
        .reshape(&[n, l, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Tensor<E>> { Ok(qkv.narrow(0, i, 1)?.reshape(&[n * heads, l, dh])?) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul_nt(&k)?.scale(E::from_f64_lossy(1.0 / (dh as f64).sqrt()));
    let attn = scores.softmax()?;
    let ctx = attn
        .matmul(&v)?
        .reshape(&[n, heads, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, l, c])?;
    linear(&ctx, params, &format!("{name}.out_proj"))
}

pub fn add_encoder_layer<E: Element>(
    store: &mut ParamStore<E>,
    init: &mut Init,
    name: &str,
    width: usize,
) -> Result<()> {
    add_layer_norm(store, &format!("{name}.norm1"), width)?;
    add_attention(store, init, &format!("{name}.attn"), width)?;
    add_layer_norm(store, &format!("{name}.norm2"), width)?;
    add_linear(store, init, &format!("{name}.ff1"), width, 4 * width)?;
    add_linear(store, init, &format!("{name}.ff2"), 4 * width, width)
}

/// Pre-norm transformer encoder layer on `x [N, L, C]`:
/// `y = x + attn(norm1(x))`, `out = y + ff2(relu(ff1(norm2(y))))`.
pub fn encoder_layer<E: Element>(
    x: &Tensor<E>,
    params: &ParamStore<E>,
    name: &str,
    heads: usize,
) -> Result<Tensor<E>> {
    let a = self_attention(&layer_norm(x, params, &format!("{name}.norm1"))?, params, &format!("{name}.attn"), heads)?;
    let y = x.add(&a)?;
    let h = linear(&layer_norm(&y, params, &format!("{name}.norm2"))?, params, &format!("{name}.ff1"))?.relu();
    let f = linear(&h, params, &format!("{name}.ff2"))?;
    Ok(y.add(&f)?)
}

/// Sinusoidal embedding of a scalar position: `[sin(p w_0), .., cos(p w_0), ..]`
/// with `w_j = 10^(-4j/(dim/2 - 1))`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|j| 10f64.powf(-4.0 * j as f64 / denom)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (position * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (position * w).cos()));
    out.resize(dim, 0.0);
    out
}
