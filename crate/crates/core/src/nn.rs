//! Small neural-network toolkit on top of `candle_core`: a named, seedable
//! parameter store, the handful of layers the models need, numerically stable
//! activations and an Adam optimizer whose state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
    Normal(f64),
}

/// Named parameters of one model component, kept in name order so digests,
/// checkpoints and optimizer state are deterministic.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_le_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrite parameter values in place. Every parameter must be present
    /// with a matching shape; models built from this store see the new values.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter `{name}` missing from checkpoint"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::FanIn(in_dim),
            rng,
        )?;
        let bias = store.param(
            &format!("{name}.bias"),
            &[out_dim],
            Init::FanIn(in_dim),
            rng,
        )?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::Zeros, rng)?;
        let bias = store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::FanIn(in_dim),
            rng,
        )?;
        Ok(Self { weight, bias: None })
    }

    /// `x`: (..., in_dim) -> (..., out_dim)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::FanIn(fan_in),
            rng,
        )?;
        let bias = store.param(&format!("{name}.bias"), &[out_ch], Init::FanIn(fan_in), rng)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Zeros,
            rng,
        )?;
        let bias = store.param(&format!("{name}.bias"), &[out_ch], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => crate::conv::add_channel_bias(&y, b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = store.param(&format!("{name}.table"), &[vocab, dim], Init::Normal(0.1), rng)?;
        Ok(Self { table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids`: (B, T) u32 -> (B, T, dim)
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        Ok(rows.reshape((b, t, self.table.dim(1)?))?)
    }
}

// ---------------------------------------------------------------------------
// Activations

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// log(1 + exp(x)), finite for every finite input and correct at +-inf.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax over the last axis where `mask` (broadcastable, 1 = keep, 0 = drop)
/// removes entries. Dropped entries get exactly zero weight. Every row must
/// keep at least one entry.
pub fn masked_softmax_last(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(x.shape())?.to_dtype(x.dtype())?;
    let neg = Tensor::full(-1e30f64, x.shape(), x.device())?.to_dtype(x.dtype())?;
    let filled = mask.ne(0.0)?.where_cond(x, &neg)?;
    let max = filled.max_keepdim(D::Minus1)?.detach();
    let e = (filled.broadcast_sub(&max)?.exp()? * &mask)?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Row-wise cosine similarity along the last axis.
pub fn cosine_last(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = (na * nb)?.clamp(eps, f64::INFINITY)?;
    Ok((dot / denom)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(crate::conv::upsample2(x)?)
}

/// 2x2 average pooling.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Dropout with an explicit, seeded mask.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// Recurrent cells

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

/// One direction of a gated recurrent layer.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    kind: CellKind,
    hidden: usize,
    input_proj: Linear,
    hidden_proj: Linear,
}

impl RecurrentCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gates = match kind {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        };
        let input_proj = Linear::new(store, &format!("{name}.ih"), input, gates * hidden, rng)?;
        let hidden_proj = Linear::new(store, &format!("{name}.hh"), hidden, gates * hidden, rng)?;
        Ok(Self {
            kind,
            hidden,
            input_proj,
            hidden_proj,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Run over `x` (B, T, E). `mask` is (B, T) with 1 for valid steps; on
    /// masked steps the state is carried through unchanged. Returns per-step
    /// hidden states (B, T, H) and the final hidden state (B, H).
    pub fn run(&self, x: &Tensor, mask: &Tensor, reverse: bool) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = x.dims3()?;
        let zeros = Tensor::zeros((b, self.hidden), x.dtype(), x.device())?;
        let mut h = zeros.clone();
        let mut c = zeros;
        let mut outputs: Vec<Option<Tensor>> = vec![None; t];
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in order {
            let xt = x.narrow(1, step, 1)?.squeeze(1)?;
            let m = mask.narrow(1, step, 1)?;
            let inv = m.affine(-1.0, 1.0)?;
            let gi = self.input_proj.forward(&xt)?;
            let gh = self.hidden_proj.forward(&h)?;
            let hs = self.hidden;
            let (h_new, c_new) = match self.kind {
                CellKind::Lstm => {
                    let g = (gi + gh)?;
                    let i = sigmoid(&g.narrow(1, 0, hs)?)?;
                    let f = sigmoid(&g.narrow(1, hs, hs)?)?;
                    let cand = g.narrow(1, 2 * hs, hs)?.tanh()?;
                    let o = sigmoid(&g.narrow(1, 3 * hs, hs)?)?;
                    let c_new = ((f * &c)? + (i * cand)?)?;
                    let h_new = (o * c_new.tanh()?)?;
                    (h_new, c_new)
                }
                CellKind::Gru => {
                    let r = sigmoid(&(gi.narrow(1, 0, hs)? + gh.narrow(1, 0, hs)?)?)?;
                    let z = sigmoid(&(gi.narrow(1, hs, hs)? + gh.narrow(1, hs, hs)?)?)?;
                    let n = (gi.narrow(1, 2 * hs, hs)? + (r * gh.narrow(1, 2 * hs, hs)?)?)?
                        .tanh()?;
                    let h_new = ((z.affine(-1.0, 1.0)? * n)? + (&z * &h)?)?;
                    (h_new, c.clone())
                }
            };
            h = (h_new.broadcast_mul(&m)? + h.broadcast_mul(&inv)?)?;
            c = (c_new.broadcast_mul(&m)? + c.broadcast_mul(&inv)?)?;
            outputs[step] = Some(h.broadcast_mul(&m)?);
        }
        let outs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok((Tensor::stack(&outs, 1)?, h))
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of variables. Variables without a gradient in a step
/// are left untouched, moments included.
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut first = Vec::with_capacity(vars.len());
        let mut second = Vec::with_capacity(vars.len());
        for (_, v) in &vars {
            first.push(v.zeros_like()?);
            second.push(v.zeros_like()?);
        }
        let steps = vec![0; vars.len()];
        Ok(Self {
            config,
            vars,
            first,
            second,
            steps,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = ((&self.first[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moments and step counts keyed by parameter name.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("{name}@m"), self.first[i].clone());
            out.insert(format!("{name}@v"), self.second[i].clone());
            out.insert(
                format!("{name}@t"),
                Tensor::new(&[self.steps[i] as f64], &Device::Cpu)?,
            );
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let get = |suffix: &str| {
                state.get(&format!("{name}@{suffix}")).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state for `{name}` missing"))
                })
            };
            self.first[i] = get("m")?.to_dtype(var.dtype())?;
            self.second[i] = get("v")?.to_dtype(var.dtype())?;
            let t = get("t")?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            self.steps[i] = t.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_native_with_gradients() {
        let d = &Device::Cpu;
        let err = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        for (c, o, h, k, st, p) in [(3, 4, 8, 3, 1, 1), (2, 3, 8, 4, 2, 1), (3, 2, 8, 2, 2, 0), (2, 2, 9, 3, 2, 0), (1, 2, 5, 1, 1, 0), (2, 3, 16, 4, 4, 0), (2, 2, 7, 3, 3, 2), (1, 1, 3, 5, 1, 2)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c, h, h), d).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c, k, k), d).unwrap()).unwrap();
            let probe = |y: Tensor| (y.sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            let want = x.conv2d(&w, p, st, 1, 1).unwrap();
            let got = crate::conv::conv2d(&x, &w, st, p).unwrap();
            assert_eq!(want.dims(), got.dims());
            assert!(err(&want, &got) < 1e-12, "{c} {o} {h} {k} {st} {p}");
            let gw = probe(want).backward().unwrap();
            let gg = probe(got).backward().unwrap();
            for v in [&x, &w] {
                assert!(err(gw.get(v).unwrap(), gg.get(v).unwrap()) < 1e-10, "grad {c} {o} {h} {k} {st} {p}");
            }
        }
    }

    #[test]
    fn bias_and_upsample_match_broadcast_ops() {
        let d = &Device::Cpu;
        let err = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 6), d).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 3, d).unwrap()).unwrap();
        let probe = |y: Tensor| (y.sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();

        let want = x.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let got = crate::conv::add_channel_bias(&x, &b).unwrap();
        assert!(err(&want, &got) < 1e-14);
        let (gw, gg) = (probe(want).backward().unwrap(), probe(got).backward().unwrap());
        for v in [&x, &b] {
            assert!(err(gw.get(v).unwrap(), gg.get(v).unwrap()) < 1e-12);
        }

        let want = x.upsample_nearest2d(8, 12).unwrap();
        let got = upsample2(&x).unwrap();
        assert!(err(&want, &got) < 1e-14);
        let (gw, gg) = (probe(want).backward().unwrap(), probe(got).backward().unwrap());
        assert!(err(gw.get(&x).unwrap(), gg.get(&x).unwrap()) < 1e-12);
    }

    use crate::seed;

    fn t64(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn softplus_is_stable_and_exact_at_extremes() {
        let x = t64(&[-1000.0, -30.0, 0.0, 30.0, 1000.0, f64::INFINITY, f64::NEG_INFINITY]);
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - (1.0f64 + (-30.0f64).exp()).ln()).abs() < 1e-15);
        assert!((y[2] - 2f64.ln()).abs() < 1e-15);
        assert!((y[3] - 30.0).abs() < 1e-12);
        assert_eq!(y[4], 1000.0);
        assert_eq!(y[5], f64::INFINITY);
        assert_eq!(y[6], 0.0);
    }

    #[test]
    fn softplus_gradient_at_zero_is_half() {
        let v = Var::new(&[0.0f64, 2.0], &Device::Cpu).unwrap();
        let loss = softplus(v.as_tensor()).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0]], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let p = masked_softmax_last(&x, &m).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][2], 0.0);
        let e = (1.0f64).exp() + (2.0f64).exp();
        assert!((p[0][0] - 1f64.exp() / e).abs() < 1e-12);
    }

    #[test]
    fn digest_tracks_values() {
        let mut rng = seed::rng(1, "t", &[]);
        let mut s = ParamStore::new(DType::F32);
        s.param("a", &[3], Init::FanIn(3), &mut rng).unwrap();
        let d0 = s.digest().unwrap();
        let v = s.get("a").unwrap();
        v.set(&v.as_tensor().affine(1.0, 1.0).unwrap()).unwrap();
        assert_ne!(d0, s.digest().unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let v = Var::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("v".into(), v.clone())], AdamConfig::default()).unwrap();
        let loss = v.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let after = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((after[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((after[1] - (-1.0 - 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn masked_recurrence_keeps_state_through_padding() {
        let mut rng = seed::rng(3, "cell", &[]);
        let mut s = ParamStore::new(DType::F64);
        let cell = RecurrentCell::new(&mut s, "c", CellKind::Lstm, 2, 3, &mut rng).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 4, 2), &Device::Cpu).unwrap();
        let short_mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let (_, h_short) = cell.run(&x, &short_mask, false).unwrap();
        let (_, h_two) = cell
            .run(&x.narrow(1, 0, 2).unwrap(), &Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap(), false)
            .unwrap();
        assert_eq!(h_short.to_vec2::<f64>().unwrap(), h_two.to_vec2::<f64>().unwrap());
    }
}
