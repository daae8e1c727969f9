//! Small neural-network toolkit on top of candle tensors: named parameter
//! stores, conv / batch-norm layers, corner-aligned bilinear resampling with
//! a differentiable path, and an Adam optimizer whose state can be
//! checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::linear_taps;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; batch-norm running averages are updated.
    Train,
    /// Stored running statistics; no state changes.
    Eval,
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Layers hold clones of the same [`Var`]s, so updates through
/// the store are visible to the layers.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(map: &mut BTreeMap<String, Var>, name: String, t: Tensor) -> Result<Var> {
        if map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        map.insert(name, var.clone());
        Ok(var)
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let t = t.to_dtype(self.dtype)?;
        Self::insert(&mut self.params, name.into(), t)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let t = t.to_dtype(self.dtype)?;
        Self::insert(&mut self.buffers, name.into(), t)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Parameters and buffers under one namespace (`buffers` are not
    /// trainable but are part of the model state).
    pub fn state(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.state()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites a named parameter or buffer; shape must match.
    pub fn assign(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::MissingArray(name.to_string()))?;
        if var.dims() != t.dims() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                found: t.dims().to_vec(),
                expected: var.dims().to_vec(),
            });
        }
        var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, var) in self.state() {
            let total = var
                .as_tensor()
                .abs()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("{what} parameter `{name}`")));
            }
        }
        Ok(())
    }
}

/// Seeded Gaussian initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, dims: &[usize], std: f64, device: &Device) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0f32, std as f32)
            .map_err(|e| Error::InvalidArgument(format!("normal std {std}: {e}")))?;
        let v: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, dims, device)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

impl Conv2d {
    /// Weights `N(0, std)`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        spec: ConvSpec,
        std: f64,
    ) -> Result<Self> {
        let dev = store.device().clone();
        let w = init.normal(&[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel], std, &dev)?;
        let weight = store.add_param(format!("{name}.weight"), w)?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(spec.out_channels, DType::F32, &dev)?)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    /// Affine parameters start at `(1, 0)`; running statistics at `(0, 1)`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dev = store.device().clone();
        let ones = Tensor::ones(channels, DType::F32, &dev)?;
        let zeros = Tensor::zeros(channels, DType::F32, &dev)?;
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), ones.clone())?,
            beta: store.add_param(format!("{name}.beta"), zeros.clone())?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), zeros)?,
            running_var: store.add_buffer(format!("{name}.running_var"), ones)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let chan = |t: &Tensor| t.reshape((1, c, 1, 1));
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { var.affine(n / (n - 1.0), 0.0)? } else { var.clone() };
                let rm = self
                    .running_mean
                    .as_tensor()
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&mean.detach().flatten_all()?.affine(BN_MOMENTUM, 0.0)?)?;
                let rv = self
                    .running_var
                    .as_tensor()
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&unbiased.detach().flatten_all()?.affine(BN_MOMENTUM, 0.0)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                chan(self.running_mean.as_tensor())?,
                chan(self.running_var.as_tensor())?,
            ),
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&chan(self.gamma.as_tensor())?)?
            .broadcast_add(&chan(self.beta.as_tensor())?)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?.affine(1.0 - LEAKY_SLOPE, 0.0)?.add(&x.affine(LEAKY_SLOPE, 0.0)?)?)
}

/// 2x2 max pooling with stride 2. Odd trailing rows and columns are dropped.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::Shape(format!("cannot pool a {h}x{w} map")));
    }
    let x = x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?.contiguous()?;
    Ok(x.reshape((b, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

/// `dst x src` interpolation matrix for corner-aligned linear resampling.
fn interp_matrix(src: usize, dst: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; dst * src];
    for (i, (lo, hi, t)) in linear_taps(src, dst).into_iter().enumerate() {
        m[i * src + lo] += 1.0 - t;
        m[i * src + hi] += t;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}

/// Differentiable corner-aligned bilinear resize of a `B x C x H x W` tensor.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("resize target {height}x{width}")));
    }
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let aw = interp_matrix(w, width, x.dtype(), x.device())?.t()?;
    let ah = interp_matrix(h, height, x.dtype(), x.device())?.t()?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw)?;
    let y = y.reshape((b, c, h, width))?.transpose(2, 3)?.contiguous()?;
    let y = y.reshape((b * c * width, h))?.matmul(&ah)?;
    Ok(y.reshape((b, c, width, height))?.transpose(2, 3)?.contiguous()?)
}

pub type NamedGrads = BTreeMap<String, Tensor>;

/// Pulls the gradients of a store's trainable parameters out of a backward
/// pass; parameters the loss does not reach get no entry.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> NamedGrads {
    store
        .params()
        .iter()
        .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k.clone(), g.detach())))
        .collect()
}

pub fn accumulate(into: &mut NamedGrads, more: NamedGrads) -> Result<()> {
    for (k, g) in more {
        match into.get_mut(&k) {
            Some(acc) => *acc = acc.add(&g)?,
            None => {
                into.insert(k, g);
            }
        }
    }
    Ok(())
}

pub fn scale_grads(grads: &mut NamedGrads, factor: f64) -> Result<()> {
    for g in grads.values_mut() {
        *g = g.affine(factor, 0.0)?;
    }
    Ok(())
}

pub fn grad_norm(grads: &NamedGrads) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.values() {
        total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &NamedGrads, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = (&m / c1)?.div(&((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&(update * lr)?)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Flattened state for checkpointing: `step` plus `m/<name>`, `v/<name>`.
    pub fn state(&self, device: &Device) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            "step".to_string(),
            Tensor::new(&[self.step as f64], device)?,
        )];
        out.extend(self.first.iter().map(|(k, t)| (format!("m/{k}"), t.clone())));
        out.extend(self.second.iter().map(|(k, t)| (format!("v/{k}"), t.clone())));
        Ok(out)
    }

    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let step = entries
            .get("step")
            .ok_or_else(|| Error::MissingArray("optimizer step".into()))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        self.step = step.first().copied().unwrap_or(0.0) as u64;
        self.first.clear();
        self.second.clear();
        for (k, t) in entries {
            if let Some(name) = k.strip_prefix("m/") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.second.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}
