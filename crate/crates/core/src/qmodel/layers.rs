//! Minimal layer set on top of candle with seed-deterministic parameters.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::onnx::GraphBuilder;
use super::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]` (He, ReLU gain).
    KaimingUniform {
        fan_in: usize,
    },
    Uniform {
        bound: f64,
    },
}

/// Owns every parameter of a model, keyed by dotted path.
///
/// Fresh parameters are drawn from a ChaCha stream keyed by `(seed, name)`,
/// so a parameter's initial value depends only on its name and the seed and
/// never on construction order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    preloaded: Option<HashMap<String, Tensor>>,
    device: Device,
}

impl ParamStore {
    pub fn seeded(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            preloaded: None,
            device: Device::Cpu,
        }
    }

    /// A store that takes parameter values from `tensors` instead of drawing them.
    pub fn preloaded(tensors: HashMap<String, Tensor>) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed: 0,
            preloaded: Some(tensors),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.clone());
        }
        let tensor = match self.preloaded.as_mut() {
            Some(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| ModelError::Corrupt(format!("missing tensor {name}")))?;
                if t.dims() != shape {
                    return Err(ModelError::Corrupt(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(DType::F32)?
            }
            None => self.draw(name, shape, init)?,
        };
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn draw(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                self.uniform(name, n, bound)
            }
            Init::Uniform { bound } => self.uniform(name, n, bound),
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?)
    }

    fn uniform(&self, name: &str, n: usize, bound: f64) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..n)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect()
    }

    /// Preloaded tensors that no layer asked for.
    /// Switches back to drawing new parameters from the seed and returns the
    /// names of preloaded tensors that were never requested.
    pub fn end_preload(&mut self) -> Vec<String> {
        let mut unused: Vec<String> = self
            .preloaded
            .take()
            .map(|m| m.into_keys().collect())
            .unwrap_or_default();
        unused.sort();
        unused
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.vars.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Owned snapshot of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            if let Some(v) = self.vars.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }
}

pub struct Conv2d {
    name: String,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = store.var(
            &format!("{name}.weight"),
            &[cout, cin, kernel.0, kernel.1],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(store.var(&format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.padding;
        let y = if ph == pw {
            x.conv2d(self.weight.as_tensor(), ph, self.stride, 1, 1)?
        } else {
            let x = x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?;
            x.conv2d(self.weight.as_tensor(), 0, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let w = g.initializer(&format!("{}.weight", self.name), self.weight.as_tensor())?;
        let mut inputs = vec![input.to_string(), w];
        if let Some(b) = &self.bias {
            inputs.push(g.initializer(&format!("{}.bias", self.name), b.as_tensor())?);
        }
        let dims = self.weight.dims();
        let (ph, pw) = (self.padding.0 as i64, self.padding.1 as i64);
        Ok(g.node(
            "Conv",
            &self.name,
            inputs,
            vec![
                GraphBuilder::ints("kernel_shape", &[dims[2] as i64, dims[3] as i64]),
                GraphBuilder::ints("strides", &[self.stride as i64; 2]),
                GraphBuilder::ints("pads", &[ph, pw, ph, pw]),
            ],
        ))
    }
}

pub struct Linear {
    name: String,
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_bias(store, name, fan_in, fan_out, Init::Zeros)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: Init,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[fan_out, fan_in],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = store.var(&format!("{name}.bias"), &[fan_out], bias)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let w = g.initializer(&format!("{}.weight", self.name), self.weight.as_tensor())?;
        let b = g.initializer(&format!("{}.bias", self.name), self.bias.as_tensor())?;
        Ok(g.node(
            "Gemm",
            &self.name,
            vec![input.to_string(), w, b],
            vec![GraphBuilder::int("transB", 1)],
        ))
    }
}

/// Batch normalization over `(N, H, W)` with running statistics kept in
/// the parameter store so they travel with checkpoints.
pub struct BatchNorm2d {
    name: String,
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            weight: store.var(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.var(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.var(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.var(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps,
            momentum: 0.1,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let view = |t: &Tensor| t.reshape((1, c, 1, 1));
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let count = (x.elem_count() / c) as f64;
            let unbiased = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                view(self.running_mean.as_tensor())?,
                view(self.running_var.as_tensor())?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&view(self.weight.as_tensor())?)?
            .broadcast_add(&view(self.bias.as_tensor())?)?)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let mut inputs = vec![input.to_string()];
        for (suffix, v) in [
            ("weight", &self.weight),
            ("bias", &self.bias),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            inputs.push(g.initializer(&format!("{}.{suffix}", self.name), v.as_tensor())?);
        }
        Ok(g.node(
            "BatchNormalization",
            &self.name,
            inputs,
            vec![GraphBuilder::float("epsilon", self.eps as f32)],
        ))
    }
}

/// Conv (no bias) + batch norm + ReLU.
pub struct BasicConv {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl BasicConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                stride,
                padding,
                false,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, 1e-3)?,
        })
    }

    pub fn square(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, (k, k), stride, (pad, pad))
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let c = self.conv.export(g, input)?;
        let b = self.bn.export(g, &c)?;
        Ok(g.node("Relu", "", vec![b], vec![]))
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// 3x3 stride-1 average pool with zero padding 1, padding counted.
pub fn avg_pool3_same(x: &Tensor) -> Result<Tensor> {
    let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    Ok(x.avg_pool2d_with_stride(3, 1)?)
}

pub fn export_avg_pool3_same(g: &mut GraphBuilder, input: &str) -> String {
    g.node(
        "AveragePool",
        "",
        vec![input.to_string()],
        vec![
            GraphBuilder::ints("kernel_shape", &[3, 3]),
            GraphBuilder::ints("strides", &[1, 1]),
            GraphBuilder::ints("pads", &[1, 1, 1, 1]),
            GraphBuilder::int("count_include_pad", 1),
        ],
    )
}

pub fn export_max_pool(g: &mut GraphBuilder, input: &str, k: i64, stride: i64) -> String {
    g.node(
        "MaxPool",
        "",
        vec![input.to_string()],
        vec![
            GraphBuilder::ints("kernel_shape", &[k, k]),
            GraphBuilder::ints("strides", &[stride, stride]),
        ],
    )
}
