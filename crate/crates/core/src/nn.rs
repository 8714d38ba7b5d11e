//! Parameter storage and the small set of layers the three stages share.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{sha256_hex, Rng};
use crate::tensorio::{ArrayData, ArrayRecord};

/// Norms below this are reported as degenerate instead of being normalized.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std must be finite and >= 0");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(b) => {
                if b == 0.0 {
                    return vec![0.0; n];
                }
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Named parameters, ordered by name.
///
/// A store is either trainable (tensors handed out are the variables
/// themselves, so gradients flow into them) or frozen (tensors handed out are
/// detached views of the same storage).
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamIndexEntry {
    name: String,
    dims: Vec<usize>,
    file: String,
    sha256: String,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            trainable: true,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn hand_out(&self, var: &Var) -> Tensor {
        if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    /// Returns the named parameter, creating it with `init` if absent.
    pub fn get_or_init(
        &mut self,
        name: &str,
        dims: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != dims {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, expected {dims:?}",
                    var.dims()
                )));
            }
            return Ok(self.hand_out(var));
        }
        if !self.trainable {
            return Err(Error::Config(format!("frozen store has no parameter {name}")));
        }
        let n: usize = dims.iter().product();
        let data = init.sample(n, rng);
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = self.hand_out(&var);
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| self.hand_out(v))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose names start with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Same storage, detached hand-outs.
    pub fn frozen(&self) -> Self {
        Self {
            vars: self.vars.clone(),
            dtype: self.dtype,
            trainable: false,
        }
    }

    /// Independent copy of every parameter, trainable.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            trainable: true,
        })
    }

    /// SHA-256 over names, shapes and values in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in values {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Writes one array file per parameter plus `params.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let t = var.as_tensor().flatten_all()?;
            let rec = match self.dtype {
                DType::F64 => ArrayRecord::f64(var.dims().to_vec(), t.to_vec1::<f64>()?),
                _ => ArrayRecord::f32(var.dims().to_vec(), t.to_dtype(DType::F32)?.to_vec1::<f32>()?),
            };
            let bytes = rec.encode()?;
            let file = format!("{name}.w2ca");
            fs::write(dir.join(&file), &bytes)?;
            index.push(ParamIndexEntry {
                name: name.clone(),
                dims: var.dims().to_vec(),
                file,
                sha256: sha256_hex(&bytes),
            });
        }
        fs::write(dir.join("params.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Vec<ParamIndexEntry> =
            serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)?;
        let mut vars = BTreeMap::new();
        let mut dtype = DType::F32;
        for entry in index {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path)?;
            let found = sha256_hex(&bytes);
            if found != entry.sha256 {
                return Err(Error::Integrity {
                    path,
                    expected: entry.sha256,
                    found,
                });
            }
            let rec = ArrayRecord::decode(&bytes).map_err(|msg| Error::Format {
                path: path.clone(),
                msg,
            })?;
            if rec.dims != entry.dims {
                return Err(Error::Format {
                    path,
                    msg: format!("dims {:?} differ from index {:?}", rec.dims, entry.dims),
                });
            }
            let t = match rec.data {
                ArrayData::F32(v) => Tensor::from_vec(v, rec.dims.as_slice(), &Device::Cpu)?,
                ArrayData::F64(v) => {
                    dtype = DType::F64;
                    Tensor::from_vec(v, rec.dims.as_slice(), &Device::Cpu)?
                }
            };
            vars.insert(entry.name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            dtype,
            trainable: true,
        })
    }
}

/// Divides each row of `x` (`(N, d)`) by its L2 norm.
///
/// Fails with [`Error::DegenerateNorm`] instead of producing NaN.
pub fn l2_normalize(x: &Tensor, context: &str) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(min >= MIN_NORM) {
        return Err(Error::DegenerateNorm {
            context: context.to_string(),
            norm: min,
        });
    }
    Ok(x.broadcast_div(&norms)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// `out × in` weight, uniform init with bound `1/sqrt(in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, name, in_dim, out_dim, bias, Init::Uniform(bound), rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.get_or_init(&format!("{name}.weight"), &[out_dim, in_dim], init, rng)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros | Init::Const(_) => init,
                _ => Init::Zeros,
            };
            Some(store.get_or_init(&format!("{name}.bias"), &[out_dim], b_init, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::dim("linear input is a scalar"))?;
        let (out_dim, w_in) = self.weight.dims2()?;
        if in_dim != w_in {
            return Err(Error::dim(format!("linear expects {w_in} inputs, got {in_dim}")));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.get_or_init(&format!("{name}.gamma"), &[dim], Init::Const(1.0), rng)?,
            beta: store.get_or_init(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Scaled dot-product attention over `[prefix; keys]`.
///
/// `q`, `k`, `v` are `(B, H, T, dk)`; `prefix_k` and `prefix_v` are
/// `(B, H, P, dk)`. Prefix positions are visible to every query; when
/// `causal` is set, query `i` additionally sees content keys `0..=i` only.
pub fn attend_with_prefix(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prefix: Option<(&Tensor, &Tensor)>,
    causal: bool,
) -> Result<Tensor> {
    let (b, h, t, dk) = q.dims4()?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(Error::dim(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let (keys, values, p) = match prefix {
        Some((pk, pv)) => {
            let (pb, ph, p, pd) = pk.dims4()?;
            if (pb, ph, pd) != (b, h, dk) || pv.dims() != pk.dims() {
                return Err(Error::dim(format!(
                    "prefix shapes {:?}/{:?} incompatible with queries {:?}",
                    pk.dims(),
                    pv.dims(),
                    q.dims()
                )));
            }
            if p == 0 {
                (k.clone(), v.clone(), 0)
            } else {
                (
                    Tensor::cat(&[pk, k], 2)?.contiguous()?,
                    Tensor::cat(&[pv, v], 2)?.contiguous()?,
                    p,
                )
            }
        }
        None => (k.clone(), v.clone(), 0),
    };
    let scale = 1.0 / (dk as f64).sqrt();
    let scores = (q.contiguous()?.matmul(&keys.t()?.contiguous()?)? * scale)?;
    let scores = if causal {
        let mask: Vec<f64> = (0..t)
            .flat_map(|i| {
                (0..p + t).map(move |j| if j >= p && j - p > i { f64::NEG_INFINITY } else { 0.0 })
            })
            .collect();
        let mask = Tensor::from_vec(mask, (t, p + t), q.device())?.to_dtype(q.dtype())?;
        scores.broadcast_add(&mask)?
    } else {
        scores
    };
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(&values)?)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl TransformerBlock {
    /// With `zero_residual`, both residual branches start at zero so the
    /// block is the identity map at initialization.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: BlockShape,
        zero_residual: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let BlockShape { dim, heads, ff_mult } = shape;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let residual_init = |fan_in: usize| {
            if zero_residual {
                Init::Zeros
            } else {
                Init::Uniform(1.0 / (fan_in as f64).sqrt())
            }
        };
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), dim, rng)?;
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?;
        let out = Linear::with_init(store, &format!("{name}.out"), dim, dim, true, residual_init(dim), rng)?;
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), dim, rng)?;
        let ff1 = Linear::new(store, &format!("{name}.ff1"), dim, ff_mult * dim, true, rng)?;
        let ff2 = Linear::with_init(
            store,
            &format!("{name}.ff2"),
            ff_mult * dim,
            dim,
            true,
            residual_init(ff_mult * dim),
            rng,
        )?;
        Ok(Self {
            ln1,
            qkv,
            out,
            ln2,
            ff1,
            ff2,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x` is `(B, T, D)`; `prefix`, when given, is a `(keys, values)` pair
    /// of `(B, P, D)` tensors already in attention space.
    pub fn forward(&self, x: &Tensor, prefix: Option<(&Tensor, &Tensor)>, causal: bool) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = self.split_heads(&qkv.narrow(2, 0, d)?)?;
        let k = self.split_heads(&qkv.narrow(2, d, d)?)?;
        let v = self.split_heads(&qkv.narrow(2, 2 * d, d)?)?;
        let prefix_heads = match prefix {
            Some((pk, pv)) => Some((self.split_heads(pk)?, self.split_heads(pv)?)),
            None => None,
        };
        let attended = attend_with_prefix(
            &q,
            &k,
            &v,
            prefix_heads.as_ref().map(|(a, b)| (a, b)),
            causal,
        )?;
        let merged = attended.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        let x = (x + self.out.forward(&merged)?)?;
        let h = self.ln2.forward(&x)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.gelu()?)?;
        Ok((x + ff)?)
    }
}
