//! Classifier definitions, parameter containers and the parameter wire format.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::tensor::{self, Real, Tensor};

/// Kernel size of both convolutions in the small CNN.
const CNN_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Dense layers with ReLU between them.
    Mlp { hidden: Vec<usize> },
    /// Two stride-2, padding-1, 3×3 convolutions, then one hidden dense layer.
    SmallCnn { channels: [usize; 2], hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Per-sample input shape: `[d]` for the MLP, `[c, h, w]` for the CNN.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: vec![input_dim],
            num_classes,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], channels: [usize; 2], hidden: usize, num_classes: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::SmallCnn { channels, hidden },
            input_shape: input_shape.to_vec(),
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("zero-width input shape {:?}", self.input_shape)));
        }
        match &self.kind {
            ClassifierKind::Mlp { hidden } => {
                if self.input_shape.len() != 1 {
                    return Err(Error::Spec(format!(
                        "mlp input must be a vector, got {:?}",
                        self.input_shape
                    )));
                }
                if hidden.contains(&0) {
                    return Err(Error::Spec(format!("zero-width layer in {hidden:?}")));
                }
            }
            ClassifierKind::SmallCnn { channels, hidden } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Spec(format!(
                        "cnn input must be [c,h,w], got {:?}",
                        self.input_shape
                    )));
                }
                if channels.contains(&0) || *hidden == 0 {
                    return Err(Error::Spec(format!("zero-width layer in cnn {channels:?}/{hidden}")));
                }
            }
        }
        Ok(())
    }

    /// Dense layer widths from input to logits.
    fn dense_widths(&self) -> Vec<usize> {
        match &self.kind {
            ClassifierKind::Mlp { hidden } => {
                let mut w = vec![self.input_shape[0]];
                w.extend(hidden);
                w.push(self.num_classes);
                w
            }
            ClassifierKind::SmallCnn { channels, hidden } => {
                let (h, w) = self.conv_output_hw();
                vec![channels[1] * h * w, *hidden, self.num_classes]
            }
        }
    }

    fn conv_output_hw(&self) -> (usize, usize) {
        let shrink = |n: usize| (n + 2 - CNN_KERNEL) / 2 + 1;
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        (shrink(shrink(h)), shrink(shrink(w)))
    }

    /// Names, shapes and fan-in of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        if let ClassifierKind::SmallCnn { channels, .. } = &self.kind {
            let mut c_in = self.input_shape[0];
            for (i, &c_out) in channels.iter().enumerate() {
                let fan_in = c_in * CNN_KERNEL * CNN_KERNEL;
                out.push((
                    format!("conv{i}.weight"),
                    vec![c_out, c_in, CNN_KERNEL, CNN_KERNEL],
                    fan_in,
                ));
                out.push((format!("conv{i}.bias"), vec![c_out], fan_in));
                c_in = c_out;
            }
        }
        for (i, pair) in self.dense_widths().windows(2).enumerate() {
            out.push((format!("dense{i}.weight"), vec![pair[0], pair[1]], pair[0]));
            out.push((format!("dense{i}.bias"), vec![pair[1]], pair[0]));
        }
        out
    }

    /// Builds the logits `[batch, num_classes]` for an input node shaped
    /// `[batch, ..input_shape]`. `params` are the nodes of the tensors in
    /// [`Self::layout`] order.
    pub fn forward<T: Real>(&self, g: &mut CompGraph<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let batch = g.value(x).shape()[0];
        let mut p = params.iter().copied();
        let mut next = || {
            p.next()
                .ok_or_else(|| Error::Contract("too few parameter nodes".into()))
        };
        let mut h = x;
        if let ClassifierKind::SmallCnn { .. } = self.kind {
            for _ in 0..2 {
                let (k, b) = (next()?, next()?);
                h = g.conv2d(h, k, 2, 1)?;
                h = g.add_channel_bias(h, b)?;
                h = g.relu(h);
            }
            let flat = g.value(h).len() / batch;
            h = g.reshape(h, &[batch, flat])?;
        }
        let n_dense = self.dense_widths().len() - 1;
        for i in 0..n_dense {
            let (w, b) = (next()?, next()?);
            h = g.matmul(h, w)?;
            h = g.add_row_bias(h, b)?;
            if i + 1 < n_dense {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Stacks flat samples into a batch tensor `[n, ..input_shape]`.
    pub fn batch_input<T: Real>(&self, xs: &[&[f32]]) -> Result<Tensor<T>> {
        let d = self.input_len();
        let mut values = Vec::with_capacity(xs.len() * d);
        for x in xs {
            if x.len() != d {
                return Err(Error::dim("batch_input", &self.input_shape, &[x.len()]));
            }
            values.extend(x.iter().map(|&v| T::of_f64(v as f64)));
        }
        let mut shape = vec![xs.len()];
        shape.extend(&self.input_shape);
        Tensor::new(shape, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(entries: Vec<NamedTensor<T>>) -> Self {
        ModelParams { entries }
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.entries.iter().map(|e| e.tensor.shape()).collect()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    /// Registers every tensor as a graph parameter, returning the nodes.
    pub fn register(&self, g: &mut CompGraph<T>) -> Vec<NodeId> {
        self.tensors().map(|t| g.param(t.clone())).collect()
    }
}

/// Draws weights uniformly from `±1/sqrt(fan_in)`; biases start at zero.
pub fn init_model(spec: &ClassifierSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = spec
        .layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            Ok(NamedTensor {
                name,
                tensor: Tensor::new(shape, values)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams::new(entries))
}

/// Logits for a batch of flat samples, evaluated at precision `T`.
pub fn logits<T: Real>(spec: &ClassifierSpec, params: &ModelParams<T>, xs: &[&[f32]]) -> Result<Tensor<T>> {
    let mut g = CompGraph::new();
    let nodes: Vec<NodeId> = params.tensors().map(|t| g.constant(t.clone())).collect();
    let x = g.constant(spec.batch_input(xs)?);
    let out = spec.forward(&mut g, &nodes, x)?;
    Ok(g.value(out).clone())
}

/// Class probabilities for each sample. Logits come from the model's own
/// precision; the softmax is taken in `f64`.
pub fn predict_batch<T: Real>(spec: &ClassifierSpec, params: &ModelParams<T>, xs: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let z = logits(spec, params, xs)?.cast::<f64>();
    let p = tensor::softmax(&z)?;
    Ok(p.values().chunks(spec.num_classes).map(<[f64]>::to_vec).collect())
}

pub fn predict<T: Real>(spec: &ClassifierSpec, params: &ModelParams<T>, x: &[f32]) -> Result<Vec<f64>> {
    Ok(predict_batch(spec, params, &[x])?.remove(0))
}

// Wire format, all integers little-endian:
//   u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rank, rank × u32 dims,
//               product(dims) × f32 values
impl ModelParams<f32> {
    pub fn encoded_len(&self) -> usize {
        4 + self
            .entries
            .iter()
            .map(|e| 4 + e.name.len() + 4 + 4 * e.tensor.rank() + 4 * e.tensor.len())
            .sum::<usize>()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.tensor.rank() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in e.tensor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut rd = CountingReader { inner: r, offset: 0 };
        let count = rd.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let at = rd.offset;
            let name = String::from_utf8(rd.bytes(name_len)?).map_err(|_| Error::Format {
                offset: at,
                detail: "tensor name is not UTF-8".into(),
            })?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = rd.bytes(4 * n)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, values)?,
            });
        }
        Ok(ModelParams::new(entries))
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        let params = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Format {
                offset: total - bytes.len() as u64,
                detail: format!("{} trailing bytes", bytes.len()),
            });
        }
        Ok(params)
    }
}

pub(crate) struct CountingReader<'a, R> {
    pub inner: &'a mut R,
    pub offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                detail: format!("truncated: needed {n} more bytes"),
            },
            _ => Error::Io(e),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let v = self.bytes(N)?;
        Ok(v.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
}
