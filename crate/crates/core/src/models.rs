//! The `(n+1)`-way classifier and the soft-conditioned generator, plus the
//! binary checkpoint container.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "TIECKPT\0"
//! offset 8   u32       format version (1)
//! offset 12  u64       header length H
//! offset 20  H bytes   UTF-8 JSON header (architecture, seed, tau, tensor table)
//! then       f64 x N   tensor values in header table order, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_rows, Activation, Graph, Mlp, ParamMode, Parameter, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const GENERATOR_INIT_STD: f64 = 0.02;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of in-distribution classes `n`; the net emits `n + 1` logits.
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Size of the conditioning simplex, `n + 1`.
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

/// `f_θ`: MLP from inputs to `n + 1` logits, exposing penultimate features.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    spec: ClassifierSpec,
    pub mlp: Mlp,
}

/// Output of a frozen classifier pass.
#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

impl ClassifierOutput {
    pub fn probs(&self) -> Tensor {
        softmax_rows(&self.logits)
    }
}

impl ClassifierNet {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        if spec.n_classes < 1 {
            return Err(Error::invalid("classifier needs at least one ID class"));
        }
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.n_classes + 1);
        let mlp = Mlp::new("classifier", &dims, Activation::Relu, Activation::Identity)?;
        Ok(ClassifierNet { spec, mlp })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    /// Total output width `K = n + 1`; the garbage class is index `n`.
    pub fn num_outputs(&self) -> usize {
        self.spec.n_classes + 1
    }

    pub fn garbage_index(&self) -> usize {
        self.spec.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.penultimate_dim()
    }

    /// He-style normal init `N(0, 2/fan_in)`, zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, streams::INIT_CLASSIFIER);
        for layer in &mut self.mlp.layers {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            fill_normal(&mut layer.weight, std, &mut rng);
            layer.bias.value_mut().data_mut().fill(0.0);
        }
    }

    /// Records the forward pass on `g`, returning `(logits, features)`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: ParamMode) -> Result<(Var, Var)> {
        self.mlp.forward(g, x, mode)
    }

    /// Gradient-free forward pass on a `[B, D]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<ClassifierOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (logits, features) = self.forward(&mut g, xv, ParamMode::Frozen)?;
        Ok(ClassifierOutput {
            logits: g.value(logits).clone(),
            features: g.value(features).clone(),
        })
    }

    /// Like [`predict`](Self::predict) but in fixed-size chunks to bound memory.
    pub fn predict_chunked(&self, x: &Tensor, chunk: usize) -> Result<ClassifierOutput> {
        let n = x.rows();
        let chunk = chunk.max(1);
        let mut logits = Vec::with_capacity(n * self.num_outputs());
        let mut features = Vec::with_capacity(n * self.feature_dim());
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = self.predict(&x.select_rows(&idx))?;
            logits.extend_from_slice(out.logits.data());
            features.extend_from_slice(out.features.data());
            start = end;
        }
        Ok(ClassifierOutput {
            logits: Tensor::new(vec![n, self.num_outputs()], logits)?,
            features: Tensor::new(vec![n, self.feature_dim()], features)?,
        })
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.mlp.parameters()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.mlp.parameters_mut()
    }
}

/// `G_φ(z, ỹ)`: MLP on `concat(z, ỹ)` with a sigmoid output in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    spec: GeneratorSpec,
    pub mlp: Mlp,
}

impl GeneratorNet {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        if spec.cond_dim < 2 {
            return Err(Error::invalid("generator conditioning needs at least 2 classes"));
        }
        let mut dims = vec![spec.latent_dim + spec.cond_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        let mlp = Mlp::new("generator", &dims, Activation::Relu, Activation::Sigmoid)?;
        Ok(GeneratorNet { spec, mlp })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Every weight and bias drawn from `N(0, 0.02²)`.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, streams::INIT_GENERATOR);
        for p in self.mlp.parameters_mut() {
            fill_normal(p, GENERATOR_INIT_STD, &mut rng);
        }
    }

    /// Records `G(z, ỹ)` on `g`. Each conditioning row must lie on the simplex.
    pub fn forward(&self, g: &mut Graph, z: Var, y_tilde: Var, mode: ParamMode) -> Result<Var> {
        let (tz, ty) = (g.value(z), g.value(y_tilde));
        if tz.cols() != self.spec.latent_dim || ty.cols() != self.spec.cond_dim {
            return Err(Error::ShapeMismatch {
                op: "generator input",
                lhs: tz.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        check_simplex_rows(ty)?;
        let input = g.concat(z, y_tilde)?;
        Ok(self.mlp.forward(g, input, mode)?.0)
    }

    /// Gradient-free generation.
    pub fn generate(&self, z: &Tensor, y_tilde: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let yv = g.constant(y_tilde.clone());
        let out = self.forward(&mut g, zv, yv, ParamMode::Frozen)?;
        Ok(g.value(out).clone())
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.mlp.parameters()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.mlp.parameters_mut()
    }
}

fn fill_normal(p: &mut Parameter, std: f64, rng: &mut rng::Rng) {
    let dist = Normal::new(0.0, std).expect("std is positive");
    for v in p.value_mut().data_mut() {
        *v = dist.sample(rng);
    }
}

pub(crate) fn check_simplex_rows(t: &Tensor) -> Result<()> {
    for (i, row) in t.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "conditioning row {i} is not on the simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"TIECKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    classifier: ClassifierSpec,
    generator: GeneratorSpec,
    seed: u64,
    epoch: usize,
    tau: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// Both networks plus the run seed and, once trained, the final threshold.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub classifier: ClassifierNet,
    pub generator: GeneratorNet,
    pub seed: u64,
    pub epoch: usize,
    pub tau: Option<f64>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params: Vec<&Parameter> = self
            .classifier
            .parameters()
            .chain(self.generator.parameters())
            .collect();
        let header = CheckpointHeader {
            classifier: self.classifier.spec().clone(),
            generator: self.generator.spec().clone(),
            seed: self.seed,
            epoch: self.epoch,
            tau: self.tau,
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name().to_string(),
                    shape: p.value().shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for p in params {
            for &v in p.value().data() {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let name = path.display().to_string();
        let fmt = |offset: u64, msg: &str| Error::Format {
            path: name.clone(),
            offset,
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt(0, "truncated magic"))?;
        if &magic != MAGIC {
            return Err(fmt(0, "bad checkpoint magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| fmt(8, "truncated version"))?;
        if version != VERSION {
            return Err(fmt(8, &format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.read_u64::<LittleEndian>().map_err(|_| fmt(12, "truncated header length"))?;
        let mut hbuf = vec![0u8; hlen as usize];
        r.read_exact(&mut hbuf).map_err(|_| fmt(20, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;

        let mut classifier = ClassifierNet::new(header.classifier)?;
        let mut generator = GeneratorNet::new(header.generator)?;
        let mut offset = 20 + hlen;
        {
            let params: Vec<&mut Parameter> = classifier
                .parameters_mut()
                .chain(generator.parameters_mut())
                .collect();
            if params.len() != header.tensors.len() {
                return Err(fmt(20, "tensor table does not match architecture"));
            }
            for (p, entry) in params.into_iter().zip(&header.tensors) {
                if p.value().shape() != entry.shape.as_slice() {
                    return Err(fmt(20, &format!("shape mismatch for {}", entry.name)));
                }
                for v in p.value_mut().data_mut() {
                    *v = r
                        .read_f64::<LittleEndian>()
                        .map_err(|_| fmt(offset, "truncated tensor payload"))?;
                    offset += 8;
                }
            }
        }
        Ok(ModelCheckpoint {
            classifier,
            generator,
            seed: header.seed,
            epoch: header.epoch,
            tau: header.tau,
        })
    }
}
