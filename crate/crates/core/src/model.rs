//! Declarative architectures, parameter initialization and prediction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::Technique;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::tensor::{volume, Tensor};

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { units: usize },
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool { size: usize },
    Dropout { rate: f32 },
    Flatten,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { units } => write!(f, "dense({units})"),
            Layer::Conv {
                filters,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({filters},{kernel},{stride},{pad})"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool { size } => write!(f, "maxpool({size})"),
            Layer::Dropout { rate } => write!(f, "dropout({rate})"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

impl Layer {
    fn parse(token: &str) -> Result<Self> {
        let (kind, args) = match token.find('(') {
            Some(open) => {
                if !token.ends_with(')') {
                    return Err(Error::SpecSyntax(format!("unclosed `{token}`")));
                }
                (&token[..open], Some(&token[open + 1..token.len() - 1]))
            }
            None => (token, None),
        };
        let nums = |n: usize| -> Result<Vec<usize>> {
            let raw = args.ok_or_else(|| Error::SpecSyntax(format!("`{kind}` needs arguments")))?;
            let v = raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::SpecSyntax(format!("bad integer in `{token}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if v.len() != n {
                return Err(Error::SpecSyntax(format!(
                    "`{kind}` takes {n} arguments, got {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let bare = |layer: Layer| {
            if args.is_some() {
                Err(Error::SpecSyntax(format!("`{kind}` takes no arguments")))
            } else {
                Ok(layer)
            }
        };
        match kind {
            "dense" => Ok(Layer::Dense { units: nums(1)?[0] }),
            "conv" => {
                let v = nums(4)?;
                Ok(Layer::Conv {
                    filters: v[0],
                    kernel: v[1],
                    stride: v[2],
                    pad: v[3],
                })
            }
            "maxpool" => Ok(Layer::MaxPool { size: nums(1)?[0] }),
            "dropout" => {
                let raw = args.ok_or_else(|| Error::SpecSyntax("dropout needs a rate".into()))?;
                let rate = raw
                    .trim()
                    .parse::<f32>()
                    .map_err(|_| Error::SpecSyntax(format!("bad rate in `{token}`")))?;
                Ok(Layer::Dropout { rate })
            }
            "relu" => bare(Layer::Relu),
            "flatten" => bare(Layer::Flatten),
            other => Err(Error::UnknownLayer(other.to_string())),
        }
    }
}

/// Architecture description: input geometry, layer chain and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

/// A parameter the model spec implies: name and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ModelSpec {
    /// Victim family: two conv blocks and a small dense head.
    pub fn cnn_small(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            name: "cnn-small".into(),
            input_shape,
            layers: vec![
                Layer::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 0,
                },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 0,
                },
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::Dense { units: 64 },
                Layer::Relu,
                Layer::Dropout { rate: 0.25 },
                Layer::Dense { units: num_classes },
            ],
            num_classes,
        }
    }

    /// Surrogate family: a wide two-hidden-layer perceptron.
    pub fn mlp_wide(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            name: "mlp-wide".into(),
            input_shape,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { units: 256 },
                Layer::Relu,
                Layer::Dense { units: 128 },
                Layer::Relu,
                Layer::Dense { units: num_classes },
            ],
            num_classes,
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str, input_shape: [usize; 3], num_classes: usize) -> Option<Self> {
        match name {
            "cnn-small" => Some(Self::cnn_small(input_shape, num_classes)),
            "mlp-wide" => Some(Self::mlp_wide(input_shape, num_classes)),
            _ => None,
        }
    }

    /// Parses a whitespace separated layer chain such as `flatten dense(64) relu dense(10)`.
    pub fn from_layers(
        name: impl Into<String>,
        input_shape: [usize; 3],
        layers: &str,
        num_classes: usize,
    ) -> Result<Self> {
        let layers = layers
            .split_whitespace()
            .map(Layer::parse)
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            name: name.into(),
            input_shape,
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn layers_text(&self) -> String {
        let parts: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        parts.join(" ")
    }

    /// Canonical text form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!(
            "name: {}\ninput: {c}x{h}x{w}\nclasses: {}\nlayers: {}\n",
            self.name,
            self.num_classes,
            self.layers_text()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut classes = None;
        let mut layers = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::SpecSyntax(format!("expected `key: value`, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "input" => {
                    let dims = value
                        .split('x')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<core::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::SpecSyntax(format!("bad input shape `{value}`")))?;
                    if dims.len() != 3 {
                        return Err(Error::SpecSyntax(format!("input shape `{value}` is not CxHxW")));
                    }
                    input = Some([dims[0], dims[1], dims[2]]);
                }
                "classes" => {
                    classes = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| Error::SpecSyntax(format!("bad class count `{value}`")))?,
                    )
                }
                "layers" => layers = Some(value.to_string()),
                other => return Err(Error::SpecSyntax(format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::SpecSyntax(format!("missing `{k}`"));
        Self::from_layers(
            name.ok_or_else(|| missing("name"))?,
            input.ok_or_else(|| missing("input"))?,
            &layers.ok_or_else(|| missing("layers"))?,
            classes.ok_or_else(|| missing("classes"))?,
        )
    }

    /// Walks the shape chain; returns the parameters implied by the model spec.
    pub fn validate(&self) -> Result<Vec<ParamShape>> {
        let invalid = |layer: usize, reason: String| Error::InvalidSpec { layer, reason };
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(invalid(0, "input shape has a zero extent".into()));
        }
        if self.num_classes < 2 {
            return Err(invalid(0, "need at least two classes".into()));
        }
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 {
                        return Err(invalid(i, "conv needs a CxHxW input".into()));
                    }
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(invalid(i, "conv extents must be positive".into()));
                    }
                    let (ph, pw) = (shape[1] + 2 * pad, shape[2] + 2 * pad);
                    if kernel > ph || kernel > pw {
                        return Err(invalid(
                            i,
                            format!("kernel {kernel} larger than padded input {ph}x{pw}"),
                        ));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    params.push(ParamShape {
                        name: format!("l{i}.weight"),
                        shape: vec![filters, shape[0], kernel, kernel],
                        fan_in,
                        is_bias: false,
                    });
                    params.push(ParamShape {
                        name: format!("l{i}.bias"),
                        shape: vec![filters],
                        fan_in,
                        is_bias: true,
                    });
                    shape = vec![filters, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1];
                }
                Layer::MaxPool { size } => {
                    if shape.len() != 3 {
                        return Err(invalid(i, "maxpool needs a CxHxW input".into()));
                    }
                    if size == 0 || size > shape[1] || size > shape[2] {
                        return Err(invalid(i, format!("pool size {size} does not fit input")));
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
                Layer::Flatten => shape = vec![volume(&shape)],
                Layer::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(invalid(i, "dense needs a flat input; add `flatten`".into()));
                    }
                    if units == 0 {
                        return Err(invalid(i, "dense needs at least one unit".into()));
                    }
                    params.push(ParamShape {
                        name: format!("l{i}.weight"),
                        shape: vec![shape[0], units],
                        fan_in: shape[0],
                        is_bias: false,
                    });
                    params.push(ParamShape {
                        name: format!("l{i}.bias"),
                        shape: vec![units],
                        fan_in: shape[0],
                        is_bias: true,
                    });
                    shape = vec![units];
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(invalid(i, format!("dropout rate {rate} outside [0, 1)")));
                    }
                }
                Layer::Relu => {}
            }
        }
        let ends_dense = matches!(self.layers.last(), Some(Layer::Dense { .. }));
        if !ends_dense || shape != [self.num_classes] {
            return Err(invalid(
                self.layers.len().saturating_sub(1),
                format!(
                    "final layer must be dense({}) producing the logits, chain ends at {shape:?}",
                    self.num_classes
                ),
            ));
        }
        Ok(params)
    }
}

/// Adversarial-training provenance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvTag {
    pub technique: Technique,
    pub epsilon: f32,
}

/// Training metadata carried in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelMeta {
    pub epochs: u32,
    pub final_lr: f32,
    pub dataset: String,
    pub adversarial: Option<AdvTag>,
    /// Free-form provenance (e.g. the oracle and pool a surrogate came from).
    pub tags: BTreeMap<String, String>,
}

/// Options for realizing a model as a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphOptions {
    /// Training mode: dropout active.
    pub train: bool,
    pub dropout_seed: u64,
    pub param_grads: bool,
    pub input_grad: bool,
    /// Append a `targets` leaf and a cross-entropy loss node.
    pub with_loss: bool,
}

pub struct ModelGraph {
    pub graph: Graph<f32>,
    pub input: NodeId,
    pub logits: NodeId,
    pub log_probs: NodeId,
    pub loss: Option<NodeId>,
}

pub const INPUT_LEAF: &str = "x";
pub const TARGET_LEAF: &str = "targets";

/// A spec together with its realized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    params: Vec<(String, Tensor)>,
    pub rng_seed: u64,
    pub meta: ModelMeta,
}

/// Chunk size used when evaluating large batches.
const EVAL_CHUNK: usize = 256;

impl Model {
    /// Initializes weights Kaiming-uniform (bound `sqrt(6 / fan_in)`), biases zero.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|p| {
                let n = volume(&p.shape);
                let data = if p.is_bias {
                    vec![0.0f32; n]
                } else {
                    let bound = libm::sqrt(6.0 / p.fan_in as f64) as f32;
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Ok((p.name, Tensor::new(p.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            params,
            rng_seed: seed,
            meta: ModelMeta::default(),
        })
    }

    /// Assembles a model from explicit parameters, checking them against the model spec.
    pub fn from_params(spec: ModelSpec, params: Vec<(String, Tensor)>, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        if shapes.len() != params.len() {
            return Err(Error::MissingParameter(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (want, (name, t)) in shapes.iter().zip(&params) {
            if want.name != *name || want.shape != t.shape() {
                return Err(Error::MissingParameter(want.name.clone()));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
        }
        Ok(Self {
            spec,
            params,
            rng_seed: seed,
            meta: ModelMeta::default(),
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Realizes the layer chain as a graph over a batch of `batch` inputs.
    pub fn graph(&self, batch: usize, opts: GraphOptions) -> Result<ModelGraph> {
        let mut g = Graph::<f32>::new();
        let [c, h, w] = self.spec.input_shape;
        let input = g.leaf(INPUT_LEAF, [batch, c, h, w], opts.input_grad)?;
        let mut cur = input;
        let mut dropout_index = 0u64;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let wt = g.leaf(format!("l{i}.weight"), self.shape_of(i, "weight"), opts.param_grads)?;
                    let b = g.leaf(format!("l{i}.bias"), self.shape_of(i, "bias"), opts.param_grads)?;
                    let cur = if g.shape(cur).len() == 4 {
                        cur
                    } else {
                        return Err(Error::InvalidSpec {
                            layer: i,
                            reason: "conv after flatten".into(),
                        });
                    };
                    g.conv2d(cur, wt, Some(b), stride, pad)?
                }
                Layer::Dense { .. } => {
                    let wt = g.leaf(format!("l{i}.weight"), self.shape_of(i, "weight"), opts.param_grads)?;
                    let b = g.leaf(format!("l{i}.bias"), self.shape_of(i, "bias"), opts.param_grads)?;
                    let mm = g.matmul(cur, wt)?;
                    g.add(mm, b)?
                }
                Layer::Relu => g.relu(cur)?,
                Layer::MaxPool { size } => g.maxpool2d(cur, size)?,
                Layer::Flatten => g.flatten(cur)?,
                Layer::Dropout { rate } => {
                    let seed = opts
                        .dropout_seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(dropout_index);
                    dropout_index += 1;
                    g.dropout(cur, rate, seed, opts.train)?
                }
            };
        }
        let logits = cur;
        let log_probs = g.log_softmax(logits)?;
        let loss = if opts.with_loss {
            let k = self.spec.num_classes;
            let t = g.leaf(TARGET_LEAF, [batch, k], false)?;
            Some(g.cross_entropy(log_probs, t)?)
        } else {
            None
        };
        Ok(ModelGraph {
            graph: g,
            input,
            logits,
            log_probs,
            loss,
        })
    }

    fn shape_of(&self, layer: usize, kind: &str) -> Vec<usize> {
        let name = format!("l{layer}.{kind}");
        self.param(&name)
            .map(|t| t.shape().to_vec())
            .unwrap_or_default()
    }

    /// Binds every parameter under its leaf name.
    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a, f32>) {
        for (name, t) in &self.params {
            bindings.bind(name.clone(), t);
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let [c, h, w] = self.spec.input_shape;
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                node: format!("leaf `{INPUT_LEAF}`"),
                expected: vec![s.first().copied().unwrap_or(0), c, h, w],
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Raw logits in evaluation mode, `B×K`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let k = self.spec.num_classes;
        let mut out = Vec::with_capacity(n * k);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk;
            let x = if start == 0 && end == n {
                batch
            } else {
                chunk = batch.slice_rows(start, end)?;
                &chunk
            };
            let mut mg = self.graph(end - start, GraphOptions::default())?;
            let mut b = Bindings::new();
            self.bind(&mut b);
            b.bind(INPUT_LEAF, x);
            let logits = mg.graph.forward(&b, mg.logits)?;
            out.extend_from_slice(logits.data());
            start = end;
        }
        Tensor::new([n, k], out)
    }

    /// Class probabilities in evaluation mode; every row sums to one.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.logits(batch)?;
        let k = self.spec.num_classes;
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.data().chunks_exact(k) {
            out.extend(softmax_row(row));
        }
        Tensor::new(logits.shape().to_vec(), out)
    }

    /// Argmax labels, ties to the lowest class index.
    pub fn predict_label(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_proba(batch)?;
        Ok(argmax_rows(&probs))
    }
}

/// Softmax of one logit row computed in `f64`.
pub fn softmax_row(row: &[f32]) -> impl Iterator<Item = f32> + '_ {
    let max = row
        .iter()
        .map(|&x| x as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|&x| libm::exp(x as f64 - max)).sum();
    row.iter()
        .map(move |&x| (libm::exp(x as f64 - max) / denom) as f32)
}

/// Row-wise argmax of a `B×K` tensor; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
