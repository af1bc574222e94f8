//! Model substrate: layers, classifiers (teacher/student topology) and the
//! conditional generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchMoments, ConvGeom, Graph, NormStats, Var};
use crate::quant::{Site, SiteKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod generator;
mod teacher;

pub use generator::*;
pub use teacher::TeacherModel;

/// Batch-norm behaviour during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with stored running statistics; nothing is updated.
    Eval,
    /// Normalise with batch statistics; moments are returned so the caller
    /// can update running statistics.
    Train,
}

/// Per-channel input normalisation `(pixel - mean) / std`, pixels in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Normalised values of the pixel-range endpoints 0 and 1.
    pub fn bounds(&self, channel: usize) -> (f64, f64) {
        let (m, s) = (self.mean[channel], self.std[channel]);
        (-m / s, (1.0 - m) / s)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialised convolution.
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        Self {
            weight: Tensor::randn(&[cout, cin, k, k], T::lit((2.0 / fan_in).sqrt()), rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            geom: ConvGeom {
                stride,
                padding: k / 2,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

fn update_running<T: Scalar>(mean: &mut Tensor<T>, var: &mut Tensor<T>, m: &BatchMoments<T>, momentum: T) {
    // Running variance uses the unbiased estimate.
    let n = T::lit(m.count as f64);
    let unbias = if m.count > 1 { n / (n - T::one()) } else { T::one() };
    for (r, &b) in mean.data_mut().iter_mut().zip(&m.mean) {
        *r = (T::one() - momentum) * *r + momentum * b;
    }
    for (r, &b) in var.data_mut().iter_mut().zip(&m.var) {
        *r = (T::one() - momentum) * *r + momentum * b * unbias;
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = T::lit(1.0 / (input as f64).sqrt());
        Self {
            weight: Tensor::rand_uniform(&[output, input], -bound, bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }
}

/// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub body: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    Residual(Residual<T>),
    GlobalAvgPool,
    /// `(B, C, H, W) -> (B, C*H*W)`.
    Flatten,
    Linear(Linear<T>),
}

/// Desk-scale classifier architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Three conv-BN-ReLU stages (the last two strided), linear head on
    /// the flattened feature map.
    MnistBnCnn,
    /// Small ResNet: stem plus three residual stages (16/32/64 channels).
    ResnetMini,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::MnistBnCnn => "mnist-bn-cnn",
            Architecture::ResnetMini => "resnet-mini",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist-bn-cnn" => Ok(Architecture::MnistBnCnn),
            "resnet-mini" => Ok(Architecture::ResnetMini),
            _ => Err(Error::Config(format!(
                "unknown architecture `{s}` (expected mnist-bn-cnn or resnet-mini)"
            ))),
        }
    }
}

fn conv_bn_relu<T: Scalar, R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> [Layer<T>; 3] {
    [
        Layer::Conv(Conv2d::new(cin, cout, 3, stride, false, rng)),
        Layer::BatchNorm(BatchNorm2d::new(cout)),
        Layer::Relu,
    ]
}

fn basic_block<T: Scalar, R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Layer<T> {
    let body = vec![
        Layer::Conv(Conv2d::new(cin, cout, 3, stride, false, rng)),
        Layer::BatchNorm(BatchNorm2d::new(cout)),
        Layer::Relu,
        Layer::Conv(Conv2d::new(cout, cout, 3, 1, false, rng)),
        Layer::BatchNorm(BatchNorm2d::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            Layer::Conv(Conv2d::new(cin, cout, 1, stride, false, rng)),
            Layer::BatchNorm(BatchNorm2d::new(cout)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual(Residual { body, shortcut })
}

/// Hook points of a classifier forward pass.
pub trait ForwardHook<T: Scalar> {
    /// Called with every weight tensor before use.
    fn weight(&mut self, _g: &mut Graph<T>, _site: &str, w: Var) -> Result<Var> {
        Ok(w)
    }

    /// Called with every designated activation.
    fn activation(&mut self, _g: &mut Graph<T>, _site: &str, x: Var) -> Result<Var> {
        Ok(x)
    }

    /// Called with the input of every batch-norm layer, in order.
    fn bn_input(&mut self, _g: &Graph<T>, _ordinal: usize, _x: Var) {}
}

/// Hook that does nothing.
pub struct NoHook;

impl<T: Scalar> ForwardHook<T> for NoHook {}

/// Records the graph node of every batch-norm input.
#[derive(Default)]
pub struct BnCapture {
    pub inputs: Vec<Var>,
}

impl<T: Scalar> ForwardHook<T> for BnCapture {
    fn bn_input(&mut self, _g: &Graph<T>, ordinal: usize, x: Var) {
        debug_assert_eq!(ordinal, self.inputs.len());
        self.inputs.push(x);
    }
}

/// Parameters of a model bound into a graph, in visiting order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn grads<T: Scalar>(&self, grads: &crate::graph::Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

struct Walk<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    params: Cursor<'a>,
    mode: BnMode,
    hook: &'a mut dyn ForwardHook<T>,
    bn_ordinal: usize,
    moments: Vec<BatchMoments<T>>,
}

fn join(prefix: &str, name: impl std::fmt::Display) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn run_layers<T: Scalar>(w: &mut Walk<'_, T>, layers: &[Layer<T>], prefix: &str, mut x: Var) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        let path = join(prefix, i);
        x = match layer {
            Layer::Conv(c) => {
                let wv = w.params.next();
                let wv = w.hook.weight(w.g, &format!("{path}.weight"), wv)?;
                let b = c.bias.as_ref().map(|_| w.params.next());
                w.g.conv2d(x, wv, b, c.geom)?
            }
            Layer::BatchNorm(bn) => {
                let gamma = w.params.next();
                let beta = w.params.next();
                w.hook.bn_input(w.g, w.bn_ordinal, x);
                w.bn_ordinal += 1;
                let stats = match w.mode {
                    BnMode::Eval => NormStats::Fixed {
                        mean: bn.running_mean.data(),
                        var: bn.running_var.data(),
                    },
                    BnMode::Train => NormStats::Batch,
                };
                let (y, m) = w.g.norm(x, gamma, beta, None, stats, bn.eps)?;
                if let Some(m) = m {
                    w.moments.push(m);
                }
                w.hook.activation(w.g, &path, y)?
            }
            Layer::Relu => w.g.relu(x),
            Layer::Residual(r) => {
                let body = run_layers(w, &r.body, &join(&path, "body"), x)?;
                let short = run_layers(w, &r.shortcut, &join(&path, "shortcut"), x)?;
                let sum = w.g.add(body, short)?;
                let y = w.g.relu(sum);
                w.hook.activation(w.g, &path, y)?
            }
            Layer::GlobalAvgPool => {
                let y = w.g.global_avg_pool(x)?;
                w.hook.activation(w.g, &path, y)?
            }
            Layer::Flatten => {
                let shape = w.g.value(x).shape().to_vec();
                let b = shape[0];
                w.g.reshape(x, &[b, shape[1..].iter().product()])?
            }
            Layer::Linear(_) => {
                let wv = w.params.next();
                let wv = w.hook.weight(w.g, &format!("{path}.weight"), wv)?;
                let b = w.params.next();
                let y = w.g.linear(x, wv, Some(b))?;
                w.hook.activation(w.g, &path, y)?
            }
        };
    }
    Ok(x)
}

fn visit_params<'a, T>(layers: &'a [Layer<T>], prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
    for (i, layer) in layers.iter().enumerate() {
        let path = join(prefix, i);
        match layer {
            Layer::Conv(c) => {
                out.push((format!("{path}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("{path}.bias"), b));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((format!("{path}.gamma"), &bn.gamma));
                out.push((format!("{path}.beta"), &bn.beta));
            }
            Layer::Residual(r) => {
                visit_params(&r.body, &join(&path, "body"), out);
                visit_params(&r.shortcut, &join(&path, "shortcut"), out);
            }
            Layer::Linear(l) => {
                out.push((format!("{path}.weight"), &l.weight));
                out.push((format!("{path}.bias"), &l.bias));
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
}

fn visit_params_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut Tensor<T>>) {
    for layer in layers.iter_mut() {
        match layer {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    out.push(b);
                }
            }
            Layer::BatchNorm(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::Residual(r) => {
                visit_params_mut(&mut r.body, out);
                visit_params_mut(&mut r.shortcut, out);
            }
            Layer::Linear(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
}

fn visit_bn<'a, T>(layers: &'a [Layer<T>], prefix: &str, out: &mut Vec<(String, &'a BatchNorm2d<T>)>) {
    for (i, layer) in layers.iter().enumerate() {
        let path = join(prefix, i);
        match layer {
            Layer::BatchNorm(bn) => out.push((path, bn)),
            Layer::Residual(r) => {
                visit_bn(&r.body, &join(&path, "body"), out);
                visit_bn(&r.shortcut, &join(&path, "shortcut"), out);
            }
            _ => {}
        }
    }
}

fn visit_bn_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BatchNorm2d<T>>) {
    for layer in layers.iter_mut() {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual(r) => {
                visit_bn_mut(&mut r.body, out);
                visit_bn_mut(&mut r.shortcut, out);
            }
            _ => {}
        }
    }
}

fn visit_sites<T>(layers: &[Layer<T>], prefix: &str, out: &mut Vec<Site>) {
    let act = |name: String| Site {
        name,
        kind: SiteKind::Activation,
    };
    for (i, layer) in layers.iter().enumerate() {
        let path = join(prefix, i);
        match layer {
            Layer::Conv(_) => out.push(Site {
                name: format!("{path}.weight"),
                kind: SiteKind::Weight,
            }),
            Layer::BatchNorm(_) | Layer::GlobalAvgPool => out.push(act(path)),
            Layer::Residual(r) => {
                visit_sites(&r.body, &join(&path, "body"), out);
                visit_sites(&r.shortcut, &join(&path, "shortcut"), out);
                out.push(act(path));
            }
            Layer::Linear(_) => {
                out.push(Site {
                    name: format!("{path}.weight"),
                    kind: SiteKind::Weight,
                });
                out.push(act(path));
            }
            Layer::Relu | Layer::Flatten => {}
        }
    }
}

/// Activation site name of the network input.
pub const INPUT_SITE: &str = "input";

/// Result of a classifier forward pass.
pub struct ForwardOut<T> {
    pub logits: Var,
    /// Batch moments of every BN layer (train mode only), in BN order.
    pub moments: Vec<BatchMoments<T>>,
}

/// Image classifier with batch normalisation: the topology shared by the
/// teacher and its quantised student.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub arch: Architecture,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub normalization: Normalization,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng>(
        arch: Architecture,
        num_classes: usize,
        input_shape: [usize; 3],
        normalization: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let cin = input_shape[0];
        let layers = match arch {
            Architecture::MnistBnCnn => {
                let mut l = Vec::new();
                l.extend(conv_bn_relu(cin, 16, 1, rng));
                l.extend(conv_bn_relu(16, 32, 2, rng));
                l.extend(conv_bn_relu(32, 32, 2, rng));
                let side = |n: usize| (n - 1) / 2 + 1;
                let (h, w) = (side(side(input_shape[1])), side(side(input_shape[2])));
                l.push(Layer::Flatten);
                l.push(Layer::Linear(Linear::new(32 * h * w, num_classes, rng)));
                l
            }
            Architecture::ResnetMini => {
                let mut l = Vec::new();
                l.extend(conv_bn_relu(cin, 16, 1, rng));
                l.push(basic_block(16, 16, 1, rng));
                l.push(basic_block(16, 32, 2, rng));
                l.push(basic_block(32, 64, 2, rng));
                l.push(Layer::GlobalAvgPool);
                l.push(Layer::Linear(Linear::new(64, num_classes, rng)));
                l
            }
        };
        Ok(Self {
            arch,
            num_classes,
            input_shape,
            normalization,
            layers,
        })
    }

    /// Named parameter tensors in binding order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit_params(&self.layers, "", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        visit_params_mut(&mut self.layers, &mut out);
        out
    }

    /// Batch-norm layers with their paths, in forward order.
    pub fn bn_layers(&self) -> Vec<(String, &BatchNorm2d<T>)> {
        let mut out = Vec::new();
        visit_bn(&self.layers, "", &mut out);
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = Vec::new();
        visit_bn_mut(&mut self.layers, &mut out);
        out
    }

    /// Every quantisation site: all conv/linear weights plus the input, BN
    /// outputs, residual outputs, pooled features and logits.
    pub fn quant_sites(&self) -> Vec<Site> {
        let mut out = vec![Site {
            name: INPUT_SITE.into(),
            kind: SiteKind::Activation,
        }];
        visit_sites(&self.layers, "", &mut out);
        out
    }

    /// Named parameters and BN running statistics, in a stable order.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.params();
        for (path, bn) in self.bn_layers() {
            out.push((format!("{path}.running_mean"), &bn.running_mean));
            out.push((format!("{path}.running_var"), &bn.running_var));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.state().into_iter().map(|(n, _)| n).collect();
        let mut all = Vec::new();
        collect_state_mut(&mut self.layers, &mut all);
        names.into_iter().zip(all).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params()
                .into_iter()
                .map(|(_, t)| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Checks an input batch against the `(B, C, H, W)` contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.input_shape;
        match shape {
            [b, sc, sh, sw] if *b > 0 && (*sc, *sh, *sw) == (c, h, w) => Ok(()),
            _ => Err(Error::Shape {
                op: "classifier input",
                expected: format!("(B, {c}, {h}, {w})"),
                actual: format!("{shape:?}"),
            }),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: BnMode,
        hook: &mut dyn ForwardHook<T>,
    ) -> Result<ForwardOut<T>> {
        self.check_input(g.value(x).shape())?;
        let x = hook.activation(g, INPUT_SITE, x)?;
        let mut walk = Walk {
            g,
            params: Cursor {
                vars: &bound.vars,
                pos: 0,
            },
            mode,
            hook,
            bn_ordinal: 0,
            moments: Vec::new(),
        };
        let logits = run_layers(&mut walk, &self.layers, "", x)?;
        Ok(ForwardOut {
            logits,
            moments: walk.moments,
        })
    }

    /// Evaluation-mode logits of a batch, without gradients.
    pub fn logits(&self, batch: &Tensor<T>, hook: &mut dyn ForwardHook<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &bound, x, BnMode::Eval, hook)?;
        Ok(g.value(out.logits).clone())
    }

    /// Applies batch moments from a train-mode pass to the running stats.
    pub fn update_running_stats(&mut self, moments: &[BatchMoments<T>]) {
        for (bn, m) in self.bn_layers_mut().into_iter().zip(moments) {
            let momentum = bn.momentum;
            update_running(&mut bn.running_mean, &mut bn.running_var, m, momentum);
        }
    }
}

fn collect_state_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut Tensor<T>>) {
    // Two passes over disjoint fields: parameters, then running statistics.
    let mut params: Vec<&'a mut Tensor<T>> = Vec::new();
    let mut stats: Vec<&'a mut Tensor<T>> = Vec::new();
    fn walk<'a, T>(layers: &'a mut [Layer<T>], params: &mut Vec<&'a mut Tensor<T>>, stats: &mut Vec<&'a mut Tensor<T>>) {
        for layer in layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    params.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        params.push(b);
                    }
                }
                Layer::BatchNorm(bn) => {
                    params.push(&mut bn.gamma);
                    params.push(&mut bn.beta);
                    stats.push(&mut bn.running_mean);
                    stats.push(&mut bn.running_var);
                }
                Layer::Residual(r) => {
                    walk(&mut r.body, params, stats);
                    walk(&mut r.shortcut, params, stats);
                }
                Layer::Linear(l) => {
                    params.push(&mut l.weight);
                    params.push(&mut l.bias);
                }
                Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
            }
        }
    }
    walk(layers, &mut params, &mut stats);
    out.extend(params);
    out.extend(stats);
}
