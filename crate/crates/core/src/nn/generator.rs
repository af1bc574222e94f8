//! Conditional generator: noise projection followed by upsampling blocks,
//! where every normalisation is a conditional batch norm whose scale and
//! shift rows are selected by the class label.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BnMode, Bound, Conv2d, Linear, Normalization};
use crate::error::{Error, Result};
use crate::graph::{BatchMoments, Graph, NormStats, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub num_classes: usize,
    /// Spatial size of the projected noise map.
    pub init_size: usize,
    /// Channel count after the projection and after each upsampling block.
    pub channels: Vec<usize>,
    /// Output image shape `(C, H, W)`.
    pub out_shape: [usize; 3],
}

impl GeneratorConfig {
    /// Decoder sized for a classifier input: 32x32 inputs use a 4x4 map and
    /// three upsampling blocks; 28x28 inputs use 7x7 and two blocks.
    pub fn for_input(input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let [c, h, w] = input_shape;
        if h != w {
            return Err(Error::Config(format!("generator needs square images, got {h}x{w}")));
        }
        let (init_size, channels) = match h {
            32 => (4, vec![128, 64, 32, 16]),
            28 => (7, vec![32, 16, 8]),
            _ => {
                return Err(Error::Config(format!(
                    "no generator layout for {h}x{w} inputs (supported: 28, 32)"
                )))
            }
        };
        Ok(Self {
            noise_dim: 128,
            num_classes,
            init_size,
            channels,
            out_shape: [c, h, w],
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.num_classes == 0 || self.init_size == 0 || self.channels.is_empty() {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        let side = self.init_size << self.num_blocks();
        if side != self.out_shape[1] || side != self.out_shape[2] {
            return Err(Error::Config(format!(
                "init size {} with {} blocks gives {side}x{side}, expected {}x{}",
                self.init_size,
                self.num_blocks(),
                self.out_shape[1],
                self.out_shape[2]
            )));
        }
        Ok(())
    }
}

/// Batch norm with one `(scale, shift)` row per class.
#[derive(Clone, Debug)]
pub struct CondBatchNorm<T> {
    /// `(K, C)`
    pub gamma: Tensor<T>,
    /// `(K, C)`
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> CondBatchNorm<T> {
    pub fn new(num_classes: usize, channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[num_classes, channels]),
            beta: Tensor::zeros(&[num_classes, channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    /// Applies the layer in a graph; `gamma`/`beta` are the bound tables.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        g: &mut Graph<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let stats = match mode {
            BnMode::Eval => NormStats::Fixed {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
            },
            BnMode::Train => NormStats::Batch,
        };
        g.norm(x, gamma, beta, Some(labels), stats, self.eps)
    }

    fn update_running(&mut self, m: &BatchMoments<T>) {
        let momentum = self.momentum;
        super::update_running(&mut self.running_mean, &mut self.running_var, m, momentum);
    }
}

/// A batch of generator inputs: noise rows and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CondGenInput<T> {
    /// `(B, noise_dim)`
    pub z: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> CondGenInput<T> {
    /// `z ~ N(0, I)`, `y ~ Uniform{0..K}`.
    pub fn sample<R: Rng>(batch: usize, noise_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let labels = (0..batch).map(|_| rng.gen_range(0..num_classes)).collect();
        let z = (0..batch * noise_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        Self {
            z: Tensor::from_vec(&[batch, noise_dim], z).expect("sized above"),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ConditionalGenerator<T> {
    pub config: GeneratorConfig,
    /// Input normalisation of the teacher the generator feeds.
    pub normalization: Normalization,
    pub project: Linear<T>,
    /// One per stage: after the projection and after every block conv.
    pub cbn: Vec<CondBatchNorm<T>>,
    pub convs: Vec<Conv2d<T>>,
    pub out_conv: Conv2d<T>,
}

impl<T: Scalar> ConditionalGenerator<T> {
    pub fn new<R: Rng>(config: GeneratorConfig, normalization: Normalization, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if normalization.mean.len() != config.out_shape[0] || normalization.std.len() != config.out_shape[0] {
            return Err(Error::Config("normalisation must have one entry per output channel".into()));
        }
        let k = config.num_classes;
        let c0 = config.channels[0];
        let project = Linear::new(config.noise_dim, c0 * config.init_size * config.init_size, rng);
        let mut cbn = vec![CondBatchNorm::new(k, c0)];
        let mut convs = Vec::new();
        for pair in config.channels.windows(2) {
            convs.push(Conv2d::new(pair[0], pair[1], 3, 1, false, rng));
            cbn.push(CondBatchNorm::new(k, pair[1]));
        }
        let last = *config.channels.last().expect("non-empty");
        let out_conv = Conv2d::new(last, config.out_shape[0], 3, 1, true, rng);
        Ok(Self {
            config,
            normalization,
            project,
            cbn,
            convs,
            out_conv,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn noise_dim(&self) -> usize {
        self.config.noise_dim
    }

    /// Per-channel `(lower, upper)` bounds of the generator output.
    pub fn output_bounds(&self) -> Vec<(f64, f64)> {
        (0..self.config.out_shape[0])
            .map(|c| self.normalization.bounds(c))
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("project.weight".to_string(), &self.project.weight),
            ("project.bias".to_string(), &self.project.bias),
            ("cbn.0.gamma".to_string(), &self.cbn[0].gamma),
            ("cbn.0.beta".to_string(), &self.cbn[0].beta),
        ];
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("block.{i}.weight"), &conv.weight));
            out.push((format!("cbn.{}.gamma", i + 1), &self.cbn[i + 1].gamma));
            out.push((format!("cbn.{}.beta", i + 1), &self.cbn[i + 1].beta));
        }
        out.push(("out.weight".to_string(), &self.out_conv.weight));
        out.push((
            "out.bias".to_string(),
            self.out_conv.bias.as_ref().expect("output conv has a bias"),
        ));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let (first, rest) = self.cbn.split_first_mut().expect("non-empty");
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.project.weight,
            &mut self.project.bias,
            &mut first.gamma,
            &mut first.beta,
        ];
        for (conv, bn) in self.convs.iter_mut().zip(rest.iter_mut()) {
            out.push(&mut conv.weight);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.out_conv.weight);
        out.push(self.out_conv.bias.as_mut().expect("output conv has a bias"));
        out
    }

    /// Parameters plus conditional-BN running statistics.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.params();
        for (i, bn) in self.cbn.iter().enumerate() {
            out.push((format!("cbn.{i}.running_mean"), &bn.running_mean));
            out.push((format!("cbn.{i}.running_var"), &bn.running_var));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.state().into_iter().map(|(n, _)| n).collect();
        let mut tensors = Vec::new();
        {
            let (first, rest) = self.cbn.split_first_mut().expect("non-empty");
            tensors.push(&mut self.project.weight);
            tensors.push(&mut self.project.bias);
            tensors.push(&mut first.gamma);
            tensors.push(&mut first.beta);
            let mut stats = vec![&mut first.running_mean, &mut first.running_var];
            for (conv, bn) in self.convs.iter_mut().zip(rest.iter_mut()) {
                tensors.push(&mut conv.weight);
                tensors.push(&mut bn.gamma);
                tensors.push(&mut bn.beta);
                stats.push(&mut bn.running_mean);
                stats.push(&mut bn.running_var);
            }
            tensors.push(&mut self.out_conv.weight);
            tensors.push(self.out_conv.bias.as_mut().expect("output conv has a bias"));
            tensors.extend(stats);
        }
        names.into_iter().zip(tensors).collect()
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

    fn check_input(&self, z_shape: &[usize], labels: &[usize]) -> Result<()> {
        match z_shape {
            [b, d] if *b == labels.len() && *d == self.config.noise_dim && *b > 0 => {}
            _ => {
                return Err(Error::Shape {
                    op: "generator input",
                    expected: format!("({}, {})", labels.len(), self.config.noise_dim),
                    actual: format!("{z_shape:?}"),
                })
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range [0, {})",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Builds `G(z, y)` in `g`. Returns the image node and, in train mode,
    /// the batch moments of every conditional BN.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        z: Var,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(Var, Vec<BatchMoments<T>>)> {
        self.check_input(g.value(z).shape(), labels)?;
        if !g.value(z).all_finite() {
            return Err(Error::Numeric("non-finite generator noise".into()));
        }
        let b = labels.len();
        let v = &bound.vars;
        let mut moments = Vec::new();
        let mut push = |m: Option<BatchMoments<T>>| {
            if let Some(m) = m {
                moments.push(m);
            }
        };
        let s = self.config.init_size;
        let h = g.linear(z, v[0], Some(v[1]))?;
        let h = g.reshape(h, &[b, self.config.channels[0], s, s])?;
        let (h, m) = self.cbn[0].apply(g, h, v[2], v[3], labels, mode)?;
        push(m);
        let mut h = g.relu(h);
        for (i, conv) in self.convs.iter().enumerate() {
            let base = 4 + 3 * i;
            h = g.upsample2x(h)?;
            h = g.conv2d(h, v[base], None, conv.geom)?;
            let (n, m) = self.cbn[i + 1].apply(g, h, v[base + 1], v[base + 2], labels, mode)?;
            push(m);
            h = g.relu(n);
        }
        let last = 4 + 3 * self.convs.len();
        let h = g.conv2d(h, v[last], Some(v[last + 1]), self.out_conv.geom)?;
        let h = g.tanh(h);
        // tanh in [-1, 1] -> pixel in [0, 1] -> teacher normalisation
        let (a, c): (Vec<T>, Vec<T>) = self
            .normalization
            .mean
            .iter()
            .zip(&self.normalization.std)
            .map(|(&m, &sd)| (T::lit(0.5 / sd), T::lit((0.5 - m) / sd)))
            .unzip();
        let out = g.channel_affine(h, &a, &c)?;
        Ok((out, moments))
    }

    /// Evaluation-mode images for a batch of inputs; deterministic in
    /// `(z, y)`.
    pub fn generate(&self, input: &CondGenInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let z = g.constant(input.z.clone());
        let (x, _) = self.forward(&mut g, &bound, z, &input.labels, BnMode::Eval)?;
        Ok(g.value(x).clone())
    }

    pub fn update_running_stats(&mut self, moments: &[BatchMoments<T>]) {
        for (bn, m) in self.cbn.iter_mut().zip(moments) {
            bn.update_running(m);
        }
    }
}
