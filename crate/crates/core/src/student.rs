//! Quantised students: min/max calibration and fake-quantised forward
//! passes with straight-through gradients.

use std::collections::BTreeSet;

use crate::checkpoint::state_digest;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BnMode, Bound, Classifier, ForwardHook, Layer, TeacherModel, INPUT_SITE};
use crate::quant::{ema_range, QuantParams, QuantizedModelSpec, RangeObserver, Site, SiteKind, QAT_EMA_DECAY};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit width assignment for a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitPlan {
    pub bits: u32,
    /// Keep the input, first and last weights and the logits at 8 bits.
    pub keep_io_8bit: bool,
    /// Separate weight parameters for every output channel.
    pub per_channel: bool,
    /// Fold batch norm into the preceding convolution before calibrating
    /// (see [`fold_batch_norm`]).
    pub fold_bn: bool,
}

impl BitPlan {
    pub fn uniform(bits: u32) -> Self {
        Self {
            bits,
            keep_io_8bit: false,
            per_channel: false,
            fold_bn: false,
        }
    }
}

fn fold_layers<T: Scalar>(layers: &mut [Layer<T>]) {
    for i in 0..layers.len() {
        if let Layer::Residual(r) = &mut layers[i] {
            fold_layers(&mut r.body);
            fold_layers(&mut r.shortcut);
            continue;
        }
        let (head, tail) = layers.split_at_mut(i + 1);
        let (Layer::Conv(conv), Some(Layer::BatchNorm(bn))) = (&mut head[i], tail.first_mut()) else {
            continue;
        };
        let cout = bn.channels();
        let per = conv.weight.numel() / cout;
        let scale: Vec<T> = (0..cout)
            .map(|c| bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps).sqrt())
            .collect();
        for (i, w) in conv.weight.data_mut().iter_mut().enumerate() {
            *w = *w * scale[i / per];
        }
        let mut bias = conv.bias.take().unwrap_or_else(|| Tensor::zeros(&[cout]));
        for (c, b) in bias.data_mut().iter_mut().enumerate() {
            *b = bn.beta.data()[c] + (*b - bn.running_mean.data()[c]) * scale[c];
        }
        conv.bias = Some(bias);
        bn.gamma = Tensor::ones(&[cout]);
        bn.beta = Tensor::zeros(&[cout]);
        bn.running_mean = Tensor::zeros(&[cout]);
        bn.running_var = Tensor::ones(&[cout]);
        bn.eps = T::zero();
    }
}

/// Folds every batch norm into the convolution in front of it: the conv
/// weights absorb `gamma / sqrt(var + eps)` per output channel, the shift
/// moves into the conv bias and the BN becomes an exact identity. The BN
/// nodes stay in place so site names are unchanged; their affine
/// parameters remain trainable.
pub fn fold_batch_norm<T: Scalar>(net: &Classifier<T>) -> Classifier<T> {
    let mut out = net.clone();
    fold_layers(&mut out.layers);
    out
}

/// The network a student built under `plan` starts from.
pub fn student_net<T: Scalar>(teacher: &TeacherModel<T>, plan: BitPlan) -> Classifier<T> {
    if plan.fold_bn {
        fold_batch_norm(teacher.net())
    } else {
        teacher.clone_net()
    }
}

/// Per-output-channel parameters of a weight tensor.
fn channel_params<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<Vec<QuantParams<T>>> {
    let rows = w.shape().first().copied().unwrap_or(1).max(1);
    let per = w.numel() / rows;
    w.data()
        .chunks(per)
        .map(|c| {
            let lo = c.iter().copied().fold(T::infinity(), T::min);
            let hi = c.iter().copied().fold(T::neg_infinity(), T::max);
            QuantParams::from_range(lo, hi, bits)
        })
        .collect()
}

/// Sites at the boundary of the network: the input, the first and last
/// weight tensors and the final activation.
pub fn io_sites(sites: &[Site]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    out.insert(INPUT_SITE.to_string());
    let weights: Vec<&Site> = sites.iter().filter(|s| s.kind == SiteKind::Weight).collect();
    if let (Some(f), Some(l)) = (weights.first(), weights.last()) {
        out.insert(f.name.clone());
        out.insert(l.name.clone());
    }
    if let Some(a) = sites.iter().rev().find(|s| s.kind == SiteKind::Activation) {
        out.insert(a.name.clone());
    }
    out
}

fn tensor_range<T: Scalar>(t: &Tensor<T>) -> (T, T) {
    (t.min(), t.max())
}

struct Observe<'a> {
    obs: &'a mut RangeObserver,
}

impl<T: Scalar> ForwardHook<T> for Observe<'_> {
    fn activation(&mut self, g: &mut Graph<T>, site: &str, x: Var) -> Result<Var> {
        self.obs.observe(site, g.value(x));
        Ok(x)
    }
}

/// Min/max post-training calibration.
///
/// Weight ranges come from each weight tensor; activation ranges are the
/// running min/max over every calibration batch. With `plan.fold_bn` the
/// spec describes the folded network, so build the student with
/// [`quantize_teacher`] rather than [`apply_quant_spec`].
pub fn calibrate_ptq<T: Scalar, I>(teacher: &TeacherModel<T>, batches: I, plan: BitPlan) -> Result<QuantizedModelSpec<T>>
where
    I: IntoIterator<Item = Tensor<T>>,
{
    calibrate_net(&student_net(teacher, plan), batches, plan)
}

/// Calibrates and builds the student in one go, folding first if asked.
pub fn quantize_teacher<T: Scalar, I>(teacher: &TeacherModel<T>, batches: I, plan: BitPlan) -> Result<StudentModel<T>>
where
    I: IntoIterator<Item = Tensor<T>>,
{
    let net = student_net(teacher, plan);
    let spec = calibrate_net(&net, batches, plan)?;
    StudentModel::new(net, spec)
}

fn calibrate_net<T: Scalar, I>(net: &Classifier<T>, batches: I, plan: BitPlan) -> Result<QuantizedModelSpec<T>>
where
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut obs = RangeObserver::new();
    let mut seen = 0usize;
    for batch in batches {
        net.logits(&batch, &mut Observe { obs: &mut obs })?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Contract("calibration needs at least one batch".into()));
    }
    spec_from_ranges(net, &obs, plan)
}

/// Builds a spec from observed activation ranges and the net's weights.
pub fn spec_from_ranges<T: Scalar>(net: &Classifier<T>, obs: &RangeObserver, plan: BitPlan) -> Result<QuantizedModelSpec<T>> {
    let sites = net.quant_sites();
    let io = io_sites(&sites);
    let bits_for = |name: &str| if plan.keep_io_8bit && io.contains(name) { 8 } else { plan.bits };
    let params = net.params();
    let mut spec = QuantizedModelSpec::new();
    for site in &sites {
        let bits = bits_for(&site.name);
        let p = match site.kind {
            SiteKind::Weight => {
                let w = params
                    .iter()
                    .find(|(n, _)| *n == site.name)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| Error::Contract(format!("no weight tensor for site {}", site.name)))?;
                if plan.per_channel {
                    spec.insert_channels(&site.name, channel_params(w, bits)?);
                }
                let (lo, hi) = tensor_range(w);
                QuantParams::from_range(lo, hi, bits)?
            }
            SiteKind::Activation => {
                let (lo, hi) = obs
                    .range(&site.name)
                    .ok_or_else(|| Error::CoverageGap {
                        missing: vec![site.name.clone()],
                    })?;
                QuantParams::from_range(T::lit(lo), T::lit(hi), bits)?
            }
        };
        spec.insert(&site.name, site.kind, p);
    }
    Ok(spec)
}

/// How a fake-quantised forward pass treats activation ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangeMode {
    /// Use the stored parameters as they are.
    Frozen,
    /// Move activation ranges toward the batch min/max with this decay and
    /// refit weight ranges to the current weights.
    Ema(f64),
}

/// Applies fake quantisation at every site of a spec.
pub struct FakeQuantHook<'a, T: Scalar> {
    pub spec: &'a mut QuantizedModelSpec<T>,
    pub mode: RangeMode,
}

impl<T: Scalar> FakeQuantHook<'_, T> {
    fn params(&mut self, site: &str, value: &Tensor<T>, weight: bool) -> Result<QuantParams<T>> {
        let current = *self.spec.get(site).ok_or_else(|| Error::CoverageGap {
            missing: vec![site.to_string()],
        })?;
        let RangeMode::Ema(decay) = self.mode else {
            return Ok(current);
        };
        let (lo, hi) = tensor_range(value);
        let p = if weight {
            QuantParams::from_range(lo, hi, current.num_bits)?
        } else {
            let (a, b) = ema_range(
                (current.observed_min.as_f64(), current.observed_max.as_f64()),
                (lo.as_f64(), hi.as_f64()),
                decay,
            );
            QuantParams::from_range(T::lit(a), T::lit(b), current.num_bits)?
        };
        *self.spec.get_mut(site).expect("checked above") = p;
        Ok(p)
    }
}

impl<T: Scalar> ForwardHook<T> for FakeQuantHook<'_, T> {
    fn weight(&mut self, g: &mut Graph<T>, site: &str, w: Var) -> Result<Var> {
        let p = self.params(site, g.value(w), true)?;
        let Some(bits) = self.spec.channel_params(site).map(|c| c[0].num_bits) else {
            return Ok(g.fake_quant(w, &p));
        };
        if matches!(self.mode, RangeMode::Ema(_)) {
            let fresh = channel_params(g.value(w), bits)?;
            *self.spec.channel_params_mut(site).expect("present") = fresh;
        }
        let ps = self.spec.channel_params(site).expect("present").to_vec();
        g.fake_quant_per_channel(w, &ps)
    }

    fn activation(&mut self, g: &mut Graph<T>, site: &str, x: Var) -> Result<Var> {
        let p = self.params(site, g.value(x), false)?;
        Ok(g.fake_quant(x, &p))
    }
}

/// A fake-quantised copy of a teacher.
///
/// Batch norm always uses the running statistics copied from the teacher;
/// QAT trains the weights and BN affine parameters only.
#[derive(Clone, Debug)]
pub struct StudentModel<T: Scalar> {
    pub net: Classifier<T>,
    pub spec: QuantizedModelSpec<T>,
    /// Skip every fake-quant node (full-precision student).
    pub bypass: bool,
    pub ema_decay: f64,
}

/// Clones the teacher into a student quantised by `spec`.
pub fn apply_quant_spec<T: Scalar>(teacher: &TeacherModel<T>, spec: QuantizedModelSpec<T>) -> Result<StudentModel<T>> {
    StudentModel::new(teacher.clone_net(), spec)
}

impl<T: Scalar> StudentModel<T> {
    pub fn new(net: Classifier<T>, spec: QuantizedModelSpec<T>) -> Result<Self> {
        spec.check_coverage(&net.quant_sites())?;
        Ok(Self {
            net,
            spec,
            bypass: false,
            ema_decay: QAT_EMA_DECAY,
        })
    }

    pub fn bits(&self) -> Option<u32> {
        self.spec.uniform_bits()
    }

    /// Builds the forward pass in `g`. With `training`, activation ranges
    /// follow the EMA and weight ranges track the current weights.
    pub fn forward(&mut self, g: &mut Graph<T>, bound: &Bound, x: Var, training: bool) -> Result<Var> {
        if self.bypass {
            return Ok(self.net.forward(g, bound, x, BnMode::Eval, &mut crate::nn::NoHook)?.logits);
        }
        let mode = if training { RangeMode::Ema(self.ema_decay) } else { RangeMode::Frozen };
        let mut hook = FakeQuantHook {
            spec: &mut self.spec,
            mode,
        };
        Ok(self.net.forward(g, bound, x, BnMode::Eval, &mut hook)?.logits)
    }

    /// Evaluation logits with frozen quantisation parameters.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.bypass {
            return self.net.logits(batch, &mut crate::nn::NoHook);
        }
        let mut spec = self.spec.clone();
        let mut hook = FakeQuantHook {
            spec: &mut spec,
            mode: RangeMode::Frozen,
        };
        self.net.logits(batch, &mut hook)
    }

    /// Refits every weight site to the current weights.
    pub fn refresh_weight_params(&mut self) -> Result<()> {
        let updates: Vec<(String, QuantParams<T>)> = self
            .net
            .params()
            .into_iter()
            .filter_map(|(name, t)| {
                let bits = self.spec.get(&name)?.num_bits;
                let (lo, hi) = tensor_range(t);
                Some(QuantParams::from_range(lo, hi, bits).map(|p| (name, p)))
            })
            .collect::<Result<_>>()?;
        for (name, p) in updates {
            *self.spec.get_mut(&name).expect("filtered above") = p;
        }
        let per_channel: Vec<(String, u32)> = self
            .net
            .params()
            .into_iter()
            .filter_map(|(name, _)| self.spec.channel_params(&name).map(|c| (name, c[0].num_bits)))
            .collect();
        for (name, bits) in per_channel {
            let w = self.net.params().into_iter().find(|(n, _)| *n == name).expect("listed above").1;
            let fresh = channel_params(w, bits)?;
            *self.spec.channel_params_mut(&name).expect("listed above") = fresh;
        }
        Ok(())
    }

    /// Digest over parameters, running statistics and quantisation spec.
    pub fn digest(&self) -> Result<String> {
        let mut state = self.net.state();
        let spec = Tensor::from_vec(&[0], Vec::new())?;
        let marker = format!("spec:{}", self.spec.to_json()?);
        state.push((marker, &spec));
        Ok(state_digest(&state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Normalization};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn teacher() -> TeacherModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Classifier::new(Architecture::MnistBnCnn, 4, [1, 8, 8], Normalization::identity(1), &mut rng).unwrap();
        TeacherModel::freeze(net, None).unwrap()
    }

    fn batch(seed: u64, scale: f64) -> Tensor<f64> {
        Tensor::randn(&[3, 1, 8, 8], scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn calibration_covers_every_site() {
        let t = teacher();
        let spec = calibrate_ptq(&t, vec![batch(1, 1.0)], BitPlan::uniform(8)).unwrap();
        spec.check_coverage(&t.net().quant_sites()).unwrap();
        assert_eq!(spec.uniform_bits(), Some(8));
    }

    #[test]
    fn empty_calibration_stream_fails() {
        assert!(calibrate_ptq(&teacher(), Vec::<Tensor<f64>>::new(), BitPlan::uniform(8)).is_err());
    }

    #[test]
    fn input_range_is_running_min_max() {
        let t = teacher();
        let a = batch(1, 1.0);
        let b = batch(2, 3.0);
        let spec = calibrate_ptq(&t, vec![a.clone(), b.clone()], BitPlan::uniform(8)).unwrap();
        let p = spec.get(INPUT_SITE).unwrap();
        assert_eq!(p.observed_max, a.max().max(b.max()).max(0.0));
        assert_eq!(p.observed_min, a.min().min(b.min()).min(0.0));
    }

    #[test]
    fn bypassed_student_matches_teacher_exactly() {
        let t = teacher();
        let spec = calibrate_ptq(&t, vec![batch(1, 1.0)], BitPlan::uniform(6)).unwrap();
        let mut s = apply_quant_spec(&t, spec).unwrap();
        s.bypass = true;
        let x = batch(9, 1.0);
        assert_eq!(s.logits(&x).unwrap(), t.forward(&x).unwrap());
    }

    #[test]
    fn missing_site_is_reported() {
        let t = teacher();
        let full = calibrate_ptq(&t, vec![batch(1, 1.0)], BitPlan::uniform(8)).unwrap();
        let mut partial = QuantizedModelSpec::new();
        for (name, kind, p) in full.iter().filter(|(n, _, _)| *n != INPUT_SITE) {
            partial.insert(name, kind, *p);
        }
        match apply_quant_spec(&t, partial) {
            Err(Error::CoverageGap { missing }) => assert_eq!(missing, vec![INPUT_SITE.to_string()]),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn keep_io_8bit_marks_boundary_sites() {
        let t = teacher();
        let spec = calibrate_ptq(
            &t,
            vec![batch(1, 1.0)],
            BitPlan {
                keep_io_8bit: true,
                ..BitPlan::uniform(6)
            },
        )
        .unwrap();
        let io = io_sites(&t.net().quant_sites());
        assert_eq!(io.len(), 4);
        for (name, _, p) in spec.iter() {
            assert_eq!(p.num_bits, if io.contains(name) { 8 } else { 6 }, "{name}");
        }
    }

    #[test]
    fn ema_moves_activation_ranges() {
        let t = teacher();
        let spec = calibrate_ptq(&t, vec![batch(1, 1.0)], BitPlan::uniform(8)).unwrap();
        let mut s = apply_quant_spec(&t, spec.clone()).unwrap();
        let mut g = Graph::new();
        let bound = s.net.bind(&mut g, true);
        let x = g.constant(batch(3, 10.0));
        s.forward(&mut g, &bound, x, true).unwrap();
        let before = spec.get(INPUT_SITE).unwrap().observed_max;
        let after = s.spec.get(INPUT_SITE).unwrap().observed_max;
        assert!(after > before);
        let expected = 0.99 * before + 0.01 * batch(3, 10.0).max();
        assert!((after - expected).abs() < 1e-12);
    }

    fn trained_like_teacher() -> TeacherModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Classifier::new(Architecture::ResnetMini, 4, [3, 8, 8], Normalization::identity(3), &mut rng).unwrap();
        for bn in net.bn_layers_mut() {
            use rand::Rng;
            for v in bn.gamma.data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
            for v in bn.beta.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            for v in bn.running_mean.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            for v in bn.running_var.data_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
        }
        TeacherModel::freeze(net, None).unwrap()
    }

    #[test]
    fn folding_preserves_the_function() {
        let t = trained_like_teacher();
        let folded = fold_batch_norm(t.net());
        assert_eq!(folded.quant_sites(), t.net().quant_sites());
        let x = Tensor::randn(&[5, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let a = t.forward(&x).unwrap();
        let b = folded.logits(&x, &mut crate::nn::NoHook).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn per_channel_spec_has_a_row_per_output_channel() {
        let t = teacher();
        let plan = BitPlan {
            per_channel: true,
            ..BitPlan::uniform(8)
        };
        let student = quantize_teacher(&t, vec![batch(1, 1.0)], plan).unwrap();
        for (name, w) in t.net().params() {
            if let Some(ps) = student.spec.channel_params(&name) {
                assert_eq!(ps.len(), w.shape()[0], "{name}");
            }
        }
        let convs = t.net().quant_sites().iter().filter(|s| s.kind == SiteKind::Weight).count();
        let covered = t.net().params().iter().filter(|(n, _)| student.spec.channel_params(n).is_some()).count();
        assert_eq!(covered, convs);
        let back = QuantizedModelSpec::<f64>::from_json(&student.spec.to_json().unwrap()).unwrap();
        assert_eq!(back, student.spec);

        // every channel grid is at least as fine as the whole-tensor grid
        for (name, _, p) in student.spec.iter() {
            for c in student.spec.channel_params(name).unwrap_or(&[]) {
                assert!(c.scale <= p.scale * (1.0 + 1e-12), "{name}");
            }
        }
    }

    #[test]
    fn folded_student_is_close_to_teacher() {
        let t = trained_like_teacher();
        let plan = BitPlan {
            fold_bn: true,
            ..BitPlan::uniform(8)
        };
        let x = Tensor::randn(&[6, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut s = quantize_teacher(&t, vec![x.clone()], plan).unwrap();
        s.bypass = true;
        assert!(s.logits(&x).unwrap().max_abs_diff(&t.forward(&x).unwrap()) < 1e-10);
    }
}
