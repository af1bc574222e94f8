//! Zero-shot conditional generator training against a frozen teacher.
//!
//! The generator minimises `H(y, T(G(z, y))) + beta * L_BNS` with fresh
//! `(z, y)` every batch; there is no discriminator update.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bn_stats::{bns_loss_graph, extract_reference_stats, BNStatsTable};
use crate::checkpoint::{manifest_path, read_tensors, save_generator, write_tensors};
use crate::error::{Error, Result};
use crate::graph::{BatchMoments, Graph, Var};
use crate::nn::{BnCapture, BnMode, CondGenInput, ConditionalGenerator, TeacherModel};
use crate::optim::{cosine_lr, Adam, AdamConfig, Optimizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    CeOnly,
    #[serde(rename = "bns")]
    BnsOnly,
    #[serde(rename = "ce+bns")]
    CePlusBns,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::CePlusBns, LossMode::CeOnly, LossMode::BnsOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CeOnly => "ce",
            LossMode::BnsOnly => "bns",
            LossMode::CePlusBns => "ce+bns",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossMode::CeOnly),
            "bns" => Ok(LossMode::BnsOnly),
            "ce+bns" | "ce_plus_bns" => Ok(LossMode::CePlusBns),
            _ => Err(Error::Config(format!("unknown loss mode `{s}` (expected ce+bns, ce or bns)"))),
        }
    }

    pub fn uses_ce(self) -> bool {
        self != LossMode::BnsOnly
    }

    pub fn uses_bns(self) -> bool {
        self != LossMode::CeOnly
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZsCganConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss_mode: LossMode,
    pub bns_weight: f64,
    pub seed: u64,
}

impl ZsCganConfig {
    fn with_schedule(epochs: usize, batches_per_epoch: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batches_per_epoch,
            batch_size,
            lr: 1e-3,
            adam: AdamConfig {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            loss_mode: LossMode::CePlusBns,
            bns_weight: 1.0,
            seed: 0,
        }
    }

    /// 200 epochs of 1000 batches of 128.
    pub fn paper() -> Self {
        Self::with_schedule(200, 1000, 128)
    }

    /// Desk schedule: 10 x 100 for 28x28 inputs, 60 x 200 otherwise.
    /// Uses a 10x larger step than the paper schedule, which is too short
    /// to converge at 1e-3.
    pub fn desk(input_shape: [usize; 3]) -> Self {
        let mut cfg = if input_shape[1] <= 28 {
            Self::with_schedule(10, 100, 128)
        } else {
            Self::with_schedule(60, 200, 128)
        };
        cfg.lr = 1e-2;
        cfg
    }

    /// Named profile: `desk` or `paper`.
    pub fn profile(name: &str, input_shape: [usize; 3]) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(input_shape)),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "batches per epoch must be positive and the batch size at least 2".into(),
            ));
        }
        if !(self.bns_weight >= 0.0) || !self.bns_weight.is_finite() {
            return Err(Error::Config(format!("bns_weight must be finite and >= 0, got {}", self.bns_weight)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn conditional_cross_entropy<T: Scalar>(labels: &[usize], teacher_logits: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(teacher_logits.clone());
    let ce = g.label_cross_entropy(l, labels)?;
    Ok(g.value(ce).item())
}

/// Loss terms of one batch. `total = ce_selected + bns_weight * bns_selected`
/// where the selected terms are zero when the mode excludes them; `ce` and
/// `bns` are always the measured values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZsCganLoss<T> {
    pub total: T,
    pub ce: T,
    pub bns: T,
}

struct LossGraph<T> {
    total: Var,
    ce: Var,
    bns: Var,
    logits: Var,
    moments: Vec<BatchMoments<T>>,
}

fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen: &ConditionalGenerator<T>,
    gen_vars: &crate::nn::Bound,
    teacher: &TeacherModel<T>,
    reference: &BNStatsTable<T>,
    input: &CondGenInput<T>,
    mode: LossMode,
    bns_weight: f64,
) -> Result<LossGraph<T>> {
    let z = g.constant(input.z.clone());
    let (images, moments) = gen.forward(g, gen_vars, z, &input.labels, BnMode::Train)?;
    let t_vars = teacher.net().bind(g, false);
    let mut capture = BnCapture::default();
    let out = teacher.net().forward(g, &t_vars, images, BnMode::Eval, &mut capture)?;
    let ce = g.label_cross_entropy(out.logits, &input.labels)?;
    let bns = bns_loss_graph(g, &capture.inputs, reference)?;
    let weighted = g.scale(bns, T::lit(bns_weight));
    let total = match mode {
        LossMode::CeOnly => ce,
        LossMode::BnsOnly => weighted,
        LossMode::CePlusBns => g.add(ce, weighted)?,
    };
    Ok(LossGraph {
        total,
        ce,
        bns,
        logits: out.logits,
        moments,
    })
}

/// Loss terms of a batch with the generator normalising by batch
/// statistics, as during training. Nothing is updated.
pub fn zscgan_loss<T: Scalar>(
    gen: &ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    input: &CondGenInput<T>,
    cfg: &ZsCganConfig,
) -> Result<ZsCganLoss<T>> {
    Ok(zscgan_loss_and_grads(gen, teacher, input, cfg)?.0)
}

/// [`zscgan_loss`] plus the gradient of `total` for every generator
/// parameter, in [`ConditionalGenerator::params`] order.
pub fn zscgan_loss_and_grads<T: Scalar>(
    gen: &ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    input: &CondGenInput<T>,
    cfg: &ZsCganConfig,
) -> Result<(ZsCganLoss<T>, Vec<Tensor<T>>)> {
    let reference = extract_reference_stats(teacher.net())?;
    let mut g = Graph::new();
    let vars = gen.bind(&mut g, true);
    let lg = build_loss(&mut g, gen, &vars, teacher, &reference, input, cfg.loss_mode, cfg.bns_weight)?;
    let grads = g.backward(lg.total)?;
    let loss = ZsCganLoss {
        total: g.value(lg.total).item(),
        ce: g.value(lg.ce).item(),
        bns: g.value(lg.bns).item(),
    };
    let gv = vars
        .vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((loss, gv))
}

/// Result of a single optimisation step.
#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    pub loss: ZsCganLoss<T>,
    /// Fraction of the batch the teacher assigns to the conditioning label.
    pub fidelity: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    cfg: ZsCganConfig,
    adam_t: i32,
    moments: usize,
    step: usize,
    total_steps: usize,
}

/// Optimiser state for the generator, reusable across training phases.
pub struct GeneratorTrainer<T: Scalar> {
    pub cfg: ZsCganConfig,
    reference: BNStatsTable<T>,
    opt: Adam<T>,
    step: usize,
    total_steps: usize,
}

impl<T: Scalar> GeneratorTrainer<T> {
    pub fn new(cfg: ZsCganConfig, teacher: &TeacherModel<T>) -> Result<Self> {
        cfg.validate()?;
        let total_steps = cfg.total_steps();
        Ok(Self {
            reference: extract_reference_stats(teacher.net())?,
            opt: Adam::new(cfg.adam),
            step: 0,
            total_steps,
            cfg,
        })
    }

    /// Extends the cosine schedule by `more` steps (used when generator
    /// updates continue during distillation).
    pub fn extend_schedule(&mut self, more: usize) {
        self.total_steps = self.step + more;
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Writes the optimiser moments next to `path` (tensors) and
    /// `path.json` (schedule position and config).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (t, m, v) = self.opt.moments();
        let names: Vec<String> = (0..m.len())
            .map(|i| format!("m.{i}"))
            .chain((0..v.len()).map(|i| format!("v.{i}")))
            .collect();
        let state: Vec<(String, &Tensor<T>)> = names.into_iter().zip(m.iter().chain(v)).collect();
        write_tensors(path, &state)?;
        let meta = TrainerState {
            cfg: self.cfg.clone(),
            adam_t: t,
            moments: m.len(),
            step: self.step,
            total_steps: self.total_steps,
        };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Restores a trainer written by [`GeneratorTrainer::save`].
    pub fn load(path: &Path, teacher: &TeacherModel<T>) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path(path))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta: TrainerState = serde_json::from_str(&text)?;
        let mut tensors = read_tensors::<T>(path)?;
        let mut take = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            (0..meta.moments)
                .map(|i| {
                    tensors
                        .remove(&format!("{prefix}.{i}"))
                        .ok_or_else(|| Error::Checkpoint(format!("{} lacks {prefix}.{i}", path.display())))
                })
                .collect()
        };
        let (m, v) = (take("m")?, take("v")?);
        let mut trainer = Self::new(meta.cfg, teacher)?;
        trainer.opt.restore(meta.adam_t, m, v);
        trainer.step = meta.step;
        trainer.total_steps = meta.total_steps;
        Ok(trainer)
    }

    /// One Adam step on `input`. Fails without touching the generator if
    /// the loss or a gradient is not finite.
    pub fn step(
        &mut self,
        gen: &mut ConditionalGenerator<T>,
        teacher: &TeacherModel<T>,
        input: &CondGenInput<T>,
    ) -> Result<StepOutcome<T>> {
        let mut g = Graph::new();
        let vars = gen.bind(&mut g, true);
        let lg = build_loss(
            &mut g,
            gen,
            &vars,
            teacher,
            &self.reference,
            input,
            self.cfg.loss_mode,
            self.cfg.bns_weight,
        )?;
        let loss = ZsCganLoss {
            total: g.value(lg.total).item(),
            ce: g.value(lg.ce).item(),
            bns: g.value(lg.bns).item(),
        };
        if !(loss.total.is_finite() && loss.ce.is_finite() && loss.bns.is_finite()) {
            return Err(Error::Numeric(format!(
                "generator loss not finite (total {}, ce {}, bns {})",
                loss.total, loss.ce, loss.bns
            )));
        }
        let grads = g.backward(lg.total)?;
        let gv = vars.grads(&grads);
        if gv.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Numeric("generator gradient not finite".into()));
        }
        let hits = g
            .value(lg.logits)
            .argmax_rows()
            .iter()
            .zip(&input.labels)
            .filter(|(p, y)| p == y)
            .count();
        let lr = cosine_lr(self.cfg.lr, self.step, self.total_steps);
        self.opt.step(gen.params_mut(), &gv, lr);
        gen.update_running_stats(&lg.moments);
        self.step += 1;
        Ok(StepOutcome {
            loss,
            fidelity: hits as f64 / input.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZsCganEpoch {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub bns: f64,
    pub fidelity: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZsCganReport {
    pub loss_mode: Option<LossMode>,
    pub bns_weight: f64,
    pub epochs: Vec<ZsCganEpoch>,
    pub teacher_digest: String,
}

impl ZsCganReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,ce,bns,fidelity,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                e.epoch, e.total, e.ce, e.bns, e.fidelity, e.seconds
            );
        }
        s
    }

    pub fn last(&self) -> Option<&ZsCganEpoch> {
        self.epochs.last()
    }
}

/// Where training artefacts go and what to do after each epoch.
#[derive(Default)]
pub struct TrainHooks<'a, T: Scalar> {
    /// Directory for the last-good checkpoint written on divergence.
    pub out_dir: Option<PathBuf>,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<Box<dyn FnMut(usize, &ConditionalGenerator<T>) -> Result<()> + 'a>>,
}

/// File name of the checkpoint kept when training diverges.
pub const LAST_GOOD: &str = "generator.last-good.safetensors";

fn save_last_good<T: Scalar>(dir: Option<&Path>, gen: &ConditionalGenerator<T>, teacher: &TeacherModel<T>, mode: LossMode) -> Option<PathBuf> {
    let dir = dir?;
    let path = dir.join(LAST_GOOD);
    match save_generator(&path, gen, Some(&teacher.digest()), Some(mode.as_str())) {
        Ok(_) => Some(path),
        Err(e) => {
            log::error!("could not save last-good generator: {e}");
            None
        }
    }
}

/// Trains `gen` for `cfg.epochs * cfg.batches_per_epoch` steps.
///
/// On a non-finite loss or gradient the generator is left at its last good
/// state, which is also written to `hooks.out_dir` if given.
pub fn train_generator<T: Scalar>(
    gen: &mut ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    cfg: &ZsCganConfig,
    hooks: TrainHooks<'_, T>,
) -> Result<ZsCganReport> {
    Ok(train_generator_with_state(gen, teacher, cfg, hooks)?.0)
}

/// [`train_generator`], also returning the optimiser so that later
/// generator updates can continue from it.
pub fn train_generator_with_state<T: Scalar>(
    gen: &mut ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    cfg: &ZsCganConfig,
    mut hooks: TrainHooks<'_, T>,
) -> Result<(ZsCganReport, GeneratorTrainer<T>)> {
    if gen.num_classes() != teacher.num_classes() || gen.config.out_shape != teacher.net().input_shape {
        return Err(Error::Contract(format!(
            "generator ({} classes, {:?}) does not match teacher ({} classes, {:?})",
            gen.num_classes(),
            gen.config.out_shape,
            teacher.num_classes(),
            teacher.net().input_shape
        )));
    }
    let digest = teacher.digest();
    let mut trainer = GeneratorTrainer::new(cfg.clone(), teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = ZsCganReport {
        loss_mode: Some(cfg.loss_mode),
        bns_weight: cfg.bns_weight,
        epochs: Vec::new(),
        teacher_digest: digest.clone(),
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut total, mut ce, mut bns, mut fid) = (0.0, 0.0, 0.0, 0.0);
        for batch in 0..cfg.batches_per_epoch {
            let input = CondGenInput::sample(cfg.batch_size, gen.noise_dim(), gen.num_classes(), &mut rng);
            let out = match trainer.step(gen, teacher, &input) {
                Ok(o) => o,
                Err(Error::Numeric(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch,
                        what,
                        last_good: save_last_good(hooks.out_dir.as_deref(), gen, teacher, cfg.loss_mode),
                    })
                }
                Err(e) => return Err(e),
            };
            total += out.loss.total.as_f64();
            ce += out.loss.ce.as_f64();
            bns += out.loss.bns.as_f64();
            fid += out.fidelity;
        }
        let n = cfg.batches_per_epoch as f64;
        let rec = ZsCganEpoch {
            epoch,
            total: total / n,
            ce: ce / n,
            bns: bns / n,
            fidelity: fid / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "generator epoch {epoch}: total {:.4} ce {:.4} bns {:.4} fidelity {:.3}",
            rec.total,
            rec.ce,
            rec.bns,
            rec.fidelity
        );
        report.epochs.push(rec);
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(epoch, gen)?;
        }
    }
    if teacher.digest() != digest {
        return Err(Error::Contract("teacher parameters changed during generator training".into()));
    }
    Ok((report, trainer))
}

/// Generated images with their conditioning labels and the teacher's
/// softmax outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub teacher_probs: Tensor<T>,
}

impl<T: Scalar> SyntheticBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of samples whose teacher argmax equals the label.
    pub fn fidelity(&self) -> f64 {
        let hits = self
            .teacher_probs
            .argmax_rows()
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / self.len().max(1) as f64
    }

    /// Consecutive chunks of at most `batch_size` images.
    pub fn chunks(&self, batch_size: usize) -> Vec<Tensor<T>> {
        let n = self.len();
        (0..n)
            .step_by(batch_size.max(1))
            .map(|s| self.images.slice_rows(s, batch_size.min(n - s)))
            .collect()
    }
}

/// `n` samples from `gen` (evaluation mode) with uniform labels, labelled
/// by the teacher.
pub fn sample_synthetic<T: Scalar>(
    gen: &ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    n: usize,
    seed: u64,
) -> Result<SyntheticBatch<T>> {
    if n == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut probs = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let chunk = 256;
    let mut left = n;
    while left > 0 {
        let b = left.min(chunk);
        let input = CondGenInput::sample(b, gen.noise_dim(), gen.num_classes(), &mut rng);
        let x = gen.generate(&input)?;
        probs.push(teacher.forward(&x)?.softmax_rows());
        images.push(x);
        labels.extend(input.labels);
        left -= b;
    }
    Ok(SyntheticBatch {
        images: Tensor::concat_rows(&images)?,
        labels,
        teacher_probs: Tensor::concat_rows(&probs)?,
    })
}

/// Label fidelity of `n` fresh samples.
pub fn label_fidelity<T: Scalar>(
    gen: &ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    Ok(sample_synthetic(gen, teacher, n, seed)?.fidelity())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let l = Tensor::<f64>::zeros(&[3, 10]);
        let ce = conditional_cross_entropy(&[0, 4, 9], &l).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_gives_near_zero() {
        let mut l = Tensor::<f64>::zeros(&[1, 10]);
        l.data_mut()[0] = 100.0;
        assert!(conditional_cross_entropy(&[0], &l).unwrap() <= 1e-6);
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let mut l = Tensor::<f64>::zeros(&[1, 3]);
        l.data_mut()[1] = f64::NAN;
        assert!(matches!(conditional_cross_entropy(&[0], &l), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_mode_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(LossMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(LossMode::parse("gan").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ZsCganConfig::desk([1, 28, 28]);
        assert_eq!((c.epochs, c.batches_per_epoch), (10, 100));
        assert_eq!(ZsCganConfig::desk([3, 32, 32]).epochs, 60);
        c.bns_weight = -1.0;
        assert!(c.validate().is_err());
    }
}
