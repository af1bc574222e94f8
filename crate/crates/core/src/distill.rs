//! Knowledge distillation into quantised students, driven either by a
//! conditional generator (data-free) or by the real training split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_classifier;
use crate::classify::evaluate_with;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{CondGenInput, ConditionalGenerator, TeacherModel};
use crate::optim::{cosine_lr, Optimizer, Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::student::StudentModel;
use crate::tensor::Tensor;
use crate::zscgan::GeneratorTrainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    /// Weight of the distillation term; `1 - lambda` goes to the label loss.
    pub lambda: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// One generator step per student step during data-free training.
    pub continue_generator_updates: bool,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl KdConfig {
    fn with_schedule(epochs: usize, batches_per_epoch: usize) -> Self {
        Self {
            lambda: 1.0,
            temperature: 1.0,
            epochs,
            batches_per_epoch,
            batch_size: 128,
            lr: 1e-4,
            momentum: 0.9,
            continue_generator_updates: true,
            seed: 0,
        }
    }

    /// 50 epochs of 1000 batches.
    pub fn paper() -> Self {
        Self::with_schedule(50, 1000)
    }

    /// 30 epochs of 200 batches.
    pub fn desk() -> Self {
        Self::with_schedule(30, 200)
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch size and batches per epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Without real data there are no labels, so only pure distillation is
    /// allowed.
    pub fn validate_data_free(&self) -> Result<()> {
        self.validate()?;
        if self.lambda != 1.0 {
            return Err(Error::Config(format!(
                "data-free distillation needs lambda = 1 (no ground-truth labels), got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// Graph form of the mixed objective. Labels may be omitted when
/// `lambda == 1`.
pub fn kd_mixed_graph<T: Scalar>(
    g: &mut Graph<T>,
    labels: Option<&[usize]>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    lambda: f64,
    temperature: f64,
) -> Result<Var> {
    let target = g.constant(teacher_logits.clone());
    let kd = g.soft_cross_entropy(target, student_logits, T::lit(temperature))?;
    if lambda == 1.0 {
        return Ok(kd);
    }
    let labels = labels.ok_or_else(|| Error::Contract("lambda < 1 needs ground-truth labels".into()))?;
    let ce = g.label_cross_entropy(student_logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let a = g.scale(ce, T::lit(1.0 - lambda));
    let b = g.scale(kd, T::lit(lambda));
    g.add(a, b)
}

/// Batch mean of `H(softmax(t / T), softmax(s / T))`.
pub fn kd_loss<T: Scalar>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>, temperature: f64) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let l = kd_mixed_graph(&mut g, None, teacher_logits, s, 1.0, temperature)?;
    Ok(g.value(l).item())
}

/// `(1 - lambda) H(y, S) + lambda H(T, S)`.
pub fn kd_mixed_loss<T: Scalar>(
    labels: &[usize],
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
    lambda: f64,
    temperature: f64,
) -> Result<T> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let l = kd_mixed_graph(&mut g, Some(labels), teacher_logits, s, lambda, temperature)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub kd_loss: f64,
    /// Student top-1 on the held-out split, when one was given.
    pub accuracy: Option<f64>,
    pub generator_total: Option<f64>,
    pub generator_ce: Option<f64>,
    pub generator_bns: Option<f64>,
    pub generator_fidelity: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub mode: String,
    pub bits: Option<u32>,
    pub epochs: Vec<DistillEpoch>,
    pub teacher_digest: String,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl DistillReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,kd_loss,accuracy,generator_total,generator_ce,generator_bns,generator_fidelity,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3}",
                e.epoch,
                e.kd_loss,
                opt_cell(e.accuracy),
                opt_cell(e.generator_total),
                opt_cell(e.generator_ce),
                opt_cell(e.generator_bns),
                opt_cell(e.generator_fidelity),
                e.seconds
            );
        }
        s
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.accuracy)
    }
}

/// Where to evaluate and where to leave a checkpoint if training diverges.
#[derive(Clone, Copy, Default)]
pub struct DistillContext<'a> {
    pub test: Option<&'a Dataset>,
    pub out_dir: Option<&'a Path>,
}

/// File name of the student kept when distillation diverges.
pub const LAST_GOOD_STUDENT: &str = "student.last-good.safetensors";

/// Top-1 accuracy of a student with frozen quantisation parameters.
pub fn evaluate_student<T: Scalar>(student: &StudentModel<T>, ds: &Dataset) -> Result<f64> {
    evaluate_with(ds, 256, |x| student.logits(x))
}

struct Batch<T> {
    x: Tensor<T>,
    labels: Option<Vec<usize>>,
    generator: Option<(f64, f64, f64, f64)>,
}

struct Student<'a, T: Scalar> {
    student: &'a mut StudentModel<T>,
    teacher: &'a TeacherModel<T>,
    cfg: &'a KdConfig,
    opt: Sgd<T>,
}

impl<T: Scalar> Student<'_, T> {
    /// One SGD step; the student is untouched if anything is not finite.
    fn step(&mut self, batch: &Batch<T>, lr: f64) -> Result<f64> {
        let teacher_logits = self.teacher.forward(&batch.x)?;
        let mut g = Graph::new();
        let bound = self.student.net.bind(&mut g, true);
        let xv = g.constant(batch.x.clone());
        // Range updates are only committed once the step is known to be good.
        let saved = self.student.spec.clone();
        let logits = self.student.forward(&mut g, &bound, xv, true)?;
        let loss = kd_mixed_graph(
            &mut g,
            batch.labels.as_deref(),
            &teacher_logits,
            logits,
            self.cfg.lambda,
            self.cfg.temperature,
        );
        let loss = match loss {
            Ok(l) => l,
            Err(e) => {
                self.student.spec = saved;
                return Err(e);
            }
        };
        let lv = g.value(loss).item().as_f64();
        let grads = g.backward(loss)?;
        let gv = bound.grads(&grads);
        if !lv.is_finite() || gv.iter().flatten().any(|t| !t.all_finite()) {
            self.student.spec = saved;
            return Err(Error::Numeric(format!("distillation loss or gradient not finite (loss {lv})")));
        }
        self.opt.step(self.student.net.params_mut(), &gv, lr);
        Ok(lv)
    }
}

fn run_loop<T: Scalar>(
    mode: &str,
    student: &mut StudentModel<T>,
    teacher: &TeacherModel<T>,
    cfg: &KdConfig,
    ctx: DistillContext<'_>,
    mut next: impl FnMut(usize) -> Result<Batch<T>>,
) -> Result<DistillReport> {
    let digest = teacher.digest();
    let total = cfg.total_steps();
    let mut report = DistillReport {
        mode: mode.into(),
        bits: student.bits(),
        epochs: Vec::new(),
        teacher_digest: digest.clone(),
    };
    let mut s = Student {
        student,
        teacher,
        cfg,
        opt: Sgd::new(SgdConfig {
            momentum: cfg.momentum,
            nesterov: true,
            weight_decay: 0.0,
        }),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut kd = 0.0;
        let mut gen_sums: Option<[f64; 4]> = None;
        for batch_idx in 0..cfg.batches_per_epoch {
            let outcome = next(batch_idx).and_then(|b| {
                let lv = s.step(&b, cosine_lr(cfg.lr, step, total))?;
                Ok((lv, b.generator))
            });
            let (lv, gen) = match outcome {
                Ok(v) => v,
                Err(Error::Numeric(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        what,
                        last_good: save_last_good(ctx.out_dir, s.student),
                    })
                }
                Err(e) => return Err(e),
            };
            kd += lv;
            if let Some((a, b, c, d)) = gen {
                let acc = gen_sums.get_or_insert([0.0; 4]);
                acc[0] += a;
                acc[1] += b;
                acc[2] += c;
                acc[3] += d;
            }
            step += 1;
        }
        s.student.refresh_weight_params()?;
        let n = cfg.batches_per_epoch as f64;
        let accuracy = ctx.test.map(|ds| evaluate_student(s.student, ds)).transpose()?;
        let rec = DistillEpoch {
            epoch,
            kd_loss: kd / n,
            accuracy,
            generator_total: gen_sums.map(|a| a[0] / n),
            generator_ce: gen_sums.map(|a| a[1] / n),
            generator_bns: gen_sums.map(|a| a[2] / n),
            generator_fidelity: gen_sums.map(|a| a[3] / n),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{mode} epoch {epoch}: kd {:.4} accuracy {}",
            rec.kd_loss,
            rec.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        report.epochs.push(rec);
    }
    if teacher.digest() != digest {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    Ok(report)
}

fn save_last_good<T: Scalar>(dir: Option<&Path>, student: &StudentModel<T>) -> Option<PathBuf> {
    let path = dir?.join(LAST_GOOD_STUDENT);
    match save_classifier(&path, &student.net, None, None, Some(&student.spec)) {
        Ok(_) => Some(path),
        Err(e) => {
            log::error!("could not save last-good student: {e}");
            None
        }
    }
}

/// Data-free QAT: every batch is freshly generated from uniform labels,
/// optionally after one generator step on the same noise, and the student
/// is distilled towards the teacher's outputs on it.
pub fn train_data_free_qat<T: Scalar>(
    student: &mut StudentModel<T>,
    teacher: &TeacherModel<T>,
    gen: &mut ConditionalGenerator<T>,
    mut gen_trainer: Option<&mut GeneratorTrainer<T>>,
    cfg: &KdConfig,
    ctx: DistillContext<'_>,
) -> Result<DistillReport> {
    cfg.validate_data_free()?;
    if gen.num_classes() != teacher.num_classes() || gen.config.out_shape != teacher.net().input_shape {
        return Err(Error::Contract("generator does not match the teacher".into()));
    }
    if cfg.continue_generator_updates {
        match gen_trainer.as_deref_mut() {
            Some(t) => t.extend_schedule(cfg.total_steps()),
            None => return Err(Error::Config("generator updates requested without a generator optimiser".into())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (noise_dim, k) = (gen.noise_dim(), gen.num_classes());
    run_loop("data-free", student, teacher, cfg, ctx, |_| {
        let input = CondGenInput::sample(cfg.batch_size, noise_dim, k, &mut rng);
        let mut generator = None;
        if cfg.continue_generator_updates {
            let t = gen_trainer.as_deref_mut().expect("checked above");
            let out = t.step(gen, teacher, &input)?;
            generator = Some((
                out.loss.total.as_f64(),
                out.loss.ce.as_f64(),
                out.loss.bns.as_f64(),
                out.fidelity,
            ));
        }
        Ok(Batch {
            x: gen.generate(&input)?,
            labels: None,
            generator,
        })
    })
}

/// The same loop on shuffled real training images.
pub fn train_data_dependent_qat<T: Scalar>(
    student: &mut StudentModel<T>,
    teacher: &TeacherModel<T>,
    train: &Dataset,
    cfg: &KdConfig,
    ctx: DistillContext<'_>,
) -> Result<DistillReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Ingestion("training split is empty".into()));
    }
    if train.shape != teacher.net().input_shape {
        return Err(Error::Contract(format!(
            "dataset shape {:?} does not match the teacher input {:?}",
            train.shape,
            teacher.net().input_shape
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    run_loop("data-dependent", student, teacher, cfg, ctx, |_| {
        if queue.is_empty() {
            queue = train.shuffled_batches(cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("refilled above");
        let (x, y) = train.batch::<T>(&idx);
        Ok(Batch {
            x,
            labels: Some(y),
            generator: None,
        })
    })
}
