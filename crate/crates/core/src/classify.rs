//! Supervised classifier training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSource, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Architecture, BnMode, Classifier, NoHook, TeacherModel};
use crate::optim::{cosine_lr, Optimizer, Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Top-1 accuracy of `predict` over a dataset, batched in order.
pub fn evaluate_with<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for idx in ds.sequential_batches(batch_size) {
        let (x, y) = ds.batch::<T>(&idx);
        let logits = predict(&x)?;
        correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Evaluation-mode top-1 accuracy of a classifier.
pub fn evaluate<T: Scalar>(net: &Classifier<T>, ds: &Dataset) -> Result<f64> {
    evaluate_with(ds, 256, |x| net.logits(x, &mut NoHook))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub dataset: String,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Random crop (4px padding) and horizontal flip.
    pub augment: bool,
    /// Use only the first `n` training items (0 = all).
    #[serde(default)]
    pub train_limit: usize,
    pub seed: u64,
}

impl TeacherTrainConfig {
    /// Small BN-CNN on MNIST-format digits.
    pub fn mnist(dataset: &str) -> Self {
        Self {
            dataset: dataset.into(),
            architecture: Architecture::MnistBnCnn,
            epochs: 4,
            batch_size: 64,
            lr: 0.05,
            weight_decay: 5e-4,
            augment: false,
            train_limit: 0,
            seed: 0,
        }
    }

    /// Residual network on CIFAR-10.
    pub fn cifar10() -> Self {
        Self {
            dataset: "cifar10".into(),
            architecture: Architecture::ResnetMini,
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            weight_decay: 5e-4,
            augment: true,
            train_limit: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn augment<T: Scalar, R: Rng>(x: &mut Tensor<T>, rng: &mut R) {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let src = x.data().to_vec();
    let data = x.data_mut();
    for n in 0..shape[0] {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-4i64..=4);
        let dx = rng.gen_range(-4i64..=4);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let sj = if flip { w - 1 - j } else { j } as i64 + dx;
                    let si = i as i64 + dy;
                    let v = if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                        T::zero()
                    } else {
                        src[n * per + ch * h * w + si as usize * w + sj as usize]
                    };
                    data[n * per + ch * h * w + i * w + j] = v;
                }
            }
        }
    }
}

/// Trains `net` with label cross-entropy and Nesterov SGD under a cosine
/// schedule, updating BN running statistics.
pub fn train_classifier<T: Scalar>(
    net: &mut Classifier<T>,
    train: &Dataset,
    cfg: &TeacherTrainConfig,
) -> Result<Vec<EpochRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(SgdConfig {
        momentum: 0.9,
        nesterov: true,
        weight_decay: cfg.weight_decay,
    });
    let steps_per_epoch = train.len() / cfg.batch_size.max(1);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for idx in train.shuffled_batches(cfg.batch_size, &mut rng) {
            let (mut x, y) = train.batch::<T>(&idx);
            if cfg.augment {
                augment(&mut x, &mut rng);
            }
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let xv = g.constant(x);
            let out = net.forward(&mut g, &bound, xv, BnMode::Train, &mut NoHook)?;
            let loss = g.label_cross_entropy(out.logits, &y)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: step,
                    what: "teacher loss".into(),
                    last_good: None,
                });
            }
            correct += g.value(out.logits).argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();
            loss_sum += lv * y.len() as f64;
            let grads = g.backward(loss)?;
            let gv = bound.grads(&grads);
            opt.step(net.params_mut(), &gv, cosine_lr(cfg.lr, step, total));
            net.update_running_stats(&out.moments);
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
        };
        log::info!("teacher epoch {epoch}: loss {:.4} acc {:.4}", rec.loss, rec.train_accuracy);
        history.push(rec);
    }
    Ok(history)
}

/// Trains a teacher from scratch and freezes it with its test accuracy.
pub fn build_desk_teacher<T: Scalar>(
    cfg: &TeacherTrainConfig,
    source: &DataSource,
) -> Result<(TeacherModel<T>, Vec<EpochRecord>)> {
    if cfg.epochs == 0 {
        return Err(Error::Config("teacher must be trained before export".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut train = source.load(&cfg.dataset, Split::Train)?;
    if cfg.train_limit > 0 {
        train = train.take(cfg.train_limit);
    }
    let test = source.load(&cfg.dataset, Split::Test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Classifier::new(
        cfg.architecture,
        train.num_classes,
        train.shape,
        train.normalization.clone(),
        &mut rng,
    )?;
    let history = train_classifier(&mut net, &train, cfg)?;
    let acc = evaluate(&net, &test)?;
    Ok((TeacherModel::freeze(net, Some(acc))?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Normalization;

    #[test]
    fn zero_epochs_is_rejected() {
        let mut cfg = TeacherTrainConfig::mnist("mnist-lite");
        cfg.epochs = 0;
        let err = build_desk_teacher::<f32>(&cfg, &DataSource::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("teacher must be trained before export"));
    }

    #[test]
    fn constant_predictor_scores_class_share() {
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let ds = Dataset::from_raw(
            "t",
            Split::Test,
            [1, 1, 1],
            10,
            Normalization::identity(1),
            vec![0; 50],
            labels,
        )
        .unwrap();
        let acc = evaluate_with::<f32>(&ds, 7, |x| {
            let b = x.shape()[0];
            let mut l = Tensor::zeros(&[b, 10]);
            for n in 0..b {
                l.data_mut()[n * 10] = 1.0;
            }
            Ok(l)
        })
        .unwrap();
        assert_eq!(acc, 0.1);
    }
}
