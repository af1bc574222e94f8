#![allow(dead_code)]

use std::path::PathBuf;

use dfq::nn::{Architecture, Classifier, ConditionalGenerator, GeneratorConfig, Normalization, TeacherModel};
use dfq::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8x8 single-channel BN-CNN with 4 classes and non-trivial running
/// statistics.
pub fn tiny_teacher(seed: u64) -> TeacherModel<f64> {
    let mut r = rng(seed);
    let mut net = Classifier::new(Architecture::MnistBnCnn, 4, [1, 8, 8], Normalization::identity(1), &mut r).unwrap();
    for bn in net.bn_layers_mut() {
        for v in bn.running_mean.data_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
        for v in bn.running_var.data_mut() {
            *v = r.gen_range(0.3..2.0);
        }
    }
    TeacherModel::freeze(net, None).unwrap()
}

pub fn tiny_generator_config(num_classes: usize) -> GeneratorConfig {
    GeneratorConfig {
        noise_dim: 6,
        num_classes,
        init_size: 2,
        channels: vec![4, 3, 2],
        out_shape: [1, 8, 8],
    }
}

pub fn tiny_generator(teacher: &TeacherModel<f64>, seed: u64) -> ConditionalGenerator<f64> {
    let cfg = tiny_generator_config(teacher.num_classes());
    ConditionalGenerator::new(cfg, teacher.net().normalization.clone(), &mut rng(seed)).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Dataset root: `DFQ_DATA_DIR` or the workspace `data/` directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(dfq::data::DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn have_mnist_lite() -> bool {
    data_root().join("mnist-lite").join("SHA256SUMS").exists()
}
