//! Checkpoints: safetensors parameter files with a sidecar JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, Classifier, ConditionalGenerator, GeneratorConfig, Normalization, TeacherModel};
use crate::quant::QuantizedModelSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SHA-256 over tensor names, shapes and little-endian values.
pub fn state_digest<T: Scalar>(state: &[(String, &Tensor<T>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in state {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Sidecar manifest path for a checkpoint file (`x.safetensors` -> `x.json`).
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_tensors<T: Scalar>(path: &Path, state: &[(String, &Tensor<T>)]) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = state
        .iter()
        .map(|(n, t)| (n.clone(), t.to_le_bytes(), t.shape().to_vec()))
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (name, data, shape) in &bytes {
        let view = TensorView::new(T::DTYPE, shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        views.push((name.clone(), view));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    safetensors::serialize_to_file(views, &None, path).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = match view.dtype() {
            Dtype::F32 => Tensor::<f32>::from_le_bytes(view.shape(), view.data())?.cast::<T>(),
            Dtype::F64 => Tensor::<f64>::from_le_bytes(view.shape(), view.data())?.cast::<T>(),
            other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
        };
        out.insert(name, t);
    }
    Ok(out)
}

/// Copies named tensors into `target`, requiring an exact name/shape match.
pub fn load_into<T: Scalar>(target: Vec<(String, &mut Tensor<T>)>, mut source: BTreeMap<String, Tensor<T>>) -> Result<()> {
    for (name, slot) in target {
        let t = source
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: shape {:?} does not match model {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = source.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub architecture: String,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub normalization: Normalization,
    /// Top-1 accuracy on the test split at export time.
    pub recorded_accuracy: Option<f64>,
    pub parameter_digest: String,
    pub dtype: String,
    #[serde(default)]
    pub dataset: Option<String>,
    /// Present for quantised students: the spec file next to the weights.
    #[serde(default)]
    pub quant_spec: Option<String>,
    /// Batch norm folded into the convolutions (students only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub folded_bn: bool,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_classifier<T: Scalar>(
    path: &Path,
    net: &Classifier<T>,
    recorded_accuracy: Option<f64>,
    dataset: Option<&str>,
    quant_spec: Option<&QuantizedModelSpec<T>>,
) -> Result<ClassifierManifest> {
    let state = net.state();
    write_tensors(path, &state)?;
    let spec_file = match quant_spec {
        Some(spec) => {
            let p = path.with_extension("qspec.json");
            fs::write(&p, spec.to_json()?)?;
            Some(p.file_name().expect("file name").to_string_lossy().into_owned())
        }
        None => None,
    };
    let manifest = ClassifierManifest {
        architecture: net.arch.id().to_string(),
        num_classes: net.num_classes,
        input_shape: net.input_shape,
        normalization: net.normalization.clone(),
        recorded_accuracy,
        parameter_digest: state_digest(&state),
        dtype: T::NAME.to_string(),
        dataset: dataset.map(str::to_string),
        quant_spec: spec_file,
        folded_bn: net.bn_layers().iter().any(|(_, bn)| bn.eps == T::zero()),
    };
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

pub fn load_classifier<T: Scalar>(path: &Path) -> Result<(Classifier<T>, ClassifierManifest)> {
    let manifest: ClassifierManifest = read_json(&manifest_path(path))?;
    let arch = Architecture::parse(&manifest.architecture)?;
    // Initial values are overwritten below; the RNG only fixes shapes.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = Classifier::new(
        arch,
        manifest.num_classes,
        manifest.input_shape,
        manifest.normalization.clone(),
        &mut rng,
    )?;
    if manifest.folded_bn {
        net = crate::student::fold_batch_norm(&net);
    }
    load_into(net.state_mut(), read_tensors(path)?)?;
    let digest = state_digest(&net.state());
    if manifest.dtype == T::NAME && digest != manifest.parameter_digest {
        return Err(Error::ChecksumMismatch {
            file: path.display().to_string(),
            expected: manifest.parameter_digest.clone(),
            actual: digest,
        });
    }
    Ok((net, manifest))
}

pub fn save_teacher<T: Scalar>(path: &Path, teacher: &TeacherModel<T>, dataset: Option<&str>) -> Result<ClassifierManifest> {
    save_classifier(path, teacher.net(), teacher.recorded_accuracy(), dataset, None)
}

pub fn load_teacher<T: Scalar>(path: &Path) -> Result<(TeacherModel<T>, ClassifierManifest)> {
    let (net, manifest) = load_classifier(path)?;
    Ok((TeacherModel::freeze(net, manifest.recorded_accuracy)?, manifest))
}

pub fn load_quant_spec<T: Scalar>(path: &Path, manifest: &ClassifierManifest) -> Result<QuantizedModelSpec<T>> {
    let name = manifest
        .quant_spec
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no quantization spec", path.display())))?;
    let spec_path = path.with_file_name(name);
    QuantizedModelSpec::from_json(&fs::read_to_string(spec_path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub config: GeneratorConfig,
    pub normalization: Normalization,
    pub parameter_digest: String,
    pub dtype: String,
    /// Digest of the teacher the generator was trained against.
    pub teacher_digest: Option<String>,
    pub loss_mode: Option<String>,
}

pub fn save_generator<T: Scalar>(
    path: &Path,
    g: &ConditionalGenerator<T>,
    teacher_digest: Option<&str>,
    loss_mode: Option<&str>,
) -> Result<GeneratorManifest> {
    let state = g.state();
    write_tensors(path, &state)?;
    let manifest = GeneratorManifest {
        config: g.config.clone(),
        normalization: g.normalization.clone(),
        parameter_digest: state_digest(&state),
        dtype: T::NAME.to_string(),
        teacher_digest: teacher_digest.map(str::to_string),
        loss_mode: loss_mode.map(str::to_string),
    };
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<(ConditionalGenerator<T>, GeneratorManifest)> {
    let manifest: GeneratorManifest = read_json(&manifest_path(path))?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut g = ConditionalGenerator::new(manifest.config.clone(), manifest.normalization.clone(), &mut rng)?;
    load_into(g.state_mut(), read_tensors(path)?)?;
    let digest = state_digest(&g.state());
    if manifest.dtype == T::NAME && digest != manifest.parameter_digest {
        return Err(Error::ChecksumMismatch {
            file: path.display().to_string(),
            expected: manifest.parameter_digest.clone(),
            actual: digest,
        });
    }
    Ok((g, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classifier_round_trip_preserves_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Classifier::<f32>::new(Architecture::MnistBnCnn, 10, [1, 28, 28], Normalization::identity(1), &mut rng)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let m = save_classifier(&path, &net, Some(0.5), Some("mnist-lite"), None).unwrap();
        let (back, m2) = load_classifier::<f32>(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(state_digest(&back.state()), m.parameter_digest);
    }

    #[test]
    fn tampered_weights_fail_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net =
            Classifier::<f32>::new(Architecture::MnistBnCnn, 10, [1, 28, 28], Normalization::identity(1), &mut rng)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        save_classifier(&path, &net, None, None, None).unwrap();
        net.params_mut()[0].data_mut()[0] += 1.0;
        write_tensors(&path, &net.state()).unwrap();
        assert!(matches!(load_classifier::<f32>(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn generator_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GeneratorConfig::for_input([1, 28, 28], 10).unwrap();
        let g = ConditionalGenerator::<f32>::new(cfg, Normalization::identity(1), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.safetensors");
        save_generator(&path, &g, Some("abc"), Some("ce+bns")).unwrap();
        let (back, m) = load_generator::<f32>(&path).unwrap();
        assert_eq!(m.teacher_digest.as_deref(), Some("abc"));
        assert_eq!(state_digest(&back.state()), state_digest(&g.state()));
    }
}
