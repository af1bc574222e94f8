//! Batch-norm statistics matching.
//!
//! The teacher's BN layers store running means and variances of their
//! inputs. A generated batch is pushed through the teacher in evaluation
//! mode, the per-channel moments of every BN input are measured, and the
//! mismatch is scored as a sum of per-channel Gaussian KL divergences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{channel_moments_of, Graph, Var};
use crate::nn::{BnCapture, Classifier, TeacherModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the empirical variance inside the divergence.
pub const BNS_EPS: f64 = 1e-6;

/// `KL(N(mu_hat, var_hat) || N(mu, var))` with `var_hat` floored at `eps`:
/// `((mu_hat - mu)^2 + var_hat) / (2 var) - log(sd_hat / sd) - 1/2`.
pub fn gaussian_kl<T: Scalar>(mu_hat: T, var_hat: T, mu: T, var: T, eps: T) -> Result<T> {
    if !(var > T::zero()) || !var.is_finite() {
        return Err(Error::Domain(format!("reference variance must be positive and finite, got {var}")));
    }
    if !(var_hat >= T::zero()) || !var_hat.is_finite() || !mu_hat.is_finite() || !mu.is_finite() {
        return Err(Error::Domain(format!(
            "invalid moments: mean {mu_hat}, variance {var_hat} against mean {mu}"
        )));
    }
    let half = T::lit(0.5);
    let vh = var_hat.max(eps);
    let d = mu_hat - mu;
    Ok((d * d + vh) / (T::lit(2.0) * var) - half * (vh / var).ln() - half)
}

/// Partial derivatives of [`gaussian_kl`] with respect to `(mu_hat, var_hat)`.
pub(crate) fn gaussian_kl_grad<T: Scalar>(mu_hat: T, var_hat: T, mu: T, var: T, eps: T) -> (T, T) {
    let dm = (mu_hat - mu) / var;
    let dv = if var_hat >= eps {
        T::lit(0.5) / var - T::lit(0.5) / var_hat
    } else {
        T::zero()
    };
    (dm, dv)
}

/// Statistics of one BN layer, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats<T> {
    /// Path of the BN layer inside the classifier.
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `(layer, channel) -> (mean, variance)` over every BN layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct BNStatsTable<T> {
    pub layers: Vec<LayerStats<T>>,
}

#[derive(Serialize, Deserialize)]
struct StatsRow {
    layer: usize,
    layer_name: String,
    channel: usize,
    mean: f64,
    variance: f64,
}

impl<T: Scalar> BNStatsTable<T> {
    /// Number of `(layer, channel)` entries.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.mean.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, s)| (0..s.mean.len()).map(move |c| (l, c)))
            .collect()
    }

    pub fn get(&self, layer: usize, channel: usize) -> Option<(T, T)> {
        let l = self.layers.get(layer)?;
        Some((*l.mean.get(channel)?, *l.var.get(channel)?))
    }

    /// The table restricted to the given layer ordinals.
    pub fn select(&self, layers: &[usize]) -> Self {
        Self {
            layers: layers.iter().map(|&l| self.layers[l].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<StatsRow> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, s)| {
                (0..s.mean.len()).map(move |c| StatsRow {
                    layer: l,
                    layer_name: s.name.clone(),
                    channel: c,
                    mean: s.mean[c].as_f64(),
                    variance: s.var[c].as_f64(),
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rows: Vec<StatsRow> = serde_json::from_str(s)?;
        let mut layers: Vec<LayerStats<T>> = Vec::new();
        for r in rows {
            if r.layer == layers.len() {
                layers.push(LayerStats {
                    name: r.layer_name.clone(),
                    mean: Vec::new(),
                    var: Vec::new(),
                });
            }
            let l = layers
                .get_mut(r.layer)
                .filter(|l| l.mean.len() == r.channel)
                .ok_or_else(|| Error::Config(format!("stats rows out of order at ({}, {})", r.layer, r.channel)))?;
            l.mean.push(T::lit(r.mean));
            l.var.push(T::lit(r.variance));
        }
        Ok(Self { layers })
    }
}

/// Batch statistics of a generated batch at the teacher's BN inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalBNStats<T> {
    pub table: BNStatsTable<T>,
    pub batch_size: usize,
}

/// Running statistics stored in every BN layer, variances floored at
/// [`BNS_EPS`].
pub fn extract_reference_stats<T: Scalar>(net: &Classifier<T>) -> Result<BNStatsTable<T>> {
    let bns = net.bn_layers();
    if bns.is_empty() {
        return Err(Error::NoBatchNorm);
    }
    let eps = T::lit(BNS_EPS);
    Ok(BNStatsTable {
        layers: bns
            .into_iter()
            .map(|(name, bn)| LayerStats {
                name,
                mean: bn.running_mean.data().to_vec(),
                var: bn.running_var.data().iter().map(|&v| v.max(eps)).collect(),
            })
            .collect(),
    })
}

/// Per-channel moments of the input of every teacher BN layer for `batch`.
/// Runs in evaluation mode; the teacher is not modified.
pub fn capture_empirical_stats<T: Scalar>(teacher: &TeacherModel<T>, batch: &Tensor<T>) -> Result<EmpiricalBNStats<T>> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::Contract(format!("BN statistics need a batch of at least 2, got {b}")));
    }
    let mut g = Graph::new();
    let captured = capture_bn_inputs(&mut g, teacher.net(), batch, false)?;
    let names = teacher.net().bn_layers();
    let layers = captured
        .iter()
        .zip(names)
        .map(|(&v, (name, _))| {
            let t = g.value(v);
            let shape = t.shape();
            let (mean, var) = channel_moments_of(t.data(), shape[0], shape[1], shape[2..].iter().product());
            LayerStats { name, mean, var }
        })
        .collect();
    Ok(EmpiricalBNStats {
        table: BNStatsTable { layers },
        batch_size: b,
    })
}

/// Evaluation-mode forward of `net` on a constant batch, returning the BN
/// input nodes.
fn capture_bn_inputs<T: Scalar>(g: &mut Graph<T>, net: &Classifier<T>, batch: &Tensor<T>, grad: bool) -> Result<Vec<Var>> {
    let bound = net.bind(g, false);
    let x = g.leaf(batch.clone(), grad);
    let mut hook = BnCapture::default();
    net.forward(g, &bound, x, crate::nn::BnMode::Eval, &mut hook)?;
    Ok(hook.inputs)
}

fn check_keys<T: Scalar>(a: &BNStatsTable<T>, b: &BNStatsTable<T>) -> Result<()> {
    let ka = a.keys();
    let kb = b.keys();
    if ka == kb {
        return Ok(());
    }
    let missing: Vec<String> = ka
        .iter()
        .filter(|k| !kb.contains(k))
        .chain(kb.iter().filter(|k| !ka.contains(k)))
        .map(|(l, c)| format!("({l}, {c})"))
        .collect();
    Err(Error::KeyMismatch { missing })
}

/// `sum over (l, c)` of the Gaussian KL between empirical and reference
/// statistics.
pub fn bns_loss<T: Scalar>(empirical: &BNStatsTable<T>, reference: &BNStatsTable<T>) -> Result<T> {
    check_keys(empirical, reference)?;
    let eps = T::lit(BNS_EPS);
    let mut total = T::zero();
    for (e, r) in empirical.layers.iter().zip(&reference.layers) {
        for c in 0..e.mean.len() {
            total += gaussian_kl(e.mean[c], e.var[c], r.mean[c], r.var[c], eps)?;
        }
    }
    Ok(total)
}

/// Differentiable BNS loss over captured BN-input nodes.
pub fn bns_loss_graph<T: Scalar>(g: &mut Graph<T>, bn_inputs: &[Var], reference: &BNStatsTable<T>) -> Result<Var> {
    if bn_inputs.len() != reference.layers.len() {
        return Err(Error::KeyMismatch {
            missing: (bn_inputs.len().min(reference.layers.len())..bn_inputs.len().max(reference.layers.len()))
                .map(|l| format!("({l}, *)"))
                .collect(),
        });
    }
    let eps = T::lit(BNS_EPS);
    let mut total: Option<Var> = None;
    for (&x, r) in bn_inputs.iter().zip(&reference.layers) {
        let m = g.channel_moments(x)?;
        let kl = g.gaussian_kl_sum(m, &r.mean, &r.var, eps)?;
        total = Some(match total {
            Some(t) => g.add(t, kl)?,
            None => kl,
        });
    }
    total.ok_or(Error::NoBatchNorm)
}

/// BNS loss of `batch` against the teacher, differentiable in the batch.
/// Returns the loss and its gradient with respect to every pixel.
pub fn bns_loss_and_input_grad<T: Scalar>(teacher: &TeacherModel<T>, batch: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let reference = extract_reference_stats(teacher.net())?;
    let mut g = Graph::new();
    let bound = teacher.net().bind(&mut g, false);
    let x = g.leaf(batch.clone(), true);
    let mut hook = BnCapture::default();
    teacher
        .net()
        .forward(&mut g, &bound, x, crate::nn::BnMode::Eval, &mut hook)?;
    let loss = bns_loss_graph(&mut g, &hook.inputs, &reference)?;
    let mut grads = g.backward(loss)?;
    let gx = grads.take(x).unwrap_or_else(|| Tensor::zeros(batch.shape()));
    Ok((g.value(loss).item(), gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl(a: f64, b: f64, c: f64, d: f64) -> f64 {
        gaussian_kl(a, b, c, d, BNS_EPS).unwrap()
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(kl(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!((kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((kl(0.0, 4.0, 0.0, 1.0) - (2.0 - 2f64.ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_empirical_variance_is_floored() {
        let v = kl(0.0, 0.0, 0.0, 1.0);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn invalid_reference_variance_is_a_domain_error() {
        assert!(matches!(gaussian_kl(0.0, 1.0, 0.0, 0.0, BNS_EPS), Err(Error::Domain(_))));
        assert!(matches!(gaussian_kl(0.0, 1.0, 0.0, -1.0, BNS_EPS), Err(Error::Domain(_))));
        assert!(matches!(gaussian_kl(0.0, -1.0, 0.0, 1.0, BNS_EPS), Err(Error::Domain(_))));
    }

    #[test]
    fn analytic_gradient_matches_difference_quotient() {
        let (m, v, rm, rv) = (0.3, 1.7, -0.2, 0.9);
        let (dm, dv) = gaussian_kl_grad(m, v, rm, rv, BNS_EPS);
        let h = 1e-6;
        let nm = (kl(m + h, v, rm, rv) - kl(m - h, v, rm, rv)) / (2.0 * h);
        let nv = (kl(m, v + h, rm, rv) - kl(m, v - h, rm, rv)) / (2.0 * h);
        assert!((dm - nm).abs() < 1e-8 && (dv - nv).abs() < 1e-8);
    }

    fn table(name: &str, mean: Vec<f64>, var: Vec<f64>) -> BNStatsTable<f64> {
        BNStatsTable {
            layers: vec![LayerStats {
                name: name.into(),
                mean,
                var,
            }],
        }
    }

    #[test]
    fn single_entry_loss() {
        let e = table("a", vec![1.0], vec![1.0]);
        let r = table("a", vec![0.0], vec![1.0]);
        assert!((bns_loss(&e, &r).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(bns_loss(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn key_mismatch_lists_keys() {
        let e = table("a", vec![1.0, 2.0], vec![1.0, 1.0]);
        let r = table("a", vec![0.0], vec![1.0]);
        match bns_loss(&e, &r) {
            Err(Error::KeyMismatch { missing }) => assert_eq!(missing, vec!["(0, 1)".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let t = BNStatsTable {
            layers: vec![
                LayerStats {
                    name: "1".into(),
                    mean: vec![0.25, -1.5],
                    var: vec![1.0, 0.125],
                },
                LayerStats {
                    name: "4".into(),
                    mean: vec![3.0],
                    var: vec![2.0],
                },
            ],
        };
        let back = BNStatsTable::<f64>::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
