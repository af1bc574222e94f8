//! Asymmetric affine per-tensor quantisation.
//!
//! `q = clamp(round(x / scale) + zero_point, qmin, qmax)`,
//! `x' = (q - zero_point) * scale`, with rounding half away from zero and a
//! range that always contains 0 so that zero is exactly representable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit widths accepted by [`QuantParams::from_range`].
pub const SUPPORTED_BITS: [u32; 2] = [6, 8];

/// Decay of the exponential moving average used for QAT activation ranges.
pub const QAT_EMA_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams<T> {
    pub num_bits: u32,
    pub qmin: i64,
    pub qmax: i64,
    pub scale: T,
    pub zero_point: i64,
    pub observed_min: T,
    pub observed_max: T,
}

impl<T: Scalar> QuantParams<T> {
    /// Quantisation parameters covering `[min, max]` (widened to include 0).
    pub fn from_range(min: T, max: T, bits: u32) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::Numeric(format!("non-finite quantisation range [{min}, {max}]")));
        }
        if min > max {
            return Err(Error::Contract(format!("quantisation range min {min} > max {max}")));
        }
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Contract(format!("unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}")));
        }
        let qmin = 0i64;
        let qmax = (1i64 << bits) - 1;
        let lo = min.min(T::zero());
        let hi = max.max(T::zero());
        let levels = T::lit((qmax - qmin) as f64);
        let width = hi - lo;
        if width == T::zero() {
            // Only reachable for an all-zero range once zero is forced in.
            return Ok(Self {
                num_bits: bits,
                qmin,
                qmax,
                scale: T::one(),
                zero_point: qmin,
                observed_min: lo,
                observed_max: hi,
            });
        }
        let scale = width / levels;
        // qmin - lo/scale, written so that e.g. [-1, 1] gives exactly 127.5.
        let zp_real = T::lit(qmin as f64) + (-lo * levels) / width;
        let zero_point = zp_real.round().to_i64().unwrap_or(qmin).clamp(qmin, qmax);
        Ok(Self {
            num_bits: bits,
            qmin,
            qmax,
            scale,
            zero_point,
            observed_min: lo,
            observed_max: hi,
        })
    }

    #[inline]
    pub fn quantize_value(&self, x: T) -> i64 {
        let r = (x / self.scale).round() + T::lit(self.zero_point as f64);
        let r = r.max(T::lit(self.qmin as f64)).min(T::lit(self.qmax as f64));
        r.to_i64().unwrap_or(self.qmin)
    }

    #[inline]
    pub fn dequantize_value(&self, q: i64) -> T {
        T::lit((q - self.zero_point) as f64) * self.scale
    }

    #[inline]
    pub fn fake_quant_value(&self, x: T) -> T {
        self.dequantize_value(self.quantize_value(x))
    }

    /// Straight-through gradient: 1 inside the observed range, 0 outside.
    #[inline]
    pub fn ste_mask_value(&self, x: T) -> T {
        if x >= self.observed_min && x <= self.observed_max {
            T::one()
        } else {
            T::zero()
        }
    }
}

/// Integer tensor of quantised codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

pub fn quantize<T: Scalar>(x: &Tensor<T>, p: &QuantParams<T>) -> QTensor {
    QTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
    }
}

pub fn dequantize<T: Scalar>(q: &QTensor, p: &QuantParams<T>) -> Tensor<T> {
    Tensor::from_vec(&q.shape, q.data.iter().map(|&v| p.dequantize_value(v)).collect())
        .expect("shape carried by QTensor")
}

/// Forward value of fake quantisation (`dequantize(quantize(x))`).
pub fn fake_quant<T: Scalar>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    x.map(|v| p.fake_quant_value(v))
}

/// Gradient of fake quantisation with respect to its input.
pub fn fake_quant_grad<T: Scalar>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    x.map(|v| p.ste_mask_value(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Activation,
}

/// A named quantisation site of a classifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
}

/// Per-tensor parameters for every quantisable site of a model, plus
/// optional per-output-channel parameters for weight sites.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModelSpec<T> {
    entries: BTreeMap<String, (SiteKind, QuantParams<T>)>,
    channels: BTreeMap<String, Vec<QuantParams<T>>>,
}

#[derive(Serialize, Deserialize)]
struct SiteRecord {
    site: String,
    kind: SiteKind,
    bits: u32,
    scale: f64,
    zero_point: i64,
    min: f64,
    max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channel: Option<usize>,
}

impl<T: Scalar> Default for QuantizedModelSpec<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            channels: BTreeMap::new(),
        }
    }
}

fn record<T: Scalar>(site: &str, kind: SiteKind, p: &QuantParams<T>, channel: Option<usize>) -> SiteRecord {
    SiteRecord {
        site: site.to_string(),
        kind,
        bits: p.num_bits,
        scale: p.scale.as_f64(),
        zero_point: p.zero_point,
        min: p.observed_min.as_f64(),
        max: p.observed_max.as_f64(),
        channel,
    }
}

fn params_from_record<T: Scalar>(r: &SiteRecord) -> Result<QuantParams<T>> {
    if !SUPPORTED_BITS.contains(&r.bits) {
        return Err(Error::Config(format!("site {}: unsupported bit width {}", r.site, r.bits)));
    }
    let qmax = (1i64 << r.bits) - 1;
    if !(0..=qmax).contains(&r.zero_point) || !(r.scale > 0.0) {
        return Err(Error::Config(format!("site {}: invalid scale/zero point", r.site)));
    }
    Ok(QuantParams {
        num_bits: r.bits,
        qmin: 0,
        qmax,
        scale: T::lit(r.scale),
        zero_point: r.zero_point,
        observed_min: T::lit(r.min),
        observed_max: T::lit(r.max),
    })
}

impl<T: Scalar> QuantizedModelSpec<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: &str, kind: SiteKind, p: QuantParams<T>) {
        self.entries.insert(site.to_string(), (kind, p));
    }

    pub fn get(&self, site: &str) -> Option<&QuantParams<T>> {
        self.entries.get(site).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, site: &str) -> Option<&mut QuantParams<T>> {
        self.entries.get_mut(site).map(|(_, p)| p)
    }

    /// Per-output-channel parameters for a weight site.
    pub fn insert_channels(&mut self, site: &str, ps: Vec<QuantParams<T>>) {
        self.channels.insert(site.to_string(), ps);
    }

    pub fn channel_params(&self, site: &str) -> Option<&[QuantParams<T>]> {
        self.channels.get(site).map(|v| v.as_slice())
    }

    pub fn channel_params_mut(&mut self, site: &str) -> Option<&mut Vec<QuantParams<T>>> {
        self.channels.get_mut(site)
    }

    pub fn is_per_channel(&self) -> bool {
        !self.channels.is_empty()
    }

    /// Number of sites.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SiteKind, &QuantParams<T>)> {
        self.entries.iter().map(|(k, (kind, p))| (k.as_str(), *kind, p))
    }

    /// Bit width shared by all entries, if uniform.
    pub fn uniform_bits(&self) -> Option<u32> {
        let mut bits = self
            .entries
            .values()
            .map(|(_, p)| p.num_bits)
            .chain(self.channels.values().flatten().map(|p| p.num_bits));
        let first = bits.next()?;
        bits.all(|b| b == first).then_some(first)
    }

    /// Errors with the list of `sites` this spec does not cover.
    pub fn check_coverage(&self, sites: &[Site]) -> Result<()> {
        let missing: Vec<String> = sites
            .iter()
            .filter(|s| self.entries.get(&s.name).map(|(k, _)| *k) != Some(s.kind))
            .map(|s| s.name.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::CoverageGap { missing })
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut rows = Vec::new();
        for (site, (kind, p)) in &self.entries {
            rows.push(record(site, *kind, p, None));
            for (c, p) in self.channels.get(site).into_iter().flatten().enumerate() {
                rows.push(record(site, *kind, p, Some(c)));
            }
        }
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rows: Vec<SiteRecord> = serde_json::from_str(s)?;
        let mut spec = Self::new();
        for r in rows {
            let p = params_from_record(&r)?;
            match r.channel {
                None => spec.insert(&r.site, r.kind, p),
                Some(c) => {
                    if r.kind != SiteKind::Weight {
                        return Err(Error::Config(format!("site {}: per-channel parameters on an activation", r.site)));
                    }
                    let list = spec.channels.entry(r.site.clone()).or_default();
                    if list.len() != c {
                        return Err(Error::Config(format!("site {}: channel {c} out of order", r.site)));
                    }
                    list.push(p);
                }
            }
        }
        if let Some(orphan) = spec.channels.keys().find(|k| !spec.entries.contains_key(*k)) {
            return Err(Error::Config(format!("site {orphan}: channel rows without a tensor row")));
        }
        Ok(spec)
    }
}

/// Running min/max per activation site; single writer, shards merge by
/// element-wise min/max.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangeObserver {
    ranges: BTreeMap<String, (f64, f64)>,
}

impl RangeObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe<T: Scalar>(&mut self, site: &str, x: &Tensor<T>) {
        let (lo, hi) = (x.min().as_f64(), x.max().as_f64());
        self.observe_range(site, lo, hi);
    }

    pub fn observe_range(&mut self, site: &str, lo: f64, hi: f64) {
        let e = self
            .ranges
            .entry(site.to_string())
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    pub fn merge(&mut self, other: &RangeObserver) {
        for (site, &(lo, hi)) in &other.ranges {
            self.observe_range(site, lo, hi);
        }
    }

    pub fn range(&self, site: &str) -> Option<(f64, f64)> {
        self.ranges.get(site).copied()
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.ranges.keys().map(String::as_str)
    }
}

/// Exponential moving average of a `(min, max)` range.
pub fn ema_range(current: (f64, f64), batch: (f64, f64), decay: f64) -> (f64, f64) {
    (
        decay * current.0 + (1.0 - decay) * batch.0,
        decay * current.1 + (1.0 - decay) * batch.1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_unit_range_8bit() {
        let p = QuantParams::<f64>::from_range(-1.0, 1.0, 8).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 128);
        let p32 = QuantParams::<f32>::from_range(-1.0, 1.0, 8).unwrap();
        assert_eq!(p32.zero_point, 128);
    }

    #[test]
    fn relu6_range() {
        let p = QuantParams::<f64>::from_range(0.0, 6.0, 8).unwrap();
        assert_eq!(p.scale, 6.0 / 255.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn zero_range_falls_back_to_unit_scale() {
        let p = QuantParams::<f32>::from_range(0.0, 0.0, 8).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 0);
        let x = Tensor::<f32>::zeros(&[4]);
        assert_eq!(dequantize(&quantize(&x, &p), &p), x);
    }

    #[test]
    fn positive_only_range_is_widened_to_zero() {
        let p = QuantParams::<f64>::from_range(2.0, 3.0, 8).unwrap();
        assert_eq!(p.observed_min, 0.0);
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.dequantize_value(p.quantize_value(0.0)), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(QuantParams::<f64>::from_range(f64::NAN, 1.0, 8), Err(Error::Numeric(_))));
        assert!(matches!(QuantParams::<f64>::from_range(0.0, f64::INFINITY, 8), Err(Error::Numeric(_))));
        assert!(matches!(QuantParams::<f64>::from_range(1.0, -1.0, 8), Err(Error::Contract(_))));
        assert!(matches!(QuantParams::<f64>::from_range(-1.0, 1.0, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_computed_codes() {
        let p = QuantParams::<f64>::from_range(-1.0, 1.0, 8).unwrap();
        assert_eq!(p.quantize_value(0.5), 192);
        assert!((p.dequantize_value(192) - 64.0 * 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.quantize_value(10.0), 255);
        assert!((p.fake_quant_value(10.0) - 127.0 * 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.fake_quant_value(0.0), 0.0);
    }

    #[test]
    fn ste_mask_gates_by_range() {
        let p = QuantParams::<f64>::from_range(-1.0, 1.0, 8).unwrap();
        assert_eq!(p.ste_mask_value(0.3), 1.0);
        assert_eq!(p.ste_mask_value(2.0), 0.0);
        assert_eq!(p.ste_mask_value(1.0), 1.0);
        assert_eq!(p.ste_mask_value(-1.0), 1.0);
    }

    #[test]
    fn coverage_lists_missing_sites() {
        let mut spec = QuantizedModelSpec::<f32>::new();
        let p = QuantParams::from_range(-1.0, 1.0, 8).unwrap();
        spec.insert("a", SiteKind::Weight, p);
        let sites = vec![
            Site { name: "a".into(), kind: SiteKind::Weight },
            Site { name: "b".into(), kind: SiteKind::Activation },
        ];
        match spec.check_coverage(&sites) {
            Err(Error::CoverageGap { missing }) => assert_eq!(missing, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observer_merge_is_elementwise_min_max() {
        let mut a = RangeObserver::new();
        a.observe_range("s", -1.0, 3.0);
        let mut b = RangeObserver::new();
        b.observe_range("s", -0.5, 5.0);
        b.observe_range("t", 0.0, 1.0);
        a.merge(&b);
        assert_eq!(a.range("s"), Some((-1.0, 5.0)));
        assert_eq!(a.range("t"), Some((0.0, 1.0)));
    }

    #[test]
    fn ema_moves_toward_batch() {
        let r = ema_range((0.0, 1.0), (-1.0, 2.0), 0.99);
        assert!((r.0 + 0.01).abs() < 1e-12 && (r.1 - 1.01).abs() < 1e-12);
    }
}
