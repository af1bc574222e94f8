mod common;

use dfq::bn_stats::{bns_loss, BNStatsTable, LayerStats};
use dfq::distill::kd_loss;
use dfq::graph::Graph;
use dfq::nn::CondGenInput;
use dfq::quant::QuantParams;
use dfq::zscgan::{zscgan_loss_and_grads, LossMode, ZsCganConfig};
use proptest::prelude::*;

use common::*;

fn params() -> impl Strategy<Value = QuantParams<f64>> {
    (-50.0..50.0f64, -50.0..50.0f64, prop_oneof![Just(6u32), Just(8u32)])
        .prop_map(|(a, b, bits)| QuantParams::from_range(a.min(b), a.max(b), bits).unwrap())
}

proptest! {
    #[test]
    fn quantize_is_idempotent(p in params(), x in -200.0..200.0f64) {
        let q = p.quantize_value(x);
        prop_assert_eq!(p.quantize_value(p.dequantize_value(q)), q);
    }

    #[test]
    fn error_within_half_step_of_clipped_value(p in params(), x in -200.0..200.0f64) {
        let clipped = x.clamp(p.observed_min, p.observed_max);
        let err = (p.fake_quant_value(x) - clipped).abs();
        prop_assert!(err <= p.scale / 2.0 + 1e-9, "err {} scale {}", err, p.scale);
    }

    #[test]
    fn zero_is_exact(p in params()) {
        prop_assert_eq!(p.fake_quant_value(0.0), 0.0);
    }

    #[test]
    fn quantize_is_monotone(p in params(), a in -200.0..200.0f64, b in -200.0..200.0f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
    }

    #[test]
    fn zero_point_on_grid(p in params()) {
        prop_assert!(p.zero_point >= p.qmin && p.zero_point <= p.qmax);
        prop_assert!(p.scale > 0.0);
        prop_assert!(p.observed_min <= 0.0 && p.observed_max >= 0.0);
    }
}

fn table(layers: &[Vec<(f64, f64)>]) -> BNStatsTable<f64> {
    BNStatsTable {
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerStats {
                name: format!("bn{i}"),
                mean: l.iter().map(|p| p.0).collect(),
                var: l.iter().map(|p| p.1).collect(),
            })
            .collect(),
    }
}

fn stats_pair() -> impl Strategy<Value = (Vec<Vec<(f64, f64)>>, Vec<Vec<(f64, f64)>>)> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|widths| {
        let layer = |w: usize| prop::collection::vec((-3.0..3.0f64, 0.01..5.0f64), w);
        let side = widths.iter().map(|&w| layer(w)).collect::<Vec<_>>();
        (side.clone(), side)
    })
}

proptest! {
    #[test]
    fn bns_loss_is_non_negative((emp, reference) in stats_pair()) {
        let l = bns_loss(&table(&emp), &table(&reference)).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn bns_loss_vanishes_on_identical_tables((emp, _) in stats_pair()) {
        prop_assert_eq!(bns_loss(&table(&emp), &table(&emp)).unwrap(), 0.0);
    }

    #[test]
    fn bns_loss_is_additive_over_layers((emp, reference) in stats_pair(), cut in 0usize..4) {
        let (e, r) = (table(&emp), table(&reference));
        let n = e.layers.len();
        let cut = cut.min(n);
        let (a, b): (Vec<usize>, Vec<usize>) = ((0..cut).collect(), (cut..n).collect());
        let whole = bns_loss(&e, &r).unwrap();
        let parts = bns_loss(&e.select(&a), &r.select(&a)).unwrap() + bns_loss(&e.select(&b), &r.select(&b)).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
    }
}

#[test]
fn bns_loss_positive_when_any_pair_differs() {
    let a = table(&[vec![(0.0, 1.0), (0.5, 2.0)]]);
    let b = table(&[vec![(0.0, 1.0), (0.5, 2.0 + 1e-3)]]);
    assert!(bns_loss(&a, &b).unwrap() > 0.0);
}

#[test]
fn kd_gradient_does_not_reach_teacher_logits() {
    let mut g = Graph::<f64>::new();
    let t = g.leaf(randn(&[5, 7], 1), true);
    let s = g.leaf(randn(&[5, 7], 2), true);
    let l = g.soft_cross_entropy(t, s, 2.0).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(t).map_or(true, |gt| gt.data().iter().all(|&v| v == 0.0)));
    assert!(grads.get(s).is_some());
}

#[test]
fn kd_at_unit_temperature_matches_soft_target_oracle() {
    let (t, s) = (randn(&[6, 4], 3), randn(&[6, 4], 4));
    let oracle: f64 = t
        .softmax_rows()
        .data()
        .chunks(4)
        .zip(s.softmax_rows().data().chunks(4))
        .map(|(p, q)| -p.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>())
        .sum::<f64>()
        / 6.0;
    assert!((kd_loss(&t, &s, 1.0).unwrap() - oracle).abs() <= 1e-6);
}

fn loss_setup() -> (dfq::nn::TeacherModel<f64>, dfq::nn::ConditionalGenerator<f64>, CondGenInput<f64>) {
    let teacher = tiny_teacher(11);
    let gen = tiny_generator(&teacher, 12);
    let input = CondGenInput::sample(5, gen.noise_dim(), gen.num_classes(), &mut rng(13));
    (teacher, gen, input)
}

fn cfg(mode: LossMode, weight: f64) -> ZsCganConfig {
    let mut c = ZsCganConfig::desk([1, 8, 8]);
    c.loss_mode = mode;
    c.bns_weight = weight;
    c
}

#[test]
fn reported_terms_sum_to_total() {
    let (teacher, gen, input) = loss_setup();
    for mode in LossMode::ALL {
        let (l, _) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(mode, 0.7)).unwrap();
        let ce = if mode.uses_ce() { l.ce } else { 0.0 };
        let bns = if mode.uses_bns() { l.bns } else { 0.0 };
        assert!((l.total - (ce + 0.7 * bns)).abs() <= 1e-6, "{mode}");
    }
}

#[test]
fn ce_only_gradients_ignore_bns_weight() {
    let (teacher, gen, input) = loss_setup();
    let (_, a) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(LossMode::CeOnly, 1.0)).unwrap();
    let (_, b) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(LossMode::CeOnly, 10.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn combined_gradient_is_sum_of_terms() {
    let (teacher, gen, input) = loss_setup();
    let (_, both) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(LossMode::CePlusBns, 1.0)).unwrap();
    let (_, ce) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(LossMode::CeOnly, 1.0)).unwrap();
    let (_, bns) = zscgan_loss_and_grads(&gen, &teacher, &input, &cfg(LossMode::BnsOnly, 1.0)).unwrap();
    for ((b, c), n) in both.iter().zip(&ce).zip(&bns) {
        for ((x, y), z) in b.data().iter().zip(c.data()).zip(n.data()) {
            assert!((x - (y + z)).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y} + {z}");
        }
    }
}
