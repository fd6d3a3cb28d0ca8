//! Ablation trials, threshold classification and refinement.

mod common;

use common::{micro_data, micro_model, planted_fixture, solo_losses_by_zeroing};
use proptest::prelude::*;
use tierprune::harness::ExperimentConfig;
use tierprune::model::dataset_loss;
use tierprune::probe::{
    baseline_loss, classify, observe, observe_all, refine_personalized, sample_trials, Observation, SamplingMode,
};
use tierprune::{Error, MaskTrial, ThresholdSpec, Tier, TierAssignment};

fn observed(ids: &[usize], loss: f64) -> MaskTrial {
    let mut t = MaskTrial::new(ids.to_vec()).unwrap();
    t.observation = Observation::Observed { loss, wall_time_s: 0.0 };
    t
}

#[test]
fn baseline_is_the_dataset_loss() {
    let mut model = micro_model(2, 1);
    let data = micro_data(3, 1);
    let th = baseline_loss(&model, &data, 0.02, 5).unwrap();
    assert_eq!(th.baseline_loss, dataset_loss(&model, &data, 5).unwrap());
    assert_eq!(th.margin, 0.02 * th.baseline_loss);
    assert_eq!(th, baseline_loss(&model, &data, 0.02, 5).unwrap());

    model.set_skips(&[2]).unwrap();
    assert!(matches!(baseline_loss(&model, &data, 0.02, 5), Err(Error::Usage(_))));
    model.clear_skips();
    assert_eq!(th, baseline_loss(&model, &data, 0.02, 5).unwrap());
}

#[test]
fn observe_restores_flags_and_never_touches_weights() {
    let mut model = micro_model(2, 2);
    let data = micro_data(2, 2);
    let before = model.fingerprint();
    let mut trial = MaskTrial::new(vec![1, 5, 6]).unwrap();
    let loss = observe(&mut model, &data, &mut trial, 4).unwrap();
    assert_eq!(trial.observed_loss(), Some(loss));
    assert!(model.skipped().is_empty());
    assert_eq!(model.fingerprint(), before);
}

#[test]
fn empty_and_full_trials() {
    let mut model = micro_model(2, 3);
    let data = micro_data(2, 3);
    let base = dataset_loss(&model, &data, 4).unwrap();
    let mut empty = MaskTrial::new(vec![]).unwrap();
    assert_eq!(observe(&mut model, &data, &mut empty, 4).unwrap(), base);
    let mut all = MaskTrial::new((0..8).collect()).unwrap();
    assert!(observe(&mut model, &data, &mut all, 4).unwrap().is_finite());
}

#[test]
fn single_layer_trial_equals_manual_zeroing() {
    let mut model = micro_model(2, 4);
    let data = micro_data(2, 4);
    let oracle = solo_losses_by_zeroing(&model, &data);
    for (layer, want) in oracle.iter().enumerate() {
        let mut t = MaskTrial::new(vec![layer]).unwrap();
        let got = observe(&mut model, &data, &mut t, 64).unwrap();
        assert_eq!(got.to_bits(), want.to_bits(), "layer {layer}");
    }
}

#[test]
fn parallel_observation_matches_serial() {
    let model = micro_model(2, 5);
    let data = micro_data(3, 5);
    let trials = sample_trials(8, 3, 10, 5, SamplingMode::Independent).unwrap();
    let mut serial = trials.clone();
    let mut parallel = trials;
    assert_eq!(observe_all(&model, &data, &mut serial, 4, 1).unwrap(), 0);
    assert_eq!(observe_all(&model, &data, &mut parallel, 4, 4).unwrap(), 0);
    let losses = |t: &[MaskTrial]| t.iter().map(|t| t.observed_loss().unwrap().to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&serial), losses(&parallel));
}

#[test]
fn refine_with_zero_budget_is_a_no_op() {
    let mut model = micro_model(2, 6);
    let data = micro_data(2, 6);
    let th = baseline_loss(&model, &data, 0.0, 8).unwrap();
    let assignment = classify(&[observed(&[0, 1], th.baseline_loss + 1.0)], &th, 8).unwrap();
    let refined = refine_personalized(&mut model, &data, &assignment, &th, 0, 8).unwrap();
    assert_eq!(refined, assignment);
}

#[test]
fn refine_demotes_passengers_and_is_idempotent() {
    let p = planted_fixture(1);
    let mut model = p.model.clone();
    let th = baseline_loss(&model, &p.data, 0.02, 64).unwrap();
    let solo = solo_losses_by_zeroing(&model, &p.data);
    let passenger = (0..16).find(|&l| l != p.layer && solo[l] <= th.upper()).expect("a layer within the margin");
    assert!(solo[p.layer] > th.upper());

    // the planted layer and the passenger were only ever ablated together
    let mut trial = MaskTrial::new(vec![p.layer, passenger]).unwrap();
    observe(&mut model, &p.data, &mut trial, 64).unwrap();
    let raw = classify(&[trial], &th, 16).unwrap();
    assert_eq!(raw.layers_in(Tier::Personalized), {
        let mut v = vec![p.layer, passenger];
        v.sort();
        v
    });

    let refined = refine_personalized(&mut model, &p.data, &raw, &th, 16, 64).unwrap();
    assert_eq!(refined.tier(p.layer), Tier::Personalized);
    assert_eq!(refined.tier(passenger), Tier::Other);
    assert_eq!(refined.solo_losses()[&p.layer], solo[p.layer]);

    let again = refine_personalized(&mut model, &p.data, &refined, &th, 16, 64).unwrap();
    assert_eq!(again.tiers(), refined.tiers());
}

#[test]
fn negative_refine_budget_is_a_config_error() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["probe"]["refine_budget"] = serde_json::json!(-1);
    assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
}

#[test]
fn covering_trials_cover_every_layer() {
    let trials = sample_trials(16, 4, 4, 9, SamplingMode::Covering).unwrap();
    let mut seen: Vec<usize> = trials.iter().flat_map(|t| t.layer_ids().to_vec()).collect();
    seen.sort();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
}

#[test]
fn wider_margin_can_move_a_conflicted_layer_to_generic() {
    // one high and one low vote: Personalized wins until the margin swallows
    // the high vote, leaving only the low one
    let trials = [observed(&[1], 1.16), observed(&[1], 0.5)];
    let narrow = classify(&trials, &ThresholdSpec::new(1.0, 0.1).unwrap(), 3).unwrap();
    let wide = classify(&trials, &ThresholdSpec::new(1.0, 0.2).unwrap(), 3).unwrap();
    assert_eq!(narrow.tier(1), Tier::Personalized);
    assert_eq!(wide.tier(1), Tier::Generic);
}

fn trial_strategy(layers: usize) -> impl Strategy<Value = Vec<(Vec<usize>, f64)>> {
    prop::collection::vec((prop::sample::subsequence((0..layers).collect::<Vec<_>>(), 1..=4), 0.5f64..1.5), 0..12)
}

proptest! {
    #[test]
    fn classify_ignores_trial_order(raw in trial_strategy(10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let trials: Vec<MaskTrial> = raw.iter().map(|(ids, l)| observed(ids, *l)).collect();
        let th = ThresholdSpec::new(1.0, 0.1).unwrap();
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<MaskTrial> = order.iter().map(|&i| trials[i].clone()).collect();
        let a = classify(&trials, &th, 10).unwrap();
        let b = classify(&shuffled, &th, 10).unwrap();
        prop_assert_eq!(a.tiers(), b.tiers());
        for l in 0..10 {
            let mut mapped: Vec<usize> = b.provenance(l).iter().map(|&j| order[j]).collect();
            mapped.sort();
            prop_assert_eq!(a.provenance(l), &mapped[..]);
        }
    }

    #[test]
    fn wider_margin_never_grows_decisive_tiers(raw in trial_strategy(10), m1 in 0.0f64..0.5, extra in 0.0f64..0.5) {
        let trials: Vec<MaskTrial> = raw.iter().map(|(ids, l)| observed(ids, *l)).collect();
        let narrow = classify(&trials, &ThresholdSpec::new(1.0, m1).unwrap(), 10).unwrap();
        let wide = classify(&trials, &ThresholdSpec::new(1.0, m1 + extra).unwrap(), 10).unwrap();
        let decisive = |a: &TierAssignment, l: usize| a.tier(l) != Tier::Other;
        for l in 0..10 {
            if wide.tier(l) == Tier::Personalized {
                prop_assert_eq!(narrow.tier(l), Tier::Personalized);
            }
            if decisive(&wide, l) {
                prop_assert!(decisive(&narrow, l));
            }
        }
    }

    #[test]
    fn tiers_partition_the_layers(raw in trial_strategy(10), m in 0.0f64..0.5) {
        let trials: Vec<MaskTrial> = raw.iter().map(|(ids, l)| observed(ids, *l)).collect();
        let a: TierAssignment = classify(&trials, &ThresholdSpec::new(1.0, m).unwrap(), 10).unwrap();
        prop_assert_eq!(a.counts().total(), 10);
    }
}
