//! Dataset sizing, subset plans, metrics against hand counts, reports and a
//! tiny end-to-end run.

use std::collections::HashSet;

use overmod_core::agents::{EvalListener, GroundTruthSpeaker, Speaker};
use overmod_core::experiments::{
    aggregate, applicability_gap, applicability_profile, communication_accuracy, feature_uncertainty, mean_ci,
    model_seed, overmodification_rate, plan_subsets, probe_utterance, run_experiment, truth_listener, Cell,
    ExperimentConfig, MetricsReport, ModelStore, Role, Row, MAX_MEMBERS, NUM_SUBSETS,
};
use overmod_core::scene::{generate_games, Color, ContextCondition, EnvironmentConfig, ReferenceGame, Shape, Word};
use overmod_core::semantics::{Constant, TruthTable};
use proptest::prelude::*;

fn games(env: EnvironmentConfig, n: usize) -> Vec<ReferenceGame> {
    generate_games(&env, n).unwrap().games
}

fn refs(gs: &[ReferenceGame]) -> Vec<&ReferenceGame> {
    gs.iter().collect()
}

fn tokens(words: &[Word]) -> Vec<usize> {
    words.iter().map(|w| w.id()).collect()
}

#[test]
fn split_sizes_match_a_multiple_of_eleven_search() {
    for scale in [0.01, 0.02, 0.1, 0.37, 1.0] {
        let cfg = ExperimentConfig { scale, ..ExperimentConfig::desk(1) };
        let (total, train, eval) = cfg.split_sizes();
        assert_eq!(total, (75_000.0 * scale).round() as usize);
        // largest multiple of 11 not above 55/75 of the total
        let oracle = (0..).map(|k| 11 * k).take_while(|t| t * 75 <= total * 55).last().unwrap();
        assert_eq!(train, oracle, "scale {scale}");
        assert_eq!(train + eval, total);
    }
    let (total, train, eval) = ExperimentConfig::desk(1).split_sizes();
    assert_eq!((total, train, eval), (7500, 5500, 2000));
}

#[test]
fn desk_plan_is_eleven_disjoint_subsets_of_500() {
    let ids: Vec<u64> = (0..5500).collect();
    let plan = plan_subsets(&ids, 1).unwrap();
    assert_eq!(plan.subsets.len(), NUM_SUBSETS);
    let mut seen = HashSet::new();
    for s in &plan.subsets {
        assert_eq!(s.len(), 500);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for id in s {
            assert!(seen.insert(*id), "id {id} in two subsets");
        }
    }
    assert_eq!(seen.len(), 5500);
    assert_eq!(plan, plan_subsets(&ids, 1).unwrap());
    assert_ne!(plan, plan_subsets(&ids, 2).unwrap());
}

#[test]
fn plan_rejects_unsplittable_inputs() {
    assert!(plan_subsets(&[], 1).is_err());
    assert!(plan_subsets(&(0..10).collect::<Vec<_>>(), 1).is_err());
    assert!(plan_subsets(&(0..5501).collect::<Vec<_>>(), 1).is_err());
}

#[test]
fn roles_map_to_distinct_subsets_and_seeds() {
    let roles = Role::roles(MAX_MEMBERS);
    assert_eq!(roles.len(), NUM_SUBSETS);
    let subsets: HashSet<usize> = roles.iter().map(|r| r.subset()).collect();
    assert_eq!(subsets, (0..NUM_SUBSETS).collect());
    let tags: Vec<String> = Role::roles(2).iter().map(|r| r.tag()).collect();
    assert_eq!(
        tags,
        ["literal-speaker", "eval-listener", "rsa-ensemble-member-1", "rsa-ensemble-member-2"]
    );
    let seeds: HashSet<u64> = [1, 2, 3]
        .iter()
        .flat_map(|&s| roles.iter().map(move |&r| model_seed(s, r)))
        .collect();
    assert_eq!(seeds.len(), 3 * NUM_SUBSETS);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_partitions_any_multiple_of_eleven(m in 1usize..60, seed in any::<u64>(), offset in 0u64..1000) {
        let ids: Vec<u64> = (offset..offset + (11 * m) as u64).collect();
        let plan = plan_subsets(&ids, seed).unwrap();
        let mut all: Vec<u64> = plan.subsets.iter().flatten().copied().collect();
        prop_assert!(plan.subsets.iter().all(|s| s.len() == m));
        all.sort_unstable();
        prop_assert_eq!(all, ids);
    }

    #[test]
    fn ci_half_width_is_scale_equivariant(values in prop::collection::vec(-10.0f64..10.0, 2..10), k in 0.1f64..10.0) {
        let (m, ci) = mean_ci(&values);
        let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
        let (ms, cis) = mean_ci(&scaled);
        prop_assert!((ms.unwrap() - k * m.unwrap()).abs() < 1e-9);
        prop_assert!((cis.unwrap() - k * ci.unwrap()).abs() < 1e-9);
        prop_assert!(ci.unwrap() >= 0.0);
    }
}

#[test]
fn ground_truth_with_a_perfect_listener_is_always_understood() {
    let gs = games(EnvironmentConfig::uniform(3), 400);
    let gs = refs(&gs);
    let utts = GroundTruthSpeaker.speak_all(&gs).unwrap();
    let f = communication_accuracy(&truth_listener(), &gs, &utts).unwrap();
    assert_eq!((f.hits, f.total), (400, 400));
    assert_eq!(f.value(), 1.0);
}

#[test]
fn constant_listener_always_picks_the_first_referent() {
    let gs = games(EnvironmentConfig::uniform(4), 400);
    let gs = refs(&gs);
    let utts = GroundTruthSpeaker.speak_all(&gs).unwrap();
    let f = communication_accuracy(&EvalListener::new(Constant(0.3)), &gs, &utts).unwrap();
    let first = gs.iter().filter(|g| g.target == 0).count();
    assert_eq!(f.hits, first);
}

#[test]
fn accuracy_rejects_mismatched_inputs() {
    let gs = games(EnvironmentConfig::uniform(4), 8);
    let gs = refs(&gs);
    assert!(communication_accuracy(&truth_listener(), &gs, &[vec![1]]).is_err());
    assert!(communication_accuracy(&truth_listener(), &[], &[]).is_err());
}

#[test]
fn overmodification_counts_color_mentions_in_shape_needed_games() {
    let gs = games(EnvironmentConfig::uniform(5), 40);
    let shape_needed: Vec<&ReferenceGame> = gs
        .iter()
        .filter(|g| g.condition == ContextCondition::ShapeNeeded)
        .collect();
    assert_eq!(shape_needed.len(), 10);
    let truth = GroundTruthSpeaker.speak_all(&shape_needed).unwrap();
    assert_eq!(overmodification_rate(&shape_needed, &truth).unwrap().hits, 0);

    // color on the first three games only
    let utts: Vec<Vec<usize>> = shape_needed
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let s = g.target_spec();
            match i < 3 {
                true => tokens(&[Word::Color(s.color), Word::Shape(s.shape)]),
                false => tokens(&[Word::Shape(s.shape)]),
            }
        })
        .collect();
    let f = overmodification_rate(&shape_needed, &utts).unwrap();
    assert_eq!((f.hits, f.total), (3, 10));

    let all = refs(&gs);
    let utts = GroundTruthSpeaker.speak_all(&all).unwrap();
    assert!(overmodification_rate(&all, &utts).is_err());
}

#[test]
fn probes_are_shape_words_or_modified_nouns() {
    assert_eq!(probe_utterance(Word::Shape(Shape::Square)).unwrap(), tokens(&[Word::Shape(Shape::Square)]));
    assert_eq!(
        probe_utterance(Word::Color(Color::Red)).unwrap(),
        tokens(&[Word::Color(Color::Red), Word::Noun])
    );
    assert!(probe_utterance(Word::Noun).is_err());
}

#[test]
fn uncertainty_of_truth_is_zero_and_of_constants_is_counted() {
    let gs = games(EnvironmentConfig::uniform(6), 200);
    let gs = refs(&gs);
    for w in Color::ALL.map(Word::Color).into_iter().chain(Shape::ALL.map(Word::Shape)) {
        let (u, n) = feature_uncertainty(&TruthTable, &gs, w).unwrap();
        assert_eq!((u, n), (0.0, 600));
        let (u, _) = feature_uncertainty(&Constant(0.5), &gs, w).unwrap();
        assert!((u - 0.5).abs() < 1e-12);
    }
    // Constant 0.2: each red referent is 0.8 off, every other referent 0.2
    let red = gs
        .iter()
        .flat_map(|g| g.features())
        .filter(|(c, _)| *c == Color::Red)
        .count() as f64;
    let expected = (0.8 * red + 0.2 * (600.0 - red)) / 600.0;
    let (u, _) = feature_uncertainty(&Constant(0.2), &gs, Word::Color(Color::Red)).unwrap();
    assert!((u - expected).abs() < 1e-12, "{u} vs {expected}");
}

#[test]
fn applicability_profile_of_truth_is_one_on_present_cells() {
    let gs = games(EnvironmentConfig::typicality(7), 400);
    let gs = refs(&gs);
    let profile = applicability_profile(&TruthTable, Shape::Circle, &gs).unwrap();
    assert_eq!(profile.len(), 6);
    let circles = gs
        .iter()
        .flat_map(|g| g.features())
        .filter(|(_, s)| *s == Shape::Circle)
        .count();
    assert_eq!(profile.iter().map(|c| c.count).sum::<usize>(), circles);
    for c in &profile {
        assert_eq!(c.mean, (c.count > 0).then_some(1.0));
    }
    assert_eq!(applicability_gap(&profile, Color::Red), Some(0.0));

    // no circles at all → every cell absent
    let no_circles: Vec<&ReferenceGame> = gs
        .iter()
        .copied()
        .filter(|g| g.features().iter().all(|(_, s)| *s != Shape::Circle))
        .collect();
    let empty = applicability_profile(&TruthTable, Shape::Circle, &no_circles).unwrap();
    assert!(empty.iter().all(|c| c.mean.is_none() && c.count == 0));
    assert_eq!(applicability_gap(&empty, Color::Red), None);
}

#[test]
fn applicability_gap_skips_absent_cells() {
    let cell = |color, mean| Cell { color, mean, count: usize::from(mean.is_some()) };
    let profile = [
        cell(Color::Red, Some(0.9)),
        cell(Color::Blue, Some(0.5)),
        cell(Color::Green, None),
        cell(Color::Yellow, Some(0.3)),
    ];
    assert!((applicability_gap(&profile, Color::Red).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(applicability_gap(&profile[..1], Color::Red), None);
}

#[test]
fn mean_ci_examples() {
    assert_eq!(mean_ci(&[]), (None, None));
    assert_eq!(mean_ci(&[0.4]), (Some(0.4), None));
    let (m, ci) = mean_ci(&[1.0, 2.0, 3.0]);
    assert_eq!(m, Some(2.0));
    assert!((ci.unwrap() - 1.96 / 3f64.sqrt()).abs() < 1e-12);
}

fn row(seed: u64, metric: &str, value: Option<f64>) -> Row {
    Row {
        experiment: 1,
        seed,
        speaker: "rsa".into(),
        condition: "uniform:all".into(),
        metric: metric.into(),
        value,
        denominator: 10,
    }
}

#[test]
fn aggregates_skip_absent_values() {
    let rows = [row(1, "a", Some(0.5)), row(2, "a", None), row(3, "a", Some(0.7)), row(1, "b", None)];
    let agg = aggregate(&rows);
    assert_eq!(agg.len(), 2);
    assert_eq!(agg[0].seeds, [1, 3]);
    assert!((agg[0].mean.unwrap() - 0.6).abs() < 1e-12);
    assert_eq!((agg[1].mean, agg[1].ci95), (None, None));
}

#[test]
fn report_round_trips_and_marks_absent_cells() {
    let dir = tempfile::tempdir().unwrap();
    let report = MetricsReport::new(
        ExperimentConfig::desk(2),
        vec![row(1, "accuracy", Some(0.1 + 0.2)), row(1, "overmodification", None)],
        vec![],
    );
    report.write(dir.path()).unwrap();
    let back = MetricsReport::read(dir.path()).unwrap();
    assert_eq!(back, report);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(
        csv,
        "experiment,seed,speaker,condition,metric,value,denominator\n\
         1,1,rsa,uniform:all,accuracy,0.30000000000000004,10\n\
         1,1,rsa,uniform:all,overmodification,NA,10\n"
    );
    assert!(back.complete);
}

#[test]
fn config_validation() {
    for id in 1..=3 {
        ExperimentConfig::desk(id).validate().unwrap();
    }
    let bad = [
        ExperimentConfig { id: 4, ..ExperimentConfig::desk(1) },
        ExperimentConfig { scale: 0.0, ..ExperimentConfig::desk(1) },
        ExperimentConfig { scale: 0.001, ..ExperimentConfig::desk(1) },
        ExperimentConfig { seeds: vec![], ..ExperimentConfig::desk(1) },
        ExperimentConfig { seeds: vec![1, 1], ..ExperimentConfig::desk(1) },
        ExperimentConfig { ensemble_size: 0, ..ExperimentConfig::desk(1) },
        ExperimentConfig { ensemble_size: MAX_MEMBERS + 1, ..ExperimentConfig::desk(1) },
        ExperimentConfig { lambda: -0.1, ..ExperimentConfig::desk(1) },
        ExperimentConfig { embed_dim: 0, ..ExperimentConfig::desk(1) },
        ExperimentConfig { epochs: 0, ..ExperimentConfig::desk(1) },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

fn tiny(id: u8) -> ExperimentConfig {
    ExperimentConfig {
        scale: 0.01,
        seeds: vec![1, 2],
        ensemble_size: 1,
        embed_dim: 8,
        epochs: 1,
        ..ExperimentConfig::desk(id)
    }
}

#[test]
fn tiny_experiment_is_deterministic_and_reuses_models() {
    let cfg = tiny(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let quiet = |_: &str| {};
    let ra = run_experiment(&cfg, a.path(), &ModelStore::new(a.path().join("models")), &quiet).unwrap();
    let rb = run_experiment(&cfg, b.path(), &ModelStore::new(b.path().join("models")), &quiet).unwrap();
    assert!(ra.complete && rb.complete);
    let csv = |d: &std::path::Path| std::fs::read(d.join("report.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));

    // 2 speakers × 4 conditions × 2 seeds
    assert_eq!(ra.rows_for("accuracy").count(), 16);
    assert_eq!(ra.rows_for("overmodification").count(), 4);
    for r in ra.rows_for("accuracy") {
        assert_eq!(r.denominator, 50, "{r:?}");
    }
    let svgs: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert_eq!(svgs.len(), 3, "{svgs:?}");

    // cached models give the same report
    let rc = run_experiment(&cfg, b.path(), &ModelStore::new(a.path().join("models")), &quiet).unwrap();
    assert_eq!(rc.to_csv().unwrap(), ra.to_csv().unwrap());
}

#[test]
fn stage_failures_are_recorded_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("not-a-dir");
    std::fs::write(&blocker, b"").unwrap();
    let cfg = ExperimentConfig { seeds: vec![1], ..tiny(1) };
    let report = run_experiment(&cfg, dir.path(), &ModelStore::new(&blocker), &|_| {}).unwrap();
    assert!(!report.complete);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].stage.starts_with("train"), "{:?}", report.failures[0]);
    assert!(report.rows.is_empty());
    assert!(!MetricsReport::read(dir.path()).unwrap().complete);
}
