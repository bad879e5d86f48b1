use std::collections::{BTreeMap, HashSet};

use overmod_core::scene::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Enumeration oracle: among all 35 utterances, the shortest that is true of
/// the target and of no distractor; equal lengths prefer fewer specific
/// words (a shape word says more than "shape").
fn brute_force_minimal(game: &ReferenceGame) -> Option<Utterance> {
    let feats = game.features();
    let mut best: Option<(usize, usize, Utterance)> = None;
    for u in utterance_space() {
        let ext: Vec<usize> = (0..3).filter(|&i| u.is_true_of(feats[i].0, feats[i].1)).collect();
        if ext != [game.target] {
            continue;
        }
        let specific = u.words().iter().filter(|w| **w != Word::Noun).count();
        let key = (u.len(), specific);
        if best.as_ref().is_none_or(|(l, s, _)| key < (*l, *s)) {
            best = Some((key.0, key.1, u));
        }
    }
    best.map(|b| b.2)
}

#[test]
fn unconstrained_scenes_cover_all_pairs_uniformly() {
    let env = EnvironmentConfig::uniform(0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts: BTreeMap<(Color, Shape), usize> = BTreeMap::new();
    let n = 10_000;
    for _ in 0..n {
        let s = sample_scene(&mut rng, &env, &SceneConstraint::default()).unwrap();
        *counts.entry((s.color, s.shape)).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    for (pair, c) in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 24.0).abs() <= 0.01, "{pair:?}: {f}");
    }
}

#[test]
fn typical_circle_targets_are_red_ninety_percent() {
    let env = EnvironmentConfig::typicality(3);
    let (mut circles, mut red) = (0usize, 0usize);
    let mut id = 0;
    while circles < 10_000 {
        let g = generate_game(&env, id).unwrap();
        id += 1;
        let t = g.target_spec();
        if t.shape == Shape::Circle {
            circles += 1;
            red += (t.color == Color::Red) as usize;
        }
    }
    let rate = red as f64 / circles as f64;
    assert!((rate - 0.9).abs() <= 0.01, "red circle share {rate}");
}

#[test]
fn condition_structure() {
    let env = EnvironmentConfig::uniform(1);
    for id in 0..2000 {
        let g = generate_game(&env, id).unwrap();
        check_condition(&g).unwrap();
        let f = g.features();
        let colors: HashSet<Color> = f.iter().map(|x| x.0).collect();
        let shapes: HashSet<Shape> = f.iter().map(|x| x.1).collect();
        let t = f[g.target];
        match g.condition {
            ContextCondition::ShapeNeeded => assert_eq!((colors.len(), shapes.len()), (1, 3)),
            ContextCondition::ColorNeeded => assert_eq!((colors.len(), shapes.len()), (3, 1)),
            ContextCondition::BothNeeded => {
                let color_unique = f.iter().filter(|x| x.0 == t.0).count() == 1;
                let shape_unique = f.iter().filter(|x| x.1 == t.1).count() == 1;
                assert!(!color_unique && !shape_unique);
                assert_eq!(f.iter().filter(|x| **x == t).count(), 1);
            }
            ContextCondition::EitherSufficient => {
                assert_eq!(f.iter().filter(|x| x.0 == t.0).count(), 1);
                assert_eq!(f.iter().filter(|x| x.1 == t.1).count(), 1);
            }
        }
    }
}

fn find_game(env: &EnvironmentConfig, cond: ContextCondition, target: (Color, Shape)) -> ReferenceGame {
    (0..)
        .map(|id| generate_game(env, id).unwrap())
        .find(|g| g.condition == cond && g.features()[g.target] == target)
        .unwrap()
}

#[test]
fn ground_truth_examples() {
    let env = EnvironmentConfig::uniform(5);
    let red_circle = (Color::Red, Shape::Circle);
    let g = find_game(&env, ContextCondition::ShapeNeeded, red_circle);
    assert_eq!(g.ground_truth.to_string(), "circle");
    let g = find_game(&env, ContextCondition::BothNeeded, red_circle);
    assert_eq!(g.ground_truth.to_string(), "red circle");
    let g = find_game(&env, ContextCondition::ColorNeeded, red_circle);
    assert_eq!(g.ground_truth.to_string(), "red shape");
    assert_eq!(brute_force_minimal(&g), Some(g.ground_truth.clone()));
}

#[test]
fn malformed_game_is_rejected() {
    let env = EnvironmentConfig::uniform(5);
    let mut g = find_game(&env, ContextCondition::ShapeNeeded, (Color::Red, Shape::Circle));
    g.condition = ContextCondition::ColorNeeded;
    assert!(ground_truth_utterance(&g).is_err());
}

#[test]
fn ground_truth_is_the_enumeration_minimum() {
    for env in [EnvironmentConfig::uniform(9), EnvironmentConfig::typicality(9)] {
        for id in 0..3000 {
            let g = generate_game(&env, id).unwrap();
            assert!(g.identifies_target(&g.ground_truth));
            assert_eq!(brute_force_minimal(&g).as_ref(), Some(&g.ground_truth), "game {id}");
        }
    }
}

#[test]
fn dataset_is_balanced_reproducible_and_loadable() {
    let env = EnvironmentConfig::low_salience(7);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let d1 = generate_dataset(&env, 400, a.path()).unwrap();
    generate_dataset(&env, 400, b.path()).unwrap();
    for c in ContextCondition::ALL {
        assert_eq!(d1.manifest.header.counts[&c], 100);
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 400 * 3 + 1);
    for n in &names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap());
    }
    let loaded = load_dataset(a.path()).unwrap();
    for (x, y) in loaded.games.iter().zip(&d1.games) {
        assert_eq!((x.id, x.target, x.condition, &x.ground_truth), (y.id, y.target, y.condition, &y.ground_truth));
        for (rx, ry) in x.referents.iter().zip(&y.referents) {
            assert_eq!(rx.spec, ry.spec);
            assert!(rx.image == ry.image, "image of game {} differs", x.id);
        }
    }
    assert_eq!(loaded.manifest, d1.manifest);
    for g in &loaded.games {
        for r in &g.referents {
            let colored = r.image.rgb_pixels().filter(|p| Color::from_rgb(*p).is_some()).count();
            assert_eq!(colored, 1);
        }
    }
}

#[test]
fn remainder_is_round_robin() {
    let d = generate_games(&EnvironmentConfig::uniform(0), 10).unwrap();
    let counts: Vec<usize> = ContextCondition::ALL.iter().map(|c| d.manifest.header.counts[c]).collect();
    assert_eq!(counts, [3, 3, 2, 2]);
    assert!(generate_games(&EnvironmentConfig::uniform(0), 3).is_err());
}

#[test]
fn uniform_targets_cover_all_pairs() {
    let d = generate_games(&EnvironmentConfig::uniform(11), 24_000).unwrap();
    let mut counts: BTreeMap<(Color, Shape), usize> = BTreeMap::new();
    for rec in &d.manifest.games {
        let t = &rec.referents[rec.target_index];
        *counts.entry((t.color, t.shape)).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    for (pair, c) in counts {
        let f = c as f64 / 24_000.0;
        assert!((f - 1.0 / 24.0).abs() <= 0.01, "{pair:?}: {f}");
    }
}

#[test]
fn io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = generate_dataset(&EnvironmentConfig::uniform(0), 4, &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest.jsonl"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_games_satisfy_invariants(seed in any::<u64>(), id in 0u64..1_000_000, env_kind in 0usize..3) {
        let env = match env_kind {
            0 => EnvironmentConfig::uniform(seed),
            1 => EnvironmentConfig::typicality(seed),
            _ => EnvironmentConfig::low_salience(seed),
        };
        let g = generate_game(&env, id).unwrap();
        prop_assert_eq!(&g, &generate_game(&env, id).unwrap());
        prop_assert!(check_condition(&g).is_ok());
        prop_assert_eq!(g.extension(&g.ground_truth), vec![g.target]);
        let shortest = utterance_space().into_iter().filter(|u| g.identifies_target(u)).map(|u| u.len()).min();
        prop_assert_eq!(shortest, Some(g.ground_truth.len()));
        for r in &g.referents {
            prop_assert!(r.image.rgb_pixels().all(|p| p == BACKGROUND || p == NEUTRAL_FILL || Color::from_rgb(p).is_some()));
            let palette = r.image.rgb_pixels().filter(|p| Color::from_rgb(*p) == Some(r.spec.color)).count();
            if env.salience == Salience::Low {
                prop_assert_eq!(palette, 1);
            } else {
                prop_assert!(palette > 50);
            }
        }
    }
}
