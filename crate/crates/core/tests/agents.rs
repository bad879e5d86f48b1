//! Evaluation listener, RSA speaker (against a brute-force utility oracle)
//! and the literal speaker.

use overmod_core::agents::{
    argmax3, listener_distribution, train_literal_speaker, EvalListener, GroundTruthSpeaker, LiteralSpeaker,
    RsaSpeaker, Speaker, DEFAULT_LAMBDA, EOS, MAX_DECODE,
};
use overmod_core::nn::{Checkpoint, EncoderConfig};
use overmod_core::scene::{
    generate_games, Color, ContextCondition, EnvironmentConfig, ReferenceGame, Shape, Utterance, Word,
};
use overmod_core::semantics::{
    train_semantic_function, Ensemble, Precomputed, SemanticModel, Semantics, TrainingHyperparams, TruthTable,
};
use proptest::prelude::*;

fn games(n: usize, seed: u64) -> Vec<ReferenceGame> {
    generate_games(&EnvironmentConfig::uniform(seed), n).unwrap().games
}

/// Same values for every utterance.
struct Fixed([f64; 3]);

impl Semantics for Fixed {
    fn values(&self, _: &ReferenceGame, _: &[usize]) -> overmod_core::Result<[f64; 3]> {
        Ok(self.0)
    }
}

/// Independent enumeration: bare nouns in inventory order, then every color
/// with every noun; utility from a hand-rolled softmax; first maximum wins.
fn brute_force(sem: &dyn Semantics, game: &ReferenceGame, lambda: f64) -> Vec<usize> {
    let nouns: Vec<Word> = Shape::ALL.iter().map(|&s| Word::Shape(s)).chain([Word::Noun]).collect();
    let mut cands: Vec<Vec<Word>> = nouns.iter().map(|&n| vec![n]).collect();
    for c in Color::ALL {
        for &n in &nouns {
            cands.push(vec![Word::Color(c), n]);
        }
    }
    assert_eq!(cands.len(), 35);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for words in cands {
        let ids: Vec<usize> = words.iter().map(|w| w.id()).collect();
        let v = sem.values(game, &ids).unwrap();
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        let u = (v[game.target].exp() / z).ln() - lambda * ids.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| u > *b) {
            best = Some((u, ids));
        }
    }
    best.unwrap().1
}

#[test]
fn listener_choice_examples() {
    let g = &games(4, 1)[0];
    let l = EvalListener::new(Fixed([0.3, 0.3, 0.3]));
    assert_eq!(l.distribution(g, &[6]).unwrap(), [1.0 / 3.0; 3]);
    assert_eq!(l.choose(g, &[6]).unwrap(), 0);
    let l = EvalListener::new(Fixed([0.1, 0.7, 0.7]));
    assert_eq!(l.choose(g, &[6]).unwrap(), 1);
}

#[test]
fn utility_examples() {
    let g = &games(4, 2)[0];
    let t = g.target;
    let mut v = [0.0; 3];
    v[t] = 18f64.ln(); // e^a / (e^a + 2) = 0.9
    let s = RsaSpeaker::new(Fixed(v), DEFAULT_LAMBDA).unwrap();
    let two = Utterance::parse("red circle").unwrap();
    let u = s.utility(g, &two, t).unwrap();
    assert!((u - (0.9f64.ln() - 0.02)).abs() < 1e-12);
    assert!((u + 0.1254).abs() < 1e-4);

    let s0 = RsaSpeaker::new(Fixed(v), 0.0).unwrap();
    assert!((s0.utility(g, &two, t).unwrap() - 0.9f64.ln()).abs() < 1e-12);

    let flat = RsaSpeaker::new(Fixed([0.4; 3]), DEFAULT_LAMBDA).unwrap();
    let one = Utterance::parse("circle").unwrap();
    let d = flat.utility(g, &one, t).unwrap() - flat.utility(g, &two, t).unwrap();
    assert!((d - DEFAULT_LAMBDA).abs() < 1e-15);
    assert_eq!(flat.speak(g).unwrap(), one.ids(), "ties go to the first enumerated utterance");

    assert!(RsaSpeaker::new(Fixed(v), -0.1).is_err());
    assert!(RsaSpeaker::new(Fixed(v), f64::NAN).is_err());
}

#[test]
fn tabular_rsa_examples() {
    let s = RsaSpeaker::new(TruthTable, DEFAULT_LAMBDA).unwrap();
    let gs = games(400, 3);
    for g in &gs {
        let out = s.speak(g).unwrap();
        let (c, sh) = g.features()[g.target];
        match g.condition {
            ContextCondition::ShapeNeeded => assert_eq!(out, vec![Word::Shape(sh).id()]),
            ContextCondition::BothNeeded => assert_eq!(out, vec![Word::Color(c).id(), Word::Shape(sh).id()]),
            _ => {}
        }
        assert!(s.space().iter().any(|u| u.ids() == out));
    }
}

#[test]
fn rsa_matches_brute_force_on_tabular_and_model_semantics() {
    let gs = games(1000, 4);
    let tab = RsaSpeaker::new(TruthTable, DEFAULT_LAMBDA).unwrap();
    for g in &gs {
        assert_eq!(tab.speak(g).unwrap(), brute_force(&TruthTable, g, DEFAULT_LAMBDA), "game {}", g.id);
    }

    let refs: Vec<&ReferenceGame> = gs.iter().collect();
    let members = (0..3)
        .map(|k| Precomputed::new(SemanticModel::new(EncoderConfig::default(), 40 + k).unwrap(), &refs))
        .collect::<overmod_core::Result<Vec<_>>>()
        .unwrap();
    let ens = Ensemble::new(members).unwrap();
    let s = RsaSpeaker::new(&ens, DEFAULT_LAMBDA).unwrap();
    let s0 = RsaSpeaker::new(&ens, 0.0).unwrap();
    let tiny = RsaSpeaker::new(&ens, 1e-9).unwrap();
    for g in &gs {
        assert_eq!(s.speak(g).unwrap(), brute_force(&ens, g, DEFAULT_LAMBDA), "game {}", g.id);
        assert_eq!(s0.speak(g).unwrap(), tiny.speak(g).unwrap(), "game {}", g.id);
    }
}

#[test]
fn ground_truth_speaker_says_the_ground_truth() {
    for g in &games(8, 5) {
        assert_eq!(GroundTruthSpeaker.speak(g).unwrap(), g.ground_truth.ids());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distribution_is_an_equivariant_simplex(v in prop::array::uniform3(-20.0f64..20.0), shift in -50.0f64..50.0) {
        let p = listener_distribution(v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for perm in [[0, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let q = listener_distribution(perm.map(|i| v[i]));
            for k in 0..3 {
                prop_assert!((q[k] - p[perm[k]]).abs() < 1e-12);
            }
        }
        prop_assert_eq!(argmax3(listener_distribution(v.map(|x| x + shift))), argmax3(p));
    }

    #[test]
    fn tabular_rsa_is_always_true_of_the_target(seed in 0u64..1000, id in 0u64..10_000) {
        let g = overmod_core::scene::generate_game(&EnvironmentConfig::uniform(seed), id).unwrap();
        let out = RsaSpeaker::new(TruthTable, DEFAULT_LAMBDA).unwrap().speak(&g).unwrap();
        let (c, s) = g.features()[g.target];
        prop_assert!(TruthTable::truth(&out, c, s));
    }
}

#[test]
fn literal_context_encoding() {
    let sp = LiteralSpeaker::new(EncoderConfig::default(), 3).unwrap();
    let g = &games(4, 6)[0];
    let r = &g.referents;
    let d = sp.config.embed_dim;
    let h = sp.encode([&r[0].image, &r[1].image, &r[2].image], 0).unwrap();
    assert_eq!(h.len(), 3 * d + 3);
    assert_eq!(&h[3 * d..], &[1.0, 0.0, 0.0]);
    assert_eq!(h, sp.encode([&r[0].image, &r[1].image, &r[2].image], 0).unwrap());
    let swapped = sp.encode([&r[0].image, &r[2].image, &r[1].image], 0).unwrap();
    assert_ne!(h, swapped);
    assert_eq!(&h[d..2 * d], &swapped[2 * d..3 * d]);
    assert!(sp.encode([&r[0].image, &r[1].image, &r[2].image], 3).is_err());
}

#[test]
fn untrained_decoding_is_bounded_and_deterministic() {
    let sp = LiteralSpeaker::new(EncoderConfig::default(), 9).unwrap();
    let gs = games(70, 7);
    let refs: Vec<&ReferenceGame> = gs.iter().collect();
    let all = sp.speak_all(&refs).unwrap();
    assert_eq!(all.len(), 70);
    for (g, out) in gs.iter().zip(&all) {
        assert!(out.len() <= MAX_DECODE);
        assert!(out.iter().all(|&t| t < EOS));
        assert_eq!(&sp.speak(g).unwrap(), out);
    }
}

#[test]
fn small_literal_run_is_deterministic_and_round_trips() {
    let gs = games(40, 8);
    let refs: Vec<&ReferenceGame> = gs.iter().collect();
    let hyper = TrainingHyperparams {
        epochs: 2,
        ..TrainingHyperparams::literal_speaker(4)
    };
    let a = train_literal_speaker(&refs, &EncoderConfig::default(), &hyper).unwrap();
    let b = train_literal_speaker(&refs, &EncoderConfig::default(), &hyper).unwrap();
    for ((n, x), (_, y)) in a.speaker.params.iter().zip(b.speaker.params.iter()) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
    assert_eq!(a.validation_ids.len(), 4);
    assert!(a.validation_ids.iter().all(|id| !a.train_ids.contains(id)));
    let best = a.log.iter().map(|l| l.validation).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.speaker.validation_accuracy, best);
    assert!(a.speaker.validation_accuracy >= a.log[0].validation);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    a.speaker.to_checkpoint("literal-speaker").unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta("role").unwrap(), "literal-speaker");
    let back = LiteralSpeaker::from_checkpoint(&ck).unwrap();
    assert_eq!(back.speak_all(&refs).unwrap(), a.speaker.speak_all(&refs).unwrap());
    assert!(SemanticModel::from_checkpoint(&ck).is_err());
}

/// Desk defaults on 500 uniform games: the speaker beats 50% exact match on
/// held-out games, and its training loss falls.
#[test]
fn desk_scale_literal_speaker_learns() {
    let all = games(900, 9);
    let (train, eval) = all.split_at(500);
    let refs: Vec<&ReferenceGame> = train.iter().collect();
    let t = train_literal_speaker(&refs, &EncoderConfig::default(), &TrainingHyperparams::literal_speaker(2)).unwrap();
    assert!(t.log.last().unwrap().train_loss < t.log[0].train_loss);
    assert!(t.speaker.validation_accuracy >= t.log[0].validation);
    let eval_refs: Vec<&ReferenceGame> = eval.iter().collect();
    let said = t.speaker.speak_all(&eval_refs).unwrap();
    let hits = said.iter().zip(eval).filter(|(s, g)| **s == g.ground_truth.ids()).count();
    let rate = hits as f64 / eval.len() as f64;
    assert!(rate > 0.5, "held-out exact match {rate}");
}

/// A trained semantic ensemble still agrees with the brute-force oracle.
#[test]
fn rsa_oracle_with_trained_members() {
    let gs = games(300, 10);
    let refs: Vec<&ReferenceGame> = gs.iter().collect();
    let hyper = TrainingHyperparams {
        epochs: 2,
        ..TrainingHyperparams::semantic(5)
    };
    let m = train_semantic_function(&refs[..60], &EncoderConfig::default(), &hyper).unwrap().model;
    let pre = Precomputed::new(m, &refs).unwrap();
    let s = RsaSpeaker::new(&pre, DEFAULT_LAMBDA).unwrap();
    for g in &gs {
        assert_eq!(s.speak(g).unwrap(), brute_force(&pre, g, DEFAULT_LAMBDA));
    }
}
