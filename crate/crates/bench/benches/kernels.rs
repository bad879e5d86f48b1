use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use overmod_core::agents::{LiteralSpeaker, RsaSpeaker, Speaker, DEFAULT_LAMBDA};
use overmod_core::nn::{EncoderConfig, Graph};
use overmod_core::scene::{generate_game, generate_games, EnvironmentConfig, Image, ReferenceGame};
use overmod_core::semantics::{batch_chw, Precomputed, SemanticModel, TruthTable};

fn games(n: usize) -> Vec<ReferenceGame> {
    generate_games(&EnvironmentConfig::uniform(1), n).unwrap().games
}

fn scene(c: &mut Criterion) {
    let env = EnvironmentConfig::uniform(1);
    let mut id = 0;
    c.bench_function("generate_game", |b| {
        b.iter(|| {
            id += 1;
            black_box(generate_game(&env, id).unwrap())
        })
    });
}

fn semantic(c: &mut Criterion) {
    let gs = games(11);
    let images: Vec<&Image> = gs.iter().flat_map(|g| g.referents.iter().map(|r| &r.image)).take(32).collect();
    let model = SemanticModel::new(EncoderConfig::default(), 1).unwrap();
    let s = model.config.image_side;

    c.bench_function("image_embeddings_32", |b| b.iter(|| black_box(model.image_embeddings(&images).unwrap())));

    let x = batch_chw(&images);
    c.bench_function("image_encoder_fwd_bwd_32", |b| {
        b.iter(|| {
            let mut params = model.params.clone();
            let mut g = Graph::new();
            let p = g.bind(&params);
            let xi = g.input(&[32, 3, s, s], x.clone()).unwrap();
            let f = model.image_encoder().forward(&mut g, &p, xi).unwrap();
            let loss = g.sum(f);
            g.backward(loss, &mut params).unwrap();
            black_box(params)
        })
    });
}

fn speakers(c: &mut Criterion) {
    let gs = games(64);
    let refs: Vec<&ReferenceGame> = gs.iter().collect();

    let tabular = RsaSpeaker::new(TruthTable, DEFAULT_LAMBDA).unwrap();
    c.bench_function("rsa_speak_tabular", |b| b.iter(|| black_box(tabular.speak(&gs[3]).unwrap())));

    let pre = Precomputed::new(SemanticModel::new(EncoderConfig::default(), 2).unwrap(), &refs).unwrap();
    let neural = RsaSpeaker::new(&pre, DEFAULT_LAMBDA).unwrap();
    c.bench_function("rsa_speak_precomputed", |b| b.iter(|| black_box(neural.speak(&gs[3]).unwrap())));

    let literal = LiteralSpeaker::new(EncoderConfig::default(), 3).unwrap();
    let mut group = c.benchmark_group("literal");
    group.sample_size(10);
    group.bench_function("decode_64_games", |b| b.iter(|| black_box(literal.speak_all(&refs).unwrap())));
    group.finish();
}

criterion_group!(benches, scene, semantic, speakers);
criterion_main!(benches);
