use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use feedloop_core::classify::{train_reference, TrainParams};
use feedloop_core::drift::build_profile;
use feedloop_core::feedback::ConflictQueue;
use feedloop_core::goldset::{GoldExample, GoldSet, Provenance, Split, SplitRatios};
use feedloop_core::lifecycle::evaluate_model;
use feedloop_core::{Exec, Label, MessageKey, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus(n: usize) -> Vec<(String, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab: Vec<String> = (0..5_000).map(|i| format!("tok{i}")).collect();
    (0..n)
        .map(|_| {
            let ct = rng.random_bool(0.4);
            let mut words: Vec<&str> = (0..40).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect();
            if ct {
                words.push("cabal");
            }
            (words.join(" "), if ct { Label::Ct } else { Label::NotCt })
        })
        .collect()
}

fn train(c: &mut Criterion) {
    let data = corpus(2_000);
    let mut group = c.benchmark_group("train_reference");
    group.sample_size(10);
    for (name, exec) in MODES {
        let params = TrainParams { epochs: 20, exec, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &params, |b, p| {
            b.iter(|| train_reference(&data, p, "bench").unwrap())
        });
    }
    group.finish();
}

fn profile(c: &mut Criterion) {
    let texts: Vec<String> = corpus(10_000).into_iter().map(|(t, _)| t).collect();
    let mut group = c.benchmark_group("build_profile");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| build_profile(&texts, exec)));
    }
    group.finish();
}

fn evaluate(c: &mut Criterion) {
    let data = corpus(5_000);
    let ratios = SplitRatios::default();
    let mut gold = GoldSet::new(ratios).unwrap();
    let conflicts = ConflictQueue::default();
    for (i, (text, label)) in data.iter().enumerate() {
        let key = MessageKey::new("bench", i as u64);
        gold.add_gold(GoldExample::new(&key, text.clone(), *label, Provenance::Explicit, Timestamp(0), &ratios), &conflicts)
            .unwrap();
    }
    let snapshot = gold.snapshot();
    let train: Vec<(String, Label)> = snapshot.split(Split::Train).iter().map(|g| (g.text.clone(), g.label)).collect();
    let model = train_reference(&train, &TrainParams { epochs: 5, ..Default::default() }, &snapshot.snapshot_id).unwrap();

    let mut group = c.benchmark_group("evaluate_model");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| evaluate_model("ft-1", &model, &snapshot, Split::Validation, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train, profile, evaluate);
criterion_main!(benches);
