//! A trained Siamese head must score same-class pairs above cross-class
//! pairs for the vast majority of sampled pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resinsort::data::{
    compute_stats, load_image, sample_pairs, split_dataset, synth_generate, Split, StatsScope,
};
use resinsort::nets::siamese_forward;
use resinsort::trainer::{train, Model, NetKind, Profile, TrainConfig};

#[test]
fn trained_siamese_orders_pairs_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = synth_generate(3, 24, 11, dir.path()).unwrap();
    split_dataset(&mut manifest, (80, 10, 10), 11).unwrap();
    manifest.stats = compute_stats(dir.path(), &manifest, StatsScope::Train, 32).unwrap();
    let cfg = TrainConfig {
        kind: NetKind::Siamese,
        profile: Profile::Mini,
        epochs: 10,
        samples_per_epoch: 200,
        batch_size: 20,
        seed: 11,
        val_samples: 40,
        ..TrainConfig::siamese_defaults()
    };
    let (model, history) = train(&cfg, dir.path(), &manifest).unwrap();
    assert!(history.train.last().unwrap() < &history.train[0]);
    let Model::Siamese(siamese) = &model else {
        panic!("trained a siamese model");
    };

    // Score 100 same-class and 100 cross-class test pairs; under the
    // target = 1 - y convention the same-class score should be the larger
    // one in at least 95% of same/cross pairings.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let same = sample_pairs(&manifest, Split::Test, 100, 1.0, &mut rng).unwrap();
    let cross = sample_pairs(&manifest, Split::Test, 100, 0.0, &mut rng).unwrap();
    let score = |pair: &resinsort::data::PairSample| {
        let a = load_image(
            dir.path(),
            &manifest.records[pair.first],
            32,
            &manifest.stats,
        )
        .unwrap();
        let b = load_image(
            dir.path(),
            &manifest.records[pair.second],
            32,
            &manifest.stats,
        )
        .unwrap();
        siamese_forward(siamese, &a, &b).unwrap()
    };
    let same_scores: Vec<f64> = same.iter().map(&score).collect();
    let cross_scores: Vec<f64> = cross.iter().map(&score).collect();
    let mut wins = 0usize;
    let mut total = 0usize;
    for s in &same_scores {
        for c in &cross_scores {
            total += 1;
            if s > c {
                wins += 1;
            }
        }
    }
    let rate = wins as f64 / total as f64;
    assert!(
        rate >= 0.95,
        "same-class pairs outscored cross-class in only {rate:.3} of cases"
    );
}
