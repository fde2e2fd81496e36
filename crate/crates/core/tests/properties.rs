//! Cross-module invariants as property tests.

use proptest::prelude::*;

use zsar::devise::{hinge_rank_loss, DeviseInit, DeviseProjection};
use zsar::embeddings::{pairwise_distances, random_embeddings, DistanceMetric};
use zsar::encoder::{EncoderConfig, EncoderModel, VisualFeatureMatrix};
use zsar::eval::{evaluate, Paradigm};
use zsar::numerics::{Rng, Tensor};
use zsar::relation::{RelationHyper, RelationModel};
use zsar::skeleton::{JointTopology, SkeletonSequence};
use zsar::split::{furthest_split, nearest_split, random_split, ClassSplit, SplitStrategy};

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

fn unseen_features(split: &ClassSplit, per_class: usize, dim: usize, rng: &mut Rng) -> VisualFeatureMatrix {
    let mut rows = Vec::new();
    let mut label_indices = Vec::new();
    for &c in split.unseen() {
        for _ in 0..per_class {
            rows.extend((0..dim).map(|_| rng.normal()));
            label_indices.push(c);
        }
    }
    VisualFeatureMatrix::new(Tensor::matrix(label_indices.len(), dim, rows).unwrap(), label_indices, false).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gzsl_never_beats_zsl(seed in any::<u64>(), classes in 4usize..10, unseen in 1usize..4, use_relation in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let table = random_embeddings(&labels(classes), 6, &mut rng).unwrap();
        let split = random_split(table.labels(), unseen.min(classes - 1), &mut rng).unwrap();
        let features = unseen_features(&split, 3, 5, &mut rng);
        let devise = DeviseProjection::init(6, 5, DeviseInit::Gaussian { std: 1.0 }, &mut rng);
        let relation = RelationModel::init(6, 5, &RelationHyper::default(), &mut rng);
        let head: &dyn zsar::eval::ZeroShotHead = if use_relation { &relation } else { &devise };
        let ks: Vec<usize> = (1..=classes).collect();
        let zsl = evaluate(head, &features, &split, &table, Paradigm::Zsl, &ks, serde_json::Value::Null).unwrap();
        let gzsl = evaluate(head, &features, &split, &table, Paradigm::Gzsl, &ks, serde_json::Value::Null).unwrap();
        for (k, g) in &gzsl.hit_at {
            if let Some(z) = zsl.hit_at.get(k) {
                prop_assert!(g <= z, "k {k}: gzsl {g} > zsl {z}");
            }
        }
        let hits: Vec<f64> = gzsl.hit_at.values().copied().collect();
        prop_assert!(hits.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(hits.iter().all(|h| (0.0..=1.0).contains(h)));
        prop_assert_eq!(gzsl.hit_at[&classes], 1.0);
    }

    #[test]
    fn splits_partition_the_classes(seed in any::<u64>(), classes in 3usize..14, k in 1usize..6) {
        let k = k.min(classes - 1);
        let mut rng = Rng::new(seed);
        let table = random_embeddings(&labels(classes), 8, &mut rng).unwrap();
        let dist = pairwise_distances(&table, DistanceMetric::Cosine).unwrap();
        let splits = [
            nearest_split(&dist, k, 0.0).unwrap(),
            furthest_split(&dist, k).unwrap(),
            random_split(table.labels(), k, &mut rng).unwrap(),
        ];
        for s in &splits {
            prop_assert_eq!(s.unseen().len(), k);
            prop_assert_eq!(s.seen().len() + s.unseen().len(), classes);
            prop_assert!(s.unseen().iter().all(|&c| !s.is_seen(c) && s.is_unseen(c)));
            prop_assert!(s.seen().iter().all(|&c| s.is_seen(c) && !s.is_unseen(c)));
            let mut all: Vec<usize> = s.seen().iter().chain(s.unseen()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_devise_loss_is_margin_times_negatives(seed in any::<u64>(), d in 1usize..9, f in 1usize..9, c in 2usize..12, margin in 0.01f64..2.0) {
        let mut rng = Rng::new(seed);
        let table = random_embeddings(&labels(c), d, &mut rng).unwrap();
        let v: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
        let label = rng.below(c);
        let negatives: Vec<usize> = (0..c).collect();
        let (loss, grad) = hinge_rank_loss(&DeviseProjection::zeros(d, f), &v, label, &table, &negatives, margin).unwrap();
        prop_assert!((loss - margin * (c - 1) as f64).abs() <= 1e-9);
        prop_assert!(grad.is_finite());
    }

    #[test]
    fn seen_class_softmax_never_predicts_unseen(seed in any::<u64>(), persons in 1usize..3, frames in 1usize..8) {
        let mut rng = Rng::new(seed);
        let topo = JointTopology::chain(5).unwrap();
        let config = EncoderConfig { block_channels: vec![3, 4], frames: 6, epochs: 0, ..EncoderConfig::default() };
        let seen = [0, 2, 5];
        let model = EncoderModel::init(&config, &topo, &seen, &mut rng).unwrap();
        for label in [1, 3, 4, 6] {
            let coords: Vec<f64> = (0..persons * frames * 5 * 3).map(|_| rng.normal()).collect();
            let seq = SkeletonSequence::new([persons, frames, 5, 3], coords, label).unwrap();
            prop_assert!(seen.contains(&model.classify(&seq).unwrap()));
        }
    }

    #[test]
    fn split_files_roundtrip(seed in any::<u64>(), classes in 2usize..10) {
        let mut rng = Rng::new(seed);
        let names = labels(classes);
        let split = random_split(&names, 1 + rng.below(classes - 1), &mut rng).unwrap();
        let file = split.to_file(&names).unwrap();
        let back = file.resolve(&names).unwrap();
        prop_assert_eq!(back.seen(), split.seen());
        prop_assert_eq!(back.unseen(), split.unseen());
        prop_assert_eq!(file.strategy, SplitStrategy::Random);
    }
}
