use ccnet_core::data::TripletRecord;
use ccnet_core::synth::{generate, render_image, SyntheticDataset, SyntheticSpec, EVAL_SPLIT, TRAIN_SPLIT};
use ccnet_core::Error;
use proptest::prelude::*;

fn desk(noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise,
        seed,
        word_dim: 16,
        train_triplets: 100,
        ..SyntheticSpec::default()
    }
}

/// Recall@1 of the generative-mapping oracle: decode the reference, apply
/// the caption's value words, and return the first gallery image (in store
/// order) whose decoded attributes match.
fn decoding_oracle_recall(d: &SyntheticDataset, split: &str) -> f64 {
    let decoded: Vec<Vec<usize>> = (0..d.store.len())
        .map(|i| {
            let f = d.store.at(i);
            d.codebook.decode(f.map, f.inter)
        })
        .collect();
    let triplets: &[TripletRecord] = &d.splits[split];
    let hits = triplets
        .iter()
        .filter(|t| {
            let r = d.store.position(&t.ref_id).unwrap();
            let tokens: Vec<String> = t.captions.concat();
            let want = d.codebook.apply_caption(&decoded[r], &tokens);
            let top = decoded.iter().position(|a| *a == want);
            top == Some(d.store.position(&t.trg_id).unwrap())
        })
        .count();
    hits as f64 / triplets.len() as f64
}

#[test]
fn decoding_oracle_solves_noiseless_data() {
    let d = generate(&desk(0.0, 3)).unwrap();
    assert_eq!(decoding_oracle_recall(&d, EVAL_SPLIT), 1.0);
    assert_eq!(decoding_oracle_recall(&d, TRAIN_SPLIT), 1.0);
}

#[test]
fn decoding_oracle_survives_moderate_noise() {
    for seed in [0, 1] {
        let d = generate(&desk(0.1, seed)).unwrap();
        let r1 = decoding_oracle_recall(&d, EVAL_SPLIT);
        assert!(r1 >= 0.99, "seed {seed}: {r1}");
    }
}

#[test]
fn every_image_decodes_to_its_own_attributes() {
    let spec = desk(0.0, 5);
    let d = generate(&spec).unwrap();
    for i in 0..spec.images {
        let f = d.store.at(i);
        assert_eq!(d.codebook.decode(f.map, f.inter), spec.attributes_of(i));
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = generate(&desk(0.05, 11)).unwrap();
    let b = generate(&desk(0.05, 11)).unwrap();
    let bits = |d: &SyntheticDataset| d.store.raw_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.splits, b.splits);
    assert_eq!(a.words.iter().collect::<Vec<_>>(), b.words.iter().collect::<Vec<_>>());
    let c = generate(&desk(0.05, 12)).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn images_do_not_depend_on_triplet_counts() {
    let a = generate(&desk(0.05, 4)).unwrap();
    let b = generate(&SyntheticSpec { train_triplets: 7, eval_triplets: 3, ..desk(0.05, 4) }).unwrap();
    assert_eq!(a.store, b.store);
    // and each image is reproducible from its index alone
    for i in [0, 17, 1295] {
        let (map, inter) = render_image(&a.codebook, i);
        let f = a.store.at(i);
        assert_eq!((map.as_slice(), inter.as_slice()), (f.map, f.inter));
    }
}

#[test]
fn split_sizes_follow_the_spec() {
    let d = generate(&desk(0.05, 0)).unwrap();
    assert_eq!(d.splits[TRAIN_SPLIT].len(), 100);
    assert_eq!(d.splits[EVAL_SPLIT].len(), 500);
    assert_eq!(d.store.len(), 1296);
}

#[test]
fn captions_name_one_or_two_flips_to_a_unique_target() {
    let spec = desk(0.0, 8);
    let d = generate(&spec).unwrap();
    for t in d.splits.values().flatten() {
        t.validate_against(&d.store).unwrap();
        assert!((1..=2).contains(&t.captions.len()));
        let r = spec.attributes_of(d.store.position(&t.ref_id).unwrap());
        let g = spec.attributes_of(d.store.position(&t.trg_id).unwrap());
        let changed = r.iter().zip(&g).filter(|(a, b)| a != b).count();
        assert_eq!(changed, t.captions.len());
        assert_eq!(d.codebook.apply_caption(&r, &t.captions.concat()), g);
        // every caption token has a word vector
        for tok in t.captions.concat() {
            assert!(d.words.get(&tok).is_some(), "{tok}");
        }
    }
}

#[test]
fn stored_values_stay_within_the_noise_band() {
    let noisy = generate(&desk(0.05, 2)).unwrap();
    let clean = generate(&desk(0.0, 2)).unwrap();
    let worst = noisy
        .store
        .raw_values()
        .iter()
        .zip(clean.store.raw_values())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    assert!(worst <= 0.05 + 1e-6 && worst > 0.0, "{worst}");
}

#[test]
fn infeasible_specs_are_rejected() {
    let cases = [
        SyntheticSpec { images: 1000, ..desk(0.0, 0) },
        SyntheticSpec { attributes: 0, images: 1, ..desk(0.0, 0) },
        SyntheticSpec { attributes: 8, values: 2, images: 256, ..desk(0.0, 0) },
        SyntheticSpec { values: 1, images: 1, ..desk(0.0, 0) },
        SyntheticSpec { categories: 4, ..desk(0.0, 0) },
        SyntheticSpec { noise: -0.1, ..desk(0.0, 0) },
        SyntheticSpec { noise: f64::NAN, ..desk(0.0, 0) },
        SyntheticSpec { word_dim: 0, ..desk(0.0, 0) },
    ];
    for spec in cases {
        assert!(matches!(generate(&spec), Err(Error::InfeasibleSpec(_))), "{spec:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn small_specs_generate_consistent_triplets(
        a in 1usize..4, v in 2usize..5, seed in 0u64..1000, n in 1usize..40,
    ) {
        let spec = SyntheticSpec {
            attributes: a,
            values: v,
            images: v.pow(a as u32),
            train_triplets: n,
            eval_triplets: 1,
            categories: 1,
            channels: 4,
            inter_channels: 4,
            word_dim: 4,
            seed,
            ..SyntheticSpec::default()
        };
        let d = generate(&spec).unwrap();
        prop_assert_eq!(d.splits[TRAIN_SPLIT].len(), n);
        for t in &d.splits[TRAIN_SPLIT] {
            prop_assert_ne!(&t.ref_id, &t.trg_id);
            prop_assert_eq!(&d.categories[&t.ref_id], &t.category);
        }
    }
}
