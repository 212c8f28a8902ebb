mod common;

use common::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use sae_ensemble::data::{
    epoch_order, generate_synthetic, read_shard, write_shard, ActivationDataset, CoeffDistribution,
    SyntheticDictionarySpec,
};
use sae_ensemble::downstream::{shift_score, zero_ablate};
use sae_ensemble::ensemble::{Ensemble, EnsembleKind};
use sae_ensemble::metrics::{connectivity, diversity_sweep, gram_support, stability, CoefficientMatrix};
use sae_ensemble::sae::{
    adam_step, load_checkpoint, save_checkpoint, Activation, AdamConfig, AdamState, CheckpointMeta, SaeGrads,
};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        (1usize..4).prop_map(|k| Activation::Topk { k }),
        Just(Activation::Jumprelu { bandwidth: 1e-3 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthetic_dictionary_columns_are_unit(dim in 1usize..12, extra in 0usize..10, seed: u64) {
        let k = dim + extra;
        let spec = SyntheticDictionarySpec {
            dim,
            true_feature_count: k,
            active_per_sample: 1,
            coeff_distribution: CoeffDistribution::Uniform { low: 0.0, high: 1.0 },
            noise_std: 0.0,
            bias: vec![],
            seed,
        };
        let s = generate_synthetic(&spec, 3).unwrap();
        for col in s.dictionary.columns() {
            prop_assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(s.codes.map_axis(Axis(1), |r| r.iter().filter(|v| **v != 0.0).count()).iter().all(|&c| c <= 1), true);
    }

    #[test]
    fn encode_matches_oracle(act in activation(), seed: u64) {
        let mut rng = rng(seed);
        let p = random_sae(&mut rng, 3, 6, act, 0.1);
        let x = gaussian(&mut rng, 4, 3, 1.0);
        let codes = p.encode_batch(x.view()).unwrap();
        for (row, a) in codes.rows().into_iter().zip(x.rows()) {
            let expect = oracle_codes(&p, a);
            for (u, v) in row.iter().zip(&expect) {
                prop_assert_eq!(*u == 0.0, *v == 0.0);
                prop_assert!(rel(*u, *v) < 1e-12);
            }
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            if let Activation::Topk { k } = act {
                prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= k);
            }
        }
    }

    #[test]
    fn adam_keeps_decoder_on_sphere(act in activation(), seed: u64, steps in 1usize..6, lr in 1e-4f64..0.5) {
        let mut rng = rng(seed);
        let mut p = random_sae(&mut rng, 4, 7, act, 0.1);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
        for _ in 0..steps {
            let mut g = SaeGrads::zeros_like(&p);
            g.w_enc = gaussian(&mut rng, 7, 4, 1.0);
            g.w_dec = gaussian(&mut rng, 4, 7, 1.0);
            if let Some(t) = g.theta.as_mut() {
                t.mapv_inplace(|_| 1.0);
            }
            adam_step(&mut p, &g, &mut st, &cfg);
            prop_assert!(p.max_column_norm_error() < 1e-6);
            if let Some(t) = &p.theta {
                prop_assert!(t.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn flattened_equals_ensemble(
        kind in prop_oneof![Just(EnsembleKind::NaiveBagging), Just(EnsembleKind::Boosting)],
        act in activation(),
        j in 1usize..5,
        seed: u64,
    ) {
        let mut rng = rng(seed);
        let members: Vec<_> = (0..j).map(|_| random_sae(&mut rng, 4, 6, act, 0.1)).collect();
        let ens = Ensemble::new(kind, members, (0..j as u64).collect()).unwrap();
        let x = gaussian(&mut rng, 10, 4, 1.0);
        let flat = ens.flatten().reconstruct_batch(&ens, x.view()).unwrap();
        let direct = ens.reconstruct_batch(x.view()).unwrap();
        let diff = (&flat - &direct).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff < 1e-10, "{}", diff);
    }

    #[test]
    fn diversity_is_monotone_in_tau(seed: u64, m in 2usize..30, dupes in 0usize..2) {
        let mut rng = rng(seed);
        let f = random_features(&mut rng, 5, m, dupes.min(m - 1));
        let taus = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
        let counts = diversity_sweep(f.view(), &taus).unwrap();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(counts[5], m);
        for (t, c) in taus.iter().zip(&counts) {
            prop_assert_eq!(*c, oracle_diversity(f.view(), *t));
        }
    }

    #[test]
    fn connectivity_counts_match(seed: u64, n in 1usize..40, m in 1usize..20, density in 0.0f64..0.6) {
        let mut rng = rng(seed);
        let c = random_sparse_codes(&mut rng, n, m, density);
        let cm = CoefficientMatrix::from_dense(c.view());
        prop_assert_eq!(gram_support(&cm), oracle_gram_nnz(c.view()));
        let conn = connectivity(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&conn));
        prop_assert_eq!(conn, oracle_connectivity(c.view()));
    }

    #[test]
    fn stability_bounds_and_duplicates(seed: u64, m in 1usize..10) {
        let mut rng = rng(seed);
        let a = random_features(&mut rng, 4, m, 0);
        let b = random_features(&mut rng, 4, m + 1, 0);
        let s = stability(&[a.view(), b.view()], 0).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        let same = stability(&[a.view(), a.view()], 1).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shard_roundtrip_is_f32_exact(seed: u64, n in 0usize..20, d in 1usize..6) {
        let mut rng = rng(seed);
        let x = gaussian(&mut rng, n, d, 3.0).mapv(|v| v as f32 as f64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.saea");
        write_shard(&p, x.view()).unwrap();
        let back = read_shard(&p).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn checkpoint_roundtrip(act in activation(), seed: u64) {
        let mut rng = rng(seed);
        let p = random_sae(&mut rng, 3, 5, act, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sae");
        save_checkpoint(&path, &p, &CheckpointMeta::default()).unwrap();
        let (q, _) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn epoch_order_is_permutation(n in 0usize..200, seed in proptest::option::of(any::<u64>())) {
        let mut o = epoch_order(n, seed);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn shift_score_is_affine(base in 0.0f64..0.9, gap in 0.01f64..0.1, t in -1.0f64..2.0) {
        let oracle = base + gap;
        let abl = base + t * gap;
        prop_assert!((shift_score(abl, base, oracle).unwrap() - t).abs() < 1e-9);
    }

    #[test]
    fn ablation_is_idempotent(seed: u64, m in 1usize..12) {
        let mut rng = rng(seed);
        let c = gaussian(&mut rng, 1, m, 1.0).row(0).to_owned();
        let idx: Vec<usize> = (0..m).filter(|i| i % 3 == 0).collect();
        let once = zero_ablate(c.view(), &idx).unwrap();
        prop_assert_eq!(zero_ablate(once.view(), &idx).unwrap(), once.clone());
        for i in 0..m {
            prop_assert_eq!(once[i], if idx.contains(&i) { 0.0 } else { c[i] });
        }
    }

    #[test]
    fn explained_variance_of_exact_reconstruction_is_one(seed: u64) {
        let mut rng = rng(seed);
        let x: Array2<f64> = gaussian(&mut rng, 12, 3, 1.0);
        let ds = ActivationDataset::new(x.clone()).unwrap();
        let ev = sae_ensemble::metrics::explained_variance(x.view(), x.view(), ds.per_dim_mean().unwrap().view()).unwrap();
        prop_assert_eq!(ev, 1.0);
    }
}
