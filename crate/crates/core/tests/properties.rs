mod common;

use std::collections::HashSet;

use cmc_core::cmc::{cmc_forward, cmc_score, CmcConfig, CmcParams};
use cmc_core::encoders::Embedding;
use cmc_core::eval::{compute_metrics, EvalRecord};
use cmc_core::index::{index_file_len, CandidateIndex, RankedList, INDEX_HEADER_LEN};
use cmc_core::nn::{layer_norm, softmax, Checkpoint};
use cmc_core::training::{compute_loss, sample_negatives, NegativeSampling};
use cmc_core::Id;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finite_vec(len: impl Into<proptest::collection::SizeRange>) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-8.0f32..8.0, len)
}

fn small_params(seed: u64) -> CmcParams {
    CmcParams::init(&CmcConfig::with_dim(8, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(v in finite_vec(1..40), shift in -20.0f32..20.0) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_standardizes(v in finite_vec(2..32)) {
        let spread = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - v.iter().cloned().fold(f32::INFINITY, f32::min);
        prop_assume!(spread > 0.1);
        let n = v.len();
        let y = layer_norm(&v, &vec![1.0; n], &vec![0.0; n]).unwrap();
        let mean = y.iter().sum::<f32>() / n as f32;
        let var = y.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / n as f32;
        prop_assert!(mean.abs() < 1e-4);
        prop_assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn candidate_permutation_permutes_scores(seed in 0u64..1000, k in 1usize..10) {
        let params = small_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let q = common::rand_vec(&mut rng, 8);
        let cands: Vec<Vec<f32>> = (0..k).map(|_| common::rand_vec(&mut rng, 8)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f32>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let a = cmc_score(&cmc_forward(&params, &q, &cands).unwrap()).unwrap();
        let b = cmc_score(&cmc_forward(&params, &q, &shuffled).unwrap()).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            prop_assert!((b.scores[pos] - a.scores[orig]).abs() <= 1e-5);
        }
        prop_assert_eq!(perm[b.argmax], a.argmax);
    }

    #[test]
    fn loss_terms_decompose(scores in finite_vec(2..20), seed in any::<u64>(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        let k = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let retriever: Vec<f32> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gold = rng.random_range(0..k);
        let both = compute_loss(&scores, gold, &retriever, l1, l2).unwrap();
        let ce = compute_loss(&scores, gold, &retriever, l1, 0.0).unwrap();
        let kl = compute_loss(&scores, gold, &retriever, 0.0, l2).unwrap();
        prop_assert!((ce.loss + kl.loss - both.loss).abs() <= 1e-6);
        prop_assert!(both.kl >= -1e-9);
        prop_assert!((ce.loss - l1 * ce.ce).abs() <= 1e-6);
        let same = compute_loss(&scores, gold, &scores, l1, l2).unwrap();
        prop_assert!(same.kl.abs() <= 1e-6);
    }

    #[test]
    fn gold_position_does_not_change_loss(seed in 0u64..500, k in 2usize..8) {
        let params = small_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let q = common::rand_vec(&mut rng, 8);
        let gold_vec = common::rand_vec(&mut rng, 8);
        let negs: Vec<Vec<f32>> = (0..k - 1).map(|_| common::rand_vec(&mut rng, 8)).collect();
        let gold_r: f32 = rng.random_range(-1.0..1.0);
        let neg_r: Vec<f32> = (0..k - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss_at = |pos: usize| {
            let mut c = negs.clone();
            c.insert(pos, gold_vec.clone());
            let mut r = neg_r.clone();
            r.insert(pos, gold_r);
            let s = cmc_score(&cmc_forward(&params, &q, &c).unwrap()).unwrap();
            compute_loss(&s.scores, pos, &r, 0.5, 0.5).unwrap().loss
        };
        let first = loss_at(0);
        for pos in 1..k {
            prop_assert!((loss_at(pos) - first).abs() <= 1e-5);
        }
    }

    #[test]
    fn negatives_exclude_gold_and_repeat_nothing(
        pool_size in 4usize..40, k_train in 2usize..5, p in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(Id, f32)> = (0..pool_size as Id).map(|i| (i, rng.random_range(-3.0..3.0))).collect();
        let pool = RankedList::from_unsorted(entries).unwrap();
        let gold = pool_size as Id + 1;
        let cfg = NegativeSampling { k_train, fixed_fraction: p };
        let negs = sample_negatives(&pool, gold, &cfg, &mut rng).unwrap();
        prop_assert_eq!(negs.len(), k_train - 1);
        prop_assert!(!negs.contains(&gold));
        prop_assert_eq!(negs.iter().collect::<HashSet<_>>().len(), negs.len());
        let fixed = cfg.fixed_count();
        prop_assert_eq!(&negs[..fixed], &pool.ids()[..fixed]);
    }

    #[test]
    fn metrics_match_a_naive_loop(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<EvalRecord> = (0..n as Id)
            .map(|q| {
                let mut ids: Vec<Id> = (0..20).collect();
                ids.shuffle(&mut rng);
                ids.truncate(rng.random_range(0..15));
                let gold = rng.random_range(0..20);
                let gold_in_pool = ids.contains(&gold) || rng.random_bool(0.5);
                EvalRecord { query_id: q, gold, ranked: ids, gold_in_pool }
            })
            .collect();
        let ks: Vec<usize> = (1..=15).collect();
        let t = compute_metrics(&records, &ks).unwrap();
        for w in t.recall.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        for &k in &ks {
            let mut hits = 0;
            for r in &records {
                for (i, &id) in r.ranked.iter().enumerate() {
                    if id == r.gold && i < k {
                        hits += 1;
                    }
                }
            }
            prop_assert_eq!(t.recall_at(k).unwrap(), hits as f64 / n as f64);
        }
        let mut mrr = 0.0;
        for r in &records {
            for (i, &id) in r.ranked.iter().enumerate() {
                if id == r.gold && i < 10 {
                    mrr += 1.0 / (i + 1) as f64;
                }
            }
        }
        prop_assert!((t.mrr_at_10 - mrr / n as f64).abs() < 1e-12);
        prop_assert_eq!(t.unnormalized_accuracy, t.recall_at(1).unwrap());
        if let Some(norm) = t.normalized_accuracy {
            prop_assert!(norm >= t.unnormalized_accuracy);
        }
    }

    #[test]
    fn search_matches_full_scan(seed in any::<u64>(), n in 1usize..300, dim in 1usize..12, k in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<Id> = (0..n as Id).map(|i| i * 3 + 1).collect();
        // Coarse values create exact ties, exercising the tie-break.
        let embs: Vec<Embedding> = (0..n)
            .map(|_| Embedding::new((0..dim).map(|_| rng.random_range(-3i32..=3) as f32).collect()).unwrap())
            .collect();
        let index = CandidateIndex::build(&ids, &embs, dim).unwrap();
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f32).collect();
        let got = index.search_topk(&q, k).unwrap();
        let mut naive: Vec<(Id, f32)> = ids
            .iter()
            .zip(&embs)
            .map(|(&id, e)| (id, e.values().iter().zip(&q).map(|(a, b)| a * b).sum::<f32>()))
            .collect();
        naive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        naive.truncate(k);
        prop_assert_eq!(got.entries(), &naive[..]);

        let bytes = index.to_bytes();
        prop_assert_eq!(bytes.len(), index_file_len(n, dim));
        prop_assert_eq!(bytes.len() - INDEX_HEADER_LEN - n * 8, n * dim * 4);
        let back = CandidateIndex::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let params = small_params(seed);
        let bytes = params.to_checkpoint().to_bytes();
        let back = CmcParams::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
