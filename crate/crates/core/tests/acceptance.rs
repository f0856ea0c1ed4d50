mod common;

use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};

use common::{concrete_verdict, enumerate_qk_dags, rng, rows, run_dag, uniform};
use opnas_core::biws::{center_rows, Supernet};
use opnas_core::evolution::{
    read_history, run_persistent, ucb, Algorithm, HistoryRecord, Search, SearchConfig, SyntheticFitness, UcbStats,
    HISTORY_FILE,
};
use opnas_core::metrics::{mean_pairwise_cosine, relative_residual_norm, uniformity_report};
use opnas_core::model::{mlm_pretrain, synth_corpus, Model, ModelConfig, TrainConfig};
use opnas_core::search_space::{
    autobert_zero_backbone, bandit_softmax, count_params, infer_shapes, standard_backbone, AttentionDag, BackboneSpec,
    InputNode, LayerSpec, PrimitiveOp, SearchSpaceError, ShapeExpr, KERNEL_MENU, MAX_KERNEL, MAX_PATH_LEN, NUM_OPS,
};
use opnas_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs one criterion and prints its verdict past the test harness capture.
fn criterion(n: usize, body: impl FnOnce() + UnwindSafe) {
    let outcome = catch_unwind(body);
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {verdict}").unwrap();
    out.flush().unwrap();
    if let Err(e) = outcome {
        resume_unwind(e);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_01_gradients() {
    criterion(1, || {
        for (name, err) in common::gradient_report(20, 101) {
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    });
}

#[test]
fn criterion_02_shape_inference() {
    criterion(2, || {
        let dags = enumerate_qk_dags(3);
        let mut r = rng(102);
        let mut disagreements = 0;
        for dag in &dags {
            let symbolic = match infer_shapes(dag) {
                Ok(_) => Ok(()),
                Err(SearchSpaceError::IllegalGraph { node, .. }) => Err(node),
                Err(e) => panic!("{dag}: {e}"),
            };
            disagreements += (symbolic != concrete_verdict(dag, 7, 5, &mut r)) as usize;
        }
        assert_eq!(disagreements, 0, "of {} graphs", dags.len());
    });
}

#[test]
fn criterion_03_standard_attention() {
    criterion(3, || {
        let dag = AttentionDag::standard();
        let mut r = rng(103);
        for _ in 0..50 {
            let n = r.random_range(2..10);
            let dh = r.random_range(1..9);
            let (q, k, v) = (uniform(&[n, dh], &mut r), uniform(&[n, dh], &mut r), uniform(&[n, dh], &mut r));
            let got = run_dag(&dag, &[(InputNode::Q, q.clone()), (InputNode::K, k.clone()), (InputNode::V, v.clone())]);
            let want = common::standard_attention(&rows(&q), &rows(&k), &rows(&v));
            assert!(common::max_diff(&want, &got) < 1e-6);
        }
    });
}

#[test]
fn criterion_04_published_dags() {
    criterion(4, || {
        for dag in [AttentionDag::autobert_l2(), AttentionDag::autobert_l12()] {
            dag.validate(MAX_PATH_LEN).unwrap();
            assert_eq!(*infer_shapes(&dag).unwrap().last().unwrap(), ShapeExpr::INPUT);
        }
        let mut r = rng(104);
        for _ in 0..20 {
            let (q, k, v) = (uniform(&[4, 8], &mut r), uniform(&[4, 8], &mut r), uniform(&[4, 8], &mut r));
            let l2 = run_dag(&AttentionDag::autobert_l2(), &[(InputNode::Q, q.clone()), (InputNode::K, k.clone())]);
            let l12 = run_dag(
                &AttentionDag::autobert_l12(),
                &[(InputNode::Q, q.clone()), (InputNode::K, k.clone()), (InputNode::V, v.clone())],
            );
            assert_eq!(l2.shape(), &[4, 8]);
            assert_eq!(l12.shape(), &[4, 8]);
            let (q, k, v) = (rows(&q), rows(&k), rows(&v));
            assert!(common::max_diff(&common::l2_attention(&q, &k), &l2) < 1e-9);
            assert!(common::max_diff(&common::l12_attention(&q, &k, &v), &l12) < 1e-9);
        }
    });
}

#[test]
fn criterion_05_ucb() {
    criterion(5, || {
        let mut r = rng(105);
        for _ in 0..100 {
            let mu: f64 = r.random();
            let alpha = r.random_range(0.0..3.0);
            let total: u64 = r.random_range(1..10_000);
            let visits: u64 = r.random_range(1..=total);
            let direct = mu + alpha * (2.0 * (total as f64).ln() / visits as f64).sqrt();
            assert!((ucb(mu, alpha, total, visits) - direct).abs() < 1e-6);
            assert_eq!(ucb(mu, 0.0, total, visits), mu);
            let scores: Vec<f64> = (0..NUM_OPS).map(|_| r.random_range(-2.0..2.0)).collect();
            let p = bandit_softmax(&scores);
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().zip(&scores).all(|(p, s)| (p - s.exp() / z).abs() < 1e-12));
        }
        let fresh = UcbStats::new();
        assert!(fresh.op_distribution(0, 0.5).iter().all(|p| (p - 1.0 / NUM_OPS as f64).abs() < 1e-12));
    });
}

fn first_hit(history: &[HistoryRecord], threshold: f64) -> usize {
    history.iter().position(|r| r.score >= threshold).map_or(usize::MAX, |i| i + 1)
}

#[test]
fn criterion_06_op_search_beats_baselines() {
    criterion(6, || {
        use PrimitiveOp::*;
        let fitness = SyntheticFitness::Ops(vec![Scale, Transpose, Matmul, Softmax]);
        let mut op_wins_rs = 0;
        let (mut op_hits, mut ea_hits) = (vec![], vec![]);
        for seed in 0..5 {
            let cfg = SearchConfig {
                num_layers: 4,
                seed,
                max_evaluations: Some(300),
                max_iterations: 1000,
                patience: None,
                ..Default::default()
            };
            let hit = |alg| first_hit(&Search::run_to_end(cfg.clone(), alg, &mut fitness.clone()).unwrap(), 0.9);
            let (op, ea, rs) = (hit(Algorithm::Op), hit(Algorithm::Ea), hit(Algorithm::Rs));
            println!("seed {seed}: op {op} ea {ea} rs {rs}");
            op_wins_rs += (op < rs) as usize;
            op_hits.push(op as f64);
            ea_hits.push(ea as f64);
        }
        assert!(op_wins_rs >= 4, "op beat rs on {op_wins_rs}/5 seeds");
        assert!(median(op_hits) <= median(ea_hits));
    });
}

fn trailing_mean(losses: &[f64], window: usize) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let s = (i + 1).saturating_sub(window);
            losses[s..=i].iter().sum::<f64>() / (i + 1 - s) as f64
        })
        .collect()
}

#[test]
fn criterion_07_weight_sharing_speeds_up_training() {
    criterion(7, || {
        let cfg = ModelConfig {
            num_layers: 4,
            ..Default::default()
        };
        let train = TrainConfig::default();
        let donor = autobert_zero_backbone(4).unwrap();
        let mut layers = donor.layers.clone();
        layers[0] = LayerSpec::Conv(31);
        layers[3] = LayerSpec::Attention(AttentionDag::standard());
        let target = BackboneSpec::new(layers).unwrap();
        let mut hits = vec![];
        for seed in 0..3u64 {
            let corpus = synth_corpus(seed, 512, 64, 32);
            let seeded = |s: u64| ChaCha8Rng::seed_from_u64(seed + s);
            let mut net = Supernet::new(&cfg, seed).unwrap();
            let mut trained = Model::from_params(&donor, &cfg, net.init_candidate(&donor).unwrap()).unwrap();
            mlm_pretrain(&mut trained, &corpus, &train, &mut seeded(100)).unwrap();
            net.write_back_candidate(&trained).unwrap();

            let mut scratch = Model::random(&target, &cfg, &mut seeded(200)).unwrap();
            let cold = mlm_pretrain(&mut scratch, &corpus, &train, &mut seeded(300)).unwrap();
            let mut warm = Model::from_params(&target, &cfg, net.init_candidate(&target).unwrap()).unwrap();
            let hot = mlm_pretrain(&mut warm, &corpus, &train, &mut seeded(300)).unwrap();

            let goal = *trailing_mean(&cold.losses, 20).last().unwrap();
            let hit = trailing_mean(&hot.losses, 20).iter().position(|&l| l <= goal).map_or(usize::MAX, |i| i + 1);
            println!("seed {seed}: scratch loss {goal:.3} reached by shared weights at step {hit}");
            hits.push(hit as f64);
        }
        assert!(median(hits) <= train.steps as f64 / 2.0);
    });
}

#[test]
fn criterion_08_kernel_slicing_and_write_back() {
    criterion(8, || {
        for k in KERNEL_MENU {
            let r = center_rows(k);
            assert_eq!(*r.start(), (MAX_KERNEL - k) / 2);
            assert_eq!(*r.end(), (MAX_KERNEL + k) / 2 - 1);
        }
        let cfg = ModelConfig {
            num_layers: 2,
            ..Default::default()
        };
        let mut net = Supernet::new(&cfg, 108).unwrap();
        let mut r = rng(108);
        for k in KERNEL_MENU {
            let trained = uniform(&[k, cfg.d_model], &mut r);
            let transform = (k < MAX_KERNEL).then(|| {
                let mut t = uniform(&[k, k], &mut r);
                (0..k).for_each(|i| t.data_mut()[i * k + i] += 3.0);
                t
            });
            net.write_back_conv(1, k, &trained, transform.as_ref()).unwrap();
            assert!(net.extract_conv_kernel(1, k).unwrap().max_abs_diff(&trained) < 1e-7, "k={k}");
        }
    });
}

#[test]
fn criterion_09_hybrid_is_less_uniform() {
    criterion(9, || {
        let mut r = rng(109);
        for _ in 0..10 {
            let x = uniform(&[6, 5], &mut r);
            assert!((mean_pairwise_cosine(&x).unwrap() - common::cosine_oracle(&rows(&x))).abs() < 1e-9);
            assert!((relative_residual_norm(&x).unwrap() - common::residual_oracle(&rows(&x))).abs() < 1e-9);
        }
        let rank_one = Tensor::from_rows(&vec![vec![1.0, -2.0, 0.5]; 4]).unwrap();
        assert!(relative_residual_norm(&rank_one).unwrap().abs() < 1e-12);

        let cfg = ModelConfig {
            num_layers: 4,
            ..Default::default()
        };
        let train = TrainConfig::default();
        let mut standard_higher = 0;
        for seed in 0..3u64 {
            let corpus = synth_corpus(seed, 512, 64, 32);
            let mut models = vec![];
            for (name, spec) in [("standard", standard_backbone(4).unwrap()), ("hybrid", autobert_zero_backbone(4).unwrap())] {
                let mut m = Model::random(&spec, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                mlm_pretrain(&mut m, &corpus, &train, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
                models.push((name.to_string(), m));
            }
            let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = uniformity_report(&refs, &corpus.heldout).unwrap();
            println!("seed {seed}: standard {:.3} hybrid {:.3}", report[0].cosine, report[1].cosine);
            standard_higher += (report[0].cosine > report[1].cosine) as usize;
        }
        assert!(standard_higher >= 2, "standard more uniform on {standard_higher}/3 seeds");
    });
}

#[test]
fn criterion_10_parameter_counts() {
    criterion(10, || {
        let cfg = ModelConfig::default();
        let standard = count_params(&standard_backbone(12).unwrap(), &cfg);
        let autobert = count_params(&autobert_zero_backbone(12).unwrap(), &cfg);
        assert!(autobert.attention < standard.attention);
        let one = count_params(&standard_backbone(1).unwrap(), &cfg);
        assert_eq!(one.attention, 4 * cfg.d_model * cfg.d_head() * cfg.heads);
        assert_eq!(standard.attention, 12 * one.attention);
    });
}

#[test]
fn criterion_11_resume_is_exact() {
    criterion(11, || {
        use PrimitiveOp::*;
        let fitness = SyntheticFitness::Ops(vec![Scale, Transpose, Matmul, Softmax]);
        let cfg = SearchConfig {
            num_layers: 4,
            seed: 111,
            max_iterations: 12,
            ..Default::default()
        };
        let whole = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        run_persistent(Some((cfg.clone(), Algorithm::Op)), &mut fitness.clone(), whole.path(), 1, None).unwrap();
        let halted = run_persistent(Some((cfg.clone(), Algorithm::Op)), &mut fitness.clone(), split.path(), 1, Some(5)).unwrap();
        assert!(!halted.is_finished());
        run_persistent(None, &mut fitness.clone(), split.path(), 1, None).unwrap();
        let a = std::fs::read(whole.path().join(HISTORY_FILE)).unwrap();
        let b = std::fs::read(split.path().join(HISTORY_FILE)).unwrap();
        assert_eq!(a, b);

        let again = tempfile::tempdir().unwrap();
        run_persistent(Some((cfg, Algorithm::Op)), &mut fitness.clone(), again.path(), 1, None).unwrap();
        assert_eq!(a, std::fs::read(again.path().join(HISTORY_FILE)).unwrap());
        assert!(!read_history(std::str::from_utf8(&a).unwrap()).unwrap().is_empty());
    });
}
