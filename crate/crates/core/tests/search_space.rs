mod common;

use std::collections::BTreeSet;

use common::{concrete_verdict, enumerate_qk_dags, rng, rows, run_dag, uniform};
use opnas_core::model::ModelConfig;
use opnas_core::search_space::{
    autobert_zero_backbone, count_params, from_json, infer_shapes, mutate_inter, mutate_intra, random_backbone,
    random_dag, standard_backbone, to_json, AttentionDag, BackboneSpec, DagNode, InputNode, IntraEdit,
    KernelDistributions, LayerSpec, NodeRef, OpDistributions, PrimitiveOp, SearchSpaceError, ShapeExpr, KERNEL_MENU,
    MAX_PATH_LEN,
};
use proptest::prelude::*;

const GOLDEN_STANDARD: &str = include_str!("golden/standard-attention.json");
const GOLDEN_AUTOBERT: &str = include_str!("golden/autobert-zero.json");

#[test]
fn shape_inference_agrees_with_concrete_execution() {
    let dags = enumerate_qk_dags(3);
    let mut r = rng(7);
    let mut legal = 0;
    for dag in &dags {
        let symbolic = match infer_shapes(dag) {
            Ok(shapes) => {
                assert_eq!(shapes.len(), dag.len());
                Ok(())
            }
            Err(SearchSpaceError::IllegalGraph { node, .. }) => Err(node),
            Err(e) => panic!("{dag}: unexpected error {e}"),
        };
        assert_eq!(symbolic, concrete_verdict(dag, 7, 5, &mut r), "{dag}");
        legal += symbolic.is_ok() as usize;
    }
    assert!(legal > 0 && legal < dags.len());
}

#[test]
fn inferred_shapes_match_concrete_shapes() {
    let mut r = rng(8);
    for dag in enumerate_qk_dags(2) {
        let Ok(shapes) = infer_shapes(&dag) else { continue };
        let mut tape = opnas_core::tensor::Tape::new();
        let q = uniform(&[7, 5], &mut r);
        let out = dag.apply(&mut tape, &mut |t, _| t.leaf(q.clone(), false)).unwrap();
        assert_eq!(tape.value(out).shape(), shapes.last().unwrap().concrete(7, 5));
    }
}

#[test]
fn published_dags_output_head_shape() {
    for dag in [AttentionDag::standard(), AttentionDag::autobert_l2(), AttentionDag::autobert_l12()] {
        dag.validate(MAX_PATH_LEN).unwrap();
        assert_eq!(*infer_shapes(&dag).unwrap().last().unwrap(), ShapeExpr::INPUT);
    }
}

#[test]
fn l2_and_l12_match_closed_forms() {
    let mut r = rng(9);
    for _ in 0..20 {
        let q = uniform(&[4, 8], &mut r);
        let k = uniform(&[4, 8], &mut r);
        let v = uniform(&[4, 8], &mut r);
        let l2 = run_dag(&AttentionDag::autobert_l2(), &[(InputNode::Q, q.clone()), (InputNode::K, k.clone())]);
        let l12 = run_dag(
            &AttentionDag::autobert_l12(),
            &[(InputNode::Q, q.clone()), (InputNode::K, k.clone()), (InputNode::V, v.clone())],
        );
        let (q, k, v) = (rows(&q), rows(&k), rows(&v));
        assert!(common::max_diff(&common::l2_attention(&q, &k), &l2) < 1e-9);
        assert!(common::max_diff(&common::l12_attention(&q, &k, &v), &l12) < 1e-9);
    }
}

#[test]
fn random_dags_are_valid_and_cover_input_counts() {
    let mut r = rng(10);
    let mut counts = [0usize; 5];
    for _ in 0..1000 {
        let dag = random_dag(&mut r, MAX_PATH_LEN).unwrap();
        dag.validate(MAX_PATH_LEN).unwrap();
        counts[dag.inputs().len()] += 1;
    }
    assert!(counts[2] > 0 && counts[3] > 0 && counts[4] > 0, "{counts:?}");
    assert!(matches!(random_dag(&mut r, 0), Err(SearchSpaceError::Structure(_))));
}

#[test]
fn intra_mutations_of_standard_dag_are_single_valid_edits() {
    let parent = AttentionDag::standard();
    let mut r = rng(11);
    let mut edits = 0usize;
    for _ in 0..500 {
        let (child, edit) = mutate_intra(&parent, &OpDistributions::uniform(), MAX_PATH_LEN, &mut r);
        child.validate(MAX_PATH_LEN).unwrap();
        let edit = edit.expect("a valid edit exists for the standard dag");
        edits += 1;
        let len_delta = child.len() as isize - parent.len() as isize;
        let input_delta = child.inputs().len() as isize - parent.inputs().len() as isize;
        match edit {
            IntraEdit::ReplaceOp { position } => {
                assert_eq!(len_delta, 0);
                let differing = child.nodes().iter().zip(parent.nodes()).filter(|(a, b)| a.op != b.op).count();
                assert_eq!(differing, 1);
                assert_ne!(child.nodes()[position].op, parent.nodes()[position].op);
            }
            IntraEdit::InsertNode { .. } => assert_eq!(len_delta, 1),
            IntraEdit::DeleteNode { .. } => assert_eq!(len_delta, -1),
            IntraEdit::AddInput(i) => {
                assert_eq!(input_delta, 1);
                assert!(matches!(i, InputNode::V | InputNode::P));
            }
            IntraEdit::RemoveInput(i) => {
                assert_eq!(input_delta, -1);
                assert!(matches!(i, InputNode::V | InputNode::P));
            }
        }
    }
    assert_eq!(edits, 500);
}

#[test]
fn inter_mutation_preserves_length_and_menu() {
    let parent = autobert_zero_backbone(12).unwrap();
    let mut r = rng(12);
    for _ in 0..300 {
        let child = mutate_inter(&parent, &KernelDistributions::uniform(), MAX_PATH_LEN, &mut r).unwrap();
        assert_eq!(child.len(), parent.len());
        child.validate(MAX_PATH_LEN).unwrap();
        let changed = child.layers.iter().zip(&parent.layers).filter(|(a, b)| a != b).count();
        assert!(changed <= 1);
        assert!(child.layers.iter().filter_map(LayerSpec::kernel).all(|k| KERNEL_MENU.contains(&k)));
    }
}

#[test]
fn concentrated_kernel_distribution_dominates_resamples() {
    let mut scores = [0.0; KERNEL_MENU.len()];
    scores[KERNEL_MENU.len() - 1] = 10.0;
    let dists = KernelDistributions::from_scores(vec![scores; 4]);
    let attention = LayerSpec::Attention(AttentionDag::standard());
    let parent = BackboneSpec::new(vec![LayerSpec::Conv(3), LayerSpec::Conv(3), LayerSpec::Conv(3), attention]).unwrap();
    let mut r = rng(13);
    let (mut resampled, mut to_max) = (0, 0);
    for _ in 0..100 {
        let child = mutate_inter(&parent, &dists, MAX_PATH_LEN, &mut r).unwrap();
        for (a, b) in child.layers.iter().zip(&parent.layers) {
            if let (LayerSpec::Conv(k), LayerSpec::Conv(_)) = (a, b) {
                if a != b {
                    resampled += 1;
                    to_max += (*k == 65) as usize;
                }
            }
        }
    }
    assert!(resampled > 0);
    assert!(to_max as f64 >= 0.8 * resampled as f64, "{to_max}/{resampled}");
}

#[test]
fn golden_files_match_serializer() {
    assert_eq!(to_json(&standard_backbone(12).unwrap()), GOLDEN_STANDARD);
    assert_eq!(to_json(&autobert_zero_backbone(12).unwrap()), GOLDEN_AUTOBERT);
    assert_eq!(from_json(GOLDEN_AUTOBERT).unwrap(), autobert_zero_backbone(12).unwrap());
}

#[test]
fn standard_layer_serializes_canonically() {
    let text = to_json(&standard_backbone(1).unwrap());
    let expected = r#"{
  "version": 1,
  "layers": [
    {
      "type": "attention",
      "inputs": ["Q", "K", "V"],
      "nodes": [
        {"op": "scale", "args": ["Q"]},
        {"op": "transpose", "args": ["K"]},
        {"op": "matmul", "args": [0, 1]},
        {"op": "softmax", "args": [2]},
        {"op": "matmul", "args": [3, "V"]}
      ]
    }
  ]
}
"#;
    assert_eq!(text, expected);
}

#[test]
fn malformed_field_is_named() {
    let bad = GOLDEN_STANDARD.replacen("\"kernel\"", "\"kernal\"", 1).replacen("\"op\"", "\"opp\"", 1);
    let err = from_json(&bad).unwrap_err();
    assert!(err.to_string().contains("opp"), "{err}");
}

#[test]
fn attention_params_follow_input_count() {
    let cfg = ModelConfig::default();
    let two = AttentionDag::new(
        vec![InputNode::Q, InputNode::K],
        vec![DagNode::binary(PrimitiveOp::Add, NodeRef::Input(InputNode::Q), NodeRef::Input(InputNode::K))],
    )
    .unwrap();
    let two = count_params(&BackboneSpec::new(vec![LayerSpec::Attention(two)]).unwrap(), &cfg);
    let three = count_params(&standard_backbone(1).unwrap(), &cfg);
    assert!(two.attention < three.attention);
    assert_eq!(three.attention, 4 * cfg.d_model * cfg.d_head() * cfg.heads);
    let autobert = count_params(&autobert_zero_backbone(12).unwrap(), &cfg);
    let standard = count_params(&standard_backbone(12).unwrap(), &cfg);
    assert!(autobert.attention < standard.attention);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn serialization_round_trips(seed in any::<u64>(), layers in 1usize..8) {
        let spec = random_backbone(&mut rng(seed), layers, MAX_PATH_LEN).unwrap();
        let text = to_json(&spec);
        prop_assert_eq!(from_json(&text).unwrap(), spec);
    }

    #[test]
    fn mutation_preserves_length_and_validity(seed in any::<u64>(), layers in 1usize..6) {
        let mut r = rng(seed);
        let parent = random_backbone(&mut r, layers, MAX_PATH_LEN).unwrap();
        let child = mutate_inter(&parent, &KernelDistributions::uniform(), MAX_PATH_LEN, &mut r).unwrap();
        prop_assert_eq!(child.len(), parent.len());
        for (_, dag) in parent.attention_layers() {
            let (c, _) = mutate_intra(dag, &OpDistributions::uniform(), MAX_PATH_LEN, &mut r);
            prop_assert!(c.is_valid(MAX_PATH_LEN));
            let before: BTreeSet<_> = dag.inputs().iter().collect();
            let after: BTreeSet<_> = c.inputs().iter().collect();
            prop_assert!(before.symmetric_difference(&after).count() <= 1);
            prop_assert!(c.len().abs_diff(dag.len()) <= 1);
        }
    }
}
