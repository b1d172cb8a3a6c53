use proptest::prelude::*;

use super::eval::*;
use super::*;
use crate::kg::{SourceLabel, SubNode};

fn cfg(d_l: usize, d_g: usize) -> EncoderConfig {
    EncoderConfig {
        d_l,
        d_g,
        vocab_size: 8,
        n_entities: 4,
        n_relations: 2,
        ..EncoderConfig::default()
    }
}

fn heads(d_l: usize, d_g: usize) -> (ParamStore, LossHeads) {
    let mut store = ParamStore::new();
    let h = LossHeads::init(&cfg(d_l, d_g), &mut store, 1).unwrap();
    (store, h)
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let (r, c) = store.get(id).shape();
        *store.get_mut(id) = Tensor::zeros(r, c);
    }
}

fn set(store: &mut ParamStore, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let id = store.id(name).unwrap();
    *store.get_mut(id) = Tensor::from_vec(rows, cols, data.to_vec());
}

#[test]
fn ka_score_null_and_hand_set() {
    let (mut store, h) = heads(1, 1);
    zero_prefix(&mut store, "head.ka");
    {
        let mut g = Graph::new(&store);
        let l = g.constant(Tensor::row_vector(vec![0.7]));
        let r = g.constant(Tensor::row_vector(vec![-0.2]));
        let s = h.ka_pair_score(&mut g, l, r).unwrap();
        assert_eq!(g.scalar(s), 0.5);
    }
    set(&mut store, "head.ka.w0", 2, 2, &[1.0, -1.0, 2.0, 0.5]);
    set(&mut store, "head.ka.b0", 1, 2, &[0.1, -0.3]);
    set(&mut store, "head.ka.w1", 2, 1, &[1.5, -2.0]);
    let mut g = Graph::new(&store);
    let l = g.constant(Tensor::row_vector(vec![0.7]));
    let r = g.constant(Tensor::row_vector(vec![-0.2]));
    let s = h.ka_pair_score(&mut g, l, r).unwrap();
    // hidden = relu([0.7*1 + -0.2*2 + 0.1, 0.7*-1 + -0.2*0.5 - 0.3]) = [0.4, 0]
    let z: f64 = 0.4 * 1.5;
    assert!((g.scalar(s) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
}

#[test]
fn ka_loss_values() {
    for k in 1..5 {
        let v = ka_loss_value(&vec![0.5; 2 * k], &[1, 0].repeat(k)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }
    let v = ka_loss_value(&[0.9, 0.2], &[1, 0]).unwrap();
    assert!((v - -0.5 * (0.9f64.ln() + 0.8f64.ln())).abs() < 1e-12);
    assert!((v - 0.164252).abs() < 1e-6);
    assert_eq!(ka_loss_value(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
    assert!(matches!(
        ka_loss_value(&[0.5], &[1, 0]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn mlm_values() {
    let uniform = Tensor::zeros(2, 8);
    assert!((mlm_loss_from_logits(&uniform, &[3, 5]).unwrap() - 8f64.ln()).abs() < 1e-12);
    let mut sat = Tensor::zeros(1, 8);
    sat.set(0, 2, 800.0);
    assert!(mlm_loss_from_logits(&sat, &[2]).unwrap() < 1e-300);
    let logits = Tensor::from_rows(&[vec![0.1, 2.0, -1.0, 0.0, 0.3, 0.0, 0.0, 1.0], vec![1.0; 8]]);
    let a = mlm_loss_from_logits(&Tensor::row_vector(logits.row(0).to_vec()), &[1]).unwrap();
    let b = mlm_loss_from_logits(&Tensor::row_vector(logits.row(1).to_vec()), &[6]).unwrap();
    assert!((mlm_loss_from_logits(&logits, &[1, 6]).unwrap() - (a + b) / 2.0).abs() < 1e-15);
    assert!(matches!(
        mlm_loss_from_logits(&logits, &[]),
        Err(Error::NothingToScore)
    ));
}

#[test]
fn mlm_head_rejects_empty_positions() {
    let (store, h) = heads(4, 2);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(3, 4));
    assert!(matches!(
        h.mlm_loss(&mut g, x, &[], &[]),
        Err(Error::NothingToScore)
    ));
    let l = h.mlm_loss(&mut g, x, &[1], &[4]).unwrap();
    assert!(g.scalar(l) > 0.0);
}

#[test]
fn post_and_finetune_sums() {
    let p = ParamStore::new();
    let mut g = Graph::new(&p);
    let c = |g: &mut Graph<'_>, v: f64| g.constant(Tensor::row_vector(vec![v]));
    let (z0, z1) = (c(&mut g, 0.0), c(&mut g, 0.0));
    let l = post_loss(&mut g, Some(z0), Some(z1)).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let (a, b) = (c(&mut g, 0.5), c(&mut g, 1.5));
    let l = post_loss(&mut g, Some(a), Some(b)).unwrap();
    assert_eq!(g.scalar(l), 2.0);
    let (s, k, r) = (c(&mut g, 1.0), c(&mut g, 2.0), c(&mut g, 3.0));
    let l = finetune_loss(&mut g, s, Some(k), Some(r)).unwrap();
    assert_eq!(g.scalar(l), 6.0);
    let l = finetune_loss(&mut g, s, Some(k), None).unwrap();
    assert_eq!(g.scalar(l), 3.0);
    let l = finetune_loss(&mut g, s, None, None).unwrap();
    assert_eq!(g.scalar(l), 1.0);
}

#[test]
fn attentive_pool_cases() {
    let (store, h) = heads(4, 2);
    let mut g = Graph::new(&store);
    let q = g.constant(Tensor::row_vector(vec![0.3, -0.2, 1.0, 0.5]));
    let one = g.constant(Tensor::row_vector(vec![0.25, -4.0]));
    let p = h.attentive_pool(&mut g, Some(one), q).unwrap();
    assert_eq!(g.value(p).data, vec![0.25, -4.0]);
    let same = g.constant(Tensor::from_rows(&[vec![1.5, 2.0], vec![1.5, 2.0]]));
    let p = h.attentive_pool(&mut g, Some(same), q).unwrap();
    for (a, b) in g.value(p).data.iter().zip([1.5, 2.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 3.0]]);
    let two = g.constant(rows.clone());
    let p = h.attentive_pool(&mut g, Some(two), q).unwrap();
    // weights from an independent softmax of (q Wq) . e_j
    let wq = store.get(store.id("head.qa.pool_q").unwrap());
    let qw: Vec<f64> = (0..2)
        .map(|c| (0..4).map(|r| g.value(q).data[r] * wq.get(r, c)).sum())
        .collect();
    let logits: Vec<f64> = (0..2)
        .map(|j| qw[0] * rows.get(j, 0) + qw[1] * rows.get(j, 1))
        .collect();
    let m = logits[0].max(logits[1]);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    for c in 0..2 {
        let expected = w[0] * rows.get(0, c) + w[1] * rows.get(1, c);
        assert!((g.value(p).data[c] - expected).abs() < 1e-12);
    }
    assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let empty = h.attentive_pool(&mut g, None, q).unwrap();
    assert_eq!(g.value(empty).data, vec![0.0, 0.0]);
}

#[test]
fn qa_head_null_and_normalization() {
    let (mut store, h) = heads(4, 2);
    zero_prefix(&mut store, "head.qa");
    let mut g = Graph::new(&store);
    let hi = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
    let ei = g.constant(Tensor::row_vector(vec![-1.0, 0.5]));
    let pooled = g.constant(Tensor::row_vector(vec![0.2, 0.1]));
    let s = h.qa_candidate_score(&mut g, hi, ei, pooled).unwrap();
    assert_eq!(g.scalar(s), 0.0);
    let p = candidate_probabilities(&[0.0; 4]);
    assert_eq!(p, vec![0.25; 4]);
}

#[test]
fn qa_loss_values() {
    assert!((qa_loss_from_probs(&[0.2; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-12);
    // log(0) clamps to log(1e-12), leaving a residual of that size
    assert!(qa_loss_from_probs(&[1.0, 0.0], 0).unwrap() < 1e-11);
    assert!((qa_loss_from_probs(&[0.7, 0.3], 0).unwrap() - 0.356675).abs() < 1e-6);
    assert!((qa_loss_from_logits(&[0.0; 5], 1).unwrap() - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn predict_rules() {
    assert_eq!(predict(&[0.1, 0.8, 0.1]).unwrap(), 1);
    assert_eq!(predict(&[0.5, 0.5]).unwrap(), 0);
    assert!(predict(&[]).is_err());
}

fn labeled_graph(labels: &[SourceLabel]) -> SubGraph {
    let mut sg = SubGraph::interaction_only(2);
    for (i, &l) in labels.iter().enumerate() {
        sg.nodes.push(SubNode {
            entity: Some(i),
            label: Some(l),
            relevance: 0.0,
        });
    }
    sg
}

#[test]
fn ksd_uniform_hand_set_and_missing_label() {
    let (mut store, h) = heads(4, 2);
    zero_prefix(&mut store, "head.ksd");
    let sg = labeled_graph(&[
        SourceLabel::QuestionLinked,
        SourceLabel::Neighbor,
        SourceLabel::Irrelevant,
    ]);
    {
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::from_vec(
            4,
            2,
            vec![0.3, 0.1, -1.0, 2.0, 0.5, 0.5, 1.0, -1.0],
        ));
        let l = h.ksd_loss(&mut g, e, &sg).unwrap();
        assert!((g.scalar(l) - 3.0 * 4f64.ln()).abs() < 1e-12);
    }
    set(&mut store, "head.ksd.w2", 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut store, "head.ksd.b1", 1, 2, &[0.0, 0.5]);
    set(
        &mut store,
        "head.ksd.w3",
        2,
        4,
        &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -1.0],
    );
    let sg2 = labeled_graph(&[SourceLabel::AnswerLinked, SourceLabel::Neighbor]);
    let mut g = Graph::new(&store);
    let rows = [[0.0, 0.0], [2.0, -1.0], [-0.5, 1.0]];
    let e = g.constant(Tensor::from_rows(
        &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    ));
    let l = h.ksd_loss(&mut g, e, &sg2).unwrap();
    // hidden = relu(e + [0, 0.5]); logits = [h0, 2 h1, -h0, -h1]
    let ce = |row: [f64; 2], class: usize| {
        let hid = [row[0].max(0.0), (row[1] + 0.5).max(0.0)];
        let z = [hid[0], 2.0 * hid[1], -hid[0], -hid[1]];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - z[class]
    };
    let expected = ce(rows[1], 1) + ce(rows[2], 2);
    assert!((g.scalar(l) - expected).abs() < 1e-12);

    let mut bad = sg2.clone();
    bad.nodes[2].label = None;
    assert!(matches!(
        h.ksd_loss(&mut g, e, &bad),
        Err(Error::LabelMissing(2))
    ));
}

fn edges(pairs: &[(usize, usize, usize)]) -> Vec<SubEdge> {
    pairs
        .iter()
        .map(|&(head, rel, tail)| SubEdge { head, rel, tail })
        .collect()
}

#[test]
fn kbr_closed_forms() {
    let rel = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    // e_h + e_r == e_t
    let nodes = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        vec![2.0, 1.0],
        vec![1.0, 2.0],
    ]);
    let ok = edges(&[(1, 0, 2), (1, 1, 3)]);
    assert!(kbr_loss_value(&nodes, &rel, &ok).unwrap().abs() < 1e-12);
    // orthogonal
    let nodes = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![0.0, 0.0],
        vec![0.0, 3.0],
        vec![2.0, 0.0],
    ]);
    let orth = edges(&[(1, 0, 2), (0, 0, 2), (1, 1, 3)]);
    assert!((kbr_loss_value(&nodes, &rel, &orth).unwrap() - 3.0).abs() < 1e-12);
    // anti-parallel
    let nodes = Tensor::from_rows(&[
        vec![-1.0, 0.0],
        vec![0.0, -2.0],
        vec![0.0, 0.0],
        vec![0.0, 4.0],
    ]);
    let anti = edges(&[(0, 0, 2), (1, 1, 3)]);
    let v = kbr_loss_value(&nodes, &rel, &anti[1..]).unwrap();
    assert!((v - 2.0).abs() < 1e-12);
}

#[test]
fn kbr_sampling() {
    let mut sg = labeled_graph(&[SourceLabel::Neighbor; 4]);
    sg.edges = edges(&[
        (1, 0, 2),
        (2, 1, 3),
        (3, 0, 4),
        (0, 2, 1),
        (1, 2, 0),
        (4, 1, 1),
    ]);
    let all = sample_kbr_triplets(&sg, 10, 3);
    assert_eq!(all.len(), 4);
    assert!(all.iter().all(|e| e.rel != 2));
    let some = sample_kbr_triplets(&sg, 2, 3);
    assert_eq!(some.len(), 2);
    assert_eq!(some, sample_kbr_triplets(&sg, 2, 3));
    assert!(some.iter().all(|e| all.contains(e)));
}

proptest! {
    #[test]
    fn kbr_is_bounded(
        vals in proptest::collection::vec(-3.0f64..3.0, 12),
        rels in proptest::collection::vec(-3.0f64..3.0, 4),
        k in 1usize..5,
    ) {
        let nodes = Tensor::from_vec(6, 2, vals);
        let rel = Tensor::from_vec(2, 2, rels);
        let trip: Vec<SubEdge> = (0..k).map(|i| SubEdge { head: i, rel: i % 2, tail: 5 - i }).collect();
        let v = kbr_loss_value(&nodes, &rel, &trip).unwrap();
        prop_assert!(v >= -1e-12 && v <= 2.0 * k as f64 + 1e-12);
    }

    #[test]
    fn ka_loss_is_nonnegative(
        raw in proptest::collection::vec(0.0f64..1.0, 1..6),
        flip in 0u8..2,
    ) {
        let scores: Vec<f64> = raw.iter().flat_map(|&s| [s, 1.0 - s]).collect();
        let labels: Vec<u8> = (0..raw.len()).flat_map(|_| [flip, 1 - flip]).collect();
        let v = ka_loss_value(&scores, &labels).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn predict_ignores_shifts_and_monotone_maps(
        logits in proptest::collection::vec(-5.0f64..5.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let base = predict(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        prop_assert_eq!(predict(&shifted).unwrap(), base);
        let probs = candidate_probabilities(&logits);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let cubed: Vec<f64> = logits.iter().map(|l| l * l * l + 2.0 * l).collect();
        prop_assert_eq!(predict(&cubed).unwrap(), base);
    }
}
