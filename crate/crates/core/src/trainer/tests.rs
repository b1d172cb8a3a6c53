use super::*;
use crate::corpus::{generate_synthetic_dataset, GenConfig};
use crate::kg::SourceLabel;

fn tiny_shape() -> ModelShape {
    ModelShape {
        d_l: 8,
        d_g: 4,
        ff_width: 8,
        max_len: 32,
        ..ModelShape::default()
    }
}

fn data(n_examples: usize, n_candidates: usize, seed: u64) -> TaskData {
    let gen = GenConfig {
        n_entities: 16,
        n_relations: 2,
        n_examples,
        n_candidates,
        seed,
        ..GenConfig::default()
    };
    let d = generate_synthetic_dataset(&gen).unwrap();
    TaskData::new(d.kg, &d.train, &d.dev, &d.test).unwrap()
}

fn cfg(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage,
        epochs: Some(epochs),
        model: tiny_shape(),
        ..TrainConfig::default()
    }
}

fn fresh(data: &TaskData, cfg: &TrainConfig) -> (Model, OptimState) {
    let m = Model::init(data.encoder_config(&cfg.model), cfg.model.ka_init, cfg.seed).unwrap();
    let o = OptimState::new(&m.params, cfg.optim);
    (m, o)
}

fn subset(data: &TaskData, n: usize) -> TaskData {
    TaskData {
        train: data.train[..n].to_vec(),
        ..data.clone()
    }
}

#[test]
fn derived_seeds_depend_on_every_part() {
    let a = derive_seed(&[1, 2, 3]);
    assert_eq!(a, derive_seed(&[1, 2, 3]));
    assert_ne!(a, derive_seed(&[1, 2, 4]));
    assert_ne!(a, derive_seed(&[2, 1, 3]));
    assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
}

#[test]
fn vacuous_post_stage_is_a_config_error() {
    let d = data(20, 2, 1);
    let mut c = cfg(Stage::Post, 1);
    c.loss.mlm = false;
    c.loss.ka = false;
    let (mut m, mut o) = fresh(&d, &c);
    assert!(matches!(
        post_train(&mut m, &mut o, &d, &c, &mut |_| {}),
        Err(Error::Config(_))
    ));
}

#[test]
fn post_training_is_deterministic() {
    let d = subset(&data(20, 2, 2), 1);
    let c = cfg(Stage::Post, 1);
    let run = || {
        let (mut m, mut o) = fresh(&d, &c);
        let h = post_train(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap();
        (h, m.params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn post_training_reduces_loss() {
    let d = data(25, 2, 3);
    let d = subset(&d, 20);
    let c = cfg(Stage::Post, 50);
    let (mut m, mut o) = fresh(&d, &c);
    let h = post_train(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap();
    assert!(
        h.last().unwrap().loss < h[0].loss,
        "{} vs {}",
        h.last().unwrap().loss,
        h[0].loss
    );
}

#[test]
fn fine_tuning_dev_trajectory_is_deterministic() {
    let d = data(30, 2, 4);
    let c = cfg(Stage::Finetune, 3);
    let run = || {
        let (mut m, mut o) = fresh(&d, &c);
        let mut devs = Vec::new();
        fine_tune(&mut m, &mut o, &d, &c, &mut |e| devs.push(e.dev_acc)).unwrap();
        (devs, m.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.is_some()));
    assert_eq!(pa, pb);
}

#[test]
fn keep_best_dev_restores_that_epoch() {
    let d = data(30, 2, 5);
    let mut c = cfg(Stage::Finetune, 4);
    let (mut m, mut o) = fresh(&d, &c);
    let out = fine_tune(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap();
    let best = out
        .metrics
        .iter()
        .filter_map(|e| e.dev_acc)
        .fold(f64::MIN, f64::max);
    assert_eq!(out.best_dev, Some(best));
    let first_best = out
        .metrics
        .iter()
        .find(|e| e.dev_acc == Some(best))
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, first_best);
    assert_eq!(evaluate_accuracy(&m, &d.kg, &d.dev, &c).unwrap(), best);

    c.keep_best_dev = false;
    let (mut m, mut o) = fresh(&d, &c);
    let out = fine_tune(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap();
    assert_eq!(out.best_epoch, 4);
}

/// Mean loss over a batch with the given pair seeds, plus its mean gradient.
fn post_batch(m: &Model, d: &TaskData, c: &TrainConfig) -> (f64, Gradients) {
    let mut grads = Gradients::empty(m.params.len());
    let mut total = 0.0;
    let mut n = 0;
    for p in &d.train {
        for cand in 0..p.inputs.len() {
            let mut g = Graph::new(&m.params);
            let t = post_pair_loss(
                m,
                &mut g,
                &p.inputs[cand],
                &p.example.subgraphs[cand],
                c,
                7 + cand as u64,
            )
            .unwrap();
            let l = t.total.unwrap();
            total += g.scalar(l);
            grads.accumulate(&g.backward(l).unwrap());
            n += 1;
        }
    }
    grads.scale(1.0 / n as f64);
    (total / n as f64, grads)
}

fn finetune_batch(m: &Model, d: &TaskData, c: &TrainConfig) -> (f64, Gradients) {
    let mut grads = Gradients::empty(m.params.len());
    let mut total = 0.0;
    for p in &d.train {
        let mut g = Graph::new(&m.params);
        let t = finetune_example_loss(m, &mut g, &d.kg, p, c, 11).unwrap();
        total += g.scalar(t.total);
        grads.accumulate(&g.backward(t.total).unwrap());
    }
    grads.scale(1.0 / d.train.len() as f64);
    (total / d.train.len() as f64, grads)
}

#[test]
fn one_small_step_does_not_increase_batch_loss() {
    let d = subset(&data(20, 2, 6), 4);
    for stage in [Stage::Post, Stage::Finetune] {
        let mut c = cfg(stage, 1);
        c.optim.lr = 1e-4;
        let (mut m, mut o) = fresh(&d, &c);
        let batch = if stage == Stage::Post {
            post_batch
        } else {
            finetune_batch
        };
        let (before, grads) = batch(&m, &d, &c);
        adam_step(&mut m.params, &grads, &mut o);
        let (after, _) = batch(&m, &d, &c);
        assert!(after <= before, "{stage:?}: {after} > {before}");
    }
}

#[test]
fn reported_total_is_the_sum_of_enabled_terms() {
    let d = subset(&data(20, 2, 7), 6);
    let c = cfg(Stage::Post, 2);
    let (mut m, mut o) = fresh(&d, &c);
    for e in post_train(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap() {
        assert!((e.loss - e.mlm.unwrap() - e.ka.unwrap()).abs() < 1e-12);
    }
    for (ksd, kbr) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut c = cfg(Stage::Finetune, 2);
        c.loss.ksd = ksd;
        c.loss.kbr = kbr;
        let (mut m, mut o) = fresh(&d, &c);
        for e in fine_tune(&mut m, &mut o, &d, &c, &mut |_| {})
            .unwrap()
            .metrics
        {
            assert_eq!(e.ksd.is_some(), ksd);
            assert_eq!(e.kbr.is_some(), kbr);
            let parts = e.sup.unwrap() + e.ksd.unwrap_or(0.0) + e.kbr.unwrap_or(0.0);
            assert!((e.loss - parts).abs() < 1e-12, "{} vs {parts}", e.loss);
        }
    }
}

#[test]
fn example_terms_add_up() {
    let d = data(20, 2, 8);
    let c = cfg(Stage::Finetune, 1);
    let (m, _) = fresh(&d, &c);
    let mut g = Graph::new(&m.params);
    let t = finetune_example_loss(&m, &mut g, &d.kg, &d.train[0], &c, 3).unwrap();
    let sum = g.scalar(t.sup) + g.scalar(t.ksd.unwrap()) + g.scalar(t.kbr.unwrap());
    assert!((g.scalar(t.total) - sum).abs() < 1e-12);
    assert_eq!(t.logits.len(), 2);
}

#[test]
fn injection_adds_irrelevant_nodes_only_when_asked() {
    let d = data(20, 4, 9);
    let c = cfg(Stage::Finetune, 1);
    let p = &d.train[0];
    let clean = candidate_graph(&d.kg, p, 0, &c, false, 1).unwrap();
    assert_eq!(&clean, &p.example.subgraphs[0]);
    let noisy = candidate_graph(&d.kg, p, 0, &c, true, 1).unwrap();
    let irr = noisy
        .nodes
        .iter()
        .filter(|n| n.label == Some(SourceLabel::Irrelevant))
        .count();
    assert_eq!(irr, c.k_irr);
    assert_eq!(noisy.nodes.len(), clean.nodes.len() + c.k_irr);
}

#[test]
fn model_rebinds_from_its_parameters() {
    let d = data(20, 2, 10);
    let c = cfg(Stage::Finetune, 1);
    let (m, _) = fresh(&d, &c);
    let again = Model::from_params(*m.config(), m.params.clone()).unwrap();
    let p = &d.test[0];
    assert_eq!(
        score_candidates(&m, &d.kg, p, &c).unwrap(),
        score_candidates(&again, &d.kg, p, &c).unwrap()
    );

    let mut missing = ParamStore::new();
    for (_, name, t) in m.params.iter().filter(|(_, n, _)| *n != "head.ka.w0") {
        missing.add(name, t.clone());
    }
    assert!(matches!(
        Model::from_params(*m.config(), missing),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn comparator_head_prefers_identical_rows() {
    let d = data(20, 2, 11);
    let c = cfg(Stage::Finetune, 1);
    let (m, _) = fresh(&d, &c);
    let mut g = Graph::new(&m.params);
    let x = g.constant(crate::numerics::Tensor::row_vector(
        (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect(),
    ));
    let same = g.constant(crate::numerics::Tensor::row_vector(vec![
        -1.75, -1.25, -0.75, -0.25,
    ]));
    let other = g.constant(crate::numerics::Tensor::row_vector(vec![
        1.75, 1.25, -0.75, 0.25,
    ]));
    let s_same = m.heads.ka_pair_score(&mut g, x, same).unwrap();
    let s_other = m.heads.ka_pair_score(&mut g, x, other).unwrap();
    assert!(g.scalar(s_same) > g.scalar(s_other));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = subset(&data(20, 2, 12), 2);
    let c = cfg(Stage::Post, 1);
    let (mut m, mut o) = fresh(&d, &c);
    post_train(&mut m, &mut o, &d, &c, &mut |_| {}).unwrap();
    let ckpt = Checkpoint {
        stage: StageTag::Post,
        config_hash: c.hash(),
        vocab_hash: vocab_hash(&d.vocab),
        encoder: *m.config(),
        params: m.params.clone(),
        optim: o.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.stage, StageTag::Post);
    assert_eq!(back.config_hash, c.hash());
    assert_eq!(back.vocab_hash, ckpt.vocab_hash);
    assert_eq!(back.encoder, ckpt.encoder);
    for ((_, n1, t1), (_, n2, t2)) in back.params.iter().zip(ckpt.params.iter()) {
        assert_eq!(n1, n2);
        let bits =
            |t: &crate::numerics::Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    assert_eq!(back.optim, ckpt.optim);

    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn stage_tags_only_move_forward() {
    use StageTag::*;
    assert!(check_transition(Init, Post).is_ok());
    assert!(check_transition(Post, Finetune).is_ok());
    assert!(check_transition(Init, Finetune).is_ok());
    assert!(check_transition(Finetune, Finetune).is_ok());
    assert!(matches!(
        check_transition(Finetune, Post),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn ablation_grid_has_distinct_arms() {
    let arms = ablation_arms(false);
    assert_eq!(arms.len(), 8);
    let names: HashSet<String> = arms.iter().map(Arm::name).collect();
    assert_eq!(names.len(), 8);
    assert!(names.contains("no-post | Sup"));
    assert!(names.contains("post[MLM+KA] | Sup+KSD+KBR"));
    assert_eq!(ablation_arms(true).len(), 10);
}

#[test]
fn ablation_runs_every_arm() {
    let d = data(20, 2, 13);
    let mut c = cfg(Stage::Finetune, 1);
    c.epochs_post = 1;
    c.epochs_finetune = 1;
    c.epochs = None;
    let r = run_ablation(&d, &c, &ablation_arms(true)).unwrap();
    assert_eq!(r.len(), 10);
    assert!(r
        .iter()
        .all(|a| a.error.is_none() && (0.0..=1.0).contains(&a.test_acc.unwrap())));
}

#[test]
fn gradients_of_both_stage_losses_match_finite_differences() {
    let d = data(20, 2, 14);
    let mut c = cfg(Stage::Post, 1);
    c.model = ModelShape {
        d_l: 4,
        d_g: 2,
        ff_width: 4,
        ..tiny_shape()
    };
    let (m, _) = fresh(&d, &c);
    let p = &d.train[0];
    let post = grad_check_post(&m, p, 0, &c, 5).unwrap();
    assert!(post.max_relative_error < 1e-4, "{post:?}");
    assert_eq!(post.checked, m.params.num_scalars());
    let ft = grad_check_finetune(&m, &d.kg, p, &c, 5).unwrap();
    assert!(ft.max_relative_error < 1e-4, "{ft:?}");
}
