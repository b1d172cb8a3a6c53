//! Two-stage training: label-free post-training (masked LM + entity
//! matching) followed by answer supervision with the optional source and
//! backbone auxiliaries. Also checkpoints and the ablation grid.

mod checkpoint;
mod config;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{
    check_transition, load_checkpoint, save_checkpoint, vocab_hash, Checkpoint, StageTag,
};
pub use config::{LossSwitches, ModelShape, Stage, TrainConfig};

use crate::corpus::{
    mask_tokens, sample_entity_pairs, vocab_for, CandidateInput, McqaExample, Vocab,
};
use crate::diagnostics::evaluate_accuracy;
use crate::encoder::{pool_text_entities, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::kg::{inject_irrelevant, KnowledgeGraph, SubGraph};
use crate::numerics::{
    adam_step, compare_gradients, finite_diff_grad, GradCheckReport, Gradients, Graph, NodeId,
    OptimState, ParamStore, DEFAULT_FD_EPS, DEFAULT_REL_FLOOR,
};
use crate::objectives::{
    finetune_loss, ka_loss, kbr_loss, post_loss, qa_loss, sample_kbr_triplets, KaInit, LossHeads,
};

/// Mixes seed parts with the splitmix64 finalizer.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const SEED_MODEL: u64 = 1;
const SEED_HEADS: u64 = 2;
const SEED_POST: u64 = 3;
const SEED_FINETUNE: u64 = 4;
const SEED_EVAL: u64 = 5;

/// Encoder and loss heads over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub heads: LossHeads,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: EncoderConfig, ka_init: KaInit, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::init(cfg, &mut params, derive_seed(&[seed, SEED_MODEL]))?;
        let heads = LossHeads::init(&cfg, &mut params, derive_seed(&[seed, SEED_HEADS]))?;
        if ka_init == KaInit::Comparator {
            heads.comparator_init(&mut params);
        }
        Ok(Model {
            encoder,
            heads,
            params,
        })
    }

    pub fn from_params(cfg: EncoderConfig, mut params: ParamStore) -> Result<Self> {
        let encoder = Encoder::bind(cfg, &mut params)?;
        let heads = LossHeads::bind(&cfg, &mut params)?;
        Ok(Model {
            encoder,
            heads,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }
}

/// An example with its encoder inputs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub example: McqaExample,
    pub inputs: Vec<CandidateInput>,
}

pub fn prepare(kg: &KnowledgeGraph, vocab: &Vocab, examples: &[McqaExample]) -> Vec<Prepared> {
    examples
        .iter()
        .map(|ex| Prepared {
            inputs: (0..ex.num_candidates())
                .map(|c| ex.candidate_input(kg, vocab, c))
                .collect(),
            example: ex.clone(),
        })
        .collect()
}

/// Knowledge graph, vocabulary and prepared splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub train: Vec<Prepared>,
    pub dev: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl TaskData {
    /// Builds the vocabulary from the graph and the training split.
    pub fn new(
        kg: KnowledgeGraph,
        train: &[McqaExample],
        dev: &[McqaExample],
        test: &[McqaExample],
    ) -> Result<Self> {
        let vocab = vocab_for(&kg, train)?;
        Ok(TaskData {
            train: prepare(&kg, &vocab, train),
            dev: prepare(&kg, &vocab, dev),
            test: prepare(&kg, &vocab, test),
            kg,
            vocab,
        })
    }

    pub fn encoder_config(&self, shape: &ModelShape) -> EncoderConfig {
        shape.encoder_config(
            self.vocab.len(),
            self.kg.num_entities(),
            self.kg.num_relations(),
        )
    }

    pub fn prepare(&self, examples: &[McqaExample]) -> Vec<Prepared> {
        prepare(&self.kg, &self.vocab, examples)
    }
}

/// Loss nodes for one post-training (example, candidate) pair.
#[derive(Clone, Debug, Default)]
pub struct PostTerms {
    pub total: Option<NodeId>,
    pub mlm: Option<NodeId>,
    pub ka: Option<NodeId>,
    pub ka_skipped: bool,
}

/// Masks the merged text, encodes it with the candidate subgraph and builds
/// the enabled post-training losses. Pairs without an alignable mention
/// skip the matching loss.
pub fn post_pair_loss(
    model: &Model,
    g: &mut Graph<'_>,
    input: &CandidateInput,
    sg: &SubGraph,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PostTerms> {
    let masked = if cfg.loss.mlm {
        match mask_tokens(&input.ids, derive_seed(&[seed, 0])) {
            Ok(m) => Some(m),
            Err(Error::NothingToMask) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let ids = masked.as_ref().map_or(&input.ids, |m| &m.input);
    let enc = model.encoder.encode(g, ids, sg)?;
    let mut terms = PostTerms::default();
    if let Some(m) = &masked {
        terms.mlm = Some(model.heads.mlm_loss(g, enc.h, &m.positions, &m.targets)?);
    }
    if cfg.loss.ka {
        match sample_entity_pairs(&input.mentions, sg, cfg.k, derive_seed(&[seed, 1])) {
            Ok(batch) => {
                let e_l = pool_text_entities(g, enc.h, &input.mentions)?;
                let scores = model.heads.ka_batch_scores(g, e_l, enc.e, &batch)?;
                terms.ka = Some(ka_loss(g, scores, &batch.labels)?);
            }
            Err(Error::NoAlignablePair) => terms.ka_skipped = true,
            Err(e) => return Err(e),
        }
    }
    if terms.ka.is_some() || terms.mlm.is_some() {
        terms.total = Some(post_loss(g, terms.ka, terms.mlm)?);
    }
    Ok(terms)
}

/// Loss nodes for one fine-tuning example.
#[derive(Clone, Debug)]
pub struct FinetuneTerms {
    pub total: NodeId,
    pub sup: NodeId,
    pub ksd: Option<NodeId>,
    pub kbr: Option<NodeId>,
    pub logits: Vec<NodeId>,
}

/// Candidate subgraph as seen by the model, with irrelevant entities added
/// when `inject` is set.
pub fn candidate_graph(
    kg: &KnowledgeGraph,
    p: &Prepared,
    cand: usize,
    cfg: &TrainConfig,
    inject: bool,
    seed: u64,
) -> Result<SubGraph> {
    let sg = &p.example.subgraphs[cand];
    if !inject || cfg.k_irr == 0 {
        return Ok(sg.clone());
    }
    let input = &p.inputs[cand];
    let mentioned: Vec<usize> = input
        .question_entities
        .iter()
        .chain(&input.answer_entities)
        .copied()
        .collect();
    inject_irrelevant(sg, kg, &mentioned, cfg.retrieval.hops, cfg.k_irr, seed)
}

/// Encodes a candidate and returns `(encoding, logit)` nodes.
fn candidate_logit(
    model: &Model,
    g: &mut Graph<'_>,
    input: &CandidateInput,
    sg: &SubGraph,
) -> Result<(crate::encoder::EncodedPair, NodeId)> {
    let enc = model.encoder.encode(g, &input.ids, sg)?;
    let h_int = g.slice_rows(enc.h, 0..1)?;
    let e_int = g.slice_rows(enc.e, 0..1)?;
    let nodes = if sg.nodes.len() > 1 {
        Some(g.slice_rows(enc.e, 1..sg.nodes.len())?)
    } else {
        None
    };
    let pooled = model.heads.attentive_pool(g, nodes, h_int)?;
    let logit = model.heads.qa_candidate_score(g, h_int, e_int, pooled)?;
    Ok((enc, logit))
}

/// Cross-candidate answer loss plus the enabled auxiliaries. Source and
/// backbone terms are computed per candidate subgraph and averaged over
/// candidates.
pub fn finetune_example_loss(
    model: &Model,
    g: &mut Graph<'_>,
    kg: &KnowledgeGraph,
    p: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneTerms> {
    let n = p.example.num_candidates();
    let mut logits = Vec::with_capacity(n);
    let mut ksd_terms = Vec::new();
    let mut kbr_terms = Vec::new();
    for c in 0..n {
        let cseed = derive_seed(&[seed, c as u64]);
        let sg = candidate_graph(kg, p, c, cfg, cfg.loss.ksd, derive_seed(&[cseed, 0]))?;
        let (enc, logit) = candidate_logit(model, g, &p.inputs[c], &sg)?;
        logits.push(logit);
        if cfg.loss.ksd {
            ksd_terms.push(model.heads.ksd_loss(g, enc.e, &sg)?);
        }
        if cfg.loss.kbr {
            let trip = sample_kbr_triplets(&sg, cfg.k_reg, derive_seed(&[cseed, 1]));
            let rel = g.param(model.encoder.relation_table());
            kbr_terms.push(kbr_loss(g, enc.e, rel, &trip)?);
        }
    }
    let sup = qa_loss(g, &logits, p.example.correct)?;
    let mean = |g: &mut Graph<'_>, terms: &[NodeId]| -> Result<Option<NodeId>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)?))
    };
    let ksd = mean(g, &ksd_terms)?;
    let kbr = mean(g, &kbr_terms)?;
    let total = finetune_loss(g, sup, ksd, kbr)?;
    Ok(FinetuneTerms {
        total,
        sup,
        ksd,
        kbr,
        logits,
    })
}

/// Candidate logits for evaluation.
pub fn score_candidates(
    model: &Model,
    kg: &KnowledgeGraph,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let g_params = &model.params;
    let mut out = Vec::with_capacity(p.example.num_candidates());
    for c in 0..p.example.num_candidates() {
        let mut g = Graph::new(g_params);
        let seed = derive_seed(&[cfg.seed, SEED_EVAL, p.example.id, c as u64]);
        let sg = candidate_graph(kg, p, c, cfg, cfg.eval_inject_irrelevant, seed)?;
        let (_, logit) = candidate_logit(model, &mut g, &p.inputs[c], &sg)?;
        out.push(g.scalar(logit));
    }
    Ok(out)
}

/// Per-epoch record written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ka: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ksd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kbr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ka_skipped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_acc: Option<f64>,
}

#[derive(Default)]
struct Running {
    n: usize,
    total: f64,
    parts: [f64; 5],
}

impl Running {
    fn add(&mut self, total: f64, parts: [Option<f64>; 5]) {
        self.n += 1;
        self.total += total;
        for (acc, p) in self.parts.iter_mut().zip(parts) {
            *acc += p.unwrap_or(0.0);
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.parts[i] / self.n.max(1) as f64
    }
}

fn epoch_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn apply_batch(
    model: &mut Model,
    optim: &mut OptimState,
    mut grads: Gradients,
    count: usize,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    grads.scale(1.0 / count as f64);
    if !grads.is_finite() {
        return Err(Error::DegenerateInput("non-finite gradient".into()));
    }
    adam_step(&mut model.params, &grads, optim);
    Ok(())
}

/// Post-training over every (example, candidate) pair of the training
/// split. Answer labels are not read.
pub fn post_train(
    model: &mut Model,
    optim: &mut OptimState,
    data: &TaskData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if !cfg.loss.mlm && !cfg.loss.ka {
        return Err(Error::Config(
            "post-training needs loss.mlm or loss.ka".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs_for(Stage::Post) {
        let order = epoch_order(
            data.train.len(),
            derive_seed(&[cfg.seed, SEED_POST, epoch as u64]),
        );
        let mut run = Running::default();
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::empty(model.params.len());
            let mut count = 0;
            for &i in batch {
                let p = &data.train[i];
                for c in 0..p.example.num_candidates() {
                    let seed =
                        derive_seed(&[cfg.seed, SEED_POST, epoch as u64, p.example.id, c as u64]);
                    let mut g = Graph::new(&model.params);
                    let t = post_pair_loss(
                        model,
                        &mut g,
                        &p.inputs[c],
                        &p.example.subgraphs[c],
                        cfg,
                        seed,
                    )?;
                    skipped += t.ka_skipped as usize;
                    let Some(total) = t.total else { continue };
                    let val = |n: Option<NodeId>| n.map(|n| g.scalar(n));
                    run.add(g.scalar(total), [val(t.mlm), val(t.ka), None, None, None]);
                    grads.accumulate(&g.backward(total)?);
                    count += 1;
                }
            }
            apply_batch(model, optim, grads, count)?;
        }
        let m = EpochMetrics {
            stage: "post",
            epoch,
            loss: run.total / run.n.max(1) as f64,
            mlm: cfg.loss.mlm.then(|| run.mean(0)),
            ka: cfg.loss.ka.then(|| run.mean(1)),
            sup: None,
            ksd: None,
            kbr: None,
            ka_skipped: cfg.loss.ka.then_some(skipped),
            dev_acc: None,
        };
        log::info!("post epoch {epoch}: loss {:.5}", m.loss);
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Result of [`fine_tune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (the last one when best-dev
    /// retention is off or there is no dev split).
    pub best_epoch: usize,
    pub best_dev: Option<f64>,
}

/// Answer supervision with optional auxiliaries, one optimizer step per
/// batch of examples. Keeps the parameters of the best dev epoch when
/// `train.keep_best_dev` is on.
pub fn fine_tune(
    model: &mut Model,
    optim: &mut OptimState,
    data: &TaskData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<FinetuneOutcome> {
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let epochs = cfg.epochs_for(Stage::Finetune);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=epochs {
        let order = epoch_order(
            data.train.len(),
            derive_seed(&[cfg.seed, SEED_FINETUNE, epoch as u64]),
        );
        let mut run = Running::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::empty(model.params.len());
            for &i in batch {
                let p = &data.train[i];
                let seed = derive_seed(&[cfg.seed, SEED_FINETUNE, epoch as u64, p.example.id]);
                let mut g = Graph::new(&model.params);
                let t = finetune_example_loss(model, &mut g, &data.kg, p, cfg, seed)?;
                let val = |n: Option<NodeId>| n.map(|n| g.scalar(n));
                run.add(
                    g.scalar(t.total),
                    [None, None, Some(g.scalar(t.sup)), val(t.ksd), val(t.kbr)],
                );
                grads.accumulate(&g.backward(t.total)?);
            }
            apply_batch(model, optim, grads, batch.len())?;
        }
        let dev_acc = if data.dev.is_empty() {
            None
        } else {
            Some(evaluate_accuracy(model, &data.kg, &data.dev, cfg)?)
        };
        let m = EpochMetrics {
            stage: "finetune",
            epoch,
            loss: run.total / run.n.max(1) as f64,
            mlm: None,
            ka: None,
            sup: Some(run.mean(2)),
            ksd: cfg.loss.ksd.then(|| run.mean(3)),
            kbr: cfg.loss.kbr.then(|| run.mean(4)),
            ka_skipped: None,
            dev_acc,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.5} dev {:?}",
            m.loss,
            m.dev_acc
        );
        on_epoch(&m);
        if cfg.keep_best_dev {
            if let Some(acc) = dev_acc {
                if best.as_ref().is_none_or(|b| acc > b.0) {
                    best = Some((acc, epoch, model.params.clone()));
                }
            }
        }
        history.push(m);
    }
    let (best_epoch, best_dev) = match best {
        Some((acc, epoch, params)) => {
            model.params = params;
            (epoch, Some(acc))
        }
        None => (epochs, history.last().and_then(|m| m.dev_acc)),
    };
    Ok(FinetuneOutcome {
        metrics: history,
        best_epoch,
        best_dev,
    })
}

/// Post-training switches of one ablation arm; `None` skips the stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PostArm {
    pub mlm: bool,
    pub ka: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Arm {
    pub post: Option<PostArm>,
    pub ksd: bool,
    pub kbr: bool,
}

impl Arm {
    pub fn name(&self) -> String {
        let mut s = match self.post {
            None => "no-post".to_string(),
            Some(PostArm { mlm, ka }) => {
                let mut parts = Vec::new();
                if mlm {
                    parts.push("MLM");
                }
                if ka {
                    parts.push("KA");
                }
                format!("post[{}]", parts.join("+"))
            }
        };
        s.push_str(" | Sup");
        if self.ksd {
            s.push_str("+KSD");
        }
        if self.kbr {
            s.push_str("+KBR");
        }
        s
    }
}

/// {no post-training, MLM+KA post-training} x {Sup, +KSD, +KBR, +KSD+KBR};
/// `partial_post` adds the MLM-only and KA-only post-training arms with
/// plain supervision.
pub fn ablation_arms(partial_post: bool) -> Vec<Arm> {
    let mut arms = Vec::new();
    for post in [
        None,
        Some(PostArm {
            mlm: true,
            ka: true,
        }),
    ] {
        for (ksd, kbr) in [(false, false), (true, false), (false, true), (true, true)] {
            arms.push(Arm { post, ksd, kbr });
        }
    }
    if partial_post {
        for post in [
            PostArm {
                mlm: true,
                ka: false,
            },
            PostArm {
                mlm: false,
                ka: true,
            },
        ] {
            arms.push(Arm {
                post: Some(post),
                ksd: false,
                kbr: false,
            });
        }
    }
    arms
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: String,
    pub best_epoch: Option<usize>,
    pub dev_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Set when the arm failed to train; the other fields are then empty.
    pub error: Option<String>,
}

impl ArmResult {
    fn failed(arm: &Arm, e: &Error) -> Self {
        ArmResult {
            arm: arm.name(),
            best_epoch: None,
            dev_acc: None,
            test_acc: None,
            error: Some(e.to_string()),
        }
    }
}

fn run_arm(
    base: &Model,
    post: Option<&Result<ParamStore>>,
    data: &TaskData,
    cfg: &TrainConfig,
    arm: &Arm,
) -> Result<ArmResult> {
    let mut model = match post {
        None => base.clone(),
        Some(Ok(params)) => Model::from_params(*base.config(), params.clone())?,
        Some(Err(e)) => return Err(Error::Config(format!("post-training failed: {e}"))),
    };
    let mut optim = OptimState::new(&model.params, cfg.optim);
    let fcfg = TrainConfig {
        stage: Stage::Finetune,
        loss: LossSwitches {
            ksd: arm.ksd,
            kbr: arm.kbr,
            ..cfg.loss
        },
        ..cfg.clone()
    };
    let outcome = fine_tune(&mut model, &mut optim, data, &fcfg, &mut |_| {})?;
    let test_acc = evaluate_accuracy(&model, &data.kg, &data.test, &fcfg)?;
    log::info!("arm {}: test {:.4}", arm.name(), test_acc);
    Ok(ArmResult {
        arm: arm.name(),
        best_epoch: Some(outcome.best_epoch),
        dev_acc: outcome.best_dev,
        test_acc: Some(test_acc),
        error: None,
    })
}

/// Runs post-training once per distinct post-training setting, then one
/// fine-tuning run per arm from the matching starting point. Every arm
/// starts from the same initialization. A failing arm is reported in its
/// row and does not stop the others.
pub fn run_ablation(data: &TaskData, cfg: &TrainConfig, arms: &[Arm]) -> Result<Vec<ArmResult>> {
    let base = Model::init(data.encoder_config(&cfg.model), cfg.model.ka_init, cfg.seed)?;
    let mut posts: Vec<PostArm> = arms
        .iter()
        .filter_map(|a| a.post)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    posts.sort_by_key(|p| (!p.mlm, !p.ka));
    let post_cache: Vec<(PostArm, Result<ParamStore>)> = posts
        .into_iter()
        .map(|post| {
            let mut model = base.clone();
            let mut optim = OptimState::new(&model.params, cfg.optim);
            let pcfg = TrainConfig {
                stage: Stage::Post,
                loss: LossSwitches {
                    mlm: post.mlm,
                    ka: post.ka,
                    ..cfg.loss
                },
                ..cfg.clone()
            };
            let r =
                post_train(&mut model, &mut optim, data, &pcfg, &mut |_| {}).map(|_| model.params);
            (post, r)
        })
        .collect();
    Ok(arms
        .iter()
        .map(|arm| {
            let post = arm.post.map(|a| {
                &post_cache
                    .iter()
                    .find(|(p, _)| *p == a)
                    .expect("post-trained above")
                    .1
            });
            run_arm(&base, post, data, cfg, arm).unwrap_or_else(|e| ArmResult::failed(arm, &e))
        })
        .collect())
}

/// Analytic against central-difference gradients of one post-training pair
/// loss, over every parameter.
pub fn grad_check_post(
    model: &Model,
    p: &Prepared,
    cand: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let (input, sg) = (&p.inputs[cand], &p.example.subgraphs[cand]);
    let loss_of = |params: &ParamStore, grad: bool| -> Result<(f64, Option<Gradients>)> {
        let mut g = Graph::new(params);
        let total = post_pair_loss(model, &mut g, input, sg, cfg, seed)?
            .total
            .ok_or(Error::NothingToScore)?;
        let grads = if grad { Some(g.backward(total)?) } else { None };
        Ok((g.scalar(total), grads))
    };
    let analytic = loss_of(&model.params, true)?.1.expect("requested");
    let mut params = model.params.clone();
    let numeric = finite_diff_grad(
        |ps| loss_of(ps, false).map_or(f64::NAN, |r| r.0),
        &mut params,
        DEFAULT_FD_EPS,
    );
    Ok(compare_gradients(
        &model.params,
        &analytic,
        &numeric,
        DEFAULT_REL_FLOOR,
    ))
}

/// Analytic against central-difference gradients of one fine-tuning
/// example loss, over every parameter.
pub fn grad_check_finetune(
    model: &Model,
    kg: &KnowledgeGraph,
    p: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_of = |params: &ParamStore, grad: bool| -> Result<(f64, Option<Gradients>)> {
        let mut g = Graph::new(params);
        let t = finetune_example_loss(model, &mut g, kg, p, cfg, seed)?;
        let grads = if grad {
            Some(g.backward(t.total)?)
        } else {
            None
        };
        Ok((g.scalar(t.total), grads))
    };
    let analytic = loss_of(&model.params, true)?.1.expect("requested");
    let mut params = model.params.clone();
    let numeric = finite_diff_grad(
        |ps| loss_of(ps, false).map_or(f64::NAN, |r| r.0),
        &mut params,
        DEFAULT_FD_EPS,
    );
    Ok(compare_gradients(
        &model.params,
        &analytic,
        &numeric,
        DEFAULT_REL_FLOOR,
    ))
}

#[cfg(test)]
mod tests;
