//! Loss heads and loss builders for both training stages, plus the answer
//! prediction rule.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EntityPairBatch;
use crate::encoder::{EncoderConfig, Init, ParamBuilder, NUM_LABELS};
use crate::error::{Error, Result};
use crate::kg::{SubEdge, SubGraph};
use crate::numerics::{Axis, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Starting point of the matching head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KaInit {
    /// Fan-in scaled random weights like every other layer.
    Random,
    /// Random weights shrunk by 10x, overlaid with hidden units that respond
    /// to `|e_l[j] - e_g[j]|` over the shared leading width and a constant
    /// unit, so the untrained head already scores close pairs higher.
    #[default]
    Comparator,
}

impl KaInit {
    pub fn as_str(self) -> &'static str {
        match self {
            KaInit::Random => "random",
            KaInit::Comparator => "comparator",
        }
    }
}

impl std::str::FromStr for KaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(KaInit::Random),
            "comparator" => Ok(KaInit::Comparator),
            _ => Err(Error::Config(format!("unknown KA init {s:?}"))),
        }
    }
}

/// Parameters of the matching, masked-LM, answer-scoring and
/// source-classification heads.
#[derive(Clone, Debug)]
pub struct LossHeads {
    ka_w0: ParamId,
    ka_b0: ParamId,
    ka_w1: ParamId,
    mlm_w: ParamId,
    mlm_b: ParamId,
    pool_q: ParamId,
    qa_w1: ParamId,
    qa_b1: ParamId,
    qa_w2: ParamId,
    qa_b2: ParamId,
    ksd_w2: ParamId,
    ksd_b1: ParamId,
    ksd_w3: ParamId,
    d_l: usize,
    d_g: usize,
}

impl LossHeads {
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut ParamBuilder::fresh(store, seed))
    }

    pub fn bind(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        Self::build(cfg, &mut ParamBuilder::bind(store))
    }

    /// Rewrites the matching head per [`KaInit::Comparator`].
    pub fn comparator_init(&self, store: &mut ParamStore) {
        let d = self.d_l + self.d_g;
        let w = self.d_l.min(self.d_g).min((d - 1) / 2);
        let w0 = store.get_mut(self.ka_w0);
        w0.scale_in_place(0.1);
        for j in 0..w {
            w0.set(j, j, 1.0);
            w0.set(self.d_l + j, j, -1.0);
            w0.set(j, w + j, -1.0);
            w0.set(self.d_l + j, w + j, 1.0);
        }
        for r in 0..d {
            w0.set(r, d - 1, 0.0);
        }
        let w1 = store.get_mut(self.ka_w1);
        w1.scale_in_place(0.1);
        for j in 0..2 * w {
            w1.data[j] = -0.5;
        }
        w1.data[d - 1] = 1.0;
        let b0 = store.get_mut(self.ka_b0);
        b0.data[d - 1] = w as f64 / 4.0;
    }

    fn build(cfg: &EncoderConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        let (dl, dg, d) = (cfg.d_l, cfg.d_g, cfg.d());
        let qa_in = dl + 2 * dg;
        Ok(LossHeads {
            ka_w0: b.param("head.ka.w0", d, d, Init::FanIn)?,
            ka_b0: b.param("head.ka.b0", 1, d, Init::Zeros)?,
            ka_w1: b.param("head.ka.w1", d, 1, Init::FanIn)?,
            mlm_w: b.param("head.mlm.w", dl, cfg.vocab_size, Init::FanIn)?,
            mlm_b: b.param("head.mlm.b", 1, cfg.vocab_size, Init::Zeros)?,
            pool_q: b.param("head.qa.pool_q", dl, dg, Init::FanIn)?,
            qa_w1: b.param("head.qa.w1", qa_in, qa_in, Init::FanIn)?,
            qa_b1: b.param("head.qa.b1", 1, qa_in, Init::Zeros)?,
            qa_w2: b.param("head.qa.w2", qa_in, 1, Init::FanIn)?,
            qa_b2: b.param("head.qa.b2", 1, 1, Init::Zeros)?,
            ksd_w2: b.param("head.ksd.w2", dg, dg, Init::FanIn)?,
            ksd_b1: b.param("head.ksd.b1", 1, dg, Init::Zeros)?,
            ksd_w3: b.param("head.ksd.w3", dg, NUM_LABELS, Init::FanIn)?,
            d_l: dl,
            d_g: dg,
        })
    }

    /// Matching probability for each row pair: `sigmoid(relu([e_l; e_g] W0 + b0) w1)`.
    pub fn ka_pair_score(&self, g: &mut Graph<'_>, e_l: NodeId, e_g: NodeId) -> Result<NodeId> {
        let x = g.concat(&[e_l, e_g], Axis::Cols)?;
        let (w0, b0, w1) = (
            g.param(self.ka_w0),
            g.param(self.ka_b0),
            g.param(self.ka_w1),
        );
        let z = g.matmul(x, w0)?;
        let z = g.add(z, b0)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w1)?;
        g.sigmoid(z)
    }

    /// Scores every sampled pair of pooled text entities `e_l` (one row per
    /// mention) and node rows of `e`.
    pub fn ka_batch_scores(
        &self,
        g: &mut Graph<'_>,
        e_l: NodeId,
        e: NodeId,
        batch: &EntityPairBatch,
    ) -> Result<NodeId> {
        let mentions: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
        let nodes: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
        let l = g.gather(e_l, &mentions)?;
        let r = g.gather(e, &nodes)?;
        self.ka_pair_score(g, l, r)
    }

    /// Vocabulary logits at the masked rows of `h`, averaged cross-entropy.
    pub fn mlm_loss(
        &self,
        g: &mut Graph<'_>,
        h: NodeId,
        positions: &[usize],
        targets: &[usize],
    ) -> Result<NodeId> {
        if positions.is_empty() {
            return Err(Error::NothingToScore);
        }
        if positions.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} positions, {} targets",
                positions.len(),
                targets.len()
            )));
        }
        let rows = g.gather(h, positions)?;
        let (w, b) = (g.param(self.mlm_w), g.param(self.mlm_b));
        let logits = g.matmul(rows, w)?;
        let logits = g.add(logits, b)?;
        let ce = g.cross_entropy(logits, targets)?;
        g.mean(ce)
    }

    /// Attention pooling of node rows with weights `softmax((h_int Wq) . e_j)`.
    /// An empty node set pools to zero.
    pub fn attentive_pool(
        &self,
        g: &mut Graph<'_>,
        nodes: Option<NodeId>,
        h_int: NodeId,
    ) -> Result<NodeId> {
        let Some(nodes) = nodes else {
            return Ok(g.constant(Tensor::zeros(1, self.d_g)));
        };
        let wq = g.param(self.pool_q);
        let q = g.matmul(h_int, wq)?;
        // the attention op divides by sqrt(width); undo it so logits are plain dot products
        let q = g.scale(q, (self.d_g as f64).sqrt())?;
        let j = g.value(nodes).rows;
        g.attention(q, nodes, nodes, vec![(0..j).collect()], 1)
    }

    /// Candidate logit from a two-layer MLP over `[h_int; e_int; pooled]`.
    pub fn qa_candidate_score(
        &self,
        g: &mut Graph<'_>,
        h_int: NodeId,
        e_int: NodeId,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let x = g.concat(&[h_int, e_int, pooled], Axis::Cols)?;
        if g.value(x).cols != self.d_l + 2 * self.d_g {
            return Err(Error::Shape(format!(
                "answer head input width {}",
                g.value(x).cols
            )));
        }
        let (w1, b1, w2, b2) = (
            g.param(self.qa_w1),
            g.param(self.qa_b1),
            g.param(self.qa_w2),
            g.param(self.qa_b2),
        );
        let z = g.matmul(x, w1)?;
        let z = g.add(z, b1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w2)?;
        g.add(z, b2)
    }

    /// Per-node 4-way logits `relu(e W2 + b1) W3` for the given rows.
    pub fn ksd_logits(&self, g: &mut Graph<'_>, rows: NodeId) -> Result<NodeId> {
        let (w2, b1, w3) = (
            g.param(self.ksd_w2),
            g.param(self.ksd_b1),
            g.param(self.ksd_w3),
        );
        let z = g.matmul(rows, w2)?;
        let z = g.add(z, b1)?;
        let z = g.relu(z)?;
        g.matmul(z, w3)
    }

    /// Summed 4-way cross-entropy over every entity node of `sg`, reading
    /// node representations from `e` (row 0, the interaction node, skipped).
    pub fn ksd_loss(&self, g: &mut Graph<'_>, e: NodeId, sg: &SubGraph) -> Result<NodeId> {
        let mut targets = Vec::with_capacity(sg.nodes.len());
        for (i, n) in sg.nodes.iter().enumerate().skip(1) {
            targets.push(n.label.ok_or(Error::LabelMissing(i))?.class());
        }
        if targets.is_empty() {
            return Ok(g.constant(Tensor::zeros(1, 1)));
        }
        let rows = g.slice_rows(e, 1..sg.nodes.len())?;
        let logits = self.ksd_logits(g, rows)?;
        let ce = g.cross_entropy(logits, &targets)?;
        g.sum(ce)
    }
}

/// `-(1/2k) sum[(1-y) log(1-s) + y log s]` over a column of probabilities.
pub fn ka_loss(g: &mut Graph<'_>, scores: NodeId, labels: &[u8]) -> Result<NodeId> {
    let n = g.value(scores).len();
    if n != labels.len() || g.value(scores).cols != 1 {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            n,
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::NothingToScore);
    }
    let y = Tensor::from_vec(n, 1, labels.iter().map(|&v| v as f64).collect());
    let not_y = Tensor::from_vec(n, 1, labels.iter().map(|&v| 1.0 - v as f64).collect());
    let (y, not_y) = (g.constant(y), g.constant(not_y));
    let log_s = g.log(scores)?;
    let comp = g.affine(scores, -1.0, 1.0)?;
    let log_c = g.log(comp)?;
    let a = g.mul(log_s, y)?;
    let b = g.mul(log_c, not_y)?;
    let t = g.add(a, b)?;
    let t = g.sum(t)?;
    g.scale(t, -1.0 / n as f64)
}

/// Cross-entropy of the candidate softmax against the correct index.
pub fn qa_loss(g: &mut Graph<'_>, logits: &[NodeId], correct: usize) -> Result<NodeId> {
    if correct >= logits.len() {
        return Err(Error::Shape(format!(
            "correct index {correct} of {} candidates",
            logits.len()
        )));
    }
    let row = g.concat(logits, Axis::Cols)?;
    let ce = g.cross_entropy(row, &[correct])?;
    g.sum(ce)
}

/// Sum of `1 - cos(e_h + e_r, e_t)` over `triplets`, with node rows from `e`
/// and relation rows from `rel_table`.
pub fn kbr_loss(
    g: &mut Graph<'_>,
    e: NodeId,
    rel_table: NodeId,
    triplets: &[SubEdge],
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(g.constant(Tensor::zeros(1, 1)));
    }
    let heads: Vec<usize> = triplets.iter().map(|t| t.head).collect();
    let rels: Vec<usize> = triplets.iter().map(|t| t.rel).collect();
    let tails: Vec<usize> = triplets.iter().map(|t| t.tail).collect();
    let eh = g.gather(e, &heads)?;
    let er = g.gather(rel_table, &rels)?;
    let et = g.gather(e, &tails)?;
    let s = g.add(eh, er)?;
    let c = g.cosine(s, et)?;
    let d = g.affine(c, -1.0, 1.0)?;
    g.sum(d)
}

/// Up to `k_reg` knowledge-graph edges of `sg`, drawn without replacement
/// when there are more; interaction edges are never chosen.
pub fn sample_kbr_triplets(sg: &SubGraph, k_reg: usize, seed: u64) -> Vec<SubEdge> {
    let edges: Vec<SubEdge> = sg.kg_edges().copied().collect();
    if edges.len() <= k_reg {
        return edges;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, edges.len(), k_reg).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| edges[i]).collect()
}

/// Unweighted sum of the post-training terms.
pub fn post_loss(g: &mut Graph<'_>, ka: Option<NodeId>, mlm: Option<NodeId>) -> Result<NodeId> {
    sum_terms(g, &[ka, mlm])
}

/// Unweighted sum of the fine-tuning terms; `None` marks an ablated term.
pub fn finetune_loss(
    g: &mut Graph<'_>,
    sup: NodeId,
    ksd: Option<NodeId>,
    kbr: Option<NodeId>,
) -> Result<NodeId> {
    sum_terms(g, &[Some(sup), ksd, kbr])
}

fn sum_terms(g: &mut Graph<'_>, terms: &[Option<NodeId>]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &t in terms.iter().flatten() {
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::zeros(1, 1))))
}

/// Index of the largest value; the lowest index wins ties.
pub fn predict(scores: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::NothingToScore)
}

/// Softmax over candidate logits.
pub fn candidate_probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::numerics::softmax_in_place(&mut p);
    p
}

/// Value-level wrappers that run the graph builders on plain inputs.
pub mod eval {
    use super::*;

    pub fn ka_loss_value(scores: &[f64], labels: &[u8]) -> Result<f64> {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let s = g.constant(Tensor::from_vec(scores.len(), 1, scores.to_vec()));
        let l = ka_loss(&mut g, s, labels)?;
        Ok(g.scalar(l))
    }

    /// `-log p[correct]` computed from probabilities.
    pub fn qa_loss_from_probs(probs: &[f64], correct: usize) -> Result<f64> {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let row = g.constant(Tensor::row_vector(probs.to_vec()));
        let logs = g.log(row)?;
        let nodes: Vec<NodeId> = (0..probs.len())
            .map(|i| g.slice_cols(logs, i..i + 1))
            .collect::<Result<_>>()?;
        let l = qa_loss(&mut g, &nodes, correct)?;
        Ok(g.scalar(l))
    }

    pub fn qa_loss_from_logits(logits: &[f64], correct: usize) -> Result<f64> {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let nodes: Vec<NodeId> = logits
            .iter()
            .map(|&v| g.constant(Tensor::row_vector(vec![v])))
            .collect();
        let l = qa_loss(&mut g, &nodes, correct)?;
        Ok(g.scalar(l))
    }

    pub fn kbr_loss_value(nodes: &Tensor, relations: &Tensor, triplets: &[SubEdge]) -> Result<f64> {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let e = g.constant(nodes.clone());
        let r = g.constant(relations.clone());
        let l = kbr_loss(&mut g, e, r, triplets)?;
        Ok(g.scalar(l))
    }

    /// Summed cross-entropy of per-node 4-way logits against labels.
    pub fn ksd_loss_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g.constant(logits.clone());
        let ce = g.cross_entropy(x, labels)?;
        let l = g.sum(ce)?;
        Ok(g.scalar(l))
    }

    pub fn mlm_loss_from_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::NothingToScore);
        }
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g.constant(logits.clone());
        let ce = g.cross_entropy(x, targets)?;
        let l = g.mean(ce)?;
        Ok(g.scalar(l))
    }
}

#[cfg(test)]
mod tests;
