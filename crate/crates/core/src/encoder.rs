//! Cross-modality encoder: a small pre-norm transformer over the merged text,
//! a relational graph-attention network over the subgraph, and an
//! interaction-token/node mixing MLP after every fusion layer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{NUM_SPECIAL, PAD};
use crate::error::{Error, Result};
use crate::kg::{Mention, SubGraph, INTERACTION_NODE};
use crate::numerics::{Axis, Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_l: usize,
    pub d_g: usize,
    /// Text-only layers before fusion.
    pub n_unimodal: usize,
    pub n_fusion: usize,
    pub text_heads: usize,
    pub gat_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_entities: usize,
    /// Knowledge-graph relations; the embedding table has one extra row for
    /// interaction edges.
    pub n_relations: usize,
    pub ff_width: usize,
    /// Adds the input back onto the interaction MLP output.
    pub fuse_residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_l: 32,
            d_g: 16,
            n_unimodal: 1,
            n_fusion: 2,
            text_heads: 2,
            gat_heads: 2,
            max_len: 32,
            vocab_size: 0,
            n_entities: 0,
            n_relations: 0,
            ff_width: 64,
            fuse_residual: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_l == 0 || self.d_g == 0 || self.text_heads == 0 || self.gat_heads == 0 {
            return bad("widths and head counts must be positive".into());
        }
        if !self.d_l.is_multiple_of(self.text_heads) {
            return bad(format!(
                "d_l {} not divisible by {} heads",
                self.d_l, self.text_heads
            ));
        }
        if !self.d_g.is_multiple_of(self.gat_heads) {
            return bad(format!(
                "d_g {} not divisible by {} heads",
                self.d_g, self.gat_heads
            ));
        }
        if self.n_fusion == 0 {
            return bad("at least one fusion layer is required".into());
        }
        if self.vocab_size <= NUM_SPECIAL
            || self.n_entities == 0
            || self.max_len < 2
            || self.ff_width == 0
        {
            return bad("vocab, entity table, max_len and ff_width must be non-trivial".into());
        }
        Ok(())
    }

    /// Width of the concatenated interaction vector.
    pub fn d(&self) -> usize {
        self.d_l + self.d_g
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with standard deviation `1 / sqrt(rows)`.
    FanIn,
}

/// Registers fresh parameters, or binds to existing ones by name.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> ParamBuilder<'a> {
    pub fn fresh(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn bind(store: &'a mut ParamStore) -> Self {
        ParamBuilder { store, rng: None }
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let Some(rng) = self.rng.as_mut() else {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let got = self.store.get(id).shape();
            if got != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected {rows}x{cols}, found {got:?}"
                )));
            }
            return Ok(id);
        };
        let std = match init {
            Init::Zeros => 0.0,
            Init::Ones => 0.0,
            Init::Normal(s) => s,
            Init::FanIn => 1.0 / (rows as f64).sqrt(),
        };
        let data = match init {
            Init::Ones => vec![1.0; rows * cols],
            Init::Zeros => vec![0.0; rows * cols],
            _ => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..rows * cols).map(|_| dist.sample(rng)).collect()
            }
        };
        Ok(self.store.add(name, Tensor::from_vec(rows, cols, data)))
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            gamma: self.param(&format!("{prefix}.gamma"), 1, width, Init::Ones)?,
            beta: self.param(&format!("{prefix}.beta"), 1, width, Init::Zeros)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormIds {
    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

#[derive(Clone, Debug)]
struct TextLayer {
    ln_attn: LayerNormIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_ff: LayerNormIds,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
struct GraphLayer {
    ln: LayerNormIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct FuseLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the encoder; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    text_layers: Vec<TextLayer>,
    text_ln: LayerNormIds,
    ent_emb: ParamId,
    label_emb: ParamId,
    int_node: ParamId,
    rel_emb: ParamId,
    graph_layers: Vec<GraphLayer>,
    fuse_layers: Vec<FuseLayer>,
    node_ln: LayerNormIds,
}

/// Output of [`Encoder::encode`] as nodes of the caller's graph.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// `(T+1) x d_l`, row 0 is the interaction token.
    pub h: NodeId,
    /// `(J+1) x d_g`, row 0 is the interaction node.
    pub e: NodeId,
    /// Graph-attention node of each fusion layer; `None` when the subgraph
    /// has no edges.
    pub gat: Vec<Option<NodeId>>,
}

pub const NUM_LABELS: usize = 4;

impl Encoder {
    /// Registers freshly initialized parameters under the `enc.` prefix.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, &mut ParamBuilder::fresh(store, seed))
    }

    /// Binds to parameters already present in `store`.
    pub fn bind(cfg: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, &mut ParamBuilder::bind(store))
    }

    fn build(cfg: EncoderConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        let (dl, dg) = (cfg.d_l, cfg.d_g);
        let tok_emb = b.param("enc.tok_emb", cfg.vocab_size, dl, Init::Normal(0.1))?;
        let pos_emb = b.param("enc.pos_emb", cfg.max_len, dl, Init::Normal(0.1))?;
        let mut text_layers = Vec::new();
        for l in 0..cfg.n_unimodal + cfg.n_fusion {
            let p = format!("enc.text{l}");
            text_layers.push(TextLayer {
                ln_attn: b.layer_norm(&format!("{p}.ln_attn"), dl)?,
                wq: b.param(&format!("{p}.wq"), dl, dl, Init::FanIn)?,
                wk: b.param(&format!("{p}.wk"), dl, dl, Init::FanIn)?,
                wv: b.param(&format!("{p}.wv"), dl, dl, Init::FanIn)?,
                wo: b.param(&format!("{p}.wo"), dl, dl, Init::FanIn)?,
                ln_ff: b.layer_norm(&format!("{p}.ln_ff"), dl)?,
                ff1: b.param(&format!("{p}.ff1"), dl, cfg.ff_width, Init::FanIn)?,
                ff1_b: b.param(&format!("{p}.ff1_b"), 1, cfg.ff_width, Init::Zeros)?,
                ff2: b.param(&format!("{p}.ff2"), cfg.ff_width, dl, Init::FanIn)?,
                ff2_b: b.param(&format!("{p}.ff2_b"), 1, dl, Init::Zeros)?,
            });
        }
        let text_ln = b.layer_norm("enc.text_ln", dl)?;
        let ent_emb = b.param("enc.ent_emb", cfg.n_entities, dg, Init::Normal(0.1))?;
        let label_emb = b.param("enc.label_emb", NUM_LABELS, dg, Init::Normal(0.1))?;
        let int_node = b.param("enc.int_node", 1, dg, Init::Normal(0.1))?;
        let rel_emb = b.param("enc.rel_emb", cfg.n_relations + 1, dg, Init::Normal(0.1))?;
        let mut graph_layers = Vec::new();
        let mut fuse_layers = Vec::new();
        let d = cfg.d();
        for m in 0..cfg.n_fusion {
            let p = format!("enc.gnn{m}");
            graph_layers.push(GraphLayer {
                ln: b.layer_norm(&format!("{p}.ln"), dg)?,
                wq: b.param(&format!("{p}.wq"), dg, dg, Init::FanIn)?,
                wk: b.param(&format!("{p}.wk"), dg, dg, Init::FanIn)?,
                wv: b.param(&format!("{p}.wv"), dg, dg, Init::FanIn)?,
                w1: b.param(&format!("{p}.w1"), dg, dg, Init::FanIn)?,
                w2: b.param(&format!("{p}.w2"), dg, dg, Init::FanIn)?,
            });
            let p = format!("enc.fuse{m}");
            fuse_layers.push(FuseLayer {
                w1: b.param(&format!("{p}.w1"), d, d, Init::FanIn)?,
                b1: b.param(&format!("{p}.b1"), 1, d, Init::Zeros)?,
                w2: b.param(&format!("{p}.w2"), d, d, Init::FanIn)?,
                b2: b.param(&format!("{p}.b2"), 1, d, Init::Zeros)?,
            });
        }
        let node_ln = b.layer_norm("enc.node_ln", dg)?;
        Ok(Encoder {
            cfg,
            tok_emb,
            pos_emb,
            text_layers,
            text_ln,
            ent_emb,
            label_emb,
            int_node,
            rel_emb,
            graph_layers,
            fuse_layers,
            node_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Relation embedding table, shared with the backbone regularizer.
    pub fn relation_table(&self) -> ParamId {
        self.rel_emb
    }

    pub fn entity_table(&self) -> ParamId {
        self.ent_emb
    }

    pub fn token_table(&self) -> ParamId {
        self.tok_emb
    }

    /// Token plus learned position embedding. `ids[0]` is expected to be the
    /// interaction token.
    pub fn embed_text(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::IdNotFound {
                kind: "token",
                id: bad,
            });
        }
        let tok = g.param(self.tok_emb);
        let tok = g.gather(tok, ids)?;
        let pos = g.param(self.pos_emb);
        let pos = g.slice_rows(pos, 0..ids.len())?;
        g.add(tok, pos)
    }

    /// One pre-norm transformer block. Keys at PAD positions are masked.
    /// Returns the output and the self-attention node.
    pub fn lm_layer(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        h: NodeId,
        ids: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let p = &self.text_layers[layer];
        let keys: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
        let groups = vec![keys; ids.len()];
        let x = p.ln_attn.apply(g, h)?;
        let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let attn = g.attention(q, k, v, groups, self.cfg.text_heads)?;
        let o = g.matmul(attn, wo)?;
        let h = g.add(h, o)?;
        let x = p.ln_ff.apply(g, h)?;
        let (f1, b1, f2, b2) = (
            g.param(p.ff1),
            g.param(p.ff1_b),
            g.param(p.ff2),
            g.param(p.ff2_b),
        );
        let z = g.matmul(x, f1)?;
        let z = g.add(z, b1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, f2)?;
        let z = g.add(z, b2)?;
        Ok((g.add(h, z)?, attn))
    }

    /// Relational graph attention: the message along `head -r-> tail` is
    /// `LN(e_head) + rel_emb[r]`; each node attends over its in-edges with
    /// its own normalized representation as query, then adds a bias-free
    /// two-layer update to its input. Nodes without in-edges pass through.
    pub fn gnn_layer(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        e: NodeId,
        sg: &SubGraph,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let n = g.value(e).rows;
        if sg.edges.is_empty() {
            return Ok((e, None));
        }
        if let Some(bad) = sg.edges.iter().find(|x| x.head >= n || x.tail >= n) {
            return Err(Error::Shape(format!("edge {bad:?} outside {n} nodes")));
        }
        let p = &self.graph_layers[layer];
        let x = p.ln.apply(g, e)?;
        let heads: Vec<usize> = sg.edges.iter().map(|x| x.head).collect();
        let rels: Vec<usize> = sg.edges.iter().map(|x| x.rel).collect();
        let src = g.gather(x, &heads)?;
        let rel = g.param(self.rel_emb);
        let rel = g.gather(rel, &rels)?;
        let msg = g.add(src, rel)?;
        let (wq, wk, wv) = (g.param(p.wq), g.param(p.wk), g.param(p.wv));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(msg, wk)?;
        let v = g.matmul(msg, wv)?;
        let mut groups = vec![Vec::new(); n];
        for (i, edge) in sg.edges.iter().enumerate() {
            groups[edge.tail].push(i);
        }
        let attn = g.attention(q, k, v, groups, self.cfg.gat_heads)?;
        let (w1, w2) = (g.param(p.w1), g.param(p.w2));
        let z = g.matmul(attn, w1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w2)?;
        Ok((g.add(e, z)?, Some(attn)))
    }

    /// Mixes the interaction token (1 x d_l) and node (1 x d_g) through a
    /// two-layer MLP over their concatenation and splits the result back.
    pub fn fuse_interaction(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        h_int: NodeId,
        e_int: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let p = &self.fuse_layers[layer];
        let x = g.concat(&[h_int, e_int], Axis::Cols)?;
        let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
        let z = g.matmul(x, w1)?;
        let z = g.add(z, b1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w2)?;
        let mut z = g.add(z, b2)?;
        if self.cfg.fuse_residual {
            z = g.add(z, x)?;
        }
        let h = g.slice_cols(z, 0..self.cfg.d_l)?;
        let e = g.slice_cols(z, self.cfg.d_l..self.cfg.d())?;
        Ok((h, e))
    }

    /// Entity embedding plus source-label embedding per entity node, with the
    /// learned interaction vector in row 0.
    pub fn embed_nodes(&self, g: &mut Graph<'_>, sg: &SubGraph) -> Result<NodeId> {
        let int_node = g.param(self.int_node);
        if sg.nodes.first().is_none_or(|n| n.entity.is_some()) {
            return Err(Error::Shape("node 0 must be the interaction node".into()));
        }
        let mut ents = Vec::with_capacity(sg.nodes.len() - 1);
        let mut labels = Vec::with_capacity(sg.nodes.len() - 1);
        for (i, node) in sg.nodes.iter().enumerate().skip(1) {
            let e = node
                .entity
                .ok_or_else(|| Error::Shape(format!("node {i} has no entity")))?;
            if e >= self.cfg.n_entities {
                return Err(Error::IdNotFound {
                    kind: "entity",
                    id: e,
                });
            }
            ents.push(e);
            labels.push(node.label.ok_or(Error::LabelMissing(i))?.class());
        }
        if ents.is_empty() {
            return Ok(int_node);
        }
        let table = g.param(self.ent_emb);
        let ent = g.gather(table, &ents)?;
        let table = g.param(self.label_emb);
        let lab = g.gather(table, &labels)?;
        let rest = g.add(ent, lab)?;
        g.concat(&[int_node, rest], Axis::Rows)
    }

    fn replace_first_row(g: &mut Graph<'_>, x: NodeId, row: NodeId) -> Result<NodeId> {
        let n = g.value(x).rows;
        if n == 1 {
            return Ok(row);
        }
        let rest = g.slice_rows(x, 1..n)?;
        g.concat(&[row, rest], Axis::Rows)
    }

    /// Text layers, then fusion layers that each run a text block, a graph
    /// block and the interaction mixer. Final layer norms on both outputs.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize], sg: &SubGraph) -> Result<EncodedPair> {
        let mut h = self.embed_text(g, ids)?;
        for l in 0..self.cfg.n_unimodal {
            h = self.lm_layer(g, l, h, ids)?.0;
        }
        let mut e = self.embed_nodes(g, sg)?;
        let mut gat = Vec::with_capacity(self.cfg.n_fusion);
        for m in 0..self.cfg.n_fusion {
            h = self.lm_layer(g, self.cfg.n_unimodal + m, h, ids)?.0;
            let (e_next, attn) = self.gnn_layer(g, m, e, sg)?;
            gat.push(attn);
            let h_int = g.slice_rows(h, 0..1)?;
            let e_int = g.slice_rows(e_next, INTERACTION_NODE..INTERACTION_NODE + 1)?;
            let (h_int, e_int) = self.fuse_interaction(g, m, h_int, e_int)?;
            h = Self::replace_first_row(g, h, h_int)?;
            e = Self::replace_first_row(g, e_next, e_int)?;
        }
        let h = self.text_ln.apply(g, h)?;
        let e = self.node_ln.apply(g, e)?;
        Ok(EncodedPair { h, e, gat })
    }
}

/// Mean of the token rows in each mention span, one output row per mention.
pub fn pool_text_entities(g: &mut Graph<'_>, h: NodeId, mentions: &[Mention]) -> Result<NodeId> {
    let spans: Vec<Range<usize>> = mentions.iter().map(|m| m.span.clone()).collect();
    g.mean_pool(h, &spans)
}

/// Last fusion layer's attention from each in-neighbor into the interaction
/// node, as (local node index, weight) in edge order.
pub fn interaction_attention(g: &Graph<'_>, enc: &EncodedPair, sg: &SubGraph) -> Vec<(usize, f64)> {
    let Some(Some(attn)) = enc.gat.last() else {
        return Vec::new();
    };
    let (Some(group), Some(weights)) = (
        g.attention_group(*attn, INTERACTION_NODE),
        g.attention_weights(*attn, INTERACTION_NODE),
    ) else {
        return Vec::new();
    };
    group
        .iter()
        .zip(weights)
        .map(|(&edge, w)| (sg.edges[edge].head, w))
        .collect()
}
