use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kg::RetrievalConfig;
use crate::numerics::AdamConfig;
use crate::objectives::KaInit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Post,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Post => "post",
            Stage::Finetune => "finetune",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "post" => Ok(Stage::Post),
            "finetune" | "fine-tune" | "fine_tune" => Ok(Stage::Finetune),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub mlm: bool,
    pub ka: bool,
    pub ksd: bool,
    pub kbr: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            mlm: true,
            ka: true,
            ksd: true,
            kbr: true,
        }
    }
}

/// Encoder sizes that come from the config; table sizes come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_l: usize,
    pub d_g: usize,
    pub n_unimodal: usize,
    pub n_fusion: usize,
    pub text_heads: usize,
    pub gat_heads: usize,
    pub max_len: usize,
    pub ff_width: usize,
    pub fuse_residual: bool,
    pub ka_init: KaInit,
}

impl Default for ModelShape {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelShape {
            d_l: e.d_l,
            d_g: e.d_g,
            n_unimodal: e.n_unimodal,
            n_fusion: e.n_fusion,
            text_heads: e.text_heads,
            gat_heads: e.gat_heads,
            max_len: e.max_len,
            ff_width: e.ff_width,
            fuse_residual: e.fuse_residual,
            ka_init: KaInit::default(),
        }
    }
}

impl ModelShape {
    pub fn encoder_config(
        &self,
        vocab_size: usize,
        n_entities: usize,
        n_relations: usize,
    ) -> EncoderConfig {
        EncoderConfig {
            d_l: self.d_l,
            d_g: self.d_g,
            n_unimodal: self.n_unimodal,
            n_fusion: self.n_fusion,
            text_heads: self.text_heads,
            gat_heads: self.gat_heads,
            max_len: self.max_len,
            vocab_size,
            n_entities,
            n_relations,
            ff_width: self.ff_width,
            fuse_residual: self.fuse_residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Overrides the per-stage epoch count for the stage being run.
    pub epochs: Option<usize>,
    pub epochs_post: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub k: usize,
    pub k_irr: usize,
    pub k_reg: usize,
    pub loss: LossSwitches,
    pub optim: AdamConfig,
    pub seed: u64,
    pub data_kg: Option<PathBuf>,
    pub data_train: Option<PathBuf>,
    pub data_dev: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub model: ModelShape,
    pub retrieval: RetrievalConfig,
    pub gen: GenConfig,
    pub eval_inject_irrelevant: bool,
    pub keep_best_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: None,
            epochs_post: 30,
            epochs_finetune: 60,
            batch_size: 8,
            k: 4,
            k_irr: 2,
            k_reg: 4,
            loss: LossSwitches::default(),
            optim: AdamConfig::default(),
            seed: 42,
            data_kg: None,
            data_train: None,
            data_dev: None,
            data_test: None,
            checkpoint_in: None,
            checkpoint_out: None,
            model: ModelShape::default(),
            retrieval: RetrievalConfig::default(),
            gen: GenConfig::default(),
            eval_inject_irrelevant: false,
            keep_best_dev: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage" => self.stage = value.parse()?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "epochs.post" => self.epochs_post = parse(key, value)?,
            "epochs.finetune" => self.epochs_finetune = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "k_irr" => self.k_irr = parse(key, value)?,
            "k_reg" => self.k_reg = parse(key, value)?,
            "loss.mlm" => self.loss.mlm = parse_bool(key, value)?,
            "loss.ka" => self.loss.ka = parse_bool(key, value)?,
            "loss.ksd" => self.loss.ksd = parse_bool(key, value)?,
            "loss.kbr" => self.loss.kbr = parse_bool(key, value)?,
            "optim.lr" => self.optim.lr = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data.kg" => self.data_kg = path(value),
            "data.train" => self.data_train = path(value),
            "data.dev" => self.data_dev = path(value),
            "data.test" => self.data_test = path(value),
            "checkpoint.in" => self.checkpoint_in = path(value),
            "checkpoint.out" => self.checkpoint_out = path(value),
            "model.d_l" => self.model.d_l = parse(key, value)?,
            "model.d_g" => self.model.d_g = parse(key, value)?,
            "model.n_unimodal" => self.model.n_unimodal = parse(key, value)?,
            "model.n_fusion" => self.model.n_fusion = parse(key, value)?,
            "model.text_heads" => self.model.text_heads = parse(key, value)?,
            "model.gat_heads" => self.model.gat_heads = parse(key, value)?,
            "model.max_len" => self.model.max_len = parse(key, value)?,
            "model.ff_width" => self.model.ff_width = parse(key, value)?,
            "model.fuse_residual" => self.model.fuse_residual = parse_bool(key, value)?,
            "model.ka_init" => self.model.ka_init = value.parse()?,
            "retrieval.hops" => self.retrieval.hops = parse(key, value)?,
            "retrieval.max_nodes" => self.retrieval.max_nodes = parse(key, value)?,
            "gen.n_entities" => self.gen.n_entities = parse(key, value)?,
            "gen.n_relations" => self.gen.n_relations = parse(key, value)?,
            "gen.n_examples" => self.gen.n_examples = parse(key, value)?,
            "gen.n_candidates" => self.gen.n_candidates = parse(key, value)?,
            "gen.chain_hops" => self.gen.chain_hops = parse(key, value)?,
            "eval.inject_irrelevant" => self.eval_inject_irrelevant = parse_bool(key, value)?,
            "train.keep_best_dev" => self.keep_best_dev = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        self.epochs.unwrap_or(match stage {
            Stage::Post => self.epochs_post,
            Stage::Finetune => self.epochs_finetune,
        })
    }

    /// Generator settings with the master seed and retrieval settings folded in.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            retrieval: self.retrieval,
            ..self.gen
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs_for(self.stage) == 0 || self.epochs_post == 0 || self.epochs_finetune == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.loss.ka && self.k == 0 {
            return bad("k must be at least 1 when loss.ka is on");
        }
        if self.stage == Stage::Post && !self.loss.ka && !self.loss.mlm {
            return bad("post-training needs loss.mlm or loss.ka");
        }
        let o = &self.optim;
        if !(o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let p = |x: &Option<PathBuf>| {
            x.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage", self.stage.as_str().into());
        if let Some(e) = self.epochs {
            kv("epochs", e.to_string());
        }
        kv("epochs.post", self.epochs_post.to_string());
        kv("epochs.finetune", self.epochs_finetune.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("k", self.k.to_string());
        kv("k_irr", self.k_irr.to_string());
        kv("k_reg", self.k_reg.to_string());
        kv("loss.mlm", self.loss.mlm.to_string());
        kv("loss.ka", self.loss.ka.to_string());
        kv("loss.ksd", self.loss.ksd.to_string());
        kv("loss.kbr", self.loss.kbr.to_string());
        kv("optim.lr", format!("{:?}", self.optim.lr));
        kv("optim.beta1", format!("{:?}", self.optim.beta1));
        kv("optim.beta2", format!("{:?}", self.optim.beta2));
        kv("optim.eps", format!("{:?}", self.optim.eps));
        kv("seed", self.seed.to_string());
        kv("data.kg", p(&self.data_kg));
        kv("data.train", p(&self.data_train));
        kv("data.dev", p(&self.data_dev));
        kv("data.test", p(&self.data_test));
        kv("checkpoint.in", p(&self.checkpoint_in));
        kv("checkpoint.out", p(&self.checkpoint_out));
        let m = &self.model;
        kv("model.d_l", m.d_l.to_string());
        kv("model.d_g", m.d_g.to_string());
        kv("model.n_unimodal", m.n_unimodal.to_string());
        kv("model.n_fusion", m.n_fusion.to_string());
        kv("model.text_heads", m.text_heads.to_string());
        kv("model.gat_heads", m.gat_heads.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("model.ff_width", m.ff_width.to_string());
        kv("model.fuse_residual", m.fuse_residual.to_string());
        kv("model.ka_init", m.ka_init.as_str().to_string());
        kv("retrieval.hops", self.retrieval.hops.to_string());
        kv("retrieval.max_nodes", self.retrieval.max_nodes.to_string());
        kv("gen.n_entities", self.gen.n_entities.to_string());
        kv("gen.n_relations", self.gen.n_relations.to_string());
        kv("gen.n_examples", self.gen.n_examples.to_string());
        kv("gen.n_candidates", self.gen.n_candidates.to_string());
        kv("gen.chain_hops", self.gen.chain_hops.to_string());
        kv(
            "eval.inject_irrelevant",
            self.eval_inject_irrelevant.to_string(),
        );
        kv("train.keep_best_dev", self.keep_best_dev.to_string());
        s
    }

    /// First 8 bytes of the SHA-256 of [`TrainConfig::to_text`] without the
    /// stage and checkpoint paths, which differ between the two stages of
    /// one run.
    pub fn hash(&self) -> u64 {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("checkpoint.") && !l.starts_with("stage "))
            .flat_map(|l| [l, "\n"])
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let cfg =
            TrainConfig::parse("# c\nstage = post\nepochs=3 # trailing\nloss.ka = off\n\nk = 2\n")
                .unwrap();
        assert_eq!(cfg.stage, Stage::Post);
        assert_eq!(cfg.epochs_for(Stage::Post), 3);
        assert!(!cfg.loss.ka);
        assert_eq!(cfg.k, 2);
        assert!(matches!(
            TrainConfig::parse("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::parse("k = 1\nk = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(TrainConfig::parse("k = x"), Err(Error::Config(_))));
    }

    #[test]
    fn vacuous_post_stage_is_rejected() {
        let cfg = TrainConfig::parse("stage = post\nloss.mlm = off\nloss.ka = off").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("optim.lr=0.0025").unwrap();
        cfg.apply_override("data.train = /tmp/x.jsonl").unwrap();
        cfg.apply_override("epochs=7").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.seed += 1;
        assert_ne!(back.hash(), cfg.hash());
        let moved = TrainConfig {
            stage: Stage::Post,
            checkpoint_in: Some("/elsewhere".into()),
            ..back.clone()
        };
        assert_eq!(moved.hash(), back.hash());
    }
}
