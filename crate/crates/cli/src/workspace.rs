use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fits_core::corpus::{generate_synthetic_dataset, read_jsonl_file, SyntheticData};
use fits_core::kg::KnowledgeGraph;
use fits_core::trainer::{
    load_checkpoint, vocab_hash, Checkpoint, Model, Stage, StageTag, TaskData, TrainConfig,
};
use fits_core::{Error, Result};

use crate::Common;

pub const LOCK_FILE: &str = ".fits.lock";
pub const CONFIG_SNAPSHOT: &str = "config.resolved";

/// Resolved config plus a locked output directory. The lock is released on
/// drop.
pub struct Workspace {
    pub cfg: TrainConfig,
    pub out: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    /// Config file, then `FITS_SEED`, then `--set` overrides; `stage` is
    /// pinned by training subcommands.
    pub fn open(common: &Common, stage: Option<Stage>) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Ok(seed) = std::env::var("FITS_SEED") {
            cfg.set("seed", &seed)?;
        }
        for kv in &common.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = stage {
            cfg.stage = s;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out)?;
        let lock = common.out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "{} is locked by another run ({})",
                    common.out.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(e.into()),
        }
        let ws = Workspace {
            cfg,
            out: common.out.clone(),
            lock,
        };
        ws.write(CONFIG_SNAPSHOT, ws.cfg.to_text().as_bytes())?;
        Ok(ws)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes through a sibling temp file so readers never see half a file.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_kg(path: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::read_tsv(BufReader::new(File::open(path)?), path)
}

/// Knowledge graph and splits from `data.*`, or the synthetic generator
/// when no training file is configured.
pub fn load_splits(cfg: &TrainConfig) -> Result<SyntheticData> {
    let Some(train) = &cfg.data_train else {
        return generate_synthetic_dataset(&cfg.gen_config());
    };
    let kg_path = cfg
        .data_kg
        .as_ref()
        .ok_or_else(|| Error::Config("data.train needs data.kg".into()))?;
    let kg = read_kg(kg_path)?;
    let read = |p: &Option<PathBuf>| {
        p.as_ref()
            .map_or(Ok(Vec::new()), |p| read_jsonl_file(p, &kg))
    };
    let (train, dev, test) = (
        read_jsonl_file(train, &kg)?,
        read(&cfg.data_dev)?,
        read(&cfg.data_test)?,
    );
    Ok(SyntheticData {
        kg,
        train,
        dev,
        test,
    })
}

pub fn load_data(cfg: &TrainConfig) -> Result<TaskData> {
    let d = load_splits(cfg)?;
    TaskData::new(d.kg, &d.train, &d.dev, &d.test)
}

/// Model from `checkpoint.in` when set, checked against the data's
/// vocabulary and the stage about to run; a fresh model otherwise.
pub fn load_model(
    cfg: &TrainConfig,
    data: &TaskData,
    next: Option<StageTag>,
) -> Result<(Model, Option<Checkpoint>)> {
    let Some(path) = &cfg.checkpoint_in else {
        return Ok((
            Model::init(data.encoder_config(&cfg.model), cfg.model.ka_init, cfg.seed)?,
            None,
        ));
    };
    let ckpt = load_checkpoint(path)?;
    if let Some(next) = next {
        fits_core::trainer::check_transition(ckpt.stage, next)?;
    }
    if ckpt.vocab_hash != vocab_hash(&data.vocab) {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    if ckpt.config_hash != cfg.hash() {
        log::warn!("{} was written under a different config", path.display());
    }
    let model = Model::from_params(ckpt.encoder, ckpt.params.clone())?;
    Ok((model, Some(ckpt)))
}
