use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor_io::{read_tensors, write_tensors};
use crate::numerics::{AdamConfig, OptimState, ParamStore, Tensor};

const FORMAT_VERSION: f64 = 1.0;

/// Training stage a checkpoint was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    Init,
    Post,
    Finetune,
}

impl StageTag {
    fn code(self) -> f64 {
        match self {
            StageTag::Init => 0.0,
            StageTag::Post => 1.0,
            StageTag::Finetune => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(StageTag::Init),
            1 => Ok(StageTag::Post),
            2 => Ok(StageTag::Finetune),
            _ => Err(Error::Checkpoint(format!("unknown stage code {c}"))),
        }
    }
}

/// Stages only move forward: a fine-tuned model cannot be post-trained.
pub fn check_transition(from: StageTag, to: StageTag) -> Result<()> {
    if to < from {
        return Err(Error::Checkpoint(format!(
            "cannot run {to:?} on a {from:?} checkpoint"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub config_hash: u64,
    pub vocab_hash: u64,
    pub encoder: EncoderConfig,
    pub params: ParamStore,
    pub optim: OptimState,
}

pub fn vocab_hash(vocab: &Vocab) -> u64 {
    let mut h = Sha256::new();
    for t in vocab.tokens() {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn split_u64(v: u64) -> Vec<f64> {
    vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(t: &Tensor) -> Result<u64> {
    match t.data.as_slice() {
        [hi, lo] => Ok(((*hi as u64) << 32) | (*lo as u64)),
        _ => Err(Error::Checkpoint("malformed 64-bit field".into())),
    }
}

fn encoder_fields(c: &EncoderConfig) -> Vec<f64> {
    [
        c.d_l,
        c.d_g,
        c.n_unimodal,
        c.n_fusion,
        c.text_heads,
        c.gat_heads,
        c.max_len,
        c.vocab_size,
        c.n_entities,
        c.n_relations,
        c.ff_width,
        c.fuse_residual as usize,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn encoder_from_fields(v: &[f64]) -> Result<EncoderConfig> {
    if v.len() != 12 {
        return Err(Error::Checkpoint("malformed encoder metadata".into()));
    }
    let u = |i: usize| v[i] as usize;
    Ok(EncoderConfig {
        d_l: u(0),
        d_g: u(1),
        n_unimodal: u(2),
        n_fusion: u(3),
        text_heads: u(4),
        gat_heads: u(5),
        max_len: u(6),
        vocab_size: u(7),
        n_entities: u(8),
        n_relations: u(9),
        ff_width: u(10),
        fuse_residual: u(11) != 0,
    })
}

/// Writes parameters, optimizer moments and metadata in the tensor dump
/// format. The write goes to a sibling temp file first.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = vec![
        (
            "meta.version".into(),
            Tensor::row_vector(vec![FORMAT_VERSION]),
        ),
        (
            "meta.stage".into(),
            Tensor::row_vector(vec![ckpt.stage.code()]),
        ),
        (
            "meta.config_hash".into(),
            Tensor::row_vector(split_u64(ckpt.config_hash)),
        ),
        (
            "meta.vocab_hash".into(),
            Tensor::row_vector(split_u64(ckpt.vocab_hash)),
        ),
        (
            "meta.encoder".into(),
            Tensor::row_vector(encoder_fields(&ckpt.encoder)),
        ),
    ];
    for (_, name, t) in ckpt.params.iter() {
        tensors.push((format!("param/{name}"), t.clone()));
    }
    let o = &ckpt.optim;
    tensors.push((
        "optim.config".into(),
        Tensor::row_vector(vec![
            o.config.lr,
            o.config.beta1,
            o.config.beta2,
            o.config.eps,
        ]),
    ));
    tensors.push(("optim.step".into(), Tensor::row_vector(split_u64(o.step))));
    for ((_, name, _), (m, v)) in ckpt
        .params
        .iter()
        .zip(o.first_moment.iter().zip(&o.second_moment))
    {
        tensors.push((format!("optim.m/{name}"), m.clone()));
        tensors.push((format!("optim.v/{name}"), v.clone()));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_tensors(&mut w, &tensors)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let tensors = read_tensors(&mut r)?;
    let mut params = ParamStore::new();
    let mut meta = std::collections::HashMap::new();
    let mut moments = std::collections::HashMap::new();
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("param/") {
            if params.id(p).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {p}")));
            }
            params.add(p, t);
        } else if name.starts_with("optim.m/") || name.starts_with("optim.v/") {
            moments.insert(name, t);
        } else {
            meta.insert(name, t);
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
    };
    if get("meta.version")?.data != [FORMAT_VERSION] {
        return Err(Error::Checkpoint("unsupported format version".into()));
    }
    let stage = StageTag::from_code(get("meta.stage")?.scalar())?;
    let config_hash = join_u64(get("meta.config_hash")?)?;
    let vocab_hash = join_u64(get("meta.vocab_hash")?)?;
    let encoder = encoder_from_fields(&get("meta.encoder")?.data)?;
    let oc = &get("optim.config")?.data;
    if oc.len() != 4 {
        return Err(Error::Checkpoint("malformed optimizer config".into()));
    }
    let mut optim = OptimState::new(
        &params,
        AdamConfig {
            lr: oc[0],
            beta1: oc[1],
            beta2: oc[2],
            eps: oc[3],
        },
    );
    optim.step = join_u64(get("optim.step")?)?;
    for (id, name, t) in params.iter() {
        for (prefix, slot) in [
            ("optim.m/", &mut optim.first_moment),
            ("optim.v/", &mut optim.second_moment),
        ] {
            let m = moments
                .remove(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing moment for {name}")))?;
            if m.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "moment shape mismatch for {name}"
                )));
            }
            slot[id.index()] = m;
        }
    }
    Ok(Checkpoint {
        stage,
        config_hash,
        vocab_hash,
        encoder,
        params,
        optim,
    })
}
