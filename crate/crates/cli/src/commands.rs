use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fits_core::corpus::{
    apply_operation_a, apply_operation_b, read_jsonl_file, write_jsonl, McqaExample,
};
use fits_core::diagnostics::{
    attention_report, entity_alignment_correlation, evaluate_accuracy, modality_pca,
};
use fits_core::kg::KnowledgeGraph;
use fits_core::numerics::OptimState;
use fits_core::trainer::{
    ablation_arms, grad_check_finetune, grad_check_post, run_ablation, save_checkpoint, vocab_hash,
    Checkpoint, EpochMetrics, Model, Prepared, Stage, StageTag, TaskData, TrainConfig,
};
use fits_core::Result;
use serde_json::json;

use crate::workspace::{load_data, load_model, load_splits, read_kg, Workspace};
use crate::{Common, Op, Split};

/// A finished command whose result is a failed check rather than an error.
pub struct CheckFailed {
    pub kind: &'static str,
    pub message: String,
}

pub type Outcome = Result<Option<CheckFailed>>;

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json value"));
}

fn jsonl(examples: &[McqaExample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, examples)?;
    Ok(buf)
}

pub fn gen_data(common: &Common) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let d = fits_core::corpus::generate_synthetic_dataset(&ws.cfg.gen_config())?;
    let mut kg = Vec::new();
    d.kg.write_tsv(&mut kg)?;
    ws.write("kg.tsv", &kg)?;
    ws.write("train.jsonl", &jsonl(&d.train)?)?;
    ws.write("dev.jsonl", &jsonl(&d.dev)?)?;
    ws.write("test.jsonl", &jsonl(&d.test)?)?;
    print(&json!({
        "entities": d.kg.num_entities(),
        "relations": d.kg.num_relations(),
        "triplets": d.kg.triplets().len(),
        "train": d.train.len(),
        "dev": d.dev.len(),
        "test": d.test.len(),
    }));
    Ok(None)
}

/// Streams one JSON line per epoch.
struct MetricsLog {
    w: BufWriter<File>,
    err: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(MetricsLog {
            w: BufWriter::new(File::create(path)?),
            err: None,
        })
    }

    fn record(&mut self, m: &EpochMetrics) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(self.w, "{line}").and_then(|_| self.w.flush()) {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.err.take() {
            Some(e) => Err(e.into()),
            None => Ok(self.w.flush()?),
        }
    }
}

fn checkpoint_path(ws: &Workspace, default: &str) -> PathBuf {
    ws.cfg
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| ws.path(default))
}

fn save(
    ws: &Workspace,
    data: &TaskData,
    model: Model,
    optim: OptimState,
    stage: StageTag,
    default: &str,
) -> Result<PathBuf> {
    let path = checkpoint_path(ws, default);
    let ckpt = Checkpoint {
        stage,
        config_hash: ws.cfg.hash(),
        vocab_hash: vocab_hash(&data.vocab),
        encoder: *model.config(),
        params: model.params,
        optim,
    };
    save_checkpoint(&path, &ckpt)?;
    Ok(path)
}

pub fn post_train(common: &Common) -> Outcome {
    let ws = Workspace::open(common, Some(Stage::Post))?;
    let data = load_data(&ws.cfg)?;
    let (mut model, _) = load_model(&ws.cfg, &data, Some(StageTag::Post))?;
    let mut optim = OptimState::new(&model.params, ws.cfg.optim);
    let mut log = MetricsLog::create(&ws.path("metrics.jsonl"))?;
    let history =
        fits_core::trainer::post_train(&mut model, &mut optim, &data, &ws.cfg, &mut |m| {
            log.record(m)
        })?;
    log.finish()?;
    let path = save(&ws, &data, model, optim, StageTag::Post, "post.ckpt")?;
    let last = history.last().expect("at least one epoch");
    print(&json!({ "checkpoint": path, "epochs": history.len(), "loss": last.loss }));
    Ok(None)
}

pub fn fine_tune(common: &Common) -> Outcome {
    let ws = Workspace::open(common, Some(Stage::Finetune))?;
    let data = load_data(&ws.cfg)?;
    let (mut model, _) = load_model(&ws.cfg, &data, Some(StageTag::Finetune))?;
    let mut optim = OptimState::new(&model.params, ws.cfg.optim);
    let mut log = MetricsLog::create(&ws.path("metrics.jsonl"))?;
    let outcome =
        fits_core::trainer::fine_tune(&mut model, &mut optim, &data, &ws.cfg, &mut |m| {
            log.record(m)
        })?;
    log.finish()?;
    let test_acc = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_accuracy(&model, &data.kg, &data.test, &ws.cfg)?)
    };
    let path = save(
        &ws,
        &data,
        model,
        optim,
        StageTag::Finetune,
        "finetune.ckpt",
    )?;
    let summary = json!({
        "checkpoint": path,
        "best_epoch": outcome.best_epoch,
        "best_dev": outcome.best_dev,
        "test_acc": test_acc,
    });
    ws.write_json("summary.json", &summary)?;
    print(&summary);
    Ok(None)
}

fn split(data: &TaskData, s: Split) -> &[Prepared] {
    match s {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

pub fn eval(common: &Common, s: Split, examples: Option<&Path>) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let data = load_data(&ws.cfg)?;
    let (model, _) = load_model(&ws.cfg, &data, None)?;
    let (source, prepared) = match examples {
        Some(p) => (
            p.display().to_string(),
            data.prepare(&read_jsonl_file(p, &data.kg)?),
        ),
        None => (split_name(s).to_string(), split(&data, s).to_vec()),
    };
    let accuracy = evaluate_accuracy(&model, &data.kg, &prepared, &ws.cfg)?;
    let report = json!({ "source": source, "examples": prepared.len(), "accuracy": accuracy });
    ws.write_json("eval.json", &report)?;
    print(&report);
    Ok(None)
}

fn transform_input(
    cfg: &TrainConfig,
    input: Option<&Path>,
) -> Result<(KnowledgeGraph, Vec<McqaExample>)> {
    match (input, &cfg.data_kg) {
        (Some(p), Some(kg)) => {
            let kg = read_kg(kg)?;
            let ex = read_jsonl_file(p, &kg)?;
            Ok((kg, ex))
        }
        (Some(_), None) => Err(fits_core::Error::Config("--input needs data.kg".into())),
        (None, _) => {
            let d = load_splits(cfg)?;
            Ok((d.kg, d.test))
        }
    }
}

pub fn transform(common: &Common, op: Op, input: Option<&Path>, output: Option<&Path>) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let (_, examples) = transform_input(&ws.cfg, input)?;
    let (out, name) = match op {
        Op::A => (apply_operation_a(&examples), "test-reason.jsonl"),
        Op::B => (apply_operation_b(&examples), "test-param.jsonl"),
    };
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.path(name));
    crate::workspace::write_atomic(&path, &jsonl(&out)?)?;
    print(&json!({ "op": format!("{op:?}"), "examples": out.len(), "output": path }));
    Ok(None)
}

pub fn diagnose(common: &Common, s: Split, attention_examples: usize) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let data = load_data(&ws.cfg)?;
    let (model, _) = load_model(&ws.cfg, &data, None)?;
    let untrained = Model::init(
        data.encoder_config(&ws.cfg.model),
        ws.cfg.model.ka_init,
        ws.cfg.seed,
    )?;
    let examples = split(&data, s);
    let align = entity_alignment_correlation(&model, examples, ws.cfg.seed)?;
    let align0 = entity_alignment_correlation(&untrained, examples, ws.cfg.seed)?;
    let pca = modality_pca(&model, examples)?;
    let pca0 = modality_pca(&untrained, examples)?;
    ws.write("pca.tsv", pca.to_tsv().as_bytes())?;
    ws.write("pca_untrained.tsv", pca0.to_tsv().as_bytes())?;
    let mut attn = Vec::new();
    for p in examples.iter().take(attention_examples) {
        let r = attention_report(&model, &data.kg, p, &ws.cfg)?;
        attn.extend(serde_json::to_string(&r)?.bytes());
        attn.push(b'\n');
    }
    ws.write("attention.jsonl", &attn)?;
    let summary = json!({
        "split": split_name(s),
        "alignment": align,
        "alignment_untrained": align0,
        "pca_centroid_distance": pca.centroid_distance(),
        "pca_centroid_distance_untrained": pca0.centroid_distance(),
    });
    ws.write_json("diagnose.json", &summary)?;
    print(&summary);
    Ok(None)
}

pub fn ablate(common: &Common, partial_post: bool) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let data = load_data(&ws.cfg)?;
    let results = run_ablation(&data, &ws.cfg, &ablation_arms(partial_post))?;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut table = String::from("arm\tdev_acc\ttest_acc\tbest_epoch\tstatus\n");
    for r in &results {
        let status = r
            .error
            .as_deref()
            .map_or("ok".to_string(), |e| format!("failed: {e}"));
        let epoch = r.best_epoch.map_or("-".to_string(), |e| e.to_string());
        table.push_str(&format!(
            "{}\t{}\t{}\t{epoch}\t{status}\n",
            r.arm,
            fmt(r.dev_acc),
            fmt(r.test_acc)
        ));
    }
    ws.write("ablation.tsv", table.as_bytes())?;
    ws.write_json("ablation.json", &results)?;
    print!("{table}");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.arm.as_str())
        .collect();
    if failed.is_empty() {
        Ok(None)
    } else {
        Ok(Some(CheckFailed {
            kind: "ArmFailed",
            message: format!("arms failed: {}", failed.join(", ")),
        }))
    }
}

pub fn grad_check(common: &Common, tolerance: f64) -> Outcome {
    let ws = Workspace::open(common, None)?;
    let data = load_data(&ws.cfg)?;
    let (model, _) = load_model(&ws.cfg, &data, None)?;
    let p = data
        .train
        .first()
        .ok_or_else(|| fits_core::Error::Config("empty training split".into()))?;
    let post = grad_check_post(&model, p, 0, &ws.cfg, ws.cfg.seed)?;
    let ft = grad_check_finetune(&model, &data.kg, p, &ws.cfg, ws.cfg.seed)?;
    let max = post.max_relative_error.max(ft.max_relative_error);
    let summary = json!({
        "post": post,
        "finetune": ft,
        "max_relative_error": max,
        "tolerance": tolerance,
        "pass": max < tolerance,
    });
    ws.write_json("gradcheck.json", &summary)?;
    print(&summary);
    if max < tolerance {
        Ok(None)
    } else {
        Ok(Some(CheckFailed {
            kind: "GradCheckFailed",
            message: format!("max relative error {max:e} >= {tolerance:e}"),
        }))
    }
}
