//! Subcommand implementations. Every writing command targets a run
//! directory, registers its outputs with an [`OutputGuard`], and finishes
//! by writing a manifest; on error the guard removes whatever was
//! already written.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ragline::chunker::{chunk_history, materialize, ChunkStrategy};
use ragline::encoder::mlm::{pretrain_mlm, MlmTrainConfig};
use ragline::encoder::{retriever_encode, token_inputs, TokenInput};
use ragline::fusion::train::{score_examples, train, write_epoch_csv};
use ragline::index::{build_index, VectorIndex};
use ragline::inspect::{inspect_examples, write_aggregate_csv, write_inspection_jsonl};
use ragline::metrics::metric_report;
use ragline::model::{load_model, save_model, ModelState, RetrieverSnapshot};
use ragline::pipeline::{prepare_examples, PreparedExample};
use ragline::rng::derive_seed;
use ragline::tasks::{generate, split_patients, SplitAssignment, TaskSpec};
use ragline::timeline::io::read_events_grouped;
use ragline::timeline::{build_timeline, PatientTimeline, TimeDeltaScaler, Vocabulary};

use crate::config::RunConfig;
use crate::manifest::{ensure_run_dir, OutputGuard, RunManifest};

// Seed salts, one per stochastic stage.
const SALT_MLM: u64 = 0x6d6c6d;
const SALT_SPLIT: u64 = 0x73706c69;
const SALT_TRAIN: u64 = 0x747261;
const SALT_EVAL: u64 = 0x6576616c;

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_timelines(events: &Path, vocab: &Vocabulary) -> Result<Vec<PatientTimeline>> {
    let grouped = read_events_grouped(events)?;
    let mut v = vocab.clone(); // frozen: unseen codes map to UNK
    grouped
        .iter()
        .map(|(id, raw)| Ok(build_timeline(id, raw, &mut v)?))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_index(path: &Path) -> Result<VectorIndex> {
    VectorIndex::load(path).with_context(|| format!("loading index {}", path.display()))
}

fn require_index_match(index: &VectorIndex, retriever_path: &Path) -> Result<()> {
    let digest = ragline::digest::sha256_file(retriever_path)?;
    let expected = &index.manifest().encoder_digest;
    if &digest != expected {
        bail!(
            "index was built with retriever digest {expected}, but {} has digest {digest}",
            retriever_path.display()
        );
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let data = generate(&cfg.synthetic(seed)?)?;

    let events_path = out.join("events.jsonl");
    guard.track(&events_path);
    ragline::timeline::io::write_events(
        &events_path,
        data.patients.iter().flat_map(|p| {
            p.raw_events
                .iter()
                .map(move |e| (p.timeline.patient_id.as_str(), e))
        }),
    )?;

    let vocab_path = out.join("vocab.tsv");
    guard.track(&vocab_path);
    data.vocabulary.save(&vocab_path)?;

    let (labels, exclusions) = data.label_records();
    let labels_path = out.join("labels.jsonl");
    guard.track(&labels_path);
    write_jsonl(&labels_path, &labels)?;
    let excl_path = out.join("exclusions.jsonl");
    guard.track(&excl_path);
    write_jsonl(&excl_path, &exclusions)?;
    let truth_path = out.join("ground_truth.jsonl");
    guard.track(&truth_path);
    write_jsonl(&truth_path, &data.ground_truth())?;

    let mut manifest = RunManifest::new("gen-data", seed, &cfg.digest);
    manifest.outputs = named(&[
        &events_path,
        &vocab_path,
        &labels_path,
        &excl_path,
        &truth_path,
    ]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

pub fn build_vocab(cfg: &RunConfig, seed: u64, events: &Path, out: &Path) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let grouped = read_events_grouped(events)?;
    let mut vocab = Vocabulary::new();
    for raw_events in grouped.values() {
        for e in raw_events {
            vocab.intern(&e.code);
        }
    }
    vocab.freeze();
    let vocab_path = out.join("vocab.tsv");
    guard.track(&vocab_path);
    vocab.save(&vocab_path)?;

    let mut manifest = RunManifest::new("build-vocab", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.outputs = named(&[&vocab_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, seed: u64, events: &Path, vocab: &Path, out: &Path) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let vocabulary = load_vocab(vocab)?;
    let timelines = load_timelines(events, &vocabulary)?;
    let scaler = cfg.scaler()?;
    let mut model = ModelState::init(cfg.model_config(vocabulary.len())?, seed)?;

    // Pretraining sequences: non-overlapping event windows of chunk size.
    let mut params = cfg.chunk_params()?;
    params.overlap = 0;
    let mut sequences: Vec<Vec<TokenInput>> = Vec::new();
    for tl in &timelines {
        for desc in chunk_history(&tl.patient_id, &tl.events, ChunkStrategy::Event, &params)? {
            let chunk = materialize(&desc, &tl.events, params.size)?;
            sequences.push(token_inputs(&chunk.events, &scaler));
        }
    }
    let steps = cfg.usize_key("mlm_steps")?;
    let losses = if steps > 0 {
        pretrain_mlm(
            &mut model.tables,
            &mut model.backbone,
            &mut model.mlm,
            &sequences,
            vocabulary.len() as u32,
            &MlmTrainConfig {
                steps,
                batch_size: cfg.usize_key("mlm_batch_size")?,
                lr: cfg.f64_key("mlm_lr")?,
                weight_decay: cfg.f64_key("mlm_weight_decay")?,
                seed: derive_seed(seed, SALT_MLM),
            },
        )?
    } else {
        Vec::new()
    };

    let model_path = out.join("model.ckpt");
    guard.track(&model_path);
    save_model(&model, &model_path)?;
    let loss_path = out.join("mlm_loss.csv");
    guard.track(&loss_path);
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&loss_path, csv)?;

    let mut manifest = RunManifest::new("pretrain-mlm", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.input("vocab", vocab)?;
    manifest.outputs = named(&[&model_path, &loss_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

pub fn cmd_build_index(
    cfg: &RunConfig,
    seed: u64,
    events: &Path,
    vocab: &Path,
    model: &Path,
    out: &Path,
) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let vocabulary = load_vocab(vocab)?;
    let timelines = load_timelines(events, &vocabulary)?;
    let state = load_checkpoint(model)?;
    let scaler = cfg.scaler()?;
    let histories: Vec<(String, Vec<ragline::timeline::TimelineEvent>)> = timelines
        .iter()
        .map(|t| (t.patient_id.clone(), t.events.clone()))
        .collect();
    let digest = ragline::digest::sha256_file(model)?;
    let (index, stats) = build_index(
        &histories,
        cfg.chunk_strategy()?,
        &cfg.chunk_params()?,
        &state.tables,
        &state.backbone,
        &scaler,
        &digest,
    )?;
    let index_path = out.join("index.bin");
    guard.track(&index_path);
    index.save(&index_path)?;
    eprintln!(
        "indexed {} patients, {} chunks ({} degenerate skipped)",
        stats.patients, stats.entries, stats.skipped_degenerate
    );

    let mut manifest = RunManifest::new("build-index", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.input("vocab", vocab)?;
    manifest.input("model", model)?;
    manifest.outputs = named(&[&index_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

pub fn retrieve(
    cfg: &RunConfig,
    events: &Path,
    vocab: &Path,
    model: &Path,
    index: &Path,
    patient: &str,
) -> Result<()> {
    let vocabulary = load_vocab(vocab)?;
    let timelines = load_timelines(events, &vocabulary)?;
    let state = load_checkpoint(model)?;
    let idx = load_index(index)?;
    require_index_match(&idx, model)?;
    let scaler = cfg.scaler()?;
    let tl = timelines
        .iter()
        .find(|t| t.patient_id == patient)
        .with_context(|| format!("no events for patient {patient}"))?;
    let task = cfg.task_spec()?;
    let split = ragline::timeline::split_query_history(tl, &task, cfg.usize_key("query_len")?)?;
    let query = token_inputs(&tl.events[split.query.clone()], &scaler);
    let qvec = retriever_encode(&state.tables, &state.backbone, &query)?;
    let hits = idx.search(patient, &qvec, split.query.start, cfg.usize_key("num_retrieved")?);
    for h in hits {
        println!(
            "{}",
            serde_json::json!({
                "patient_id": patient,
                "ordinal": h.descriptor.ordinal,
                "start": h.descriptor.start,
                "end": h.descriptor.end,
                "score": h.score,
            })
        );
    }
    Ok(())
}

/// Shared example preparation for train, eval, and inspect.
#[allow(clippy::too_many_arguments)]
fn prepare_split(
    cfg: &RunConfig,
    timelines: &[PatientTimeline],
    ids: &[String],
    task: &TaskSpec,
    scaler: &TimeDeltaScaler,
    retriever: &RetrieverSnapshot,
    index: &VectorIndex,
) -> Result<Vec<PreparedExample>> {
    let (examples, _) = prepare_examples(
        timelines,
        ids,
        task,
        cfg.usize_key("query_len")?,
        scaler,
        retriever,
        index,
        cfg.usize_key("num_retrieved")?,
    )?;
    Ok(examples)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    cfg: &RunConfig,
    seed: u64,
    events: &Path,
    vocab: &Path,
    model: &Path,
    index: &Path,
    out: &Path,
) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let vocabulary = load_vocab(vocab)?;
    let timelines = load_timelines(events, &vocabulary)?;
    let state = load_checkpoint(model)?;
    let idx = load_index(index)?;
    require_index_match(&idx, model)?;
    let scaler = cfg.scaler()?;
    let task = cfg.task_spec()?;

    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let splits = split_patients(&ids, cfg.fractions()?, derive_seed(seed, SALT_SPLIT))?;
    let retriever = state.snapshot_retriever();
    let train_set = prepare_split(cfg, &timelines, &splits.train, &task, &scaler, &retriever, &idx)?;
    let val_set = prepare_split(cfg, &timelines, &splits.val, &task, &scaler, &retriever, &idx)?;

    let outcome = train(
        state,
        &train_set,
        &val_set,
        &cfg.train_config(derive_seed(seed, SALT_TRAIN))?,
    )?;
    if outcome.diverged {
        eprintln!("training diverged; keeping the last stable checkpoint");
    }

    let trained_path = out.join("trained.ckpt");
    guard.track(&trained_path);
    save_model(&outcome.model, &trained_path)?;
    let retriever_path = out.join("retriever.ckpt");
    guard.track(&retriever_path);
    std::fs::copy(model, &retriever_path)?;
    let log_path = out.join("epochs.csv");
    guard.track(&log_path);
    write_epoch_csv(&log_path, &outcome.log)?;
    let splits_path = out.join("splits.json");
    guard.track(&splits_path);
    write_json(&splits_path, &splits)?;

    let mut manifest = RunManifest::new("train", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.input("vocab", vocab)?;
    manifest.input("model", model)?;
    manifest.input("index", index)?;
    manifest.outputs = named(&[&trained_path, &retriever_path, &log_path, &splits_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    seed: u64,
    events: &Path,
    vocab: &Path,
    retriever: &Path,
    model: &Path,
    index: &Path,
    splits: &Path,
    out: &Path,
) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let (test_set, state) =
        load_eval_world(cfg, events, vocab, retriever, model, index, splits)?;
    let labels: Vec<u8> = test_set.iter().map(|e| e.label).collect();
    let scores = score_examples(&state, &test_set)?;
    let report = metric_report(
        &scores,
        &labels,
        cfg.usize_key("n_boot")?,
        derive_seed(seed, SALT_EVAL),
    )?;
    let metrics_path = out.join("metrics.json");
    guard.track(&metrics_path);
    write_json(&metrics_path, &report)?;

    let mut manifest = RunManifest::new("eval", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.input("vocab", vocab)?;
    manifest.input("retriever", retriever)?;
    manifest.input("model", model)?;
    manifest.input("index", index)?;
    manifest.input("splits", splits)?;
    manifest.outputs = named(&[&metrics_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_inspect(
    cfg: &RunConfig,
    seed: u64,
    events: &Path,
    vocab: &Path,
    retriever: &Path,
    model: &Path,
    index: &Path,
    splits: &Path,
    out: &Path,
) -> Result<()> {
    ensure_run_dir(out)?;
    let mut guard = OutputGuard::new();
    let (test_set, state) =
        load_eval_world(cfg, events, vocab, retriever, model, index, splits)?;
    let records = inspect_examples(&state, &test_set, cfg.usize_key("inspect_top_k")?)?;
    let jsonl_path = out.join("inspect.jsonl");
    guard.track(&jsonl_path);
    write_inspection_jsonl(&jsonl_path, &records)?;
    let csv_path = out.join("aggregate.csv");
    guard.track(&csv_path);
    write_aggregate_csv(&csv_path, &records)?;

    let mut manifest = RunManifest::new("inspect", seed, &cfg.digest);
    manifest.input("events", events)?;
    manifest.input("vocab", vocab)?;
    manifest.input("retriever", retriever)?;
    manifest.input("model", model)?;
    manifest.input("index", index)?;
    manifest.input("splits", splits)?;
    manifest.outputs = named(&[&jsonl_path, &csv_path]);
    let mpath = manifest.write(out)?;
    guard.track(&mpath);
    guard.disarm();
    Ok(())
}

/// Everything eval and inspect share: test examples prepared with the
/// frozen retriever, plus the trained model.
fn load_eval_world(
    cfg: &RunConfig,
    events: &Path,
    vocab: &Path,
    retriever: &Path,
    model: &Path,
    index: &Path,
    splits: &Path,
) -> Result<(Vec<PreparedExample>, ModelState)> {
    let vocabulary = load_vocab(vocab)?;
    let timelines = load_timelines(events, &vocabulary)?;
    let retriever_state = load_checkpoint(retriever)?;
    let trained = load_checkpoint(model)?;
    let idx = load_index(index)?;
    require_index_match(&idx, retriever)?;
    let assignment: SplitAssignment = serde_json::from_str(
        &std::fs::read_to_string(splits)
            .with_context(|| format!("reading splits {}", splits.display()))?,
    )?;
    let scaler = cfg.scaler()?;
    let task = cfg.task_spec()?;
    let snap = retriever_state.snapshot_retriever();
    let test_set = prepare_split(
        cfg,
        &timelines,
        &assignment.test,
        &task,
        &scaler,
        &snap,
        &idx,
    )?;
    Ok((test_set, trained))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

fn named(paths: &[&PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect()
}
