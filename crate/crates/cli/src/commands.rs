//! Subcommand bodies. Every command that produces artifacts writes a
//! `manifest.json` next to them recording the resolved configuration, the
//! seed and content hashes of everything it read.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use krlm_core::dataset::{content_hash, Dataset, Split};
use krlm_core::evaluator::{prediction_line, rank_queries, score_query, trace_lines, write_score_dump, TraceLine};
use krlm_core::gradcheck::{self, Instance};
use krlm_core::instruction::{Template, DEFAULT_TEMPLATE};
use krlm_core::kg::{EntityRecord, KnowledgeGraph, RelationRecord, Triplet};
use krlm_core::model::{Model, ModelConfig};
use krlm_core::relgraph::{Pattern, RelationalGraph};
use krlm_core::synth::{self, SynthConfig};
use krlm_core::tokenizer::Tokenizer;
use krlm_core::trainer::{build_tokenizer, TrainMode, Trainer};
use krlm_core::KrlmError;
use krlm_numerics::{Checkpoint, Manifest, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{finetune_epochs, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const PREPARED: &str = "prepared.json";
pub const TOKENIZER: &str = "tokenizer.vocab";
pub const TEMPLATE: &str = "template.txt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const SCORES: &str = "scores.jsonl";

/// Pretraining epochs of `steps_per_epoch` steps each.
const PRETRAIN_EPOCHS: usize = 20;
const PRETRAIN_STEPS_PER_EPOCH: u64 = 10_000;
/// Training from scratch on one dataset: ten passes over its triplets.
const E2E_EPOCHS: usize = 10;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.into()))?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

fn write_line(w: &mut impl Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CliError::Other(e.into()))?;
    w.write_all(b"\n").map_err(|e| CliError::Other(e.into()))
}

/// Reproducibility record written by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Hash of each input, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Hash over the config text and every input hash.
    pub content_hash: String,
    /// Extra facts about the run (protocol, selection criterion, ...).
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: BTreeMap<String, String>) -> Self {
        let mut h = Sha256::new();
        h.update(config.to_file_text().as_bytes());
        for (k, v) in &inputs {
            h.update(format!("\0{k}\0{v}").as_bytes());
        }
        Self {
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            inputs,
            content_hash: hex::encode(h.finalize()),
            notes: BTreeMap::new(),
        }
    }

    pub fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.insert(key.into(), value.to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(MANIFEST), self)
    }
}

// ---------------------------------------------------------------- datasets

/// Writes a synthetic dataset with the FB-V1 graph shape.
pub fn synth(out: &Path, seed: u64) -> Result<String, CliError> {
    let name = out
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synth".into());
    let ds = synth::generate(&SynthConfig::fb_v1_shape(seed), &name)?;
    ds.write(out)?;
    Ok(content_hash(out)?)
}

/// Interns names in order of first appearance.
#[derive(Default)]
struct Vocab {
    names: Vec<String>,
    ids: std::collections::HashMap<String, usize>,
}

impl Vocab {
    fn id(&mut self, name: &str) -> usize {
        if let Some(&i) = self.ids.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

fn read_raw_triplets(path: &Path) -> Result<Vec<[String; 3]>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(CliError::data(format!(
                "{}:{}: expected `head relation tail`",
                path.display(),
                i + 1
            )));
        }
        out.push([f[0].to_string(), f[1].to_string(), f[2].to_string()]);
    }
    Ok(out)
}

fn grail_split(graph_file: &Path, query_file: &Path) -> Result<Split, CliError> {
    let graph = read_raw_triplets(graph_file)?;
    let queries = read_raw_triplets(query_file)?;
    let (mut ents, mut rels) = (Vocab::default(), Vocab::default());
    let mut intern = |rows: &[[String; 3]]| -> Vec<Triplet> {
        rows.iter()
            .map(|[h, r, t]| {
                let (h, r) = (ents.id(h), rels.id(r));
                Triplet::new(h, r, ents.id(t))
            })
            .collect()
    };
    let graph = intern(&graph);
    let queries = intern(&queries);
    let entities = ents
        .names
        .into_iter()
        .enumerate()
        .map(|(id, name)| EntityRecord {
            id,
            name,
            description: String::new(),
        })
        .collect();
    let relations = rels
        .names
        .into_iter()
        .enumerate()
        .map(|(id, name)| RelationRecord {
            id,
            name,
            description: String::new(),
            is_inverse: false,
            base_id: id,
        })
        .collect();
    let (kg, duplicates) = KnowledgeGraph::new(entities, relations, graph)?;
    let report = krlm_core::kg::LoadReport {
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        triplets: kg.triplets().len(),
        duplicates,
    };
    Ok(Split::new(kg, queries, report)?)
}

/// Converts the GraIL inductive layout: the transductive directory gives the
/// training graph (`train.txt`) and its held-out queries (`valid.txt`), the
/// `_ind` directory gives the test graph (`train.txt`) and `test.txt`.
pub fn import_grail(train_dir: &Path, test_dir: &Path, out: &Path) -> Result<String, CliError> {
    let train = grail_split(&train_dir.join("train.txt"), &train_dir.join("valid.txt"))?;
    let test = grail_split(&test_dir.join("train.txt"), &test_dir.join("test.txt"))?;
    let ds = Dataset {
        name: String::new(),
        root: out.to_path_buf(),
        train,
        test,
    };
    ds.write(out)?;
    Ok(content_hash(out)?)
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub entities: usize,
    pub base_relations: usize,
    pub triplets: usize,
    pub duplicates_dropped: usize,
    pub queries: usize,
    pub isolated_entities: usize,
    /// Typed relational-graph edge counts.
    pub relational_edges: BTreeMap<String, usize>,
}

/// What `prepare` leaves behind for the training and evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub dataset: PathBuf,
    pub dataset_name: String,
    pub dataset_hash: String,
    pub tokenizer_hash: String,
    pub template_hash: String,
    pub train: SplitStats,
    pub test: SplitStats,
}

fn split_stats(s: &Split) -> SplitStats {
    let rg = &s.ctx.relational;
    SplitStats {
        entities: s.ctx.kg.num_entities(),
        base_relations: s.num_base_relations(),
        triplets: s.report.triplets,
        duplicates_dropped: s.report.duplicates,
        queries: s.queries.len(),
        isolated_entities: s.ctx.kg.isolated_entities(),
        relational_edges: Pattern::ALL.iter().map(|&p| (p.name().to_string(), rg.count(p))).collect(),
    }
}

fn relational_text(rg: &RelationalGraph) -> String {
    rg.edges
        .iter()
        .map(|(a, p, b)| format!("{a}\t{}\t{b}\n", p.name()))
        .collect()
}

fn template_text(config: &RunConfig) -> Result<String, CliError> {
    match &config.template {
        None => Ok(DEFAULT_TEMPLATE.to_string()),
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))),
    }
}

/// Validates and augments both splits, builds their relational graphs and
/// the tokenizer, and caches everything under `out`.
pub fn prepare(data: &Path, out: &Path, config: &RunConfig) -> Result<PreparedData, CliError> {
    let ds = Dataset::load(data)?;
    let template_src = template_text(config)?;
    let template = Template::parse(&template_src)?;
    for (name, s) in [("train", &ds.train), ("test", &ds.test)] {
        if s.queries.is_empty() {
            return Err(CliError::data(format!("{name} split has no held-out queries")));
        }
        let leaked = s.queries.iter().filter(|q| s.ctx.kg.contains(q)).count();
        if leaked > 0 {
            log::warn!("{name}: {leaked} held-out queries also appear in the graph");
        }
        if s.report.duplicates > 0 {
            log::warn!("{name}: dropped {} duplicate triplets", s.report.duplicates);
        }
    }
    let tok = build_tokenizer(&ds.train.ctx.kg, &template, config.vocab_size);
    create_dir(out)?;
    create_dir(&out.join("relational"))?;
    let vocab = tok.to_vocab_file();
    write_file(&out.join(TOKENIZER), &vocab)?;
    write_file(&out.join(TEMPLATE), &template_src)?;
    for (name, s) in [("train", &ds.train), ("test", &ds.test)] {
        write_file(&out.join("relational").join(format!("{name}.tsv")), relational_text(&s.ctx.relational))?;
    }
    let prepared = PreparedData {
        dataset: data.to_path_buf(),
        dataset_name: ds.name.clone(),
        dataset_hash: content_hash(data)?,
        tokenizer_hash: sha256_hex(vocab.as_bytes()),
        template_hash: sha256_hex(template_src.as_bytes()),
        train: split_stats(&ds.train),
        test: split_stats(&ds.test),
    };
    write_json(&out.join(PREPARED), &prepared)?;
    let inputs = BTreeMap::from([("dataset".to_string(), prepared.dataset_hash.clone())]);
    RunManifest::new("prepare", config, inputs).write(out)?;
    Ok(prepared)
}

/// A prepared dataset, checked against the cache it was prepared into.
pub struct Loaded {
    pub prepared: PreparedData,
    pub dataset: Dataset,
    pub tokenizer: Tokenizer,
    pub template_text: String,
    pub template: Template,
}

pub fn load_prepared(dir: &Path) -> Result<Loaded, CliError> {
    let prepared: PreparedData = read_json(&dir.join(PREPARED))?;
    let hash = content_hash(&prepared.dataset)?;
    if hash != prepared.dataset_hash {
        return Err(CliError::data(format!(
            "{} changed since it was prepared (hash {hash}, expected {}); run prepare again",
            prepared.dataset.display(),
            prepared.dataset_hash
        )));
    }
    let dataset = Dataset::load(&prepared.dataset)?;
    for (name, s) in [("train", &dataset.train), ("test", &dataset.test)] {
        let path = dir.join("relational").join(format!("{name}.tsv"));
        let cached = fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if cached != relational_text(&s.ctx.relational) {
            return Err(CliError::data(format!("{} does not match the rebuilt relational graph", path.display())));
        }
    }
    let vocab = fs::read_to_string(dir.join(TOKENIZER)).map_err(|e| CliError::data(e.to_string()))?;
    if sha256_hex(vocab.as_bytes()) != prepared.tokenizer_hash {
        return Err(CliError::data("tokenizer vocabulary does not match prepared.json".into()));
    }
    let template_text = fs::read_to_string(dir.join(TEMPLATE)).map_err(|e| CliError::data(e.to_string()))?;
    Ok(Loaded {
        tokenizer: Tokenizer::from_vocab_file(&vocab)?,
        template: Template::parse(&template_text)?,
        template_text,
        prepared,
        dataset,
    })
}

// ---------------------------------------------------------------- training

const EXTRA_MODEL: &str = "model_config";
const EXTRA_TOKENIZER: &str = "tokenizer";
const EXTRA_TEMPLATE: &str = "template";

fn checkpoint(
    config: &RunConfig,
    model: &Model,
    template_text: &str,
    params: ParamStore,
    optimizer: Option<krlm_numerics::OptimizerState>,
) -> Result<Checkpoint, CliError> {
    let config_json = serde_json::to_value(config).map_err(|e| CliError::Other(e.into()))?;
    let model_json = serde_json::to_vec(&model.config).map_err(|e| CliError::Other(e.into()))?;
    Ok(Checkpoint {
        manifest: Manifest {
            format_version: krlm_numerics::checkpoint::VERSION,
            seed: config.seed,
            config_hash: sha256_hex(config.to_file_text().as_bytes()),
            config: config_json,
        },
        params,
        optimizer,
        extras: BTreeMap::from([
            (EXTRA_MODEL.to_string(), model_json),
            (EXTRA_TOKENIZER.to_string(), model.tokenizer.to_vocab_file().into_bytes()),
            (EXTRA_TEMPLATE.to_string(), template_text.as_bytes().to_vec()),
        ]),
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let extra = |k: &str| {
        ckpt.extras
            .get(k)
            .ok_or_else(|| CliError::data(format!("{}: checkpoint lacks `{k}`", path.display())))
    };
    let config: ModelConfig =
        serde_json::from_slice(extra(EXTRA_MODEL)?).map_err(|e| CliError::data(e.to_string()))?;
    let tok = Tokenizer::from_vocab_file(&String::from_utf8_lossy(extra(EXTRA_TOKENIZER)?))?;
    let template = Template::parse(&String::from_utf8_lossy(extra(EXTRA_TEMPLATE)?))?;
    let (model, mut store) = Model::new(config, tok, template)?;
    Model::adopt(&mut store, &ckpt.params)?;
    Ok((model, store, ckpt))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub best_valid_mrr: Option<f64>,
    pub trainable_parameters: usize,
}

/// Shared body of `pretrain`, `finetune` and `train-e2e`.
pub fn train(
    mode: TrainMode,
    prepared_dir: &Path,
    out: &Path,
    config: &RunConfig,
    source: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    let loaded = load_prepared(prepared_dir)?;
    let model_cfg = config.model_config(loaded.tokenizer.vocab_size());
    let (model, mut store) = Model::new(model_cfg, loaded.tokenizer.clone(), loaded.template.clone())?;

    let mut inputs = BTreeMap::from([
        ("dataset".to_string(), loaded.prepared.dataset_hash.clone()),
        ("tokenizer".to_string(), loaded.prepared.tokenizer_hash.clone()),
        ("template".to_string(), loaded.prepared.template_hash.clone()),
    ]);
    if let Some(src) = source {
        inputs.insert("source_checkpoint".into(), hash_file(src)?);
        let (_, src_store, _) = load_model(src)?;
        Model::adopt(&mut store, &src_store)?;
    }

    let default_epochs = match mode {
        TrainMode::Pretrain => PRETRAIN_EPOCHS,
        TrainMode::E2e => E2E_EPOCHS,
        TrainMode::Finetune => config
            .epochs
            .or_else(|| finetune_epochs(&loaded.prepared.dataset_name))
            // a step cap alone fixes the run length
            .or(config.max_steps.map(|_| 1))
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "no fine-tuning schedule for dataset `{}`; set `epochs`",
                    loaded.prepared.dataset_name
                ))
            })?,
    };
    let mut tc = config.train_config(mode, default_epochs);
    if mode == TrainMode::Pretrain && tc.steps_per_epoch.is_none() {
        tc.steps_per_epoch = Some(PRETRAIN_STEPS_PER_EPOCH);
    }
    let total = tc.total_steps(loaded.dataset.train.graph_queries().len());

    create_dir(out)?;
    let command = match mode {
        TrainMode::Pretrain => "pretrain",
        TrainMode::Finetune => "finetune",
        TrainMode::E2e => "train-e2e",
    };
    let mut manifest = RunManifest::new(command, config, inputs)
        .note("dataset", &loaded.prepared.dataset_name)
        .note("epochs", tc.epochs)
        .note("total_steps", total)
        .note("model_selection", "best filtered validation MRR of the fused scores")
        .note("validation_protocol", "filtered");
    if let Some(src) = source {
        manifest = manifest.note("source_checkpoint_path", src.display());
    }
    manifest.write(out)?;
    write_file(&out.join("config.txt"), config.to_file_text())?;

    let mut trainer = Trainer::new(&model, &loaded.dataset.train, tc).with_out_dir(out);
    trainer.dataset = loaded.prepared.dataset_name.clone();
    let outcome = trainer.run(&mut store, None)?;

    let mut valid = jsonl_writer(&out.join("valid.jsonl"))?;
    for v in &outcome.validations {
        write_line(&mut valid, v)?;
    }
    valid.flush().map_err(|e| CliError::Other(e.into()))?;

    let ckpt = checkpoint(config, &model, &loaded.template_text, outcome.last, Some(outcome.optimizer))?;
    ckpt.save(out.join(LAST_CHECKPOINT)).map_err(|e| CliError::Other(e.into()))?;
    if let Some((_, best)) = &outcome.best {
        let ckpt = checkpoint(config, &model, &loaded.template_text, best.clone(), None)?;
        ckpt.save(out.join(BEST_CHECKPOINT)).map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(TrainSummary {
        steps: outcome.steps,
        final_loss: outcome.log.last().map(|r| r.loss.total),
        best_valid_mrr: outcome.best.as_ref().map(|(v, _)| v.mrr),
        trainable_parameters: Model::trainable_count(&store),
    })
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (train|test)")),
        }
    }
}

fn pick(ds: &Dataset, split: SplitName) -> &Split {
    match split {
        SplitName::Train => &ds.train,
        SplitName::Test => &ds.test,
    }
}

/// Ranks every held-out query of `split` and writes metrics, top-10
/// predictions and the full per-entity score dump.
pub fn evaluate(
    checkpoint_path: &Path,
    prepared_dir: &Path,
    split: SplitName,
    out: &Path,
    config: &RunConfig,
) -> Result<krlm_core::evaluator::EvalReport, CliError> {
    let loaded = load_prepared(prepared_dir)?;
    let (model, store, _) = load_model(checkpoint_path)?;
    let s = pick(&loaded.dataset, split);
    let (rep, scores) = rank_queries(
        &model,
        &store,
        &loaded.prepared.dataset_name,
        s,
        config.protocol,
        config.mode,
        config.jobs,
    )?;
    create_dir(out)?;
    write_json(&out.join(METRICS), &rep)?;
    let mut preds = jsonl_writer(&out.join(PREDICTIONS))?;
    for q in &scores {
        write_line(&mut preds, &prediction_line(&s.ctx, q))?;
    }
    preds.flush().map_err(|e| CliError::Other(e.into()))?;
    let mut dump = jsonl_writer(&out.join(SCORES))?;
    write_score_dump(&mut dump, &scores)?;
    dump.flush().map_err(|e| CliError::Other(e.into()))?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), hash_file(checkpoint_path)?),
        ("dataset".to_string(), loaded.prepared.dataset_hash.clone()),
    ]);
    RunManifest::new("evaluate", config, inputs)
        .note("protocol", config.protocol)
        .note("split", if split == SplitName::Train { "train" } else { "test" })
        .note("memory_k", model.config.memory_k)
        .write(out)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    /// `[head, relation, answer]` names.
    pub query: [String; 3],
    pub inverse: bool,
    #[serde(flatten)]
    pub trace: TraceLine,
}

/// Exports per-layer attention traces of the last instruction token for the
/// first `limit` directed queries of `split` (or only query `only`).
pub fn inspect(
    checkpoint_path: &Path,
    prepared_dir: &Path,
    split: SplitName,
    out: &Path,
    only: Option<usize>,
    limit: usize,
    config: &RunConfig,
) -> Result<usize, CliError> {
    let loaded = load_prepared(prepared_dir)?;
    let (model, store, _) = load_model(checkpoint_path)?;
    let s = pick(&loaded.dataset, split);
    let queries = s.directed_queries();
    let chosen: Vec<_> = match only {
        Some(i) => vec![*queries
            .get(i)
            .ok_or_else(|| CliError::Usage(format!("query {i} out of range (0..{})", queries.len())))?],
        None => queries.into_iter().take(limit).collect(),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = jsonl_writer(out)?;
    let kg = &s.ctx.kg;
    let mut lines = 0;
    for q in chosen {
        let scores = score_query(&model, &store, &s.ctx, q, config.mode)?;
        let query = [
            kg.entities()[q.head].name.clone(),
            kg.relations()[q.rel].name.clone(),
            kg.entities()[q.answer].name.clone(),
        ];
        for trace in trace_lines(&scores) {
            write_line(
                &mut w,
                &TraceRecord {
                    query: query.clone(),
                    inverse: q.inverse,
                    trace,
                },
            )?;
            lines += 1;
        }
    }
    w.flush().map_err(|e| CliError::Other(e.into()))?;
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckLine {
    pub instance: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub pass: bool,
}

/// Runs the finite-difference suite; fails when any instance exceeds 1e-4.
pub fn gradcheck(instances: &[Instance], seed: u64) -> Result<Vec<GradCheckLine>, KrlmError> {
    instances
        .iter()
        .map(|&inst| {
            let rep = gradcheck::run(inst, seed, gradcheck::default_options())?;
            Ok(GradCheckLine {
                instance: inst.to_string(),
                seed,
                checked: rep.checked,
                max_rel_error: rep.max_rel_error,
                worst_param: rep.worst.map(|p| p.param),
                pass: rep.max_rel_error < 1e-4,
            })
        })
        .collect()
}
