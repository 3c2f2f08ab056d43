//! The pipeline stages. Each reads its prerequisites from the output
//! directory, writes its artifacts atomically and records a run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use numkit::checkpoint;
use numkit::{derive_seed, seeded_rng, DropoutMode, ParamStore, Tape};
use serde::Serialize;
use trace_core::autoencoder::{Autoencoder, EncoderKind, PREFIX};
use trace_core::code2vec::{build_visit_windows, train_code_embeddings, AlignmentMap, TABLE_PARAM};
use trace_core::cohort::io::{read_cohort_jsonl, write_cohort_jsonl, write_matches_csv};
use trace_core::cohort::{build_cohort, generate_population, Split};
use trace_core::config::ExperimentConfig;
use trace_core::dataset::{prepare_dataset, Dataset, Sample};
use trace_core::ehr::{build_vocabularies, encode_patient, Vocabularies};
use trace_core::eval::{attention_csv, auprc, backproject_attention, embeddings_csv, neg_log_likelihood, restrict_to_active};
use trace_core::fit::{labels, predict_probs, train_autoencoder, train_predictor, TrainSettings};
use trace_core::models::{build_model, load_pretrained_encoder, BuildContext, Predictor};

use crate::error::{CliError, Result};
use crate::layout::{self, OutDir};
use crate::manifest::RunManifest;
use crate::settings::config_hash;

/// Streams mixed into `generator.seed` and the experiment seed.
const SPLIT_STREAM: u64 = 202;
const CODES_STREAM: u64 = 1;
const AE_INIT_STREAM: u64 = 2;
const AE_TRAIN_STREAM: u64 = 3;
const MODEL_INIT_STREAM: u64 = 4;
const MODEL_TRAIN_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenCohort,
    PretrainCodes,
    PretrainAutoencoder,
    Train,
    Evaluate,
    ExportAttention,
    ExportEmbeddings,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenCohort,
        Stage::PretrainCodes,
        Stage::PretrainAutoencoder,
        Stage::Train,
        Stage::Evaluate,
        Stage::ExportAttention,
        Stage::ExportEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCohort => "gen-cohort",
            Stage::PretrainCodes => "pretrain-codes",
            Stage::PretrainAutoencoder => "pretrain-autoencoder",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::ExportAttention => "export-attention",
            Stage::ExportEmbeddings => "export-embeddings",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

/// Everything a stage needs: the resolved config and where to work.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out: OutDir,
    /// Inference parallelism.
    pub threads: usize,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, threads: usize) -> Self {
        let out = OutDir::new(&cfg.output_dir);
        Self {
            cfg,
            out,
            threads: threads.max(1),
        }
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn label_codes(&self) -> Vec<String> {
        vec![self.cfg.generator.label_code.clone()]
    }

    fn encoder_kind(&self) -> Result<EncoderKind> {
        self.cfg.variant.encoder_kind().ok_or_else(|| {
            CliError::Config(format!("variant: {} has no patient encoder", self.cfg.variant))
        })
    }
}

pub fn run_stage(stage: Stage, ctx: &RunContext) -> Result<RunManifest> {
    let started = Instant::now();
    log::info!("{stage}: writing to {}", ctx.out.root.display());
    let record = match stage {
        Stage::GenCohort => gen_cohort(ctx)?,
        Stage::PretrainCodes => pretrain_codes(ctx)?,
        Stage::PretrainAutoencoder => pretrain_autoencoder(ctx)?,
        Stage::Train => train(ctx)?,
        Stage::Evaluate => evaluate(ctx)?,
        Stage::ExportAttention => export_attention(ctx)?,
        Stage::ExportEmbeddings => export_embeddings(ctx)?,
    };
    finish(ctx, stage, record, started)
}

/// What a stage read and wrote, as paths relative to the output directory.
struct StageRecord {
    qualifier: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    parents: Vec<String>,
}

fn finish(ctx: &RunContext, stage: Stage, rec: StageRecord, started: Instant) -> Result<RunManifest> {
    let hashes = |files: &[String]| -> Result<BTreeMap<String, String>> {
        files.iter().map(|f| Ok((f.clone(), ctx.out.sha256(f)?))).collect()
    };
    let mut parents = BTreeMap::new();
    for p in &rec.parents {
        if ctx.out.exists(p) {
            let m = RunManifest::read(&ctx.out.path(p))?;
            let key = match &m.variant {
                Some(v) => format!("{}:{v}", m.stage),
                None => m.stage.clone(),
            };
            parents.insert(key, m.run_sha256);
        }
    }
    let mut manifest = RunManifest {
        stage: stage.name().into(),
        variant: rec.qualifier.clone(),
        config_sha256: config_hash(&ctx.cfg),
        seed: ctx.cfg.seed,
        inputs: hashes(&rec.inputs)?,
        outputs: hashes(&rec.outputs)?,
        parents,
        run_sha256: String::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.run_sha256 = manifest.compute_run_hash();
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    ctx.out
        .write(&layout::manifest_file(stage.name(), rec.qualifier.as_deref()), &json)?;
    log::info!("{stage}: done in {:.1}s", manifest.wall_clock_seconds);
    Ok(manifest)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CliError::io("csv buffer", std::io::Error::other(e.to_string())))
}

fn save_checkpoint(ctx: &RunContext, store: &ParamStore, stem: &str, meta: &[(&str, String)]) -> Result<()> {
    let mut metadata: BTreeMap<String, String> = meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    metadata.insert("config_sha256".into(), config_hash(&ctx.cfg));
    checkpoint::save(store, &ctx.out.path(stem), ctx.cfg.seed, metadata)?;
    Ok(())
}

fn gen_cohort(ctx: &RunContext) -> Result<StageRecord> {
    let cfg = &ctx.cfg;
    let population = generate_population(&cfg.generator)?;
    let split_seed = derive_seed(cfg.generator.seed, SPLIT_STREAM);
    let cohort = build_cohort(&population, &cfg.cohort, cfg.generator.seed, split_seed)?;
    let vocabs = build_vocabularies(&cohort.patients, cfg.vocab.min_count, &ctx.label_codes())?;
    log::info!(
        "cohort: {} patients, prevalence {:.4}, {} codes, {} observations",
        cohort.patients.len(),
        cohort.prevalence(),
        vocabs.codes.len(),
        vocabs.observations.len()
    );
    ctx.out.write(layout::VOCAB, &json_bytes(&vocabs)?)?;
    ctx.out
        .write(layout::COHORT, write_cohort_jsonl(&cohort, &vocabs)?.as_bytes())?;
    ctx.out.write(layout::MATCHES, &write_matches_csv(&cohort.matches)?)?;
    Ok(StageRecord {
        qualifier: None,
        inputs: vec![],
        outputs: vec![layout::COHORT.into(), layout::VOCAB.into(), layout::MATCHES.into()],
        parents: vec![],
    })
}

fn load_vocab(ctx: &RunContext) -> Result<Vocabularies> {
    ctx.out.require(Stage::GenCohort.name(), &[layout::VOCAB])?;
    Ok(Vocabularies::from_json(&ctx.out.read_string(layout::VOCAB)?)?)
}

fn load_dataset(ctx: &RunContext) -> Result<(Vocabularies, Dataset)> {
    ctx.out.require(Stage::GenCohort.name(), &[layout::COHORT, layout::VOCAB])?;
    let vocabs = load_vocab(ctx)?;
    let (header, cohort) = read_cohort_jsonl(&ctx.out.read_string(layout::COHORT)?)?;
    if header.code_vocab_sha256 != vocabs.code_hash() || header.observation_vocab_sha256 != vocabs.observation_hash() {
        return Err(CliError::missing(
            Stage::GenCohort.name(),
            "cohort.jsonl and vocab.json come from different runs",
        ));
    }
    if header.generator_seed != ctx.cfg.generator.seed {
        return Err(CliError::missing(
            Stage::GenCohort.name(),
            format!(
                "cohort was generated with generator.seed {} but the config has {}",
                header.generator_seed, ctx.cfg.generator.seed
            ),
        ));
    }
    let data = prepare_dataset(&cohort, &vocabs, ctx.cfg.training.max_visits)?;
    Ok((vocabs, data))
}

fn gen_cohort_parent() -> String {
    layout::manifest_file(Stage::GenCohort.name(), None)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn pretrain_codes(ctx: &RunContext) -> Result<StageRecord> {
    let cfg = &ctx.cfg;
    let vocabs = load_vocab(ctx)?;
    let corpus_cfg = cfg.pretrain_corpus.generator(&cfg.generator);
    let corpus = generate_population(&corpus_cfg)?;
    let pretrain_vocab = build_vocabularies(&corpus, cfg.code2vec.min_count, &ctx.label_codes())?;
    let records = corpus
        .iter()
        .map(|p| encode_patient(p, &pretrain_vocab))
        .collect::<trace_core::Result<Vec<_>>>()?;
    let instances = build_visit_windows(&records, cfg.code2vec.window);
    log::info!(
        "code pre-training: {} codes, {} instances",
        pretrain_vocab.codes.len(),
        instances.len()
    );
    let outcome = train_code_embeddings(
        &instances,
        pretrain_vocab.codes.len(),
        &cfg.code2vec,
        &cfg.optimizer.build()?,
        ctx.seed(CODES_STREAM),
    )?;
    let table = outcome.store.value(outcome.store.id(TABLE_PARAM)?).clone();
    let mut table_store = ParamStore::new();
    table_store.add(TABLE_PARAM, table)?;
    let alignment = AlignmentMap::build(&vocabs.codes, &pretrain_vocab.codes);
    log::info!(
        "aligned {} experiment codes, {} out of vocabulary",
        alignment.entries.len(),
        alignment.oov_count()
    );
    save_checkpoint(ctx, &table_store, layout::CODE_TABLE, &[("stage", Stage::PretrainCodes.name().into())])?;
    ctx.out.write(layout::PRETRAIN_VOCAB, &json_bytes(&pretrain_vocab)?)?;
    ctx.out.write(layout::ALIGNMENT, &json_bytes(&alignment)?)?;
    let curve: Vec<LossRow> = outcome
        .loss_curve
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRow { epoch, loss })
        .collect();
    ctx.out.write(layout::CODE_LOSS, &csv_bytes(&curve)?)?;
    let mut outputs: Vec<String> = layout::checkpoint_files(layout::CODE_TABLE).into();
    outputs.extend([layout::PRETRAIN_VOCAB.into(), layout::ALIGNMENT.into(), layout::CODE_LOSS.into()]);
    Ok(StageRecord {
        qualifier: None,
        inputs: vec![layout::VOCAB.into()],
        outputs,
        parents: vec![gen_cohort_parent()],
    })
}

fn train_settings(ctx: &RunContext, epochs: usize, batch_size: usize, stream: u64) -> Result<TrainSettings> {
    Ok(TrainSettings {
        epochs,
        batch_size,
        seed: ctx.seed(stream),
        optimizer: ctx.cfg.optimizer.build()?,
        threads: ctx.threads,
    })
}

fn pretrain_autoencoder(ctx: &RunContext) -> Result<StageRecord> {
    let kind = ctx.encoder_kind()?;
    let (_, data) = load_dataset(ctx)?;
    let dims = ctx.cfg.model.ae_dims(data.layout);
    let mut store = ParamStore::new();
    let ae = Autoencoder::register(&mut store, kind, &dims, &mut seeded_rng(ctx.seed(AE_INIT_STREAM)))?;
    let (train, valid) = (data.split(Split::Train), data.split(Split::Valid));
    let settings = train_settings(
        ctx,
        ctx.cfg.autoencoder_epochs(),
        ctx.cfg.autoencoder_batch_size(),
        AE_TRAIN_STREAM,
    )?;
    let outcome = train_autoencoder(&ae, &mut store, &train, &valid, &settings)?;
    let dir = layout::autoencoder_dir(kind);
    let (best, last) = (format!("{dir}/best"), format!("{dir}/final"));
    let meta = |epoch: usize| {
        vec![
            ("stage", Stage::PretrainAutoencoder.name().to_string()),
            ("encoder", kind.to_string()),
            ("epoch", epoch.to_string()),
        ]
    };
    save_checkpoint(ctx, &outcome.best, &best, &meta(outcome.best_epoch))?;
    save_checkpoint(ctx, &store, &last, &meta(settings.epochs))?;
    let log_file = format!("{dir}/log.csv");
    ctx.out.write(&log_file, &csv_bytes(&outcome.history)?)?;
    let mut outputs: Vec<String> = layout::checkpoint_files(&best).into();
    outputs.extend(layout::checkpoint_files(&last));
    outputs.push(log_file);
    Ok(StageRecord {
        qualifier: Some(kind.to_string()),
        inputs: vec![layout::COHORT.into(), layout::VOCAB.into()],
        outputs,
        parents: vec![gen_cohort_parent()],
    })
}

fn build_context<'a>(ctx: &RunContext, data: &Dataset, code_table: Option<&'a numkit::DenseArray>) -> BuildContext<'a> {
    let m = &ctx.cfg.model;
    BuildContext {
        ae: m.ae_dims(data.layout),
        d_m: ctx.cfg.code2vec.dim,
        d_att: m.d_att(),
        hidden: m.baseline_hidden,
        code_table,
    }
}

fn train(ctx: &RunContext) -> Result<StageRecord> {
    let variant = ctx.cfg.variant;
    let (vocabs, data) = load_dataset(ctx)?;
    let mut inputs = vec![layout::COHORT.to_string(), layout::VOCAB.to_string()];
    let mut parents = vec![gen_cohort_parent()];

    let code_table = if variant.uses_code_history() {
        let [table_json, table_bin] = layout::checkpoint_files(layout::CODE_TABLE);
        ctx.out.require(Stage::PretrainCodes.name(), &[&table_json, &table_bin, layout::ALIGNMENT])?;
        let (store, _) = checkpoint::load(&ctx.out.path(layout::CODE_TABLE))?;
        let alignment: AlignmentMap = serde_json::from_str(&ctx.out.read_string(layout::ALIGNMENT)?)?;
        let codes: Vec<&String> = alignment.entries.iter().map(|e| &e.code).collect();
        if codes.len() != vocabs.codes.len() || codes.iter().zip(&vocabs.codes.codes).any(|(a, b)| *a != b) {
            return Err(CliError::missing(
                Stage::PretrainCodes.name(),
                "the code alignment does not match the cohort vocabulary",
            ));
        }
        let table = alignment.materialize(store.value(store.id(TABLE_PARAM)?))?;
        if table.cols() != ctx.cfg.code2vec.dim {
            return Err(CliError::missing(
                Stage::PretrainCodes.name(),
                format!("code table width {} differs from code2vec.dim {}", table.cols(), ctx.cfg.code2vec.dim),
            ));
        }
        inputs.extend([table_json, table_bin, layout::ALIGNMENT.into()]);
        parents.push(layout::manifest_file(Stage::PretrainCodes.name(), None));
        Some(table)
    } else {
        None
    };

    let mut store = ParamStore::new();
    let build = build_context(ctx, &data, code_table.as_ref());
    let model = build_model(variant, &mut store, &build, &mut seeded_rng(ctx.seed(MODEL_INIT_STREAM)))?;

    if let Some(kind) = variant.encoder_kind() {
        let stem = format!("{}/best", layout::autoencoder_dir(kind));
        let files = layout::checkpoint_files(&stem);
        ctx.out.require(
            Stage::PretrainAutoencoder.name(),
            &[&files[0], &files[1]],
        )?;
        let (pretrained, _) = checkpoint::load(&ctx.out.path(&stem))?;
        let copied = load_pretrained_encoder(&mut store, &pretrained)?;
        log::info!("loaded {} pre-trained encoder tensors", copied.len());
        inputs.extend(files);
        parents.push(layout::manifest_file(Stage::PretrainAutoencoder.name(), Some(kind.name())));
    }

    let (train_split, valid) = (data.split(Split::Train), data.split(Split::Valid));
    let settings = train_settings(ctx, ctx.cfg.training.epochs, ctx.cfg.training.batch_size, MODEL_TRAIN_STREAM)?;
    let outcome = train_predictor(model.as_ref(), &mut store, &train_split, &valid, &settings)?;
    let dir = layout::model_dir(variant);
    let best = format!("{dir}/best");
    save_checkpoint(
        ctx,
        &outcome.best,
        &best,
        &[
            ("stage", Stage::Train.name().into()),
            ("variant", variant.to_string()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("epochs", settings.epochs.to_string()),
        ],
    )?;
    let log_file = format!("{dir}/log.csv");
    ctx.out.write(&log_file, &csv_bytes(&outcome.history)?)?;
    let mut outputs: Vec<String> = layout::checkpoint_files(&best).into();
    outputs.push(log_file);
    Ok(StageRecord {
        qualifier: Some(variant.to_string()),
        inputs,
        outputs,
        parents,
    })
}

struct Trained {
    model: Box<dyn Predictor>,
    store: ParamStore,
    metadata: BTreeMap<String, String>,
    inputs: Vec<String>,
    parents: Vec<String>,
}

fn require_trained(ctx: &RunContext) -> Result<()> {
    let stem = format!("{}/best", layout::model_dir(ctx.cfg.variant));
    let files = layout::checkpoint_files(&stem);
    ctx.out.require(Stage::Train.name(), &[&files[0], &files[1]])
}

/// Rebuilds the configured variant and fills it from its best checkpoint.
fn load_trained(ctx: &RunContext, data: &Dataset) -> Result<Trained> {
    let variant = ctx.cfg.variant;
    let stem = format!("{}/best", layout::model_dir(variant));
    let files = layout::checkpoint_files(&stem);
    let (saved, manifest) = checkpoint::load(&ctx.out.path(&stem))?;
    let mut store = ParamStore::new();
    let build = build_context(ctx, data, None);
    let model = build_model(variant, &mut store, &build, &mut seeded_rng(0))?;
    let copied = store.load_matching(&saved)?;
    if copied.len() != store.len() || saved.len() != store.len() {
        return Err(CliError::missing(
            Stage::Train.name(),
            format!("checkpoint {} does not fit the configured {variant} model", ctx.out.path(&stem).display()),
        ));
    }
    let mut inputs = vec![layout::COHORT.to_string(), layout::VOCAB.to_string()];
    inputs.extend(files);
    Ok(Trained {
        model,
        store,
        metadata: manifest.metadata,
        inputs,
        parents: vec![
            gen_cohort_parent(),
            layout::manifest_file(Stage::Train.name(), Some(variant.name())),
        ],
    })
}

#[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub auprc_valid: f64,
    pub auprc_test: f64,
    pub nll_test: f64,
    pub prevalence_test: f64,
    pub n_test: usize,
}

fn evaluate(ctx: &RunContext) -> Result<StageRecord> {
    require_trained(ctx)?;
    let (_, data) = load_dataset(ctx)?;
    let t = load_trained(ctx, &data)?;
    let (valid, test) = (data.split(Split::Valid), data.split(Split::Test));
    let p_valid = predict_probs(t.model.as_ref(), &t.store, &valid, ctx.threads)?;
    let p_test = predict_probs(t.model.as_ref(), &t.store, &test, ctx.threads)?;
    let y_test = labels(&test);
    let meta_usize = |k: &str| t.metadata.get(k).and_then(|v| v.parse().ok()).unwrap_or(0);
    let metrics = Metrics {
        variant: ctx.cfg.variant.to_string(),
        seed: ctx.cfg.seed,
        epochs: meta_usize("epochs"),
        best_epoch: meta_usize("best_epoch"),
        auprc_valid: auprc(&p_valid, &labels(&valid))?,
        auprc_test: auprc(&p_test, &y_test)?,
        nll_test: neg_log_likelihood(&p_test, &y_test)?,
        prevalence_test: y_test.iter().map(|&y| f64::from(y)).sum::<f64>() / y_test.len() as f64,
        n_test: test.len(),
    };
    log::info!(
        "{}: test AUPRC {:.4}, NLL {:.4} (valid AUPRC {:.4})",
        metrics.variant,
        metrics.auprc_test,
        metrics.nll_test,
        metrics.auprc_valid
    );
    let file = format!("{}/metrics.json", layout::model_dir(ctx.cfg.variant));
    ctx.out.write(&file, &json_bytes(&metrics)?)?;
    Ok(StageRecord {
        qualifier: Some(ctx.cfg.variant.to_string()),
        inputs: t.inputs,
        outputs: vec![file],
        parents: t.parents,
    })
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct AttentionSubject {
    pub id: u64,
    pub label: u8,
    pub score: f64,
    /// Active feature labels of each exported visit.
    pub visits: Vec<Vec<String>>,
}

fn export_attention(ctx: &RunContext) -> Result<StageRecord> {
    if ctx.encoder_kind()? != EncoderKind::Transformer {
        return Err(CliError::Config(format!(
            "variant: {} has no self-attention to export",
            ctx.cfg.variant
        )));
    }
    require_trained(ctx)?;
    let (vocabs, data) = load_dataset(ctx)?;
    let t = load_trained(ctx, &data)?;
    let test = data.split(Split::Test);
    let scores = predict_probs(t.model.as_ref(), &t.store, &test, ctx.threads)?;
    // highest-scoring case, lowest id on ties
    let (subject, score) = test
        .iter()
        .zip(&scores)
        .filter(|(s, _)| s.label == 1)
        .fold(None::<(&Sample, f64)>, |best, (s, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((s, p)),
        })
        .ok_or_else(|| CliError::Core(trace_core::CoreError::Data("the test split holds no case".into())))?;
    log::info!("exporting attention of patient {} (score {score:.4})", subject.id);

    let mut tape = Tape::new();
    let pred = t
        .model
        .forward(&mut tape, &t.store, subject, DropoutMode::Eval, &mut seeded_rng(0))?;
    let encoded = pred.encoded.expect("transformer variants expose their encoding");
    let w_down = t.store.value(t.store.id(&format!("{PREFIX}.w_down"))?);
    let mut rows = Vec::new();
    let mut visits = Vec::new();
    for (i, (enc, visit)) in encoded.visits.iter().zip(&subject.visits).enumerate() {
        let a = tape.value(enc.attention.expect("transformer attention"));
        let map = backproject_attention(a, w_down)?;
        rows.extend(restrict_to_active(i, &map, &visit.active, |f| vocabs.feature_label(f)));
        visits.push(visit.active.iter().map(|&f| vocabs.feature_label(f)).collect());
    }
    let dir = layout::model_dir(ctx.cfg.variant);
    let (csv_file, subject_file) = (format!("{dir}/attention.csv"), format!("{dir}/attention_patient.json"));
    ctx.out.write(&csv_file, &attention_csv(&rows)?)?;
    ctx.out.write(
        &subject_file,
        &json_bytes(&AttentionSubject {
            id: subject.id,
            label: subject.label,
            score,
            visits,
        })?,
    )?;
    Ok(StageRecord {
        qualifier: Some(ctx.cfg.variant.to_string()),
        inputs: t.inputs,
        outputs: vec![csv_file, subject_file],
        parents: t.parents,
    })
}

fn export_embeddings(ctx: &RunContext) -> Result<StageRecord> {
    ctx.encoder_kind()?;
    require_trained(ctx)?;
    let (_, data) = load_dataset(ctx)?;
    let t = load_trained(ctx, &data)?;
    let test = data.split(Split::Test);
    let rows = trace_core::fit::par_map(&test, ctx.threads, |s| {
        let mut tape = Tape::new();
        let pred = t
            .model
            .forward(&mut tape, &t.store, s, DropoutMode::Eval, &mut seeded_rng(0))?;
        let ep = pred.encoded.expect("encoder variants expose their encoding").ep;
        Ok((s.id, s.label, tape.value(ep).values().to_vec()))
    })?;
    let file = format!("{}/embeddings.csv", layout::model_dir(ctx.cfg.variant));
    ctx.out.write(&file, &embeddings_csv(&rows)?)?;
    Ok(StageRecord {
        qualifier: Some(ctx.cfg.variant.to_string()),
        inputs: t.inputs,
        outputs: vec![file],
        parents: t.parents,
    })
}
