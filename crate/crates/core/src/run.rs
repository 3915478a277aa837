//! Run configuration and the stage-separated commands behind the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{
    read_manifest, synth_corpus, synth_unlabeled, write_manifest, CorpusError, Lang, LangProfile, SynthConfig,
    TripletExample, Vocab,
};
use crate::decode::{
    ablation_suite, evaluate, similarity_matrix, AblationSetup, AblationStage, AblationSummary, DecodeError, EvalReport,
    SimMode,
};
use crate::kv::{KvError, KvMap};
use crate::model::{ComSLModel, ModelConfig, ModelError};
use crate::trainer::{
    fit, load_checkpoint, pre_finetune_mt, save_checkpoint, split_corpus, CheckpointError, FitOutcome, Splits,
    TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

/// Corpus generation parameters. Frame width and length limits come from
/// the model section.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub n_content: usize,
    pub n_langs: usize,
    /// Labeled examples per source language.
    pub counts: Vec<usize>,
    /// Languages that receive pseudo-labeled data in the ablation.
    pub low_resource: Vec<u16>,
    /// Unlabeled examples generated per low-resource language.
    pub pool_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub silence_prob: f64,
    pub acoustic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataConfig {
            dir: PathBuf::from("data"),
            seed: 7,
            n_content: 50,
            n_langs: 4,
            counts: vec![2200; 4],
            low_resource: Vec::new(),
            pool_count: 2000,
            min_len: s.min_len,
            max_len: s.max_len,
            noise: s.noise,
            silence_prob: s.silence_prob,
            acoustic_seed: s.acoustic_seed,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn take_list<V: std::str::FromStr>(kv: &mut KvMap, key: &str, slot: &mut Vec<V>) -> Result<(), KvError> {
    let mut raw = String::new();
    let had = kv.get(key).is_some();
    kv.take_parse(key, &mut raw)?;
    if !had {
        return Ok(());
    }
    let raw = raw.trim();
    if raw.is_empty() || raw == "none" {
        slot.clear();
        return Ok(());
    }
    *slot = raw
        .split(',')
        .map(|p| p.trim().parse::<V>())
        .collect::<Result<_, _>>()
        .map_err(|_| KvError::Unparsable {
            key: key.to_string(),
            value: raw.to_string(),
        })?;
    Ok(())
}

impl DataConfig {
    fn write_kv(&self, out: &mut String) {
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "data.{k} = {v}");
        };
        put("dir", self.dir.display().to_string());
        put("seed", self.seed.to_string());
        put("n_content", self.n_content.to_string());
        put("n_langs", self.n_langs.to_string());
        put("counts", list(&self.counts));
        put(
            "low_resource",
            if self.low_resource.is_empty() {
                "none".into()
            } else {
                list(&self.low_resource)
            },
        );
        put("pool_count", self.pool_count.to_string());
        put("min_len", self.min_len.to_string());
        put("max_len", self.max_len.to_string());
        put("noise", self.noise.to_string());
        put("silence_prob", self.silence_prob.to_string());
        put("acoustic_seed", self.acoustic_seed.to_string());
    }

    fn apply_kv(&mut self, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_parse("data.dir", &mut self.dir)?;
        kv.take_parse("data.seed", &mut self.seed)?;
        kv.take_parse("data.n_content", &mut self.n_content)?;
        kv.take_parse("data.n_langs", &mut self.n_langs)?;
        take_list(kv, "data.counts", &mut self.counts)?;
        take_list(kv, "data.low_resource", &mut self.low_resource)?;
        kv.take_parse("data.pool_count", &mut self.pool_count)?;
        kv.take_parse("data.min_len", &mut self.min_len)?;
        kv.take_parse("data.max_len", &mut self.max_len)?;
        kv.take_parse("data.noise", &mut self.noise)?;
        kv.take_parse("data.silence_prob", &mut self.silence_prob)?;
        kv.take_parse("data.acoustic_seed", &mut self.acoustic_seed)?;
        Ok(())
    }
}

/// Everything a command needs, resolved from defaults, file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Loss weights live in `train.weights` and are read from `loss.*`.
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Directory for checkpoints, logs and exports.
    pub out_dir: PathBuf,
    pub ablation_seeds: Vec<u64>,
    pub ablation_stages: Vec<AblationStage>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs"),
            ablation_seeds: vec![1, 2, 3],
            ablation_stages: AblationStage::LADDER.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn vocab(&self) -> Result<Vocab, CorpusError> {
        Vocab::new(self.data.n_content, self.data.n_langs, Some(self.model.vocab_size))
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            feat_dim: self.model.feat_dim,
            max_frames: self.model.max_frames,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            noise: self.data.noise,
            silence_prob: self.data.silence_prob,
            acoustic_seed: self.data.acoustic_seed,
        }
    }

    /// The resolved config as `key = value` lines; parsing it back yields
    /// the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.model.write_kv("model.", &mut out);
        self.train.weights.write_kv("loss.", &mut out);
        self.train.write_kv("train.", &mut out);
        let _ = writeln!(out, "train.out_dir = {}", self.out_dir.display());
        let _ = writeln!(out, "train.ablation_seeds = {}", list(&self.ablation_seeds));
        let stages: Vec<&str> = self.ablation_stages.iter().map(|s| s.name()).collect();
        let _ = writeln!(out, "train.ablation_stages = {}", stages.join(","));
        self.data.write_kv(&mut out);
        out
    }

    fn apply(&mut self, kv: &mut KvMap) -> Result<(), ConfigError> {
        let explicit_vocab = kv.get("model.vocab_size").is_some();
        let explicit_k = kv.get("loss.k").is_some();
        self.model.apply_kv("model.", kv)?;
        self.train.weights.apply_kv("loss.", kv)?;
        self.train.apply_kv("train.", kv)?;
        kv.take_parse("train.out_dir", &mut self.out_dir)?;
        take_list(kv, "train.ablation_seeds", &mut self.ablation_seeds)?;
        let mut stages: Vec<String> = Vec::new();
        let had_stages = kv.get("train.ablation_stages").is_some();
        take_list(kv, "train.ablation_stages", &mut stages)?;
        if had_stages {
            self.ablation_stages = stages
                .iter()
                .map(|s| {
                    AblationStage::parse(s).ok_or_else(|| KvError::Unparsable {
                        key: "train.ablation_stages".into(),
                        value: s.clone(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        self.data.apply_kv(kv)?;
        kv.ensure_consumed()?;
        // The traced layer has one source of truth: an explicit loss.k moves
        // the model's ERM layer, otherwise k follows the model.
        if explicit_k {
            self.model.erm_layer = self.train.weights.k;
        } else {
            self.train.weights.k = self.model.erm_layer;
        }
        if !explicit_vocab {
            self.model.vocab_size = Vocab::N_SPECIALS + self.data.n_langs + self.data.n_content;
        }
        Ok(())
    }

    /// Checks every section and cross-section constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        match self.model.validate() {
            Err(ModelError::InvalidConfig(v)) => issues.extend(v.into_iter().map(|i| format!("model: {i}"))),
            Err(e) => issues.push(format!("model: {e}")),
            Ok(()) => {}
        }
        if let Err(TrainError::InvalidConfig(v)) = self.train.validate() {
            issues.extend(v.into_iter().map(|i| format!("train: {i}")));
        }
        if self.train.weights.k != self.model.erm_layer {
            issues.push(format!(
                "loss.k {} differs from model.erm_layer {}",
                self.train.weights.k, self.model.erm_layer
            ));
        }
        if let Err(e) = self.vocab() {
            issues.push(format!("data: {e}"));
        }
        if self.data.counts.len() != self.data.n_langs {
            issues.push(format!(
                "data.counts lists {} languages but data.n_langs is {}",
                self.data.counts.len(),
                self.data.n_langs
            ));
        }
        if let Some(l) = self.data.low_resource.iter().find(|&&l| l as usize >= self.data.n_langs) {
            issues.push(format!("data.low_resource language {l} outside 0..{}", self.data.n_langs));
        }
        if self.data.min_len == 0 || self.data.min_len > self.data.max_len {
            issues.push(format!("data.min_len {} .. data.max_len {} is empty", self.data.min_len, self.data.max_len));
        }
        if self.data.max_len > self.model.max_tokens {
            issues.push(format!(
                "data.max_len {} exceeds model.max_tokens {}",
                self.data.max_len, self.model.max_tokens
            ));
        }
        if !(self.data.noise >= 0.0) || !(0.0..1.0).contains(&self.data.silence_prob) {
            issues.push("data.noise must be nonnegative and data.silence_prob in [0, 1)".into());
        }
        if self.ablation_seeds.is_empty() || self.ablation_stages.is_empty() {
            issues.push("train.ablation_seeds and train.ablation_stages must be nonempty".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

/// Defaults, then the file (if any), then `key=value` overrides in order.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut kv = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?;
            KvMap::parse(&text)?
        }
        None => KvMap::default(),
    };
    for o in overrides {
        let (k, v) = KvMap::parse_override(o)?;
        kv.set(&k, &v);
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&mut kv)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Files written into a hidden staging directory and moved into place only
/// when the command succeeds.
struct Staging {
    dir: PathBuf,
    target: PathBuf,
}

impl Staging {
    fn new(target: &Path, name: &str) -> Result<Self, RunError> {
        let dir = target.join(format!(".staging-{name}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Staging {
            dir,
            target: target.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn commit(self) -> Result<Vec<PathBuf>, RunError> {
        let mut moved = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(&self.dir)
            .map_err(io_err(&self.dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(&self.dir))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let dst = self.target.join(e.file_name());
            if dst.is_dir() {
                fs::remove_dir_all(&dst).map_err(io_err(&dst))?;
            }
            fs::rename(e.path(), &dst).map_err(io_err(&dst))?;
            moved.push(dst);
        }
        fs::remove_dir(&self.dir).map_err(io_err(&self.dir))?;
        Ok(moved)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError {
    let path = path.to_path_buf();
    move |source| RunError::Io { path, source }
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(io_err(path))
}

pub const CORPUS_MANIFEST: &str = "corpus.tsv";
pub const CORPUS_FRAMES: &str = "corpus.f32";
pub const POOL_MANIFEST: &str = "pool.tsv";
pub const POOL_FRAMES: &str = "pool.f32";

/// Writes the labeled corpus and the unlabeled low-resource pool into
/// `data.dir`. Returns the written paths.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    let vocab = cfg.vocab()?;
    let synth = cfg.synth();
    let corpus = synth_corpus(
        &vocab,
        &synth,
        &LangProfile {
            counts: cfg.data.counts.clone(),
        },
        cfg.data.seed,
    )?;
    let mut pool_counts = vec![0; cfg.data.n_langs];
    for &l in &cfg.data.low_resource {
        pool_counts[l as usize] = cfg.data.pool_count;
    }
    // A separate stream so the pool never replays labeled examples.
    let pool = synth_unlabeled(&vocab, &synth, &LangProfile { counts: pool_counts }, cfg.data.seed ^ 0x9001)?;
    fs::create_dir_all(&cfg.data.dir).map_err(io_err(&cfg.data.dir))?;
    let stage = Staging::new(&cfg.data.dir, "gen-data")?;
    write_manifest(&stage.path(CORPUS_MANIFEST), &stage.path(CORPUS_FRAMES), &corpus)?;
    write_manifest(&stage.path(POOL_MANIFEST), &stage.path(POOL_FRAMES), &pool)?;
    write_file(&stage.path("data.cfg"), &cfg.to_text())?;
    stage.commit()
}

/// Labeled corpus split into train and validation by `data.seed`, and the
/// unlabeled pool.
pub fn load_data(cfg: &RunConfig) -> Result<(Splits, Vec<TripletExample>), RunError> {
    let dir = &cfg.data.dir;
    let corpus = read_manifest(&dir.join(CORPUS_MANIFEST), &dir.join(CORPUS_FRAMES), cfg.model.feat_dim)?;
    let pool_path = dir.join(POOL_MANIFEST);
    let pool = if pool_path.exists() {
        read_manifest(&pool_path, &dir.join(POOL_FRAMES), cfg.model.feat_dim)?
    } else {
        Vec::new()
    };
    let vocab = cfg.vocab()?;
    let out_of_range = corpus
        .iter()
        .chain(&pool)
        .flat_map(|e| e.transcript.iter().chain(&e.translation))
        .any(|&t| !vocab.is_content(t));
    if out_of_range || corpus.iter().chain(&pool).any(|e| e.src_lang.index() >= vocab.n_langs()) {
        return Err(CorpusError::Format(format!("{} does not match the configured vocabulary", dir.display())).into());
    }
    Ok((split_corpus(&corpus, cfg.train.val_fraction, cfg.data.seed), pool))
}

/// Pre-finetunes the text blocks of a fresh model and saves it as
/// `out_dir/mt.ckpt`.
pub fn pretrain_mt(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    let vocab = cfg.vocab()?;
    let (splits, _) = load_data(cfg)?;
    let mut model = ComSLModel::<f32>::init(&cfg.model, cfg.train.seed)?;
    pre_finetune_mt(&mut model, &splits.train, &vocab, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let stage = Staging::new(&cfg.out_dir, "pretrain-mt")?;
    save_checkpoint(&model, None, &stage.path("mt.ckpt"))?;
    write_file(&stage.path("pretrain-mt.cfg"), &cfg.to_text())?;
    stage.commit()?;
    Ok(cfg.out_dir.join("mt.ckpt"))
}

/// Composite training. The starting point (and frozen MT teacher) is the
/// given pre-finetuned checkpoint, or a fresh pre-finetuning run.
pub fn train(cfg: &RunConfig, start: Option<&Path>) -> Result<FitOutcome, RunError> {
    let vocab = cfg.vocab()?;
    let (splits, _) = load_data(cfg)?;
    let mut model = match start {
        Some(p) => {
            let (m, _) = load_checkpoint::<f32>(p)?;
            if m.config() != &cfg.model {
                return Err(RunError::Usage(format!(
                    "{} was saved with a different model config",
                    p.display()
                )));
            }
            m
        }
        None => {
            let mut m = ComSLModel::<f32>::init(&cfg.model, cfg.train.seed)?;
            pre_finetune_mt(&mut m, &splits.train, &vocab, &cfg.train)?;
            m
        }
    };
    let teacher = model.clone();
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let stage = Staging::new(&cfg.out_dir, "train")?;
    write_file(&stage.path("train.cfg"), &cfg.to_text())?;
    let mut outcome = fit(&mut model, &splits, &vocab, &cfg.train, Some(&teacher), &stage.dir)?;
    stage.commit()?;
    outcome.best_checkpoint = cfg.out_dir.join("best.ckpt");
    Ok(outcome)
}

/// Scores a checkpoint on the full validation split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, RunError> {
    let vocab = cfg.vocab()?;
    let (splits, _) = load_data(cfg)?;
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    Ok(evaluate(&model, &vocab, &splits.val, cfg.train.beam, true)?)
}

/// Runs the configured ablation ladder and writes `ablation.tsv` (one row
/// per run) and `ablation_table.tsv` (per-stage summary) to `out_dir`.
pub fn ablate(cfg: &RunConfig) -> Result<AblationSummary, RunError> {
    let vocab = cfg.vocab()?;
    let (splits, pool) = load_data(cfg)?;
    let low: Vec<Lang> = cfg.data.low_resource.iter().map(|&l| Lang(l)).collect();
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let stage = Staging::new(&cfg.out_dir, "ablate")?;
    let runs = stage.path("ablation-runs");
    let setup = AblationSetup {
        model: &cfg.model,
        train: &cfg.train,
        vocab: &vocab,
        splits: &splits,
        pool: &pool,
        low_resource: &low,
        out_dir: &runs,
    };
    let summary = ablation_suite::<f32>(&setup, &cfg.ablation_stages, &cfg.ablation_seeds)?;
    write_file(&stage.path("ablation.tsv"), &summary.records_text())?;
    write_file(&stage.path("ablation_table.tsv"), &summary.table_text())?;
    write_file(&stage.path("ablate.cfg"), &cfg.to_text())?;
    stage.commit()?;
    Ok(summary)
}

/// Writes `sim_<id>_<mode>.{txt,hdr}` for each requested example id, in
/// both the concatenated and the speech-only mode, at layer `loss.k`.
pub fn export_sim(cfg: &RunConfig, checkpoint: &Path, ids: &[usize]) -> Result<Vec<PathBuf>, RunError> {
    if ids.is_empty() {
        return Err(RunError::Usage("export-sim needs at least one example id".into()));
    }
    let (splits, _) = load_data(cfg)?;
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let stage = Staging::new(&cfg.out_dir, "export-sim")?;
    for &id in ids {
        let ex = splits
            .val
            .iter()
            .chain(&splits.train)
            .find(|e| e.id == id)
            .ok_or_else(|| RunError::Usage(format!("no example with id {id}")))?;
        let frames = ex.frames.cast::<f32>();
        for mode in [SimMode::Cml, SimMode::SpeechOnly] {
            let m = similarity_matrix(&model, &frames, &ex.transcript, cfg.train.weights.k, mode)?;
            m.export(&stage.dir, &format!("sim_{id}_{}", mode.name()))?;
        }
    }
    stage.commit()
}
