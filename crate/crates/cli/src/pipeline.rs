//! The resumable end-to-end pipeline behind `contstim run`.
//!
//! Every stage records a hash of its parameters, the hashes of the files it
//! read and the hashes of the files it wrote in `manifest.json`. A stage is
//! skipped when all three still match, so a second run over the same
//! directory does no work, and deleting an artifact re-runs only its
//! producer (downstream stages see a byte-identical input and stay fresh).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::ValueEnum;
use contstim_core::corpus::{build_vocabulary, corpus_tokens, filter_sentences, Blocklist, RepeatableWords, SentencePool, Vocabulary};
use contstim_core::evaluation::Embeddings;
use contstim_core::experiment::{build_stimulus_sets, read_response_log, Materials, StimulusSet};
use contstim_core::ngram::{train_ngram, NgramModel, DEFAULT_DISCOUNT};
use contstim_core::scoring::{score_sentences, ScoreMatrix, ScorerHandle};
use contstim_core::synthesis::{SynthesisConfig, Triplet};
use contstim_core::tsv::{write_atomic, Table};
use contstim_core::{bundled, seed};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SpecKind};
use crate::followup;
use crate::manifest::{sha256_bytes, sha256_file, DirLock, Manifest};
use crate::stages::{self, pair_key, NaturalAllocation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum)]
pub enum Stage {
    Vocab,
    Filter,
    Train,
    Score,
    SelectNatural,
    Synthesize,
    SelectTriplets,
    BuildExperiment,
    ScoreStimuli,
    Simulate,
    Evaluate,
    Followup,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Vocab,
        Stage::Filter,
        Stage::Train,
        Stage::Score,
        Stage::SelectNatural,
        Stage::Synthesize,
        Stage::SelectTriplets,
        Stage::BuildExperiment,
        Stage::ScoreStimuli,
        Stage::Simulate,
        Stage::Evaluate,
        Stage::Followup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::Filter => "filter",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::SelectNatural => "select-natural",
            Stage::Synthesize => "synthesize",
            Stage::SelectTriplets => "select-triplets",
            Stage::BuildExperiment => "build-experiment",
            Stage::ScoreStimuli => "score-stimuli",
            Stage::Simulate => "simulate",
            Stage::Evaluate => "evaluate",
            Stage::Followup => "followup",
        }
    }

    /// The stage that writes run artifact `rel`.
    pub fn producer_of(rel: &str) -> Option<Stage> {
        Some(match rel {
            "vocab.tsv" => Stage::Vocab,
            "pool.tsv" => Stage::Filter,
            "scores.tsv" => Stage::Score,
            "natural_pairs.tsv" | "natural_report.json" | "naturals.json" => Stage::SelectNatural,
            "materials.json" => Stage::SelectTriplets,
            "stimulus_scores.tsv" | "stimulus_tokens.tsv" => Stage::ScoreStimuli,
            "responses.jsonl" => Stage::Simulate,
            r if r.starts_with("models/") => Stage::Train,
            r if r.starts_with("triplets/") => Stage::Synthesize,
            r if r.starts_with("sets/") => Stage::BuildExperiment,
            r if r.starts_with("report/") => Stage::Evaluate,
            r if r.starts_with("followup/") => Stage::Followup,
            _ => return None,
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage was asked to run before something it reads exists.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage '{stage}' needs {input}, which stage '{producer}' produces; run that stage first")]
    MissingArtifact { stage: Stage, input: String, producer: Stage },
    #[error("stage '{stage}' needs {input}: {hint}")]
    MissingSource { stage: Stage, input: String, hint: String },
}

/// What a run did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Where a stage input comes from.
enum Input {
    /// A file inside the run directory.
    Artifact(String),
    /// A user-supplied file.
    External(PathBuf),
    /// Data compiled into the binary.
    Bundled(&'static str, &'static str),
}

impl Input {
    fn key(&self) -> String {
        match self {
            Input::Artifact(rel) => rel.clone(),
            Input::External(p) => p.display().to_string(),
            Input::Bundled(name, _) => format!("bundled:{name}"),
        }
    }
}

fn source(path: &Option<PathBuf>, name: &'static str, text: &'static str) -> Input {
    match path {
        Some(p) => Input::External(p.clone()),
        None => Input::Bundled(name, text),
    }
}

fn read_source(path: &Option<PathBuf>, bundled: &'static str) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(bundled.to_string()),
    }
}

type Outputs = Vec<(String, Vec<u8>)>;

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub fn set_file(group: usize) -> String {
    format!("sets/group-{group:02}.json")
}

pub fn candidates_file(m1: &str, m2: &str) -> String {
    format!("triplets/candidates-{m1}__{m2}.json")
}

pub struct Runner {
    cfg: RunConfig,
    dir: PathBuf,
    manifest: Manifest,
    handles: Option<Vec<ScorerHandle>>,
    _lock: DirLock,
}

impl Runner {
    /// Locks the run directory for the lifetime of the runner.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        let lock = DirLock::acquire(&dir)?;
        let manifest = Manifest::load(&dir)?;
        Ok(Self { cfg, dir, manifest, handles: None, _lock: lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stages run when none are named: everything through stimulus
    /// scoring, plus simulation, evaluation and the follow-up when they are
    /// configured.
    pub fn default_stages(&self) -> Vec<Stage> {
        let simulate = self.cfg.simulation.is_some();
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Simulate => simulate,
                Stage::Evaluate => simulate || self.cfg.experiment.responses.is_some(),
                Stage::Followup => self.cfg.followup.is_some(),
                _ => true,
            })
            .collect()
    }

    pub fn run(&mut self, stages: Option<&[Stage]>) -> Result<RunSummary> {
        let mut wanted: Vec<Stage> = match stages {
            Some(s) => s.to_vec(),
            None => self.default_stages(),
        };
        wanted.sort();
        wanted.dedup();
        let mut summary = RunSummary::default();
        for stage in wanted {
            if self.run_stage(stage)? {
                summary.ran.push(stage);
            } else {
                summary.skipped.push(stage);
            }
        }
        Ok(summary)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<bool> {
        let (params, inputs) = self.plan(stage)?;
        let params = sha256_bytes(&serde_json::to_vec(&json!({ "version": env!("CARGO_PKG_VERSION"), "stage": params }))?);
        let mut hashes = BTreeMap::new();
        for input in &inputs {
            let h = match input {
                Input::Artifact(rel) => {
                    let p = self.dir.join(rel);
                    if !p.exists() {
                        let producer = Stage::producer_of(rel).expect("artifact names map to stages");
                        return Err(PipelineError::MissingArtifact { stage, input: rel.clone(), producer }.into());
                    }
                    sha256_file(&p)?
                }
                Input::External(p) => sha256_file(p).with_context(|| format!("hashing {}", p.display()))?,
                Input::Bundled(_, text) => sha256_bytes(text.as_bytes()),
            };
            hashes.insert(input.key(), h);
        }
        if self.manifest.is_fresh(&self.dir, stage.name(), &params, &hashes) {
            log::info!("{stage}: up to date");
            return Ok(false);
        }
        log::info!("{stage}: running");
        if let Some(old) = self.manifest.stages.remove(stage.name()) {
            for rel in old.outputs.keys() {
                let _ = fs::remove_file(self.dir.join(rel));
            }
            self.manifest.save(&self.dir)?;
        }
        let outputs = self.execute(stage).with_context(|| format!("stage '{stage}' failed"))?;
        let mut record = crate::manifest::StageRecord { params, inputs: hashes, outputs: BTreeMap::new() };
        for (rel, bytes) in outputs {
            let p = self.dir.join(&rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            write_atomic(&p, &bytes).with_context(|| format!("writing {}", p.display()))?;
            record.outputs.insert(rel, sha256_bytes(&bytes));
        }
        self.manifest.stages.insert(stage.name().to_string(), record);
        self.manifest.save(&self.dir)?;
        Ok(true)
    }

    fn model_files(&self) -> Vec<String> {
        self.cfg.scorers.iter().filter(|s| s.needs_trained_model()).map(|s| format!("models/{}.lm", s.name)).collect()
    }

    fn scorer_inputs(&self) -> Vec<Input> {
        let mut v: Vec<Input> = self.model_files().into_iter().map(Input::Artifact).collect();
        v.extend(self.cfg.scorers.iter().filter_map(|s| s.model.clone()).map(Input::External));
        v
    }

    fn scorer_params(&self) -> serde_json::Value {
        json!({ "scorers": self.cfg.scorers, "permutations": self.cfg.counts.permutations, "seed": self.cfg.seed })
    }

    fn set_files(&self) -> Vec<String> {
        (1..=self.cfg.counts.groups).map(set_file).collect()
    }

    fn oracle_file(&self) -> Option<String> {
        self.cfg.simulation.as_ref().map(|s| format!("models/oracle-{}.lm", s.oracle_order))
    }

    fn repeatable_input(&self) -> Input {
        source(&self.cfg.corpus.repeatable, "repeatable_words", bundled::REPEATABLE_WORDS)
    }

    fn plan(&self, stage: Stage) -> Result<(serde_json::Value, Vec<Input>)> {
        let c = &self.cfg;
        let a = |s: &str| Input::Artifact(s.to_string());
        Ok(match stage {
            Stage::Vocab => (
                json!({ "min_rate": c.corpus.min_rate }),
                vec![source(&c.corpus.corpus, "mini_corpus", bundled::MINI_CORPUS), source(&c.corpus.lexicon, "lexicon", bundled::LEXICON)],
            ),
            Stage::Filter => (
                json!({}),
                vec![a("vocab.tsv"), source(&c.corpus.pool, "mini_pool", bundled::MINI_POOL), source(&c.corpus.blocklist, "blocklist", bundled::BLOCKLIST)],
            ),
            Stage::Train => {
                let orders: Vec<_> =
                    c.scorers.iter().filter(|s| s.needs_trained_model()).map(|s| json!([s.name, s.ngram_order(), s.discount])).collect();
                (
                    json!({ "models": orders, "oracle": c.simulation.as_ref().map(|s| s.oracle_order) }),
                    vec![a("vocab.tsv"), source(&c.corpus.corpus, "mini_corpus", bundled::MINI_CORPUS)],
                )
            }
            Stage::Score => {
                let mut inputs = vec![a("pool.tsv")];
                inputs.extend(self.scorer_inputs());
                (self.scorer_params(), inputs)
            }
            Stage::SelectNatural => (
                json!({ "pairs": c.counts.pairs_per_model_pair, "groups": c.counts.groups,
                        "triplets": c.counts.triplets_per_pair, "model_pairs": c.model_pairs(), "seed": c.seed }),
                vec![a("scores.tsv"), a("pool.tsv"), self.repeatable_input()],
            ),
            Stage::Synthesize => {
                let mut inputs = vec![a("naturals.json"), a("pool.tsv"), a("vocab.tsv"), self.repeatable_input()];
                inputs.extend(self.scorer_inputs());
                (json!({ "scorers": self.scorer_params(), "synthesis": c.synthesis, "model_pairs": c.model_pairs() }), inputs)
            }
            Stage::SelectTriplets => {
                let mut inputs = vec![a("natural_pairs.tsv"), a("naturals.json"), a("pool.tsv")];
                inputs.extend(c.model_pairs().iter().map(|(x, y)| Input::Artifact(candidates_file(x, y))));
                (json!({ "groups": c.counts.groups, "model_pairs": c.model_pairs() }), inputs)
            }
            Stage::BuildExperiment => (json!({ "groups": c.counts.groups, "seed": c.seed }), vec![a("materials.json")]),
            Stage::ScoreStimuli => {
                let mut inputs: Vec<Input> = self.set_files().into_iter().map(Input::Artifact).collect();
                inputs.extend(self.scorer_inputs());
                (self.scorer_params(), inputs)
            }
            Stage::Simulate => {
                let Some(sim) = &c.simulation else {
                    return Err(PipelineError::MissingSource {
                        stage,
                        input: "a [simulation] section".into(),
                        hint: "add one to the run config to simulate participants".into(),
                    }
                    .into());
                };
                let mut inputs: Vec<Input> = self.set_files().into_iter().map(Input::Artifact).collect();
                inputs.push(Input::Artifact(self.oracle_file().expect("simulation is configured")));
                (json!({ "simulation": sim, "seed": c.seed }), inputs)
            }
            Stage::Evaluate => {
                let mut inputs: Vec<Input> = self.set_files().into_iter().map(Input::Artifact).collect();
                inputs.push(self.responses_input(stage)?);
                inputs.extend([a("stimulus_scores.tsv"), a("stimulus_tokens.tsv"), a("vocab.tsv")]);
                inputs.extend(c.evaluation.embeddings.clone().map(Input::External));
                (json!({ "evaluation": c.evaluation, "time_limit_minutes": c.experiment.time_limit_minutes }), inputs)
            }
            Stage::Followup => {
                let f = c.followup.clone().unwrap_or_default();
                (json!({ "followup": f, "seed": c.seed, "simulation": c.simulation }), vec![])
            }
        })
    }

    /// The response log the evaluate stage reads: the simulated one when
    /// simulation is configured, else the configured external log.
    fn responses_input(&self, stage: Stage) -> Result<Input> {
        if self.cfg.simulation.is_some() {
            return Ok(Input::Artifact("responses.jsonl".into()));
        }
        match &self.cfg.experiment.responses {
            Some(p) if p.exists() => Ok(Input::External(p.clone())),
            Some(p) => Err(PipelineError::MissingSource {
                stage,
                input: p.display().to_string(),
                hint: "the configured response log does not exist; collect responses with `contstim serve` first".into(),
            }
            .into()),
            None => Err(PipelineError::MissingArtifact { stage, input: "responses.jsonl".into(), producer: Stage::Simulate }.into()),
        }
    }

    fn execute(&mut self, stage: Stage) -> Result<Outputs> {
        match stage {
            Stage::Vocab => self.vocab(),
            Stage::Filter => self.filter(),
            Stage::Train => self.train(),
            Stage::Score => self.score(),
            Stage::SelectNatural => self.select_natural(),
            Stage::Synthesize => self.synthesize(),
            Stage::SelectTriplets => self.select_triplets(),
            Stage::BuildExperiment => self.build_experiment(),
            Stage::ScoreStimuli => self.score_stimuli(),
            Stage::Simulate => self.simulate(),
            Stage::Evaluate => self.evaluate(),
            Stage::Followup => self.followup(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn load_vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::load(&self.path("vocab.tsv"))?)
    }

    fn load_pool(&self) -> Result<SentencePool> {
        Ok(SentencePool::load(&self.path("pool.tsv"))?)
    }

    fn load_sets(&self) -> Result<Vec<StimulusSet>> {
        self.set_files().iter().map(|f| StimulusSet::load(&self.path(f)).with_context(|| format!("reading {f}"))).collect()
    }

    fn repeatable(&self) -> Result<RepeatableWords> {
        Ok(RepeatableWords::parse(&read_source(&self.cfg.corpus.repeatable, bundled::REPEATABLE_WORDS)?))
    }

    /// Opens every scorer once per run.
    fn handles(&mut self) -> Result<&[ScorerHandle]> {
        if self.handles.is_none() {
            let mut hs = Vec::new();
            for spec in &self.cfg.scorers {
                let model = match spec.kind {
                    SpecKind::Remote => None,
                    _ => {
                        let p = spec.model.clone().unwrap_or_else(|| self.path(&format!("models/{}.lm", spec.name)));
                        let (m, _) = NgramModel::load_path(&p).with_context(|| format!("loading {}", p.display()))?;
                        Some(Arc::new(m))
                    }
                };
                let scorer = spec.open(model)?;
                let perm_seed = seed::derive_str(self.cfg.seed, &format!("permutations:{}", spec.name));
                hs.push(spec.handle(scorer, self.cfg.counts.permutations, perm_seed)?);
            }
            self.handles = Some(hs);
        }
        Ok(self.handles.as_deref().expect("just opened"))
    }

    fn vocab(&mut self) -> Result<Outputs> {
        let corpus = read_source(&self.cfg.corpus.corpus, bundled::MINI_CORPUS)?;
        let lexicon = read_source(&self.cfg.corpus.lexicon, bundled::LEXICON)?;
        let lexicon: Vec<&str> = lexicon.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let vocab = build_vocabulary(corpus.lines().flat_map(corpus_tokens), &lexicon, self.cfg.corpus.min_rate)?;
        log::info!("vocabulary: {} words", vocab.len());
        let mut out = Vec::new();
        vocab.write_tsv(&mut out)?;
        Ok(vec![("vocab.tsv".into(), out)])
    }

    fn filter(&mut self) -> Result<Outputs> {
        let vocab = self.load_vocab()?;
        let raw = read_source(&self.cfg.corpus.pool, bundled::MINI_POOL)?;
        let block = Blocklist::parse(&read_source(&self.cfg.corpus.blocklist, bundled::BLOCKLIST)?);
        let pool = filter_sentences(raw.lines(), &vocab, &block);
        log::info!("pool: {} sentences", pool.len());
        let mut out = Vec::new();
        pool.write_tsv(&mut out)?;
        Ok(vec![("pool.tsv".into(), out)])
    }

    fn train(&mut self) -> Result<Outputs> {
        let vocab = self.load_vocab()?;
        let corpus = read_source(&self.cfg.corpus.corpus, bundled::MINI_CORPUS)?;
        let mut jobs: Vec<(String, usize, f64)> = self
            .cfg
            .scorers
            .iter()
            .filter(|s| s.needs_trained_model())
            .map(|s| (format!("models/{}.lm", s.name), s.ngram_order(), s.discount.unwrap_or(DEFAULT_DISCOUNT)))
            .collect();
        if let (Some(f), Some(sim)) = (self.oracle_file(), &self.cfg.simulation) {
            jobs.push((f, sim.oracle_order, DEFAULT_DISCOUNT));
        }
        let fp = vocab.fingerprint();
        jobs.par_iter()
            .map(|(rel, order, discount)| {
                let m = train_ngram(corpus.lines(), *order, &vocab, *discount)?;
                let mut out = Vec::new();
                m.save(&mut out, &fp)?;
                Ok((rel.clone(), out))
            })
            .collect()
    }

    fn score(&mut self) -> Result<Outputs> {
        let pool = self.load_pool()?;
        let m = score_sentences(self.handles()?, &pool.sentences)?;
        let mut out = Vec::new();
        m.write_tsv(&mut out)?;
        Ok(vec![("scores.tsv".into(), out)])
    }

    fn select_natural(&mut self) -> Result<Outputs> {
        let c = &self.cfg.counts;
        let pool = self.load_pool()?;
        let ranks = ScoreMatrix::<f64>::load(&self.path("scores.tsv"))?.to_ranks();
        let repeatable = self.repeatable()?;
        let pairs = self.cfg.model_pairs();
        let sel = stages::select_natural(&pool, &ranks, &pairs, c.pairs_per_model_pair, &repeatable)?;
        let used: HashSet<String> = sel.trials.iter().flat_map(|p| [p.sentence1.clone(), p.sentence2.clone()]).collect();
        let alloc = stages::allocate_naturals(
            &pool,
            &used,
            contstim_core::experiment::RANDOM_TRIALS_PER_SET * c.groups,
            contstim_core::experiment::CONTROL_TRIALS_PER_SET * c.groups,
            c.triplets_per_pair,
            &pairs,
            &repeatable,
            self.cfg.seed,
        )?;
        let report = json!({ "objective_value": sel.objective_value, "optimality": sel.optimality, "trials": sel.trials.len() });
        Ok(vec![
            ("natural_pairs.tsv".into(), stages::selection_table(&sel).to_bytes()),
            ("natural_report.json".into(), json_bytes(&report)?),
            ("naturals.json".into(), json_bytes(&alloc)?),
        ])
    }

    fn load_alloc(&self) -> Result<NaturalAllocation> {
        serde_json::from_slice(&fs::read(self.path("naturals.json"))?).context("reading naturals.json")
    }

    fn synthesize(&mut self) -> Result<Outputs> {
        let pool = self.load_pool()?;
        let vocab: Vec<String> = self.load_vocab()?.words().map(String::from).collect();
        let repeatable = self.repeatable()?;
        let alloc = self.load_alloc()?;
        let cfg = SynthesisConfig { seed: seed::derive(seed::derive_str(self.cfg.seed, "synthesis"), self.cfg.synthesis.seed), ..self.cfg.synthesis.clone() };
        let pairs = self.cfg.model_pairs();
        let handles = self.handles()?;
        let by_name = |n: &str| handles.iter().find(|h| h.name() == n).ok_or_else(|| anyhow!("no scorer named '{n}'"));
        let mut out = Vec::new();
        for (a, b) in &pairs {
            let ids = alloc.synthesis_starts.get(&pair_key(a, b)).ok_or_else(|| anyhow!("naturals.json has no starts for {a} vs {b}"))?;
            let starts = stages::sentences_by_id(&pool, ids)?;
            let triplets = stages::synthesize_candidates(&starts, by_name(a)?, by_name(b)?, &vocab, &repeatable, &cfg)?;
            log::info!("{a} vs {b}: {} candidate triplets", triplets.len());
            out.push((candidates_file(a, b), json_bytes(&triplets)?));
        }
        Ok(out)
    }

    fn select_triplets(&mut self) -> Result<Outputs> {
        let pool = self.load_pool()?;
        let alloc = self.load_alloc()?;
        let natural = stages::read_selection_table(&Table::load(&self.path("natural_pairs.tsv"))?)?;
        let pairs = self.cfg.model_pairs();
        let mut chosen = Vec::new();
        for (a, b) in &pairs {
            let f = candidates_file(a, b);
            let cands: Vec<Triplet> = serde_json::from_slice(&fs::read(self.path(&f))?).with_context(|| format!("reading {f}"))?;
            chosen.extend(stages::select_stratified(&cands, self.cfg.counts.groups).with_context(|| format!("stratifying {a} vs {b}"))?);
        }
        let materials = stages::assemble_materials(&pool, &pairs, &natural, &alloc, chosen)?;
        Ok(vec![("materials.json".into(), json_bytes(&materials)?)])
    }

    fn build_experiment(&mut self) -> Result<Outputs> {
        let materials: Materials = serde_json::from_slice(&fs::read(self.path("materials.json"))?).context("reading materials.json")?;
        let sets = build_stimulus_sets(&materials, self.cfg.counts.groups, seed::derive_str(self.cfg.seed, "experiment"))?;
        stages::check_origins(&sets)?;
        sets.iter().map(|s| Ok((set_file(s.group), json_bytes(s)?))).collect()
    }

    fn score_stimuli(&mut self) -> Result<Outputs> {
        let sentences = stages::stimulus_sentences(&self.load_sets()?)?;
        let handles = self.handles()?;
        let scores = score_sentences(handles, &sentences)?;
        let tokens = stages::token_counts(handles, &sentences)?;
        let (mut s, mut t) = (Vec::new(), Vec::new());
        scores.write_tsv(&mut s)?;
        tokens.write_tsv(&mut t)?;
        Ok(vec![("stimulus_scores.tsv".into(), s), ("stimulus_tokens.tsv".into(), t)])
    }

    fn simulate(&mut self) -> Result<Outputs> {
        let sim = self.cfg.simulation.clone().expect("planned");
        let (oracle, _) = NgramModel::load_path(&self.path(&self.oracle_file().expect("planned")))?;
        let sets = self.load_sets()?;
        let judge = |s: &contstim_core::corpus::Sentence| Ok(oracle.sentence_logprob(&s.words)?);
        let log = stages::simulate_responses(&sets, &judge, &sim, seed::derive_str(self.cfg.seed, "simulate"))?;
        Ok(vec![("responses.jsonl".into(), log)])
    }

    fn evaluate(&mut self) -> Result<Outputs> {
        let sets = self.load_sets()?;
        let log = match self.responses_input(Stage::Evaluate)? {
            Input::Artifact(rel) => self.path(&rel),
            Input::External(p) => p,
            Input::Bundled(..) => unreachable!("responses are never bundled"),
        };
        let sessions = read_response_log(&log, &sets, self.cfg.experiment.time_limit_minutes * 60_000)?;
        let scores = ScoreMatrix::<f64>::load(&self.path("stimulus_scores.tsv"))?;
        let tokens = ScoreMatrix::<f64>::load(&self.path("stimulus_tokens.tsv"))?;
        let vocab = self.load_vocab()?;
        let emb = match &self.cfg.evaluation.embeddings {
            Some(p) => Some(Embeddings::parse(&fs::read_to_string(p)?)?),
            None => None,
        };
        let e = &self.cfg.evaluation;
        let report = stages::evaluate_all(&sets, &sessions, &scores, Some(&tokens), &vocab, emb.as_ref(), e.fdr_q, e.quality_filter)?;
        Ok(stages::report_files(&report)?.into_iter().map(|(n, b)| (format!("report/{n}"), b)).collect())
    }

    fn followup(&mut self) -> Result<Outputs> {
        let f = self.cfg.followup.clone().unwrap_or_default();
        let sim = self.cfg.simulation.clone().unwrap_or_default();
        let r = followup::run_pll_followup(&f, &sim, seed::derive_str(self.cfg.seed, "followup"))?;
        r.files()
    }
}
