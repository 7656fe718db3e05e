//! Run configuration (TOML) and scorer rosters.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use contstim_core::bundled;
use contstim_core::ngram::NgramModel;
use contstim_core::scoring::remote::RemoteScorer;
use contstim_core::scoring::toy::{BigramNeighbourhood, NeighbourhoodScorer};
use contstim_core::scoring::{Estimator, LanguageScorer, NgramScorer, ScorerHandle, ScorerKind};
use contstim_core::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};

pub const LISTEN_ENV: &str = "CONTSTIM_LISTEN";

/// `CONTSTIM_SCORER_<NAME>_CMD`, with the name upper-cased and every
/// non-alphanumeric character replaced by `_`.
pub fn scorer_command_env(name: &str) -> String {
    let upper: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("CONTSTIM_SCORER_{upper}_CMD")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecKind {
    /// In-process Kneser-Ney model.
    Ngram,
    /// In-process bidirectional toy built from a 2-gram model.
    Neighbourhood,
    /// A scorer process speaking the wire protocol.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorSpec {
    Chain,
    Permutation,
    Pll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemoteTransport {
    #[default]
    Subprocess,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub name: String,
    pub kind: SpecKind,
    /// n-gram order (2 for the neighbourhood toy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    /// A trained model file; inside a pipeline run the train stage
    /// supplies it when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<RemoteTransport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

impl ScorerSpec {
    /// Whether the train stage has to build an n-gram model for this scorer.
    pub fn needs_trained_model(&self) -> bool {
        matches!(self.kind, SpecKind::Ngram | SpecKind::Neighbourhood) && self.model.is_none()
    }

    pub fn ngram_order(&self) -> usize {
        match self.kind {
            SpecKind::Neighbourhood => 2,
            _ => self.order.unwrap_or(3),
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(!self.name.trim().is_empty(), "scorer names must not be empty");
        ensure!(!self.name.contains(['/', '\t', '\n']), "scorer name '{}' contains a reserved character", self.name);
        match self.kind {
            SpecKind::Ngram => ensure!(self.ngram_order() >= 1, "scorer '{}': order must be positive", self.name),
            SpecKind::Neighbourhood => ensure!(
                self.order.is_none_or(|o| o == 2),
                "scorer '{}': the neighbourhood toy is built from a 2-gram model",
                self.name
            ),
            SpecKind::Remote => match self.transport.unwrap_or_default() {
                RemoteTransport::Subprocess => ensure!(self.command.is_some(), "remote scorer '{}' needs a command", self.name),
                RemoteTransport::Tcp => ensure!(self.address.is_some(), "remote scorer '{}' needs an address", self.name),
            },
        }
        Ok(())
    }

    /// Applies `CONTSTIM_SCORER_<NAME>_CMD`.
    pub fn apply_env(&mut self) {
        if self.kind == SpecKind::Remote {
            if let Ok(cmd) = std::env::var(scorer_command_env(&self.name)) {
                self.command = Some(cmd);
                self.transport = Some(RemoteTransport::Subprocess);
            }
        }
    }

    /// Launches or loads the scorer. `model` is the n-gram model for
    /// in-process kinds.
    pub fn open(&self, model: Option<Arc<NgramModel>>) -> Result<Arc<dyn LanguageScorer>> {
        let need_model = || model.clone().with_context(|| format!("scorer '{}' has no trained model", self.name));
        Ok(match self.kind {
            SpecKind::Ngram => Arc::new(NgramScorer::new(&self.name, need_model()?)),
            SpecKind::Neighbourhood => {
                Arc::new(NeighbourhoodScorer::new(&self.name, ScorerKind::Bidirectional, BigramNeighbourhood::new(need_model()?)?))
            }
            SpecKind::Remote => {
                let remote = match self.transport.unwrap_or_default() {
                    RemoteTransport::Subprocess => {
                        let cmd = self.command.as_deref().expect("validated");
                        RemoteScorer::spawn_command(cmd).with_context(|| format!("launching scorer '{}' ({cmd})", self.name))?
                    }
                    RemoteTransport::Tcp => {
                        let addr = self.address.as_deref().expect("validated");
                        RemoteScorer::connect(addr).with_context(|| format!("connecting to scorer '{}' at {addr}", self.name))?
                    }
                };
                Arc::new(remote.with_name(&self.name))
            }
        })
    }

    /// Wraps an opened scorer with the configured (or default) estimator.
    pub fn handle(&self, scorer: Arc<dyn LanguageScorer>, permutations: usize, seed: u64) -> Result<ScorerHandle> {
        let estimator = match (self.estimator, scorer.info().kind) {
            (Some(EstimatorSpec::Chain), _) => Estimator::Chain,
            (Some(EstimatorSpec::Pll), _) => Estimator::PseudoLogLikelihood,
            (Some(EstimatorSpec::Permutation), _) | (None, ScorerKind::Bidirectional) => Estimator::PermutationChain { permutations, seed },
            (None, _) => Estimator::Chain,
        };
        Ok(ScorerHandle::new(self.name.clone(), scorer, estimator)?)
    }
}

/// A standalone scorer list, as read by `score --scorers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roster {
    pub scorers: Vec<ScorerSpec>,
}

impl Roster {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut r: Roster = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut r.scorers {
            s.model = s.model.take().map(|p| resolve(base, p));
            s.apply_env();
        }
        validate_scorers(&r.scorers)?;
        Ok(r)
    }
}

fn validate_scorers(scorers: &[ScorerSpec]) -> Result<()> {
    ensure!(!scorers.is_empty(), "at least one scorer is required");
    let mut seen = HashSet::new();
    for s in scorers {
        s.validate()?;
        ensure!(seen.insert(s.name.as_str()), "duplicate scorer name '{}'", s.name);
    }
    Ok(())
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Corpus inputs; any file left out falls back to the bundled mini corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training text, one sentence per line.
    pub corpus: Option<PathBuf>,
    /// Raw candidate sentences for the natural pool.
    pub pool: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub repeatable: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    pub min_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { corpus: None, pool: None, lexicon: None, repeatable: None, blocklist: None, min_rate: bundled::MIN_RATE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub pairs_per_model_pair: usize,
    /// Candidate triplets synthesized per model pair before stratified
    /// selection keeps `groups` of them.
    pub triplets_per_pair: usize,
    pub groups: usize,
    pub permutations: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self { pairs_per_model_pair: 10, triplets_per_pair: 100, groups: 10, permutations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub listen: String,
    /// Response log consumed by the evaluate stage when no simulation runs.
    pub responses: Option<PathBuf>,
    pub time_limit_minutes: u64,
    /// Static participant UI served next to the API.
    pub assets: Option<PathBuf>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), responses: None, time_limit_minutes: 90, assets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub fdr_q: f64,
    pub quality_filter: bool,
    pub embeddings: Option<PathBuf>,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { fdr_q: 0.05, quality_filter: true, embeddings: None }
    }
}

/// Simulated participants who judge by an oracle n-gram model trained on
/// the same corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub oracle_order: usize,
    pub participants_per_group: usize,
    /// Logistic temperature on the oracle log ratio; 0 answers
    /// deterministically.
    pub temperature: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { oracle_order: 4, participants_per_group: 10, temperature: 1.0 }
    }
}

/// The chain-versus-PLL follow-up on a toy word-piece scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowupConfig {
    pub n_pairs: usize,
    pub single_piece_words: usize,
    pub multi_piece_words: usize,
    pub permutations: usize,
}

impl Default for FollowupConfig {
    fn default() -> Self {
        Self { n_pairs: 40, single_piece_words: 40, multi_piece_words: 20, permutations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub counts: Counts,
    pub scorers: Vec<ScorerSpec>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub experiment: ExperimentSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub followup: Option<FollowupConfig>,
}

impl RunConfig {
    /// Reads, resolves relative paths against the file's directory, applies
    /// environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.prepare(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.prepare(base)
    }

    fn prepare(mut self, base: &Path) -> Result<Self> {
        let r = |p: &mut Option<PathBuf>| *p = p.take().map(|p| resolve(base, p));
        self.out_dir = resolve(base, std::mem::take(&mut self.out_dir));
        r(&mut self.corpus.corpus);
        r(&mut self.corpus.pool);
        r(&mut self.corpus.lexicon);
        r(&mut self.corpus.repeatable);
        r(&mut self.corpus.blocklist);
        r(&mut self.experiment.responses);
        r(&mut self.experiment.assets);
        r(&mut self.evaluation.embeddings);
        for s in &mut self.scorers {
            r(&mut s.model);
            s.apply_env();
        }
        if let Ok(listen) = std::env::var(LISTEN_ENV) {
            self.experiment.listen = listen;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        validate_scorers(&self.scorers)?;
        ensure!(self.scorers.len() >= 2, "at least two scorers are needed to form model pairs");
        let c = &self.counts;
        ensure!(
            c.pairs_per_model_pair > 0 && c.triplets_per_pair > 0 && c.groups > 0 && c.permutations > 0,
            "counts must be positive"
        );
        ensure!(c.groups >= 3, "at least three groups are needed to spread triplets");
        ensure!(c.pairs_per_model_pair >= c.groups, "each group needs its own natural pair per model pair");
        ensure!(c.triplets_per_pair >= c.groups, "at least `groups` candidate triplets per model pair are needed");
        ensure!(self.evaluation.fdr_q > 0.0 && self.evaluation.fdr_q < 1.0, "fdr_q must lie in (0, 1)");
        self.synthesis.validate()?;
        if let Some(sim) = &self.simulation {
            ensure!(sim.oracle_order >= 1 && sim.participants_per_group >= 2, "simulation needs an oracle order and two participants");
            ensure!(sim.temperature >= 0.0, "temperature must not be negative");
        }
        if let Some(f) = &self.followup {
            ensure!(f.n_pairs > 0 && f.single_piece_words >= 8 && f.permutations > 0, "follow-up counts are too small");
        }
        let c = &self.corpus;
        for p in [&c.corpus, &c.pool, &c.lexicon, &c.repeatable, &c.blocklist, &self.experiment.assets, &self.evaluation.embeddings]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("referenced path does not exist: {}", p.display());
            }
        }
        for s in &self.scorers {
            if let Some(m) = &s.model {
                ensure!(m.exists(), "model file for scorer '{}' does not exist: {}", s.name, m.display());
            }
        }
        Ok(())
    }

    /// All unordered scorer pairs, in roster order.
    pub fn model_pairs(&self) -> Vec<(String, String)> {
        let n = &self.scorers;
        (0..n.len()).flat_map(|a| (a + 1..n.len()).map(move |b| (n[a].name.clone(), n[b].name.clone()))).collect()
    }
}
