//! Stimulus sets, judgment sessions and the control-trial quality filter.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{scramble_sentence, CorpusError, Origin, Sentence};
use crate::seed;
use crate::synthesis::Triplet;

/// Controversial-condition trials per model pair in every set.
pub const CONDITIONS_PER_MODEL_PAIR: usize = 4;
pub const RANDOM_TRIALS_PER_SET: usize = 9;
pub const CONTROL_TRIALS_PER_SET: usize = 12;
/// Correct control trials needed to keep a session.
pub const CONTROL_PASS_MARK: usize = 11;
pub const DEFAULT_TIME_LIMIT_MS: u64 = 90 * 60 * 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("insufficient materials: {what} needs {required}, have {available}")]
    Shortfall { what: String, required: usize, available: usize },
    #[error("set {group}: sentence '{sentence}' appears twice")]
    DuplicateSentence { group: usize, sentence: String },
    #[error("invalid trial {0}: left and right sentences are identical")]
    IdenticalSides(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("session {0} is not complete")]
    Incomplete(String),
    #[error("corrupt log record at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    NaturalRandom,
    NaturalControversial,
    NaturalVsSyntheticA,
    NaturalVsSyntheticB,
    SyntheticVsSynthetic,
    ControlScrambled,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::NaturalRandom,
        Condition::NaturalControversial,
        Condition::NaturalVsSyntheticA,
        Condition::NaturalVsSyntheticB,
        Condition::SyntheticVsSynthetic,
        Condition::ControlScrambled,
    ];

    /// Conditions built to separate a specific model pair.
    pub fn is_targeted(self) -> bool {
        !matches!(self, Condition::NaturalRandom | Condition::ControlScrambled)
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::NaturalRandom => "natural-random",
            Condition::NaturalControversial => "natural-controversial",
            Condition::NaturalVsSyntheticA => "natural-vs-synthetic-A",
            Condition::NaturalVsSyntheticB => "natural-vs-synthetic-B",
            Condition::SyntheticVsSynthetic => "synthetic-vs-synthetic",
            Condition::ControlScrambled => "control-scrambled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: String,
    pub left: Sentence,
    pub right: Sentence,
    pub condition: Condition,
    pub targeted_models: Option<(String, String)>,
    pub triplet_ref: Option<String>,
}

impl Trial {
    pub fn targets(&self, model: &str) -> bool {
        self.targeted_models.as_ref().is_some_and(|(a, b)| a == model || b == model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    /// 1-based group index.
    pub group: usize,
    pub trials: Vec<Trial>,
}

impl StimulusSet {
    pub fn trial(&self, id: &str) -> Option<(usize, &Trial)> {
        self.trials.iter().enumerate().find(|(_, t)| t.id == id)
    }

    /// No sentence (by lowercase text) may appear twice within a set.
    pub fn audit_uniqueness(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.trials {
            if t.left.key() == t.right.key() {
                return Err(ExperimentError::IdenticalSides(t.id.clone()));
            }
            for s in [&t.left, &t.right] {
                if !seen.insert(s.key()) {
                    return Err(ExperimentError::DuplicateSentence { group: self.group, sentence: s.text() });
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tsv::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// A controversial natural pair selected for one model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalPair {
    pub model1: String,
    pub model2: String,
    pub sentence1: Sentence,
    pub sentence2: Sentence,
}

/// Everything needed to assemble the stimulus sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Materials {
    pub model_pairs: Vec<(String, String)>,
    pub controversial_pairs: Vec<NaturalPair>,
    pub triplets: Vec<Triplet>,
    pub random_pairs: Vec<(Sentence, Sentence)>,
    pub control_sources: Vec<Sentence>,
}

fn shortfall(what: String, required: usize, available: usize) -> Result<()> {
    if available < required {
        Err(ExperimentError::Shortfall { what, required, available })
    } else {
        Ok(())
    }
}

struct Pending {
    a: Sentence,
    b: Sentence,
    condition: Condition,
    targeted: Option<(String, String)>,
    triplet: Option<String>,
}

fn triplet_ref(t: &Triplet) -> String {
    format!("{}|{}|{}", t.n.id, t.m1, t.m2)
}

/// Builds one stimulus set per group.
///
/// For every model pair with selected triplets `t_0..t_{G-1}`, group `g`
/// gets `t_g` as natural vs synthetic A, `t_{g+1}` as natural vs synthetic
/// B and `t_{g+2}` as synthetic vs synthetic (indices mod G), so each
/// triplet's three trials land in three different groups.
pub fn build_stimulus_sets(materials: &Materials, n_groups: usize, seed: u64) -> Result<Vec<StimulusSet>> {
    if n_groups < 3 {
        return Err(ExperimentError::Validation("at least three groups are needed to spread triplets".into()));
    }
    let mut pairs_by_mp: BTreeMap<(String, String), Vec<&NaturalPair>> = BTreeMap::new();
    for p in &materials.controversial_pairs {
        pairs_by_mp.entry((p.model1.clone(), p.model2.clone())).or_default().push(p);
    }
    let mut triplets_by_mp: BTreeMap<(String, String), Vec<&Triplet>> = BTreeMap::new();
    for t in &materials.triplets {
        triplets_by_mp.entry((t.m1.clone(), t.m2.clone())).or_default().push(t);
    }
    for mp in &materials.model_pairs {
        let label = format!("{} vs {}", mp.0, mp.1);
        shortfall(format!("controversial natural pairs for {label}"), n_groups, pairs_by_mp.get(mp).map_or(0, Vec::len))?;
        shortfall(format!("selected triplets for {label}"), n_groups, triplets_by_mp.get(mp).map_or(0, Vec::len))?;
    }
    shortfall("random natural pairs".into(), RANDOM_TRIALS_PER_SET * n_groups, materials.random_pairs.len())?;
    shortfall("control source sentences".into(), CONTROL_TRIALS_PER_SET * n_groups, materials.control_sources.len())?;

    let mut sets = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut pending = Vec::new();
        for mp in &materials.model_pairs {
            let targeted = Some(mp.clone());
            let p = pairs_by_mp[mp][g];
            pending.push(Pending {
                a: p.sentence1.clone(),
                b: p.sentence2.clone(),
                condition: Condition::NaturalControversial,
                targeted: targeted.clone(),
                triplet: None,
            });
            let ts = &triplets_by_mp[mp];
            let ta = ts[g % n_groups];
            let tb = ts[(g + 1) % n_groups];
            let tc = ts[(g + 2) % n_groups];
            pending.push(Pending { a: ta.n.clone(), b: ta.s1.clone(), condition: Condition::NaturalVsSyntheticA, targeted: targeted.clone(), triplet: Some(triplet_ref(ta)) });
            pending.push(Pending { a: tb.n.clone(), b: tb.s2.clone(), condition: Condition::NaturalVsSyntheticB, targeted: targeted.clone(), triplet: Some(triplet_ref(tb)) });
            pending.push(Pending { a: tc.s1.clone(), b: tc.s2.clone(), condition: Condition::SyntheticVsSynthetic, targeted, triplet: Some(triplet_ref(tc)) });
        }
        for (a, b) in &materials.random_pairs[g * RANDOM_TRIALS_PER_SET..(g + 1) * RANDOM_TRIALS_PER_SET] {
            pending.push(Pending { a: a.clone(), b: b.clone(), condition: Condition::NaturalRandom, targeted: None, triplet: None });
        }
        for (k, s) in materials.control_sources[g * CONTROL_TRIALS_PER_SET..(g + 1) * CONTROL_TRIALS_PER_SET].iter().enumerate() {
            let scrambled = scramble_sentence(s, seed::derive(seed::derive(seed, g as u64), 1000 + k as u64))?;
            pending.push(Pending { a: s.clone(), b: scrambled, condition: Condition::ControlScrambled, targeted: None, triplet: None });
        }
        let mut rng = seed::rng(seed::derive(seed, g as u64));
        pending.shuffle(&mut rng);
        let trials = pending
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let (left, right) = if rng.gen::<bool>() { (p.b, p.a) } else { (p.a, p.b) };
                Trial {
                    id: format!("g{:02}-t{:03}", g + 1, i + 1),
                    left,
                    right,
                    condition: p.condition,
                    targeted_models: p.targeted,
                    triplet_ref: p.triplet,
                }
            })
            .collect();
        let set = StimulusSet { group: g + 1, trials };
        set.audit_uniqueness()?;
        sets.push(set);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub session_id: String,
    pub trial_id: String,
    pub choice: Choice,
    pub confidence: u8,
    pub elapsed_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Issued,
    Active,
    Complete,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub participant: String,
    pub set: usize,
    pub state: SessionState,
    pub created_ms: u64,
    /// Set once a response arrives after the time limit.
    pub late: bool,
    pub responses: Vec<Response>,
}

/// One line of the append-only session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    SessionCreated { session_id: String, participant: String, set: usize, created_ms: u64 },
    SessionStarted { session_id: String },
    Response(Response),
}

/// What a participant sees for the current trial: no condition or model
/// metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub trial_id: String,
    pub left: String,
    pub right: String,
    pub index: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
    pub state: SessionState,
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64))
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    records: usize,
    sessions: Vec<Session>,
}

/// Sessions over a fixed collection of stimulus sets, persisted as an
/// append-only JSON-lines log with an occasional snapshot.
pub struct SessionStore {
    sets: BTreeMap<usize, StimulusSet>,
    sessions: HashMap<String, Session>,
    log: Option<(PathBuf, File)>,
    records: usize,
    snapshot_every: usize,
    time_limit_ms: u64,
    clock: Clock,
}

impl SessionStore {
    pub fn in_memory(sets: Vec<StimulusSet>) -> Self {
        Self {
            sets: sets.into_iter().map(|s| (s.group, s)).collect(),
            sessions: HashMap::new(),
            log: None,
            records: 0,
            snapshot_every: 500,
            time_limit_ms: DEFAULT_TIME_LIMIT_MS,
            clock: system_clock(),
        }
    }

    /// Opens (or creates) the log at `path`, restoring state from the
    /// snapshot next to it and the records after it.
    pub fn open(sets: Vec<StimulusSet>, path: &Path) -> Result<Self> {
        let mut store = Self::in_memory(sets);
        let snap_path = snapshot_path(path);
        let mut skip = 0;
        if snap_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snap_path)?)?;
            skip = snap.records;
            store.sessions = snap.sessions.into_iter().map(|s| (s.id.clone(), s)).collect();
        }
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if i >= skip {
                    let rec: LogRecord =
                        serde_json::from_str(&line).map_err(|e| ExperimentError::CorruptLog { line: i + 1, message: e.to_string() })?;
                    store.apply(&rec);
                }
                store.records = i + 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_time_limit(mut self, ms: u64) -> Self {
        self.time_limit_ms = ms;
        self
    }

    pub fn with_snapshot_every(mut self, records: usize) -> Self {
        self.snapshot_every = records.max(1);
        self
    }

    pub fn sets(&self) -> impl Iterator<Item = &StimulusSet> {
        self.sets.values()
    }

    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| ExperimentError::NotFound(format!("session {id}")))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    fn apply(&mut self, rec: &LogRecord) {
        match rec {
            LogRecord::SessionCreated { session_id, participant, set, created_ms } => {
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        id: session_id.clone(),
                        participant: participant.clone(),
                        set: *set,
                        state: SessionState::Issued,
                        created_ms: *created_ms,
                        late: false,
                        responses: Vec::new(),
                    },
                );
            }
            LogRecord::SessionStarted { session_id } => {
                if let Some(s) = self.sessions.get_mut(session_id) {
                    s.state = SessionState::Active;
                }
            }
            LogRecord::Response(r) => {
                let limit = self.time_limit_ms;
                let total = self.sets.get(&self.sessions.get(&r.session_id).map_or(0, |s| s.set)).map_or(0, |s| s.trials.len());
                if let Some(s) = self.sessions.get_mut(&r.session_id) {
                    s.state = SessionState::Active;
                    if r.timestamp.saturating_sub(s.created_ms) > limit {
                        s.late = true;
                    }
                    s.responses.push(r.clone());
                    if s.responses.len() == total {
                        s.state = if s.late { SessionState::Rejected } else { SessionState::Complete };
                    }
                }
            }
        }
    }

    fn append(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((_, file)) = &mut self.log {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.apply(&rec);
        self.records += 1;
        if self.records.is_multiple_of(self.snapshot_every) {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Writes the current state next to the log.
    pub fn snapshot(&self) -> Result<()> {
        if let Some((path, file)) = &self.log {
            file.sync_data()?;
            let mut sessions: Vec<Session> = self.sessions.values().cloned().collect();
            sessions.sort_by(|a, b| a.id.cmp(&b.id));
            let snap = Snapshot { records: self.records, sessions };
            crate::tsv::write_atomic(&snapshot_path(path), &serde_json::to_vec(&snap)?)?;
        }
        Ok(())
    }

    pub fn create_session(&mut self, set: usize, participant: &str) -> Result<Session> {
        if !self.sets.contains_key(&set) {
            return Err(ExperimentError::NotFound(format!("stimulus set {set}")));
        }
        if participant.trim().is_empty() {
            return Err(ExperimentError::Validation("participant label is empty".into()));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.append(LogRecord::SessionCreated {
            session_id: id.clone(),
            participant: participant.to_string(),
            set,
            created_ms: (self.clock)(),
        })?;
        Ok(self.sessions[&id].clone())
    }

    fn set_of(&self, session: &Session) -> &StimulusSet {
        &self.sets[&session.set]
    }

    /// The first unanswered trial, or `None` when the session is done.
    pub fn next_trial(&mut self, id: &str) -> Result<Option<TrialView>> {
        let s = self.session(id)?;
        let set = self.set_of(s);
        let idx = s.responses.len();
        if idx >= set.trials.len() {
            return Ok(None);
        }
        let t = &set.trials[idx];
        let view = TrialView { trial_id: t.id.clone(), left: t.left.text(), right: t.right.text(), index: idx, total: set.trials.len() };
        if s.state == SessionState::Issued {
            self.append(LogRecord::SessionStarted { session_id: id.to_string() })?;
        }
        Ok(Some(view))
    }

    pub fn submit(&mut self, id: &str, trial_id: &str, choice: Choice, confidence: u8, elapsed_ms: u64) -> Result<Progress> {
        let s = self.session(id)?;
        let set = self.set_of(s);
        let (pos, _) = set.trial(trial_id).ok_or_else(|| ExperimentError::NotFound(format!("trial {trial_id}")))?;
        if !(1..=3).contains(&confidence) {
            return Err(ExperimentError::Validation(format!("confidence must be 1, 2 or 3, got {confidence}")));
        }
        if matches!(s.state, SessionState::Complete | SessionState::Rejected) {
            return Err(ExperimentError::Conflict(format!("session {id} is closed")));
        }
        if s.responses.iter().any(|r| r.trial_id == trial_id) {
            return Err(ExperimentError::Conflict(format!("trial {trial_id} already answered")));
        }
        if pos != s.responses.len() {
            return Err(ExperimentError::Conflict(format!("trial {trial_id} is not the current trial")));
        }
        let r = Response {
            session_id: id.to_string(),
            trial_id: trial_id.to_string(),
            choice,
            confidence,
            elapsed_ms,
            timestamp: (self.clock)(),
        };
        self.append(LogRecord::Response(r))?;
        self.progress(id)
    }

    pub fn progress(&self, id: &str) -> Result<Progress> {
        let s = self.session(id)?;
        Ok(Progress { answered: s.responses.len(), total: self.set_of(s).trials.len(), state: s.state })
    }
}

fn snapshot_path(log: &Path) -> PathBuf {
    let mut p = log.as_os_str().to_owned();
    p.push(".snapshot");
    PathBuf::from(p)
}

/// Replays a session log against its stimulus sets, reproducing the
/// server's session states (including late rejection). The snapshot is
/// ignored; the log alone is authoritative.
pub fn read_response_log(path: &Path, sets: &[StimulusSet], time_limit_ms: u64) -> Result<Vec<Session>> {
    let mut store = SessionStore::in_memory(sets.to_vec()).with_time_limit(time_limit_ms);
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| ExperimentError::CorruptLog { line: i + 1, message: e.to_string() })?;
        store.apply(&rec);
    }
    let mut sessions: Vec<Session> = store.sessions.into_values().collect();
    sessions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(sessions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub correct: usize,
    pub total: usize,
    pub accept: bool,
}

/// Keeps a session iff the intact sentence won at least 11 of its 12
/// control trials.
pub fn apply_quality_filter(set: &StimulusSet, responses: &[Response]) -> Result<QualityVerdict> {
    if responses.len() < set.trials.len() {
        return Err(ExperimentError::Incomplete(responses.first().map_or_else(String::new, |r| r.session_id.clone())));
    }
    let by_trial: HashMap<&str, Choice> = responses.iter().map(|r| (r.trial_id.as_str(), r.choice)).collect();
    let mut correct = 0;
    let mut total = 0usize;
    for t in set.trials.iter().filter(|t| t.condition == Condition::ControlScrambled) {
        total += 1;
        let natural = if t.left.origin == Origin::Scrambled { Choice::Right } else { Choice::Left };
        match by_trial.get(t.id.as_str()) {
            Some(&c) if c == natural => correct += 1,
            Some(_) => {}
            None => return Err(ExperimentError::Incomplete(format!("missing response to {}", t.id))),
        }
    }
    let pass = total.saturating_sub(CONTROL_TRIALS_PER_SET - CONTROL_PASS_MARK);
    Ok(QualityVerdict { correct, total, accept: correct >= pass })
}
