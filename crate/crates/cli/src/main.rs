use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use contstim::config::{Roster, RunConfig, LISTEN_ENV};
use contstim::pipeline::{set_file, Runner, Stage};
use contstim::stages;
use contstim_core::corpus::{build_vocabulary, corpus_tokens, filter_sentences, Blocklist, RepeatableWords, SentencePool, Vocabulary};
use contstim_core::evaluation::Embeddings;
use contstim_core::experiment::{build_stimulus_sets, read_response_log, Materials, SessionStore, StimulusSet};
use contstim_core::ngram::{train_ngram, NgramModel, DEFAULT_DISCOUNT};
use contstim_core::scoring::remote;
use contstim_core::scoring::{score_sentences, LanguageScorer, NgramScorer, ScoreMatrix, ScorerHandle};
use contstim_core::synthesis::{SynthesisConfig, Triplet};
use contstim_core::tsv::write_atomic;
use contstim_core::{bundled, seed};
use contstim_server::AppState;

#[derive(Parser)]
#[command(name = "contstim", version, about = "Controversial sentence pairs for comparing language models against human judgments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the shared vocabulary from a corpus and a lexicon.
    BuildVocab {
        /// Training text, one sentence per line (bundled mini corpus if omitted).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = bundled::MIN_RATE)]
        min_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep eight-word in-vocabulary sentences as the natural pool.
    FilterSentences {
        #[arg(long)]
        vocab: PathBuf,
        /// Raw sentences, one per line (bundled mini pool if omitted).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        blocklist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an interpolated Kneser-Ney model.
    TrainNgram {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
        discount: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sentence pool under every scorer of a roster.
    Score {
        /// Scorer roster (TOML with a `scorers` list).
        #[arg(long)]
        scorers: PathBuf,
        /// Sentence TSV (`id`, `sentence`).
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long, default_value_t = 100)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the percentile-rank table.
        #[arg(long)]
        ranks_out: Option<PathBuf>,
    },
    /// Select controversial natural pairs for every pair of scored models.
    SelectNatural {
        /// Score or rank table; scores are converted to ranks.
        #[arg(long)]
        ranks: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 10)]
        pairs_per_model_pair: usize,
        #[arg(long)]
        repeatable: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize candidate triplets for one model pair.
    Synthesize {
        #[arg(long)]
        scorers: PathBuf,
        #[arg(long)]
        m1: String,
        #[arg(long)]
        m2: String,
        /// Starting sentences (TSV).
        #[arg(long)]
        starts: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        repeatable: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep `k` candidates per model pair, one per decile under each model.
    SelectTriplets {
        #[arg(long, required = true, num_args = 1..)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble per-group stimulus sets from a materials file.
    BuildExperiment {
        #[arg(long)]
        materials: PathBuf,
        #[arg(long)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the participant API (and optional static UI).
    Serve {
        /// Directory of `group-XX.json` stimulus sets.
        #[arg(long)]
        sets: PathBuf,
        #[arg(long, env = LISTEN_ENV, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Append-only session log.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        assets: Option<PathBuf>,
        #[arg(long, default_value_t = 90)]
        time_limit_minutes: u64,
    },
    /// Evaluate model-human alignment from a session log.
    Evaluate {
        #[arg(long)]
        sets: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        /// Stimulus score table.
        #[arg(long)]
        scores: PathBuf,
        /// Stimulus token-count table, for the token-count bias test.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        fdr_q: f64,
        #[arg(long)]
        no_quality_filter: bool,
        #[arg(long, default_value_t = 90)]
        time_limit_minutes: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve one scorer over the line protocol on stdin/stdout, or on TCP.
    ServeScorer {
        /// Roster holding the scorer.
        #[arg(long, requires = "name", conflicts_with = "bundled_ngram")]
        scorers: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        /// Serve a Kneser-Ney model of this order trained on the bundled corpus.
        #[arg(long)]
        bundled_ngram: Option<usize>,
        #[arg(long)]
        tcp: Option<String>,
    },
    /// Run the pipeline from a TOML config, skipping up-to-date stages.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stages to run (comma separated); defaults to every configured stage.
        #[arg(long, value_enum, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn read_or(path: &Option<PathBuf>, bundled: &'static str) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(bundled.to_string()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    write_atomic(path, &b).with_context(|| format!("writing {}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<()> {
    let mut b = Vec::new();
    f(&mut b)?;
    write_atomic(path, &b).with_context(|| format!("writing {}", path.display()))
}

fn load_sets(dir: &Path) -> Result<Vec<StimulusSet>> {
    let mut sets = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "json") {
            sets.push(StimulusSet::load(&p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    if sets.is_empty() {
        bail!("no stimulus sets in {}", dir.display());
    }
    sets.sort_by_key(|s| s.group);
    Ok(sets)
}

/// Opens every scorer of a roster. Model files are required for
/// in-process kinds.
fn open_roster(roster: &Roster, permutations: usize, base_seed: u64) -> Result<Vec<ScorerHandle>> {
    roster
        .scorers
        .iter()
        .map(|spec| {
            let model = match &spec.model {
                Some(p) => Some(Arc::new(NgramModel::load_path(p).with_context(|| format!("loading {}", p.display()))?.0)),
                None if spec.needs_trained_model() => bail!("scorer '{}' needs a `model` file outside a pipeline run", spec.name),
                None => None,
            };
            let scorer = spec.open(model)?;
            spec.handle(scorer, permutations, seed::derive_str(base_seed, &format!("permutations:{}", spec.name)))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { corpus, lexicon, min_rate, out } => {
            let text = read_or(&corpus, bundled::MINI_CORPUS)?;
            let lex = read_or(&lexicon, bundled::LEXICON)?;
            let lex: Vec<&str> = lex.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            let vocab = build_vocabulary(text.lines().flat_map(corpus_tokens), &lex, min_rate)?;
            write_with(&out, |b| vocab.write_tsv(b))?;
            log::info!("{} words", vocab.len());
        }
        Command::FilterSentences { vocab, input, blocklist, out } => {
            let vocab = Vocabulary::load(&vocab)?;
            let raw = read_or(&input, bundled::MINI_POOL)?;
            let block = Blocklist::parse(&read_or(&blocklist, bundled::BLOCKLIST)?);
            let pool = filter_sentences(raw.lines(), &vocab, &block);
            write_with(&out, |b| pool.write_tsv(b))?;
            log::info!("{} sentences", pool.len());
        }
        Command::TrainNgram { vocab, corpus, order, discount, out } => {
            let vocab = Vocabulary::load(&vocab)?;
            let text = read_or(&corpus, bundled::MINI_CORPUS)?;
            let m = train_ngram(text.lines(), order, &vocab, discount)?;
            write_with(&out, |b| m.save(b, &vocab.fingerprint()))?;
        }
        Command::Score { scorers, sentences, permutations, seed: s, out, ranks_out } => {
            let handles = open_roster(&Roster::load(&scorers)?, permutations, s)?;
            let pool = SentencePool::load(&sentences)?;
            let m = score_sentences(&handles, &pool.sentences)?;
            write_with(&out, |b| m.write_tsv(b))?;
            if let Some(r) = ranks_out {
                write_with(&r, |b| m.to_ranks().write_tsv(b))?;
            }
        }
        Command::SelectNatural { ranks, pool, pairs_per_model_pair, repeatable, out } => {
            let table = ScoreMatrix::<f64>::load(&ranks)?;
            let is_rank = table.values.iter().flatten().all(|&v| (0.0..=1.0).contains(&v));
            let ranks = if is_rank { table } else { table.to_ranks() };
            let pool = SentencePool::load(&pool)?;
            let rep = RepeatableWords::parse(&read_or(&repeatable, bundled::REPEATABLE_WORDS)?);
            let m = &ranks.scorers;
            let pairs: Vec<(String, String)> = (0..m.len()).flat_map(|a| (a + 1..m.len()).map(move |b| (m[a].clone(), m[b].clone()))).collect();
            let sel = stages::select_natural(&pool, &ranks, &pairs, pairs_per_model_pair, &rep)?;
            write_atomic(&out, &stages::selection_table(&sel).to_bytes())?;
            log::info!("objective {:.4} ({:?})", sel.objective_value, sel.optimality);
        }
        Command::Synthesize { scorers, m1, m2, starts, vocab, repeatable, permutations, seed: s, out } => {
            let handles = open_roster(&Roster::load(&scorers)?, permutations, s)?;
            let get = |n: &str| handles.iter().find(|h| h.name() == n).ok_or_else(|| anyhow!("no scorer named '{n}' in the roster"));
            let starts = SentencePool::load(&starts)?;
            let words: Vec<String> = Vocabulary::load(&vocab)?.words().map(String::from).collect();
            let rep = RepeatableWords::parse(&read_or(&repeatable, bundled::REPEATABLE_WORDS)?);
            let cfg = SynthesisConfig { seed: s, ..SynthesisConfig::default() };
            let triplets = stages::synthesize_candidates(&starts.sentences, get(&m1)?, get(&m2)?, &words, &rep, &cfg)?;
            write_json(&out, &triplets)?;
        }
        Command::SelectTriplets { candidates, k, out } => {
            let mut chosen: Vec<Triplet> = Vec::new();
            for f in &candidates {
                let c: Vec<Triplet> = serde_json::from_slice(&fs::read(f)?).with_context(|| format!("reading {}", f.display()))?;
                chosen.extend(stages::select_stratified(&c, k)?);
            }
            write_json(&out, &chosen)?;
        }
        Command::BuildExperiment { materials, groups, seed: s, out_dir } => {
            let m: Materials = serde_json::from_slice(&fs::read(&materials)?).context("reading materials")?;
            let sets = build_stimulus_sets(&m, groups, s)?;
            for set in &sets {
                let p = out_dir.join(set_file(set.group).trim_start_matches("sets/"));
                fs::create_dir_all(&out_dir)?;
                write_json(&p, set)?;
            }
        }
        Command::Serve { sets, listen, log, assets, time_limit_minutes } => {
            let store = SessionStore::open(load_sets(&sets)?, &log)?.with_time_limit(time_limit_minutes * 60_000);
            let state = AppState::new(store);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(contstim_server::serve(state, assets, &listen))?;
        }
        Command::Evaluate { sets, responses, scores, tokens, vocab, embeddings, fdr_q, no_quality_filter, time_limit_minutes, out_dir } => {
            let sets = load_sets(&sets)?;
            let sessions = read_response_log(&responses, &sets, time_limit_minutes * 60_000)?;
            let scores = ScoreMatrix::<f64>::load(&scores)?;
            let tokens = tokens.map(|t| ScoreMatrix::<f64>::load(&t)).transpose()?;
            let vocab = Vocabulary::load(&vocab)?;
            let emb = embeddings.map(|p| -> Result<Embeddings> { Ok(Embeddings::parse(&fs::read_to_string(p)?)?) }).transpose()?;
            let r = stages::evaluate_all(&sets, &sessions, &scores, tokens.as_ref(), &vocab, emb.as_ref(), fdr_q, !no_quality_filter)?;
            fs::create_dir_all(&out_dir)?;
            for (name, bytes) in stages::report_files(&r)? {
                write_atomic(&out_dir.join(name), &bytes)?;
            }
            for m in &r.alignment.models {
                println!("{m}\t{:.3}", r.alignment.mean_accuracy(m, "all").unwrap_or(f64::NAN));
            }
        }
        Command::ServeScorer { scorers, name, bundled_ngram, tcp } => {
            let scorer: Arc<dyn LanguageScorer> = match (scorers, bundled_ngram) {
                (Some(roster), _) => {
                    let roster = Roster::load(&roster)?;
                    let name = name.expect("clap requires a name");
                    let spec = roster.scorers.iter().find(|s| s.name == name).ok_or_else(|| anyhow!("no scorer named '{name}'"))?;
                    let model = spec.model.as_ref().map(|p| NgramModel::load_path(p).map(|m| Arc::new(m.0))).transpose()?;
                    spec.open(model)?
                }
                (None, Some(order)) => {
                    let m = bundled::ngram_model(order, &bundled::vocabulary());
                    Arc::new(NgramScorer::new(name.as_deref().unwrap_or(&format!("{order}-gram")), Arc::new(m)))
                }
                (None, None) => bail!("pass --scorers with --name, or --bundled-ngram"),
            };
            match tcp {
                Some(addr) => {
                    let l = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    log::info!("serving {} on {}", scorer.info().name, l.local_addr()?);
                    remote::serve_tcp(scorer, l)?;
                }
                None => remote::serve(scorer.as_ref(), BufReader::new(io::stdin().lock()), io::stdout().lock())?,
            }
        }
        Command::Run { config, stages } => {
            let cfg = RunConfig::load(&config)?;
            let mut runner = Runner::new(cfg)?;
            let s = runner.run(stages.as_deref())?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("ran: {}", names(&s.ran));
            println!("skipped: {}", names(&s.skipped));
        }
    }
    Ok(())
}
