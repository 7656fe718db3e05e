//! Remote scorer wire protocol.
//!
//! Messages are single-line JSON records. A request is
//! `{"id": N, "op": "...", "payload": {...}}`; a response echoes the id and
//! carries either `result` or `error_code` plus `message`.
//!
//! | op                 | payload                                         | result                         |
//! |--------------------|-------------------------------------------------|--------------------------------|
//! | `info`             | `{}`                                            | name, kind, convention, size, capabilities |
//! | `tokenize`         | `{word}`                                        | `{tokens}`                     |
//! | `uni_next_logprob` | `{prefix, word}` or `{prefix, words}`           | `{logprob}` or `{logprobs}`    |
//! | `masked_logprob`   | `{template, position, token, class}` or `{queries: [...]}` | `{logprob}` or `{logprobs}` |
//! | `masked_topk`      | `{template, position, class, k}`                | `{tokens: [{token, logprob}]}` |
//! | `masked_extremes`  | `{template, position, class}`                   | `{argmax, argmin}`             |
//!
//! Templates are token lists with `null` for a mask.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Capabilities, Extremes, LanguageScorer, MaskClass, MaskedQuery, Result, ScoreError, ScorerInfo, ScorerKind, TokenScore,
    Transport, WhitespaceConvention,
};

pub mod error_code {
    pub const BAD_REQUEST: &str = "bad_request";
    pub const UNKNOWN_OP: &str = "unknown_op";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const INPUT: &str = "input_error";
    pub const INTERNAL: &str = "internal";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Ok { id: u64, result: Value },
    Err { id: Option<u64>, error_code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRecord {
    pub name: String,
    pub kind: ScorerKind,
    pub whitespace_convention: WhitespaceConvention,
    pub token_inventory_size: usize,
    pub capabilities: Capabilities,
}

#[derive(Deserialize)]
struct TokenizePayload {
    word: String,
}

#[derive(Deserialize)]
struct UniPayload {
    prefix: Vec<String>,
    word: Option<String>,
    words: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct SlotPayload {
    template: Vec<Option<String>>,
    position: usize,
    #[serde(default = "whole_word")]
    class: MaskClass,
    k: Option<usize>,
}

fn whole_word() -> MaskClass {
    MaskClass::WholeWord
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaskedPayload {
    Batch { queries: Vec<MaskedQuery> },
    Single(MaskedQuery),
}

fn error_response(id: Option<u64>, code: &str, message: impl Into<String>) -> Response {
    Response::Err { id, error_code: code.to_string(), message: message.into() }
}

fn parse<T: for<'de> Deserialize<'de>>(payload: Value) -> std::result::Result<T, (String, String)> {
    serde_json::from_value(payload).map_err(|e| (error_code::BAD_REQUEST.to_string(), e.to_string()))
}

fn scorer_failure(e: ScoreError) -> (String, String) {
    let code = match &e {
        ScoreError::Capability { .. } => error_code::UNSUPPORTED,
        ScoreError::Input(_) => error_code::INPUT,
        _ => error_code::INTERNAL,
    };
    (code.to_string(), e.to_string())
}

fn dispatch(scorer: &dyn LanguageScorer, op: &str, payload: Value) -> std::result::Result<Value, (String, String)> {
    let info = scorer.info();
    match op {
        "info" => Ok(serde_json::to_value(InfoRecord {
            name: info.name.clone(),
            kind: info.kind,
            whitespace_convention: info.whitespace_convention,
            token_inventory_size: info.token_inventory_size,
            capabilities: info.capabilities,
        })
        .expect("info serializes")),
        "tokenize" => {
            let p: TokenizePayload = parse(payload)?;
            let tokens = scorer.tokenize(&p.word).map_err(scorer_failure)?;
            Ok(json!({ "tokens": tokens }))
        }
        "uni_next_logprob" => {
            let p: UniPayload = parse(payload)?;
            match (p.word, p.words) {
                (Some(w), None) => {
                    let lp = scorer.next_word_logprobs(&p.prefix, &[w]).map_err(scorer_failure)?;
                    Ok(json!({ "logprob": lp[0] }))
                }
                (None, Some(ws)) => {
                    let lps = scorer.next_word_logprobs(&p.prefix, &ws).map_err(scorer_failure)?;
                    Ok(json!({ "logprobs": lps }))
                }
                _ => Err((error_code::BAD_REQUEST.into(), "exactly one of 'word' or 'words' is required".into())),
            }
        }
        "masked_logprob" => match parse::<MaskedPayload>(payload)? {
            MaskedPayload::Batch { queries } => {
                let lps = scorer.masked_logprobs(&queries).map_err(scorer_failure)?;
                Ok(json!({ "logprobs": lps }))
            }
            MaskedPayload::Single(q) => {
                let lps = scorer.masked_logprobs(std::slice::from_ref(&q)).map_err(scorer_failure)?;
                Ok(json!({ "logprob": lps[0] }))
            }
        },
        "masked_topk" => {
            let p: SlotPayload = parse(payload)?;
            let k = p.k.ok_or_else(|| (error_code::BAD_REQUEST.to_string(), "missing field `k`".to_string()))?;
            let tokens = scorer.masked_topk(&p.template, p.position, p.class, k).map_err(scorer_failure)?;
            Ok(json!({ "tokens": tokens }))
        }
        "masked_extremes" => {
            let p: SlotPayload = parse(payload)?;
            let e = scorer.masked_extremes(&p.template, p.position, p.class).map_err(scorer_failure)?;
            Ok(serde_json::to_value(e).expect("extremes serialize"))
        }
        other => Err((error_code::UNKNOWN_OP.into(), format!("unknown op '{other}'"))),
    }
}

/// Answers one request line.
pub fn handle_line(scorer: &dyn LanguageScorer, line: &str) -> Response {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_response(None, error_code::BAD_REQUEST, format!("malformed record: {e}")),
    };
    let id = value.get("id").and_then(Value::as_u64);
    let req: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return error_response(id, error_code::BAD_REQUEST, format!("malformed request: {e}")),
    };
    match dispatch(scorer, &req.op, req.payload) {
        Ok(result) => Response::Ok { id: req.id, result },
        Err((code, message)) => error_response(Some(req.id), &code, message),
    }
}

/// Serves requests from `reader` until end of input, one response line per
/// request line, in arrival order.
pub fn serve<R: BufRead, W: Write>(scorer: &dyn LanguageScorer, reader: R, mut writer: W) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(scorer, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts TCP connections forever, one thread per connection.
pub fn serve_tcp(scorer: Arc<dyn LanguageScorer>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let scorer = Arc::clone(&scorer);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    log::warn!("dropping connection: {e}");
                    return;
                }
            };
            if let Err(e) = serve(scorer.as_ref(), reader, stream) {
                log::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

/// Lines of child stderr kept for launch diagnostics.
const STDERR_TAIL: usize = 20;

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side: a scorer living in another process.
pub struct RemoteScorer {
    info: ScorerInfo,
    conn: Mutex<Connection>,
    next_id: AtomicU64,
    tokens: Mutex<HashMap<String, Vec<String>>>,
}

impl RemoteScorer {
    /// Launches `program args...` and talks to it over its standard streams.
    /// The child's stderr is forwarded to the log; if the handshake fails,
    /// its last lines and exit status are folded into the error.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ScoreError::Transport(format!("cannot launch '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let tail = Arc::new(Mutex::new(Vec::<String>::new()));
        let sink = Arc::clone(&tail);
        let name = program.to_string();
        let drain = std::thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(io::Result::ok) {
                log::warn!("[{name}] {line}");
                let mut t = sink.lock().expect("stderr tail");
                t.push(line);
                if t.len() > STDERR_TAIL {
                    t.remove(0);
                }
            }
        });
        let conn = Connection { reader: Box::new(BufReader::new(stdout)), writer: Box::new(stdin), child: Some(child) };
        Self::handshake(conn).map_err(|e| {
            // The child is gone by now (its stdout closed), so the drain
            // thread finishes once the pipe empties.
            let _ = drain.join();
            let lines = tail.lock().expect("stderr tail").join("\n");
            if lines.is_empty() {
                e
            } else {
                ScoreError::Transport(format!("'{program}' failed during handshake: {e}; stderr:\n{lines}"))
            }
        })
    }

    /// Launches a whitespace-separated command line.
    pub fn spawn_command(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| ScoreError::Input("empty scorer command".into()))?;
        Self::spawn(&program, &parts.collect::<Vec<_>>())
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| ScoreError::Transport(e.to_string()))?;
        let reader = stream.try_clone().map_err(|e| ScoreError::Transport(e.to_string()))?;
        Self::handshake(Connection { reader: Box::new(BufReader::new(reader)), writer: Box::new(stream), child: None })
    }

    /// Wraps arbitrary streams, e.g. an in-memory pipe in tests.
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Result<Self> {
        Self::handshake(Connection { reader: Box::new(reader), writer: Box::new(writer), child: None })
    }

    fn handshake(conn: Connection) -> Result<Self> {
        let placeholder = ScorerInfo {
            name: "remote".into(),
            kind: ScorerKind::Bidirectional,
            transport: Transport::Remote,
            whitespace_convention: WhitespaceConvention::None,
            capabilities: Capabilities::default(),
            token_inventory_size: 0,
        };
        let mut s = Self { info: placeholder, conn: Mutex::new(conn), next_id: AtomicU64::new(1), tokens: Mutex::new(HashMap::new()) };
        let rec: InfoRecord = serde_json::from_value(s.call("info", json!({}))?)
            .map_err(|e| ScoreError::Protocol(format!("bad info record: {e}")))?;
        s.info = ScorerInfo {
            name: rec.name,
            kind: rec.kind,
            transport: Transport::Remote,
            whitespace_convention: rec.whitespace_convention,
            capabilities: rec.capabilities,
            token_inventory_size: rec.token_inventory_size,
        };
        s.info.validate()?;
        Ok(s)
    }

    /// Renames the scorer locally (the roster name may differ from the
    /// name the process reports).
    pub fn with_name(mut self, name: &str) -> Self {
        self.info.name = name.to_string();
        self
    }

    fn call(&self, op: &str, payload: Value) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = Request { id, op: op.to_string(), payload };
        let mut conn = self.conn.lock().expect("connection lock");
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| ScoreError::Transport(format!("send failed: {e}")))?;
        loop {
            let mut buf = String::new();
            let n = conn.reader.read_line(&mut buf).map_err(|e| ScoreError::Transport(format!("receive failed: {e}")))?;
            if n == 0 {
                return Err(ScoreError::Transport("scorer closed the connection".into()));
            }
            let resp: Response =
                serde_json::from_str(buf.trim()).map_err(|e| ScoreError::Protocol(format!("unreadable response: {e}")))?;
            match resp {
                Response::Ok { id: rid, result } if rid == id => return Ok(result),
                Response::Err { id: rid, error_code, message } if rid == Some(id) || rid.is_none() => {
                    return Err(match error_code.as_str() {
                        error_code::UNSUPPORTED => ScoreError::Capability { scorer: self.info.name.clone(), op: static_op(op) },
                        error_code::INPUT => ScoreError::Input(message),
                        _ => ScoreError::Protocol(format!("{error_code}: {message}")),
                    });
                }
                other => log::warn!("ignoring response for another request: {other:?}"),
            }
        }
    }

    fn field<T: for<'de> Deserialize<'de>>(v: Value, name: &str) -> Result<T> {
        let f = v.get(name).cloned().ok_or_else(|| ScoreError::Protocol(format!("response lacks '{name}'")))?;
        serde_json::from_value(f).map_err(|e| ScoreError::Protocol(format!("bad '{name}': {e}")))
    }
}

fn static_op(op: &str) -> &'static str {
    match op {
        "tokenize" => "tokenize",
        "uni_next_logprob" => "uni_next_logprob",
        "masked_logprob" => "masked_logprob",
        "masked_topk" => "masked_topk",
        "masked_extremes" => "masked_extremes",
        _ => "info",
    }
}

impl LanguageScorer for RemoteScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>> {
        if !self.info.capabilities.uni_logprob {
            return Err(self.unsupported("uni_next_logprob"));
        }
        let v = self.call("uni_next_logprob", json!({ "prefix": prefix, "words": words }))?;
        let lps: Vec<f64> = Self::field(v, "logprobs")?;
        if lps.len() != words.len() {
            return Err(ScoreError::Protocol("logprob count does not match the request".into()));
        }
        Ok(lps)
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        if let Some(t) = self.tokens.lock().expect("token cache").get(word) {
            return Ok(t.clone());
        }
        let t: Vec<String> = Self::field(self.call("tokenize", json!({ "word": word }))?, "tokens")?;
        self.tokens.lock().expect("token cache").insert(word.to_string(), t.clone());
        Ok(t)
    }

    fn masked_logprobs(&self, queries: &[MaskedQuery]) -> Result<Vec<f64>> {
        if !self.info.capabilities.masked_logprob {
            return Err(self.unsupported("masked_logprob"));
        }
        let lps: Vec<f64> = Self::field(self.call("masked_logprob", json!({ "queries": queries }))?, "logprobs")?;
        if lps.len() != queries.len() {
            return Err(ScoreError::Protocol("logprob count does not match the request".into()));
        }
        Ok(lps)
    }

    fn masked_topk(&self, template: &[Option<String>], position: usize, class: MaskClass, k: usize) -> Result<Vec<TokenScore>> {
        let v = self.call("masked_topk", json!({ "template": template, "position": position, "class": class, "k": k }))?;
        Self::field(v, "tokens")
    }

    fn masked_extremes(&self, template: &[Option<String>], position: usize, class: MaskClass) -> Result<Extremes> {
        let v = self.call("masked_extremes", json!({ "template": template, "position": position, "class": class }))?;
        serde_json::from_value(v).map_err(|e| ScoreError::Protocol(format!("bad extremes: {e}")))
    }
}
