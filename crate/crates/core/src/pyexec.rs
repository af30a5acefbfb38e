//! Client for the Python execution sidecar.
//!
//! The sidecar is a child process speaking line-delimited JSON over stdio.
//! On startup it prints one handshake line `{"protocol": "pyexec/1"}`; after
//! that every request line gets exactly one response line, in order:
//!
//! ```text
//! -> {"id": 3, "program": "...", "table": {"headers": [...], "rows": [[...]]}, "timeout_ms": 10000}
//! <- {"id": 3, "status": "ok", "answer": "42"}
//! <- {"id": 3, "status": "error", "error_kind": "exception", "message": "..."}
//! <- {"id": 3, "status": "timeout", "message": "..."}
//! ```
//!
//! A response that does not parse, carries the wrong id, or never arrives
//! means the stream is out of sync: the client kills and restarts the
//! sidecar and retries the request once.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Table;
use crate::verify::ProgramExecutor;

pub const PROTOCOL_VERSION: &str = "pyexec/1";
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
/// Default extra wait beyond the request timeout before the client gives up
/// on the sidecar.
pub const GRACE_MS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PyExecError {
    #[error("could not start sidecar: {0}")]
    Spawn(String),
    #[error("sidecar handshake failed: {0}")]
    Handshake(String),
    #[error("sidecar protocol error: {0}")]
    Protocol(String),
    #[error("empty program")]
    EmptyProgram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl From<&Table> for WireTable {
    fn from(t: &Table) -> Self {
        Self {
            headers: t.headers().to_vec(),
            rows: t.rows().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub id: u64,
    pub program: String,
    pub table: WireTable,
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap_mb: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub id: u64,
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecResponse {
    fn validate(self) -> Result<Self, String> {
        match self.status {
            ExecStatus::Ok if self.answer.is_none() => Err("ok response without an answer".into()),
            ExecStatus::Error if self.error_kind.is_none() => Err("error response without error_kind".into()),
            _ => Ok(self),
        }
    }
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
}

/// How to launch a sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidecarCommand {
    pub program: String,
    pub args: Vec<String>,
    pub timeout_ms: u64,
    pub grace_ms: u64,
    pub memory_cap_mb: Option<u64>,
}

impl SidecarCommand {
    pub fn new(program: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            grace_ms: GRACE_MS,
            memory_cap_mb: None,
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn timeout_ms(mut self, ms: u64) -> Self {
        self.timeout_ms = ms;
        self
    }

    pub fn grace_ms(mut self, ms: u64) -> Self {
        self.grace_ms = ms;
        self
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Process {
    fn spawn(cmd: &SidecarCommand) -> Result<Self, PyExecError> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| PyExecError::Spawn(format!("{}: {e}", cmd.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut p = Self {
            child,
            stdin,
            lines: rx,
        };
        let first = p
            .read_line(Duration::from_millis(cmd.timeout_ms + cmd.grace_ms))
            .map_err(PyExecError::Handshake)?;
        let hs: Handshake = serde_json::from_str(&first)
            .map_err(|e| PyExecError::Handshake(format!("unreadable handshake {first:?}: {e}")))?;
        if hs.protocol != PROTOCOL_VERSION {
            p.kill();
            return Err(PyExecError::Handshake(format!(
                "sidecar speaks {}, expected {PROTOCOL_VERSION}",
                hs.protocol
            )));
        }
        Ok(p)
    }

    fn read_line(&mut self, wait: Duration) -> Result<String, String> {
        match self.lines.recv_timeout(wait) {
            Ok(l) => Ok(l),
            Err(RecvTimeoutError::Timeout) => Err("no response before the deadline".into()),
            Err(RecvTimeoutError::Disconnected) => Err("sidecar closed its output".into()),
        }
    }

    fn roundtrip(&mut self, req: &ExecRequest, grace_ms: u64) -> Result<ExecResponse, String> {
        let mut line = serde_json::to_vec(req).expect("request serializes");
        line.push(b'\n');
        self.stdin
            .write_all(&line)
            .and_then(|_| self.stdin.flush())
            .map_err(|e| format!("write failed: {e}"))?;
        let reply = self.read_line(Duration::from_millis(req.timeout_ms + grace_ms))?;
        let resp: ExecResponse =
            serde_json::from_str(&reply).map_err(|e| format!("unreadable response {reply:?}: {e}"))?;
        if resp.id != req.id {
            return Err(format!("response id {} for request {}", resp.id, req.id));
        }
        resp.validate()
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        self.kill();
    }
}

struct State {
    process: Option<Process>,
    next_id: u64,
    restarts: u32,
}

/// One sidecar process; requests on it are strictly sequential.
pub struct Sidecar {
    cmd: SidecarCommand,
    state: Mutex<State>,
}

impl Sidecar {
    /// Launch the sidecar and check its handshake.
    pub fn start(cmd: SidecarCommand) -> Result<Self, PyExecError> {
        let process = Process::spawn(&cmd)?;
        Ok(Self {
            cmd,
            state: Mutex::new(State {
                process: Some(process),
                next_id: 0,
                restarts: 0,
            }),
        })
    }

    /// Number of times the process was restarted after a desync.
    pub fn restarts(&self) -> u32 {
        self.state.lock().unwrap().restarts
    }

    pub fn execute(&self, program: &str, table: &Table) -> Result<ExecResponse, PyExecError> {
        if program.trim().is_empty() {
            return Err(PyExecError::EmptyProgram);
        }
        let mut st = self.state.lock().unwrap();
        let mut last = String::new();
        for _ in 0..2 {
            if st.process.is_none() {
                st.process = Some(Process::spawn(&self.cmd)?);
                st.restarts += 1;
            }
            st.next_id += 1;
            let req = ExecRequest {
                id: st.next_id,
                program: program.to_string(),
                table: table.into(),
                timeout_ms: self.cmd.timeout_ms,
                memory_cap_mb: self.cmd.memory_cap_mb,
            };
            match st.process.as_mut().unwrap().roundtrip(&req, self.cmd.grace_ms) {
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    tracing::warn!(error = %e, "sidecar out of sync; restarting");
                    last = e;
                    st.process = None;
                }
            }
        }
        Err(PyExecError::Protocol(last))
    }
}

/// A fixed set of sidecars shared by worker threads.
pub struct SidecarPool {
    sidecars: Vec<Sidecar>,
}

impl SidecarPool {
    pub fn start(cmd: &SidecarCommand, size: usize) -> Result<Self, PyExecError> {
        let sidecars = (0..size.max(1))
            .map(|_| Sidecar::start(cmd.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self { sidecars })
    }

    pub fn sidecars(&self) -> &[Sidecar] {
        &self.sidecars
    }

    fn pick(&self) -> &Sidecar {
        let i = rayon::current_thread_index().unwrap_or(0);
        &self.sidecars[i % self.sidecars.len()]
    }
}

fn outcome(resp: Result<ExecResponse, PyExecError>) -> Result<String, String> {
    match resp {
        Ok(r) => match r.status {
            ExecStatus::Ok => Ok(r.answer.unwrap_or_default()),
            ExecStatus::Error => Err(format!(
                "{}: {}",
                r.error_kind.unwrap_or_default(),
                r.message.unwrap_or_default()
            )),
            ExecStatus::Timeout => Err(format!("timeout: {}", r.message.unwrap_or_default())),
        },
        Err(e) => Err(e.to_string()),
    }
}

impl ProgramExecutor for Sidecar {
    fn execute(&self, program: &str, table: &Table) -> Result<String, String> {
        outcome(Sidecar::execute(self, program, table))
    }
}

impl ProgramExecutor for SidecarPool {
    fn execute(&self, program: &str, table: &Table) -> Result<String, String> {
        outcome(self.pick().execute(program, table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shapes() {
        let t = Table::new(None, vec!["a".into()], vec![vec!["1".into()]]).unwrap();
        let req = ExecRequest {
            id: 1,
            program: "42".into(),
            table: (&t).into(),
            timeout_ms: 10,
            memory_cap_mb: None,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":1,"program":"42","table":{"headers":["a"],"rows":[["1"]]},"timeout_ms":10}"#
        );
        let ok: ExecResponse = serde_json::from_str(r#"{"id":1,"status":"ok","answer":"42"}"#).unwrap();
        assert_eq!(outcome(Ok(ok)), Ok("42".into()));
        let err: ExecResponse =
            serde_json::from_str(r#"{"id":1,"status":"error","error_kind":"exception","message":"KeyError"}"#)
                .unwrap();
        assert_eq!(outcome(Ok(err)), Err("exception: KeyError".into()));
        let bad: ExecResponse = serde_json::from_str(r#"{"id":1,"status":"ok"}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_binary_is_a_spawn_error() {
        let e = Sidecar::start(SidecarCommand::new("/nonexistent/pyexec-sidecar")).err().unwrap();
        assert!(matches!(e, PyExecError::Spawn(_)));
    }
}
