//! Protocol client for external classifiers (TCP, Unix socket or child process).

use super::protocol::{request_line, WireResponse};
use super::{Classifier, ClassifierOutput, GateError};
use crate::raster::GrayImage;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Requests on one connection are serialized behind a mutex; batches are
/// pipelined (all requests written, then responses collected by id).
pub struct RemoteClassifier {
    name: String,
    session: Mutex<Session>,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

fn pump<R: Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl RemoteClassifier {
    fn from_parts<R: Read + Send + 'static>(
        name: String,
        reader: R,
        writer: Box<dyn Write + Send>,
        timeout: Duration,
        child: Option<Child>,
    ) -> Self {
        RemoteClassifier {
            name,
            session: Mutex::new(Session { writer, lines: pump(reader), next_id: 1 }),
            timeout,
            child: child.map(Mutex::new),
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, GateError> {
        let stream = std::net::TcpStream::connect(addr).map_err(|e| GateError::BackendUnavailable(format!("tcp {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone().map_err(|e| GateError::BackendUnavailable(e.to_string()))?;
        Ok(Self::from_parts(format!("tcp:{addr}"), reader, Box::new(stream), timeout, None))
    }

    #[cfg(unix)]
    pub fn connect_unix(path: &std::path::Path, timeout: Duration) -> Result<Self, GateError> {
        let stream = std::os::unix::net::UnixStream::connect(path)
            .map_err(|e| GateError::BackendUnavailable(format!("unix {}: {e}", path.display())))?;
        let reader = stream.try_clone().map_err(|e| GateError::BackendUnavailable(e.to_string()))?;
        Ok(Self::from_parts(format!("unix:{}", path.display()), reader, Box::new(stream), timeout, None))
    }

    #[cfg(not(unix))]
    pub fn connect_unix(path: &std::path::Path, _timeout: Duration) -> Result<Self, GateError> {
        Err(GateError::BackendUnavailable(format!("unix sockets unsupported here: {}", path.display())))
    }

    /// Runs `program` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[&str], timeout: Duration) -> Result<Self, GateError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| GateError::BackendUnavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let name = std::iter::once(program).chain(args.iter().copied()).collect::<Vec<_>>().join(" ");
        Ok(Self::from_parts(format!("exec:{name}"), stdout, Box::new(stdin), timeout, Some(child)))
    }

    fn recv(&self, session: &Session) -> Result<WireResponse, GateError> {
        match session.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line)
                .map_err(|e| GateError::ProtocolViolation(format!("unparseable response: {e}"))),
            Ok(Err(e)) => Err(GateError::BackendUnavailable(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(GateError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(GateError::BackendUnavailable("connection closed".into())),
        }
    }
}

impl Drop for RemoteClassifier {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl Classifier for RemoteClassifier {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn classify(&self, image: &GrayImage, prompt: &str) -> Result<ClassifierOutput, GateError> {
        self.classify_batch(std::slice::from_ref(image), prompt).pop().expect("one result per image")
    }

    fn classify_batch(&self, images: &[GrayImage], prompt: &str) -> Vec<Result<ClassifierOutput, GateError>> {
        if images.is_empty() {
            return Vec::new();
        }
        let mut session = match self.session.lock() {
            Ok(s) => s,
            Err(_) => return images.iter().map(|_| Err(GateError::BackendUnavailable("session poisoned".into()))).collect(),
        };
        let first = session.next_id;
        session.next_id += images.len() as u64;

        let mut results: Vec<Option<Result<ClassifierOutput, GateError>>> = (0..images.len()).map(|_| None).collect();
        let mut pending = 0usize;
        for (i, image) in images.iter().enumerate() {
            let line = match request_line(first + i as u64, prompt, image) {
                Ok(l) => l,
                Err(e) => {
                    results[i] = Some(Err(e));
                    continue;
                }
            };
            let sent = session
                .writer
                .write_all(line.as_bytes())
                .and_then(|_| session.writer.write_all(b"\n"));
            if let Err(e) = sent {
                let msg = e.to_string();
                for slot in results.iter_mut().skip(i).filter(|r| r.is_none()) {
                    *slot = Some(Err(GateError::BackendUnavailable(msg.clone())));
                }
                break;
            }
            pending += 1;
        }
        if let Err(e) = session.writer.flush() {
            tracing::warn!("flush failed: {e}");
        }

        let mut by_id: HashMap<u64, usize> = (0..images.len())
            .filter(|&i| results[i].is_none())
            .map(|i| (first + i as u64, i))
            .collect();
        while pending > 0 {
            match self.recv(&session) {
                Ok(resp) => match by_id.remove(&resp.id) {
                    Some(i) => {
                        results[i] = Some(resp.into_output());
                        pending -= 1;
                    }
                    None => tracing::warn!(id = resp.id, "ignoring response with unexpected id"),
                },
                Err(e) => {
                    for (_, i) in by_id.drain() {
                        results[i] = Some(Err(match &e {
                            GateError::Timeout(t) => GateError::Timeout(*t),
                            GateError::ProtocolViolation(m) => GateError::ProtocolViolation(m.clone()),
                            other => GateError::BackendUnavailable(other.to_string()),
                        }));
                    }
                    break;
                }
            }
        }
        results
            .into_iter()
            .map(|r| r.unwrap_or_else(|| Err(GateError::BackendUnavailable("request not sent".into()))))
            .collect()
    }
}
