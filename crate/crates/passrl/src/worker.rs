//! The worker executable: registers with the manager, pulls tasks one at
//! a time, runs optimize+benchmark through its backend, and reports
//! results. Reconnects with exponential backoff and heartbeats while
//! busy so the manager's failure detector stays quiet.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::env::{execute_task, Backend, Task, TaskKind};
use crate::protocol::{
    read_frame, write_frame, Message, MessageKind, ProtocolError, PROTOCOL_VERSION,
};

#[derive(Clone, Debug)]
pub struct WorkerConfig {
    /// Manager endpoint `host:port`.
    pub manager: String,
    pub worker_id: String,
    pub heartbeat_secs: u64,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    /// Delay before re-requesting work after an idle reply.
    pub idle_wait_ms: u64,
}

impl WorkerConfig {
    pub fn new(manager: impl Into<String>) -> Self {
        Self {
            manager: manager.into(),
            worker_id: format!("worker-{}", std::process::id()),
            heartbeat_secs: 10,
            backoff_initial_ms: 500,
            backoff_max_ms: 30_000,
            idle_wait_ms: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("manager refused connection: {0}")]
    Refused(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

enum SessionEnd {
    /// Manager asked us to stop; exit the loop cleanly.
    Shutdown,
    /// Connection failed; reconnect with backoff.
    Lost,
}

/// Run until the manager sends `shutdown` or `stop` flips. IR bodies are
/// cached by content hash per process, so repeat tasks travel light.
pub fn worker_loop(
    config: &WorkerConfig,
    backend: Arc<dyn Backend>,
    stop: &AtomicBool,
) -> Result<(), WorkerError> {
    let mut backoff = Duration::from_millis(config.backoff_initial_ms);
    let mut ir_cache: HashMap<String, String> = HashMap::new();
    while !stop.load(Ordering::Relaxed) {
        match connect_and_serve(config, backend.as_ref(), stop, &mut ir_cache) {
            Ok(SessionEnd::Shutdown) => return Ok(()),
            Ok(SessionEnd::Lost) | Err(WorkerError::Protocol(_)) => {
                log::warn!(
                    "worker {}: connection to {} lost, retrying in {:?}",
                    config.worker_id,
                    config.manager,
                    backoff
                );
                interruptible_sleep(backoff, stop);
                backoff = (backoff * 2).min(Duration::from_millis(config.backoff_max_ms));
            }
            Err(refused @ WorkerError::Refused(_)) => return Err(refused),
        }
    }
    Ok(())
}

fn interruptible_sleep(total: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(50);
    let mut remaining = total;
    while remaining > Duration::ZERO && !stop.load(Ordering::Relaxed) {
        let chunk = remaining.min(step);
        std::thread::sleep(chunk);
        remaining = remaining.saturating_sub(chunk);
    }
}

fn connect_and_serve(
    config: &WorkerConfig,
    backend: &dyn Backend,
    stop: &AtomicBool,
    ir_cache: &mut HashMap<String, String>,
) -> Result<SessionEnd, WorkerError> {
    let stream = match TcpStream::connect(&config.manager) {
        Ok(s) => s,
        Err(_) => return Ok(SessionEnd::Lost),
    };
    stream.set_nodelay(true).ok();
    let reader_stream = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return Ok(SessionEnd::Lost),
    };
    let mut reader = BufReader::new(reader_stream);
    let writer = Arc::new(Mutex::new(BufWriter::new(stream)));

    let send = |msg: &Message| -> Result<(), ProtocolError> {
        write_frame(&mut *writer.lock().unwrap(), msg)
    };

    send(&Message::new(MessageKind::Hello).with("worker", &config.worker_id))?;
    let ack = read_frame(&mut reader)?;
    match ack.kind {
        MessageKind::Hello => {
            let peer = ack.protocol_version;
            if peer != PROTOCOL_VERSION {
                return Err(WorkerError::Refused(format!(
                    "protocol version mismatch (manager {peer}, worker {PROTOCOL_VERSION})"
                )));
            }
        }
        MessageKind::Shutdown => {
            return Err(WorkerError::Refused(
                ack.get("reason").unwrap_or("manager refused hello").to_string(),
            ));
        }
        other => {
            return Err(WorkerError::Refused(format!(
                "unexpected hello reply `{}`",
                other.name()
            )))
        }
    }

    // Heartbeats flow from a side thread so long benchmarks do not
    // silence us; the shared writer lock keeps frames whole.
    let beat_stop = Arc::new(AtomicBool::new(false));
    {
        let writer = writer.clone();
        let beat_stop = beat_stop.clone();
        let period = Duration::from_secs(config.heartbeat_secs.max(1));
        std::thread::spawn(move || {
            let step = Duration::from_millis(100);
            let mut since_beat = Duration::ZERO;
            while !beat_stop.load(Ordering::Relaxed) {
                std::thread::sleep(step);
                since_beat += step;
                if since_beat >= period {
                    since_beat = Duration::ZERO;
                    let beat = Message::new(MessageKind::Heartbeat);
                    if write_frame(&mut *writer.lock().unwrap(), &beat).is_err() {
                        break;
                    }
                }
            }
        });
    }
    let finish = |end: SessionEnd| {
        beat_stop.store(true, Ordering::Relaxed);
        Ok(end)
    };

    loop {
        if stop.load(Ordering::Relaxed) {
            let _ = send(&Message::new(MessageKind::Shutdown).with("reason", "worker stopping"));
            return finish(SessionEnd::Shutdown);
        }
        if send(&Message::new(MessageKind::TaskRequest)).is_err() {
            return finish(SessionEnd::Lost);
        }
        let reply = loop {
            match read_frame(&mut reader) {
                Ok(msg) => match msg.kind {
                    // Manager heartbeat doubles as "no work yet".
                    MessageKind::Heartbeat => break None,
                    MessageKind::Task => break Some(msg),
                    MessageKind::Shutdown => return finish(SessionEnd::Shutdown),
                    other => {
                        log::warn!("worker: ignoring unexpected `{}` frame", other.name());
                    }
                },
                Err(_) => return finish(SessionEnd::Lost),
            }
        };
        let Some(task_msg) = reply else {
            interruptible_sleep(Duration::from_millis(config.idle_wait_ms), stop);
            continue;
        };

        let mut task = match crate::protocol::message_to_task(&task_msg) {
            Ok(task) => task,
            Err(e) => {
                log::error!("worker: malformed task frame: {e}");
                continue;
            }
        };
        hydrate_ir_body(&mut task, ir_cache);
        let result = execute_task(backend, &task, &config.worker_id);
        remember_ir_bodies(&task, &result, ir_cache);
        if send(&crate::protocol::result_to_message(&result)).is_err() {
            return finish(SessionEnd::Lost);
        }
    }
}

/// Fill a transition task's body from the local content cache when the
/// manager elided it.
fn hydrate_ir_body(task: &mut Task, ir_cache: &HashMap<String, String>) {
    if let TaskKind::Transition { ir_id, ir_body, .. } = &mut task.kind {
        if ir_body.is_none() {
            *ir_body = ir_cache.get(&ir_id.to_hex()).cloned();
        }
    }
}

fn remember_ir_bodies(
    task: &Task,
    result: &crate::env::TaskResult,
    ir_cache: &mut HashMap<String, String>,
) {
    use crate::env::TaskOutcome;
    if let TaskKind::Transition { ir_id, ir_body: Some(body), .. } = &task.kind {
        ir_cache.insert(ir_id.to_hex(), body.clone());
    }
    if let TaskOutcome::Transition { result_ir, .. } = &result.outcome {
        let artifact = crate::state::IrArtifact::base(result_ir);
        ir_cache.insert(artifact.id.to_hex(), artifact.body);
    }
}
