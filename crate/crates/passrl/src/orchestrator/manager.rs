//! The manager's socket side: accepts worker connections, serves the
//! pull-based task queue, routes results to [`super::on_result`], and
//! requeues the in-flight tasks of workers that vanish.

use std::collections::{HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::env::{TaskKind, TaskResult};
use crate::protocol::{
    message_to_result, read_frame, shutdown_with_reason, task_to_message, write_frame, Message,
    MessageKind, PROTOCOL_VERSION,
};

use super::{Broker, OrchestratorError, RunContext};

pub struct ManagerHandle {
    ctx: Arc<RunContext>,
    queue: Mutex<VecDeque<u64>>,
    shutdown: AtomicBool,
    addr: SocketAddr,
    results_tx: Mutex<Option<Sender<TaskResult>>>,
    workers: AtomicUsize,
    join: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl ManagerHandle {
    /// Bind `listen` (e.g. `127.0.0.1:0` for an ephemeral port), start
    /// the acceptor and the result processor, and hand back the handle.
    pub fn start(ctx: Arc<RunContext>, listen: &str) -> Result<Arc<Self>, OrchestratorError> {
        let listener = TcpListener::bind(listen)
            .map_err(|source| OrchestratorError::Io { what: format!("bind {listen}"), source })?;
        listener
            .set_nonblocking(true)
            .map_err(|source| OrchestratorError::Io { what: "listener".into(), source })?;
        let addr = listener
            .local_addr()
            .map_err(|source| OrchestratorError::Io { what: "local addr".into(), source })?;
        let (tx, rx) = channel::<TaskResult>();
        let handle = Arc::new(Self {
            ctx,
            queue: Mutex::new(VecDeque::new()),
            shutdown: AtomicBool::new(false),
            addr,
            results_tx: Mutex::new(Some(tx)),
            workers: AtomicUsize::new(0),
            join: Mutex::new(Vec::new()),
        });

        let acceptor = {
            let handle = handle.clone();
            std::thread::spawn(move || {
                while !handle.shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            log::info!("worker connection from {peer}");
                            let handle = handle.clone();
                            std::thread::spawn(move || serve_worker(handle, stream));
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20));
                        }
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            std::thread::sleep(Duration::from_millis(100));
                        }
                    }
                }
            })
        };
        let processor = {
            let handle = handle.clone();
            std::thread::spawn(move || {
                let broker = Broker::Remote(handle.clone());
                for result in rx.iter() {
                    super::on_result(&handle.ctx, &broker, result);
                }
            })
        };
        handle.join.lock().unwrap().extend([acceptor, processor]);
        Ok(handle)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connected_workers(&self) -> usize {
        self.workers.load(Ordering::Relaxed)
    }

    pub(crate) fn enqueue(&self, id: u64) {
        self.queue.lock().unwrap().push_back(id);
    }

    /// Pop the next task that is still outstanding, skipping stale ids.
    fn pop_task(&self) -> Option<(crate::env::Task, u32)> {
        loop {
            let id = self.queue.lock().unwrap().pop_front()?;
            if let Some(entry) = self.ctx.shared.outstanding.lock().unwrap().get(&id) {
                return Some((entry.task.clone(), entry.attempts));
            }
        }
    }

    /// Return a dead worker's tasks to the queue (front, so retries run
    /// before fresh exploration work).
    fn requeue_inflight(&self, inflight: &[u64]) {
        let outstanding = self.ctx.shared.outstanding.lock().unwrap();
        let mut queue = self.queue.lock().unwrap();
        for &id in inflight {
            if outstanding.contains_key(&id) {
                queue.push_front(id);
            }
        }
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Relaxed);
        self.results_tx.lock().unwrap().take();
        let handles: Vec<_> = self.join.lock().unwrap().drain(..).collect();
        for handle in handles {
            let _ = handle.join();
        }
    }
}

fn serve_worker(handle: Arc<ManagerHandle>, stream: TcpStream) {
    stream.set_nodelay(true).ok();
    let Ok(reader_stream) = stream.try_clone() else { return };
    let mut reader = BufReader::new(reader_stream);
    let mut writer = BufWriter::new(stream);

    // Hello handshake with a short deadline.
    set_timeout(reader.get_ref(), Duration::from_secs(10));
    let hello = match read_frame(&mut reader) {
        Ok(msg) => msg,
        Err(e) => {
            let _ = write_frame(&mut writer, &shutdown_with_reason(&format!("protocol error: {e}")));
            return;
        }
    };
    if hello.kind != MessageKind::Hello {
        let _ = write_frame(
            &mut writer,
            &shutdown_with_reason(&format!("expected hello, got {}", hello.kind.name())),
        );
        return;
    }
    if hello.protocol_version != PROTOCOL_VERSION {
        let _ = write_frame(
            &mut writer,
            &shutdown_with_reason(&format!(
                "version mismatch: manager speaks {PROTOCOL_VERSION}"
            )),
        );
        return;
    }
    let worker_id = hello.get("worker").unwrap_or("anonymous").to_string();
    if write_frame(&mut writer, &Message::new(MessageKind::Hello)).is_err() {
        return;
    }

    handle.workers.fetch_add(1, Ordering::Relaxed);
    let results_tx = handle.results_tx.lock().unwrap().clone();
    let failure_timeout = Duration::from_secs(handle.ctx.config.manager.failure_timeout_secs);
    let mut known_ids: HashSet<String> = HashSet::new();
    let mut inflight: Vec<u64> = Vec::new();
    let mut last_seen = Instant::now();

    // Short poll on the header read keeps shutdown responsive; the
    // worker's heartbeats arrive well inside the failure timeout.
    set_timeout(reader.get_ref(), Duration::from_secs(1));
    loop {
        if handle.shutdown.load(Ordering::Relaxed) {
            let _ = write_frame(&mut writer, &shutdown_with_reason("manager stopping"));
            break;
        }
        let msg = match read_frame(&mut reader) {
            Ok(msg) => msg,
            Err(crate::protocol::ProtocolError::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if last_seen.elapsed() > failure_timeout {
                    log::warn!("worker {worker_id} silent for {failure_timeout:?}; dropping");
                    break;
                }
                continue;
            }
            Err(e) => {
                log::info!("worker {worker_id} disconnected: {e}");
                break;
            }
        };
        last_seen = Instant::now();
        match msg.kind {
            MessageKind::Heartbeat => {}
            MessageKind::Hello => {}
            MessageKind::TaskRequest => {
                let reply = match handle.pop_task() {
                    None => Message::new(MessageKind::Heartbeat),
                    Some((task, attempts)) => {
                        inflight.push(task.id);
                        let include_body = match &task.kind {
                            TaskKind::Transition { ir_id, .. } => {
                                attempts > 0 || known_ids.insert(ir_id.to_hex())
                            }
                            TaskKind::Baseline { .. } => true,
                        };
                        task_to_message(&task, include_body)
                    }
                };
                if write_frame(&mut writer, &reply).is_err() {
                    break;
                }
            }
            MessageKind::Result => match message_to_result(&msg) {
                Ok(result) => {
                    inflight.retain(|&id| id != result.task_id);
                    if let crate::env::TaskOutcome::Transition { result_ir, .. } =
                        &result.outcome
                    {
                        known_ids.insert(crate::state::IrArtifact::base(result_ir).id.to_hex());
                    }
                    if let Some(tx) = &results_tx {
                        if tx.send(result).is_err() {
                            break;
                        }
                    }
                }
                Err(e) => {
                    log::error!("worker {worker_id} sent a malformed result: {e}");
                    let _ = write_frame(
                        &mut writer,
                        &shutdown_with_reason(&format!("protocol error: {e}")),
                    );
                    break;
                }
            },
            MessageKind::Shutdown => {
                log::info!("worker {worker_id} leaving");
                break;
            }
            MessageKind::Task => {
                let _ = write_frame(
                    &mut writer,
                    &shutdown_with_reason("protocol error: workers do not send tasks"),
                );
                break;
            }
        }
    }
    let _ = writer.flush();
    handle.requeue_inflight(&inflight);
    handle.workers.fetch_sub(1, Ordering::Relaxed);
}

fn set_timeout(stream: &TcpStream, timeout: Duration) {
    stream.set_read_timeout(Some(timeout)).ok();
}
