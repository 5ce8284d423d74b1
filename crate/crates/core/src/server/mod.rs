//! The aggregator: configuration, checkpoints, the round coordinator and a
//! TCP driver for it.

pub mod checkpoint;
pub mod config;
pub mod coordinator;

use std::collections::BTreeMap;
use std::io::{self, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

pub use checkpoint::{resume_from_checkpoint, Checkpoint, CheckpointStore, FileCheckpointStore, MemoryCheckpointStore};
pub use config::{FederationConfig, LossPolicy, SiteSpec};
pub use coordinator::{
    handle_client_loss, AggregationTiming, ConnId, Coordinator, CoordinatorOptions, LossDecision, Phase, RoundState,
    ServerAction, ServerEvent,
};

use crate::error::{Error, Result};
use crate::metrics::ExperimentReport;
use crate::protocol::{write_message, MessageReader};

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Continue from the configured checkpoint instead of starting fresh.
    pub resume: bool,
    pub startup_timeout: Option<Duration>,
    /// Test hook: stop right after checkpointing this round.
    pub halt_after_round: Option<u64>,
}

enum Inbound {
    Connected(ConnId, TcpStream),
    Event(ServerEvent),
}

const POLL: Duration = Duration::from_millis(20);
const WRITE_TIMEOUT: Duration = Duration::from_secs(30);

/// Runs a whole experiment on `listener` and returns its report.
///
/// Every connection gets a reader thread; the coordinator runs on the
/// calling thread and never blocks on a socket read.
pub fn run_experiment(cfg: FederationConfig, listener: TcpListener, opts: ServerOptions) -> Result<ExperimentReport> {
    let copts = CoordinatorOptions {
        aggregation: AggregationTiming::Measured,
        startup_timeout: opts.startup_timeout,
        halt_after_round: opts.halt_after_round,
    };
    let store = Box::new(FileCheckpointStore::new(cfg.checkpoint_path.clone()));
    let mut coord = if opts.resume {
        Coordinator::resume(cfg, store, copts, Duration::ZERO)?
    } else {
        Coordinator::new(cfg, store, copts, Duration::ZERO)?
    };

    let clock = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    listener.set_nonblocking(true)?;
    let acceptor = {
        let stop = stop.clone();
        let tx = tx.clone();
        thread::spawn(move || accept_loop(listener, tx, stop))
    };
    drop(tx);

    let mut writers: BTreeMap<ConnId, BufWriter<TcpStream>> = BTreeMap::new();
    while !coord.is_finished() {
        let event = match rx.recv_timeout(POLL) {
            Ok(Inbound::Connected(conn, stream)) => {
                writers.insert(conn, BufWriter::new(stream));
                continue;
            }
            Ok(Inbound::Event(e)) => e,
            Err(RecvTimeoutError::Timeout) => ServerEvent::Tick,
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Io(io::Error::other("connection acceptor stopped")))
            }
        };
        let actions = coord.handle(event, clock.elapsed());
        for action in actions {
            match action {
                ServerAction::Send { conn, msg, .. } => {
                    let Some(w) = writers.get_mut(&conn) else { continue };
                    if let Err(e) = write_message(w, &msg) {
                        // The reader thread reports the disconnect.
                        warn!("send to connection {conn} failed: {e}");
                        let _ = w.get_ref().shutdown(Shutdown::Both);
                    }
                }
                ServerAction::Close { conn } => {
                    if let Some(w) = writers.remove(&conn) {
                        let _ = w.get_ref().shutdown(Shutdown::Both);
                    }
                }
            }
        }
    }

    stop.store(true, Ordering::SeqCst);
    for (_, w) in writers {
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
    let _ = acceptor.join();

    if let Some(e) = coord.take_fatal() {
        return Err(e);
    }
    if matches!(coord.phase(), Phase::Halted) {
        return Err(Error::Aborted(format!("halted: {}", coord.blocked_on())));
    }
    coord.report()
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next: ConnId = 0;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let conn = next;
                next += 1;
                debug!("connection {conn} from {peer}");
                if let Err(e) = spawn_reader(conn, stream, &tx) {
                    warn!("could not set up connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn spawn_reader(conn: ConnId, stream: TcpStream, tx: &Sender<Inbound>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let writer = stream.try_clone()?;
    if tx.send(Inbound::Connected(conn, writer)).is_err() {
        return Ok(());
    }
    let tx = tx.clone();
    thread::spawn(move || {
        let mut reader = MessageReader::new(stream);
        loop {
            match reader.read_message() {
                Ok(Some(msg)) => {
                    if tx.send(Inbound::Event(ServerEvent::Message { conn, msg })).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    warn!("connection {conn}: {e}");
                    let _ = reader.get_ref().shutdown(Shutdown::Both);
                    break;
                }
            }
        }
        let _ = tx.send(Inbound::Event(ServerEvent::Disconnected { conn }));
    });
    Ok(())
}
