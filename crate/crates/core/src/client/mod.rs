//! Site-side runtime: connect, join, train on each task, submit, and keep
//! reconnecting through server outages.

pub mod session;

use std::net::{Shutdown, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use session::{ClientSession, SessionStep, Work};

use crate::error::{Error, Result};
use crate::protocol::{write_message, MessageReader, TaskKind};
use crate::server::config::FederationConfig;
use crate::training::SiteTrainer;

/// Capped exponential reconnect delay. Retries never stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backoff {
    pub initial_seconds: f64,
    pub max_seconds: f64,
    pub multiplier: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { initial_seconds: 0.5, max_seconds: 30.0, multiplier: 2.0 }
    }
}

impl Backoff {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_seconds.is_finite()
            && self.initial_seconds > 0.0
            && self.max_seconds.is_finite()
            && self.initial_seconds <= self.max_seconds
            && self.multiplier.is_finite()
            && self.multiplier >= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "reconnect_backoff needs 0 < initial <= max and multiplier >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let grown = self.initial_seconds * self.multiplier.powi(attempt.min(1024) as i32);
        Duration::from_secs_f64(grown.min(self.max_seconds))
    }
}

/// How a site accounts for time spent on a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeModel {
    /// Wall-clock time, stretched by `multiplier` by sleeping out the
    /// difference, so a fast machine can stand in for a slower one.
    Wall { multiplier: f64 },
    /// A modelled cost of `base × multiplier`; nothing is slept.
    Simulated { train_base_seconds: f64, validate_base_seconds: f64, multiplier: f64 },
}

impl TimeModel {
    /// Runs `f` and returns its result with the seconds charged for it.
    pub fn measure<T>(&self, kind: TaskKind, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
        match *self {
            TimeModel::Wall { multiplier } => {
                let start = Instant::now();
                let out = f()?;
                let own = start.elapsed().as_secs_f64().max(1e-9);
                if multiplier > 1.0 {
                    thread::sleep(Duration::from_secs_f64(own * (multiplier - 1.0)));
                }
                Ok((out, own * multiplier))
            }
            TimeModel::Simulated { train_base_seconds, validate_base_seconds, multiplier } => {
                let base = match kind {
                    TaskKind::Train => train_base_seconds,
                    TaskKind::Validate => validate_base_seconds,
                };
                Ok((f()?, base * multiplier))
            }
        }
    }
}

/// Seconds charged for one round of local training: wall-clock around the
/// trainer in real mode, the trainer's work estimate times the multiplier in
/// simulated mode.
pub fn measure_train_time(
    trainer: &mut SiteTrainer,
    round: u64,
    global: &crate::params::ParameterVector,
    simulated: bool,
    multiplier: f64,
) -> Result<f64> {
    if simulated {
        let base = trainer.tcfg.work_estimate_seconds(&trainer.train);
        trainer.train_round(round, global)?;
        return Ok(base * multiplier);
    }
    let start = Instant::now();
    trainer.train_round(round, global)?;
    Ok(start.elapsed().as_secs_f64().max(1e-9) * multiplier)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub site_name: String,
    pub server_address: String,
    pub data_seed: u64,
    pub site_index: usize,
    #[serde(default = "one")]
    pub compute_multiplier: f64,
    #[serde(default)]
    pub reconnect_backoff: Backoff,
}

fn one() -> f64 {
    1.0
}

impl ClientConfig {
    /// Client settings for `site` as described by the federation config.
    pub fn for_site(fed: &FederationConfig, site: &str, server_address: impl Into<String>) -> Result<Self> {
        let site_index = fed
            .site_index(site)
            .ok_or_else(|| Error::Config(format!("site {site:?} is not listed in the federation config")))?;
        Ok(Self {
            site_name: site.to_string(),
            server_address: server_address.into(),
            data_seed: fed.trainer.seed,
            site_index,
            compute_multiplier: 1.0,
            reconnect_backoff: Backoff::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.compute_multiplier.is_finite() && self.compute_multiplier > 0.0) {
            return Err(Error::Config(format!("compute_multiplier must be > 0, got {}", self.compute_multiplier)));
        }
        self.reconnect_backoff.validate()
    }

    pub fn trainer(&self, fed: &FederationConfig) -> Result<SiteTrainer> {
        let mut tcfg = fed.trainer;
        tcfg.seed = self.data_seed;
        SiteTrainer::generate(&self.site_name, self.site_index, &fed.heterogeneity, tcfg, fed.algorithm)
    }
}

/// Runs the site until the server ends the experiment. Returns `Ok` on
/// `experiment_done` and `Aborted` on an abort; a rejected join is a
/// `Config` error. Connection failures are retried forever.
pub fn run_client(cfg: &ClientConfig, fed: &FederationConfig) -> Result<()> {
    cfg.validate()?;
    let mut session = ClientSession::new(cfg.trainer(fed)?);
    let time = TimeModel::Wall { multiplier: cfg.compute_multiplier };
    loop {
        let stream = connect(cfg);
        match serve(&mut session, stream, &time)? {
            Some(end) => return end,
            None => info!("{}: connection lost, reconnecting", cfg.site_name),
        }
    }
}

fn connect(cfg: &ClientConfig) -> TcpStream {
    let mut attempt = 0;
    loop {
        match TcpStream::connect(&cfg.server_address) {
            Ok(s) => return s,
            Err(e) => {
                let delay = cfg.reconnect_backoff.delay(attempt);
                if attempt == 0 {
                    warn!("{}: cannot reach {}: {e}; retrying", cfg.site_name, cfg.server_address);
                }
                thread::sleep(delay);
                attempt = attempt.saturating_add(1);
            }
        }
    }
}

/// Talks to the server over one connection. `Ok(None)` means the link
/// dropped and the caller should reconnect.
fn serve(session: &mut ClientSession, stream: TcpStream, time: &TimeModel) -> Result<Option<Result<()>>> {
    let _ = stream.set_nodelay(true);
    let Ok(mut writer) = stream.try_clone() else { return Ok(None) };
    let mut reader = MessageReader::new(stream);
    if write_message(&mut writer, &session.join_request()).is_err() {
        return Ok(None);
    }
    loop {
        let msg = match reader.read_message() {
            Ok(Some(msg)) => msg,
            Ok(None) | Err(Error::Io(_)) => return Ok(None),
            Err(e) => {
                warn!("{}: bad frame from server: {e}", session.site());
                let _ = writer.shutdown(Shutdown::Both);
                return Ok(None);
            }
        };
        let reply = match session.on_message(msg)? {
            SessionStep::Idle => None,
            SessionStep::Work(work) => session.perform(&work, time)?,
            SessionStep::Resend(m) => Some(m),
            SessionStep::Finished => return Ok(Some(Ok(()))),
            SessionStep::Aborted(reason) => return Ok(Some(Err(Error::Aborted(reason)))),
        };
        if let Some(m) = reply {
            if write_message(&mut writer, &m).is_err() {
                return Ok(None);
            }
        }
    }
}
