//! Deterministic in-process federation on a virtual clock.
//!
//! The real coordinator and client sessions run over an in-memory
//! transport; every message still goes through the wire codec. Network
//! latency is zero, so the only sources of time are modelled compute
//! (`base_round_cost_seconds × multiplier` per site), aggregation, and
//! scripted faults.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::client::{Backoff, ClientConfig, ClientSession, SessionStep, TimeModel};
use crate::error::{Error, Result};
use crate::metrics::{self, speedup_percent, CrossScores, ExperimentReport, RoundRecord};
use crate::params::ParameterVector;
use crate::protocol::{decode, encode, Body, Message, TaskKind};
use crate::server::{
    AggregationTiming, CheckpointStore, ConnId, Coordinator, CoordinatorOptions, FederationConfig,
    MemoryCheckpointStore, ServerAction, ServerEvent,
};
use crate::training::{evaluate, generate_site_split, local_train, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Server,
    Client(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The process dies: in-memory state is lost.
    Crash,
    /// Links drop; the process keeps its state.
    Disconnect,
}

/// A fault fired when round `at_round` starts, right after its tasks went
/// out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub at_round: u64,
    pub target: FaultTarget,
    pub kind: FaultKind,
    /// How long the target stays away; `None` means for good.
    #[serde(default)]
    pub downtime_seconds: Option<f64>,
}

/// Simulator keys of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default)]
    pub site_multipliers: BTreeMap<String, f64>,
    pub base_round_cost_seconds: f64,
    #[serde(default)]
    pub aggregation_cost_seconds: f64,
    #[serde(default)]
    pub validation_cost_seconds: f64,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    /// Also train every site alone and score it on all sites.
    #[serde(default)]
    pub local_baselines: bool,
    #[serde(default)]
    pub reconnect_backoff: Backoff,
    /// Safety stop for runaway schedules.
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

fn default_max_events() -> u64 {
    5_000_000
}

impl SimSettings {
    pub fn new(base_round_cost_seconds: f64) -> Self {
        Self {
            site_multipliers: BTreeMap::new(),
            base_round_cost_seconds,
            aggregation_cost_seconds: 0.0,
            validation_cost_seconds: 0.0,
            faults: Vec::new(),
            local_baselines: false,
            reconnect_backoff: Backoff::default(),
            max_events: default_max_events(),
        }
    }
}

/// A federation plus its simulator settings. Scenario files are read
/// through [`crate::config::ConfigFile`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimScenario {
    pub federation: FederationConfig,
    #[serde(flatten)]
    pub settings: SimSettings,
}

impl SimScenario {
    pub fn new(federation: FederationConfig, settings: SimSettings) -> Result<Self> {
        let s = Self { federation, settings };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let s = &self.settings;
        for (site, m) in &s.site_multipliers {
            if self.federation.site_index(site).is_none() {
                return Err(Error::Config(format!("site_multipliers: unknown site {site:?}")));
            }
            if !(m.is_finite() && *m > 0.0) {
                return Err(Error::Config(format!("site_multipliers.{site} must be > 0, got {m}")));
            }
        }
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be >= 0, got {v}")))
            }
        };
        if !(s.base_round_cost_seconds.is_finite() && s.base_round_cost_seconds > 0.0) {
            return Err(Error::Config(format!(
                "base_round_cost_seconds must be > 0, got {}",
                s.base_round_cost_seconds
            )));
        }
        nonneg("aggregation_cost_seconds", s.aggregation_cost_seconds)?;
        nonneg("validation_cost_seconds", s.validation_cost_seconds)?;
        for f in &s.faults {
            if f.at_round >= self.federation.rounds {
                return Err(Error::Config(format!(
                    "faults: at_round {} is not below rounds {}",
                    f.at_round, self.federation.rounds
                )));
            }
            if let FaultTarget::Client(name) = &f.target {
                if self.federation.site_index(name).is_none() {
                    return Err(Error::Config(format!("faults: unknown site {name:?}")));
                }
            }
            if let Some(d) = f.downtime_seconds {
                nonneg("faults: downtime_seconds", d)?;
            }
        }
        s.reconnect_backoff.validate()?;
        if s.max_events == 0 {
            return Err(Error::Config("max_events must be >= 1".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self, site: &str) -> f64 {
        self.settings.site_multipliers.get(site).copied().unwrap_or(1.0)
    }
}

/// Relative reduction of total time from `a` to `b`, in percent.
pub fn speedup(report_a: &ExperimentReport, report_b: &ExperimentReport) -> Result<f64> {
    for r in [report_a, report_b] {
        if !r.is_complete() {
            return Err(Error::Report(format!("cannot compare an incomplete experiment ({:?})", r.outcome)));
        }
    }
    speedup_percent(report_a.total_seconds(), report_b.total_seconds())
}

#[derive(Debug)]
enum Ev {
    Connect { client: usize },
    ToServer { conn: ConnId, frame: Vec<u8> },
    ToClient { conn: ConnId, frame: Vec<u8> },
    Tick { epoch: u64 },
    Fault { index: usize },
    ServerRestart,
    ServerReachable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Presence {
    Up,
    /// Down until the given time, or for good.
    Down(Option<Duration>),
}

struct SimClient {
    session: ClientSession,
    time: TimeModel,
    conn: Option<ConnId>,
    presence: Presence,
    attempt: u32,
    connect_scheduled: bool,
    busy_until: Duration,
    finished: bool,
}

struct Sim<'a> {
    scenario: &'a SimScenario,
    now: Duration,
    seq: u64,
    queue: BTreeMap<(Duration, u64), Ev>,
    server: Option<Coordinator>,
    server_presence: Presence,
    epoch: u64,
    store: MemoryCheckpointStore,
    past_records: Vec<RoundRecord>,
    clients: Vec<SimClient>,
    links: BTreeMap<ConnId, usize>,
    next_conn: ConnId,
    fired: BTreeSet<usize>,
    tick_at: Option<Duration>,
}

/// A finished simulation together with state that never leaves the sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub report: ExperimentReport,
    /// Each site's personal model, for algorithms that keep one.
    pub personal: BTreeMap<String, ParameterVector>,
}

/// Runs `scenario` to completion (or to a diagnosed hang) on virtual time.
pub fn simulate(scenario: &SimScenario) -> Result<ExperimentReport> {
    simulate_detailed(scenario).map(|o| o.report)
}

pub fn simulate_detailed(scenario: &SimScenario) -> Result<SimOutcome> {
    scenario.validate()?;
    let fed = &scenario.federation;
    let s = &scenario.settings;
    let mut clients = Vec::new();
    for site in &fed.sites {
        let ccfg = ClientConfig::for_site(fed, &site.name, "sim")?;
        let time = TimeModel::Simulated {
            train_base_seconds: s.base_round_cost_seconds,
            validate_base_seconds: s.validation_cost_seconds,
            multiplier: scenario.multiplier(&site.name),
        };
        clients.push(SimClient {
            session: ClientSession::new(ccfg.trainer(fed)?),
            time,
            conn: None,
            presence: Presence::Up,
            attempt: 0,
            connect_scheduled: false,
            busy_until: Duration::ZERO,
            finished: false,
        });
    }
    let store = MemoryCheckpointStore::new();
    let server = Coordinator::new(fed.clone(), Box::new(store.clone()), coordinator_options(scenario), Duration::ZERO)?;
    let mut sim = Sim {
        scenario,
        now: Duration::ZERO,
        seq: 0,
        queue: BTreeMap::new(),
        server: Some(server),
        server_presence: Presence::Up,
        epoch: 0,
        store,
        past_records: Vec::new(),
        clients,
        links: BTreeMap::new(),
        next_conn: 0,
        fired: BTreeSet::new(),
        tick_at: None,
    };
    for i in 0..sim.clients.len() {
        sim.schedule_connect(i, Duration::ZERO);
    }
    let mut report = sim.run()?;
    if s.local_baselines {
        report.local_cross = Some(local_cross_scores(fed)?);
    }
    let personal = sim
        .clients
        .iter()
        .filter_map(|c| c.session.trainer().personal().map(|v| (c.session.site().to_string(), v.clone())))
        .collect();
    Ok(SimOutcome { report, personal })
}

fn coordinator_options(scenario: &SimScenario) -> CoordinatorOptions {
    CoordinatorOptions {
        aggregation: AggregationTiming::Fixed(secs(scenario.settings.aggregation_cost_seconds)),
        startup_timeout: None,
        halt_after_round: None,
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

impl Sim<'_> {
    fn push(&mut self, at: Duration, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at.max(self.now), self.seq), ev);
    }

    fn run(&mut self) -> Result<ExperimentReport> {
        let mut budget = self.scenario.settings.max_events;
        loop {
            if self.server.as_ref().is_some_and(Coordinator::is_finished) {
                return self.report();
            }
            if let Some(diagnosis) = self.permanent_outage() {
                return self.hang(diagnosis);
            }
            let Some(((at, _), ev)) = self.queue.pop_first() else {
                let blocked = self.server.as_ref().map_or("server down".into(), Coordinator::blocked_on);
                return self.hang(format!("no further progress possible: {blocked}"));
            };
            if budget == 0 {
                return self.hang(format!(
                    "event budget of {} exhausted at t={:.3}s",
                    self.scenario.settings.max_events,
                    self.now.as_secs_f64()
                ));
            }
            budget -= 1;
            self.now = at;
            self.step(ev)?;
        }
    }

    fn permanent_outage(&self) -> Option<String> {
        match self.server_presence {
            Presence::Down(None) => Some("the server went down for good; no round can complete".into()),
            _ => None,
        }
    }

    fn hang(&mut self, diagnosis: String) -> Result<ExperimentReport> {
        warn!("simulation hung: {diagnosis}");
        if self.server.is_none() {
            // Rebuild enough state to report from the last checkpoint.
            self.server = Some(self.fresh_server()?);
        }
        let server = self.server.as_mut().expect("server present");
        server.declare_hung(diagnosis);
        self.report()
    }

    fn report(&self) -> Result<ExperimentReport> {
        let server = self.server.as_ref().expect("server present");
        let current = server.report()?;
        if self.past_records.is_empty() {
            return Ok(current);
        }
        let mut rounds = self.past_records.clone();
        rounds.extend(current.rounds);
        let mut merged =
            metrics::summarize(current.config, current.outcome, rounds, current.final_scores, current.final_global)?;
        merged.local_cross = current.local_cross;
        Ok(merged)
    }

    fn fresh_server(&self) -> Result<Coordinator> {
        let fed = self.scenario.federation.clone();
        let opts = coordinator_options(self.scenario);
        if self.store.load().is_ok() {
            Coordinator::resume(fed, Box::new(self.store.clone()), opts, self.now)
        } else {
            Coordinator::new(fed, Box::new(self.store.clone()), opts, self.now)
        }
    }

    fn step(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Connect { client } => self.on_connect(client),
            Ev::ToServer { conn, frame } => {
                if self.links.contains_key(&conn) {
                    let msg = decode(&frame)?;
                    self.server_event(ServerEvent::Message { conn, msg })?;
                }
                Ok(())
            }
            Ev::ToClient { conn, frame } => self.on_client_message(conn, &frame),
            Ev::Tick { epoch } => {
                if epoch == self.epoch && self.server.is_some() {
                    self.tick_at = None;
                    self.server_event(ServerEvent::Tick)?;
                }
                Ok(())
            }
            Ev::Fault { index } => self.on_fault(index),
            Ev::ServerRestart => {
                info!("t={:.3}s: server restarts", self.now.as_secs_f64());
                self.server = Some(self.fresh_server()?);
                self.server_presence = Presence::Up;
                self.schedule_tick();
                Ok(())
            }
            Ev::ServerReachable => {
                self.server_presence = Presence::Up;
                Ok(())
            }
        }
    }

    fn schedule_connect(&mut self, client: usize, at: Duration) {
        let c = &mut self.clients[client];
        if c.connect_scheduled || c.finished || c.conn.is_some() {
            return;
        }
        c.connect_scheduled = true;
        self.push(at, Ev::Connect { client });
    }

    fn on_connect(&mut self, client: usize) -> Result<()> {
        let now = self.now;
        let c = &mut self.clients[client];
        c.connect_scheduled = false;
        if c.finished || c.conn.is_some() || c.presence != Presence::Up {
            return Ok(());
        }
        if self.server_presence != Presence::Up || self.server.is_none() {
            let delay = self.scenario.settings.reconnect_backoff.delay(c.attempt);
            c.attempt = c.attempt.saturating_add(1);
            self.schedule_connect(client, now + delay);
            return Ok(());
        }
        let conn = self.next_conn;
        self.next_conn += 1;
        c.conn = Some(conn);
        c.attempt = 0;
        self.links.insert(conn, client);
        let join = encode(&c.session.join_request())?;
        self.push(now, Ev::ToServer { conn, frame: join });
        Ok(())
    }

    fn on_client_message(&mut self, conn: ConnId, frame: &[u8]) -> Result<()> {
        let Some(&client) = self.links.get(&conn) else { return Ok(()) };
        let now = self.now;
        let msg = decode(frame)?;
        let c = &mut self.clients[client];
        if c.conn != Some(conn) {
            return Ok(());
        }
        let reply = match c.session.on_message(msg)? {
            SessionStep::Idle => None,
            SessionStep::Work(work) => {
                let start = now.max(c.busy_until);
                c.session.perform(&work, &c.time)?.inspect(|m| {
                    c.busy_until = start + secs(submission_seconds(m));
                })
            }
            SessionStep::Resend(m) => Some(m),
            SessionStep::Finished | SessionStep::Aborted(_) => {
                c.finished = true;
                None
            }
        };
        if let Some(m) = reply {
            let at = now.max(c.busy_until);
            let frame = encode(&m)?;
            self.push(at, Ev::ToServer { conn, frame });
        }
        Ok(())
    }

    fn server_event(&mut self, ev: ServerEvent) -> Result<()> {
        let now = self.now;
        let Some(server) = self.server.as_mut() else { return Ok(()) };
        let actions = server.handle(ev, now);
        if let Some(e) = server.take_fatal() {
            return Err(e);
        }
        for action in actions {
            match action {
                ServerAction::Send { conn, msg, at } => {
                    if let Body::TaskAssignment(t) = &msg.body {
                        if t.task == TaskKind::Train {
                            self.schedule_faults(msg.round, at);
                        }
                    }
                    let frame = encode(&msg)?;
                    self.push(at, Ev::ToClient { conn, frame });
                }
                ServerAction::Close { conn } => self.close_link(conn, false)?,
            }
        }
        self.schedule_tick();
        Ok(())
    }

    /// Queues the faults of `round` behind that round's task deliveries.
    fn schedule_faults(&mut self, round: u64, at: Duration) {
        let due: Vec<usize> = (0..self.scenario.settings.faults.len())
            .filter(|i| self.scenario.settings.faults[*i].at_round == round && !self.fired.contains(i))
            .collect();
        for index in due {
            self.fired.insert(index);
            // Pushed after this batch's sends; the tie-break keeps it last.
            self.seq += 1_000_000;
            self.push(at, Ev::Fault { index });
        }
    }

    fn schedule_tick(&mut self) {
        let Some(deadline) = self.server.as_ref().and_then(Coordinator::next_deadline) else { return };
        if self.tick_at.is_some_and(|t| t <= deadline) {
            return;
        }
        self.tick_at = Some(deadline);
        let epoch = self.epoch;
        self.push(deadline, Ev::Tick { epoch });
    }

    /// Tears down `conn`; both ends notice immediately.
    fn close_link(&mut self, conn: ConnId, notify_server: bool) -> Result<()> {
        let Some(client) = self.links.remove(&conn) else { return Ok(()) };
        if notify_server {
            self.server_event(ServerEvent::Disconnected { conn })?;
        }
        let c = &mut self.clients[client];
        if c.conn == Some(conn) {
            c.conn = None;
            if c.presence == Presence::Up {
                let now = self.now;
                self.schedule_connect(client, now);
            }
        }
        Ok(())
    }

    fn on_fault(&mut self, index: usize) -> Result<()> {
        let fault = self.scenario.settings.faults[index].clone();
        let now = self.now;
        let back = fault.downtime_seconds.map(|d| now + secs(d));
        info!("t={:.3}s: {:?} {:?} at round {}", now.as_secs_f64(), fault.kind, fault.target, fault.at_round);
        match fault.target {
            FaultTarget::Server => {
                let conns: Vec<ConnId> = self.links.keys().copied().collect();
                match fault.kind {
                    FaultKind::Crash => {
                        if back.is_none() {
                            self.server_presence = Presence::Down(None);
                            return Ok(());
                        }
                        let dead = self.server.take().expect("server running");
                        self.past_records.extend(dead.records().iter().cloned());
                        self.epoch += 1;
                        self.tick_at = None;
                        self.server_presence = Presence::Down(back);
                        for conn in conns {
                            self.close_link(conn, false)?;
                        }
                        self.push(back.expect("finite downtime"), Ev::ServerRestart);
                    }
                    FaultKind::Disconnect => {
                        self.server_presence = Presence::Down(back);
                        for conn in conns {
                            self.close_link(conn, true)?;
                        }
                        if let Some(t) = back {
                            self.push(t, Ev::ServerReachable);
                        }
                    }
                }
            }
            FaultTarget::Client(name) => {
                let client = self.scenario.federation.site_index(&name).expect("validated site");
                let c = &mut self.clients[client];
                if fault.kind == FaultKind::Crash {
                    c.session.reset();
                    c.busy_until = now;
                }
                c.presence = Presence::Down(back);
                if let Some(conn) = c.conn {
                    self.close_link(conn, true)?;
                }
                match back {
                    Some(t) => {
                        self.clients[client].presence = Presence::Up;
                        self.schedule_connect(client, t);
                    }
                    None => debug!("{name} is gone for good"),
                }
            }
        }
        Ok(())
    }
}

fn submission_seconds(msg: &Message) -> f64 {
    match &msg.body {
        Body::UpdateSubmission(s) => s.update.train_seconds,
        _ => 0.0,
    }
}

/// Trains each site alone for as many gradient steps as the federation
/// runs (`rounds × local_steps`, plain gradient descent from zero) and
/// scores the result on every site's validation split.
pub fn local_cross_scores(fed: &FederationConfig) -> Result<CrossScores> {
    let kind = fed.trainer.trainer;
    let seed = fed.trainer.seed;
    let mut tcfg = fed.trainer;
    tcfg.local_steps = u32::try_from(fed.rounds * u64::from(fed.trainer.local_steps))
        .map_err(|_| Error::Config("rounds × local_steps is too large for a local baseline".into()))?;
    let zero = fed.initial_global()?;
    let plain = crate::aggregation::AlgorithmConfig::fedavg();
    let mut validation = Vec::new();
    for (i, _) in fed.sites.iter().enumerate() {
        validation.push(generate_site_split(&fed.heterogeneity, kind, i, seed, Split::Validation)?);
    }
    let mut out = CrossScores::new();
    for (i, trained) in fed.sites.iter().enumerate() {
        let train = generate_site_split(&fed.heterogeneity, kind, i, seed, Split::Train)?;
        let model: ParameterVector = local_train(&zero, &train, &tcfg, &plain, &zero)?.params;
        let row = fed
            .sites
            .iter()
            .zip(&validation)
            .map(|(v, data)| Ok((v.name.clone(), evaluate(&model, data, kind.metric())?)))
            .collect::<Result<_>>()?;
        out.insert(trained.name.clone(), row);
    }
    Ok(out)
}
