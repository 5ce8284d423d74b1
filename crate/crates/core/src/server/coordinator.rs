//! The aggregator's round state machine.
//!
//! The coordinator does no I/O of its own: drivers feed it connection events
//! stamped with the current time and carry out the sends it asks for. The TCP
//! server and the simulator run this same code, under the wall clock and a
//! virtual clock respectively.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::aggregation::federated_average;
use crate::error::{Error, Result};
use crate::metrics::{self, ClientRoundStats, ExperimentReport, Outcome, RoundRecord, Totals};
use crate::params::{EvalScore, ModelUpdate, ParameterVector};
use crate::protocol::{Body, JoinAck, Message, Submission, Task, TaskKind};
use crate::server::checkpoint::{Checkpoint, CheckpointStore};
use crate::server::config::{FederationConfig, LossPolicy};

/// Driver-assigned connection handle.
pub type ConnId = u64;

#[derive(Debug, Clone)]
pub enum ServerEvent {
    Message {
        conn: ConnId,
        msg: Message,
    },
    Disconnected {
        conn: ConnId,
    },
    /// Lets the coordinator check its deadlines.
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAction {
    /// Deliver `msg` on `conn`, not before `at`.
    Send {
        conn: ConnId,
        msg: Message,
        at: Duration,
    },
    Close {
        conn: ConnId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationTiming {
    /// Wall-clock time spent averaging.
    Measured,
    /// A fixed virtual cost per aggregation.
    Fixed(Duration),
}

#[derive(Debug, Clone)]
pub struct CoordinatorOptions {
    pub aggregation: AggregationTiming,
    /// Fail with a startup error if the federation has not formed by then.
    pub startup_timeout: Option<Duration>,
    /// Stop dead right after checkpointing this round, as if the process
    /// had been killed.
    pub halt_after_round: Option<u64>,
}

impl Default for CoordinatorOptions {
    fn default() -> Self {
        Self { aggregation: AggregationTiming::Measured, startup_timeout: None, halt_after_round: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub update: ModelUpdate,
    pub eval: Option<EvalScore>,
    pub arrived_at: Duration,
}

/// One in-flight round (or the final validation pass).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: u64,
    pub task: Task,
    pub participants: BTreeSet<String>,
    pub pending: BTreeSet<String>,
    pub received: BTreeMap<String, Received>,
    pub dropped: BTreeSet<String>,
    pub started_at: Duration,
}

impl RoundState {
    pub fn global(&self) -> &ParameterVector {
        &self.task.params
    }

    pub fn per_client_times(&self) -> BTreeMap<&str, f64> {
        self.received.iter().map(|(site, r)| (site.as_str(), r.update.train_seconds)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDecision {
    Wait,
    DropForRound,
    Abort,
}

/// What to do when `lost` goes away mid-round.
pub fn handle_client_loss(state: &RoundState, lost: &str, cfg: &FederationConfig) -> LossDecision {
    match cfg.on_client_loss {
        LossPolicy::Wait => LossDecision::Wait,
        LossPolicy::ContinueWithout => {
            let remaining = state
                .received
                .keys()
                .map(String::as_str)
                .chain(state.pending.iter().map(String::as_str).filter(|s| *s != lost))
                .collect::<BTreeSet<_>>()
                .len();
            if remaining >= cfg.min_clients() {
                LossDecision::DropForRound
            } else {
                LossDecision::Abort
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    /// Waiting for enough sites before starting `next_round`.
    Gathering {
        since: Duration,
    },
    Round(RoundState),
    Validating(RoundState),
    Finished(Outcome),
    Halted,
}

pub struct Coordinator {
    cfg: FederationConfig,
    store: Box<dyn CheckpointStore>,
    opts: CoordinatorOptions,
    global: ParameterVector,
    next_round: u64,
    phase: Phase,
    /// Set once the first round of this incarnation has started.
    formed: bool,
    conns: BTreeMap<ConnId, String>,
    site_conn: BTreeMap<String, ConnId>,
    admitted: BTreeSet<String>,
    records: Vec<RoundRecord>,
    final_scores: BTreeMap<String, EvalScore>,
    stale_discarded: u64,
    fatal: Option<Error>,
}

impl Coordinator {
    pub fn new(
        cfg: FederationConfig,
        store: Box<dyn CheckpointStore>,
        opts: CoordinatorOptions,
        now: Duration,
    ) -> Result<Self> {
        cfg.validate()?;
        let global = cfg.initial_global()?;
        Ok(Self::with_state(cfg, store, opts, global, 0, now))
    }

    /// Restarts from the store's checkpoint at the round after it.
    pub fn resume(
        cfg: FederationConfig,
        store: Box<dyn CheckpointStore>,
        opts: CoordinatorOptions,
        now: Duration,
    ) -> Result<Self> {
        cfg.validate()?;
        let (global, next_round) = store.load()?.resume_state(&cfg)?;
        info!("resuming at round {next_round}");
        Ok(Self::with_state(cfg, store, opts, global, next_round, now))
    }

    fn with_state(
        cfg: FederationConfig,
        store: Box<dyn CheckpointStore>,
        opts: CoordinatorOptions,
        global: ParameterVector,
        next_round: u64,
        now: Duration,
    ) -> Self {
        Self {
            cfg,
            store,
            opts,
            global,
            next_round,
            phase: Phase::Gathering { since: now },
            formed: false,
            conns: BTreeMap::new(),
            site_conn: BTreeMap::new(),
            admitted: BTreeSet::new(),
            records: Vec::new(),
            final_scores: BTreeMap::new(),
            stale_discarded: 0,
            fatal: None,
        }
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn stale_discarded(&self) -> u64 {
        self.stale_discarded
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Finished(_) | Phase::Halted)
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        match &self.phase {
            Phase::Finished(o) => Some(o),
            _ => None,
        }
    }

    pub fn take_fatal(&mut self) -> Option<Error> {
        self.fatal.take()
    }

    pub fn connected_sites(&self) -> BTreeSet<String> {
        self.site_conn.keys().cloned().collect()
    }

    /// Earliest time at which a `Tick` could change anything.
    pub fn next_deadline(&self) -> Option<Duration> {
        match &self.phase {
            Phase::Gathering { since } if !self.formed => self.opts.startup_timeout.map(|t| *since + t),
            Phase::Round(s) | Phase::Validating(s) => {
                self.cfg.round_timeout_seconds.map(|t| s.started_at + Duration::from_secs_f64(t))
            }
            _ => None,
        }
    }

    pub fn handle(&mut self, event: ServerEvent, now: Duration) -> Vec<ServerAction> {
        let mut out = Vec::new();
        if self.is_finished() && !matches!(event, ServerEvent::Message { .. }) {
            if let ServerEvent::Disconnected { conn } = event {
                self.forget_conn(conn);
            }
            return out;
        }
        match event {
            ServerEvent::Message { conn, msg } => self.on_message(conn, msg, now, &mut out),
            ServerEvent::Disconnected { conn } => self.on_disconnect(conn, now, &mut out),
            ServerEvent::Tick => self.on_tick(now, &mut out),
        }
        out
    }

    fn send(&self, out: &mut Vec<ServerAction>, site: &str, body: Body, round: u64, at: Duration) {
        if let Some(&conn) = self.site_conn.get(site) {
            out.push(ServerAction::Send { conn, msg: Message::new(round, site, body), at });
        }
    }

    fn forget_conn(&mut self, conn: ConnId) -> Option<String> {
        let site = self.conns.remove(&conn)?;
        if self.site_conn.get(&site) == Some(&conn) {
            self.site_conn.remove(&site);
            Some(site)
        } else {
            None
        }
    }

    fn on_message(&mut self, conn: ConnId, msg: Message, now: Duration, out: &mut Vec<ServerAction>) {
        match (&msg.body, self.conns.get(&conn)) {
            (Body::JoinRequest, None) => self.on_join(conn, msg.client_id, now, out),
            (Body::JoinRequest, Some(_)) => {
                warn!("connection {conn} sent a second join request; dropping it");
                self.violation(conn, now, out);
            }
            (_, None) => {
                warn!("connection {conn} sent {:?} before joining; dropping it", msg.kind());
                out.push(ServerAction::Close { conn });
            }
            (_, Some(site)) if *site != msg.client_id => {
                warn!("connection for {site} sent a message as {}; dropping it", msg.client_id);
                self.violation(conn, now, out);
            }
            (Body::Heartbeat, Some(_)) => {}
            (Body::UpdateSubmission(_), Some(_)) => {
                let Body::UpdateSubmission(sub) = msg.body else { unreachable!() };
                self.on_submission(msg.round, sub, now, out);
            }
            (_, Some(site)) => {
                warn!("{site} sent unexpected {:?}; dropping the connection", msg.kind());
                self.violation(conn, now, out);
            }
        }
    }

    fn violation(&mut self, conn: ConnId, now: Duration, out: &mut Vec<ServerAction>) {
        out.push(ServerAction::Close { conn });
        self.on_disconnect(conn, now, out);
    }

    fn on_join(&mut self, conn: ConnId, site: String, now: Duration, out: &mut Vec<ServerAction>) {
        let current_round = self.current_round();
        if self.cfg.site_index(&site).is_none() {
            warn!("rejecting unknown site {site:?}");
            out.push(ServerAction::Send {
                conn,
                msg: Message::new(
                    current_round,
                    site.clone(),
                    Body::JoinAck(JoinAck {
                        accepted: false,
                        current_round,
                        reason: Some(format!("site {site:?} is not part of this federation")),
                    }),
                ),
                at: now,
            });
            out.push(ServerAction::Close { conn });
            return;
        }
        if let Some(old) = self.site_conn.insert(site.clone(), conn) {
            // The site reconnected before we noticed the old link die.
            self.conns.remove(&old);
            out.push(ServerAction::Close { conn: old });
        }
        self.conns.insert(conn, site.clone());
        info!("{site} joined on connection {conn}");
        let ack = Body::JoinAck(JoinAck { accepted: true, current_round, reason: None });
        self.send(out, &site, ack, current_round, now);

        match &self.phase {
            Phase::Gathering { .. } => {
                self.admitted.insert(site);
                self.try_start(now, out);
            }
            Phase::Round(state) | Phase::Validating(state) => {
                if state.pending.contains(&site) {
                    let body = Body::TaskAssignment(state.task.clone());
                    let round = state.round;
                    self.send(out, &site, body, round, now);
                } else {
                    // Admitted at the next round boundary.
                    self.admitted.insert(site);
                }
            }
            Phase::Finished(outcome) => {
                let body = match outcome {
                    Outcome::Completed => Body::ExperimentDone,
                    Outcome::Aborted { reason } | Outcome::Hung { diagnosis: reason } => {
                        Body::Abort { reason: reason.clone() }
                    }
                };
                self.send(out, &site, body, current_round, now);
            }
            Phase::Halted => {}
        }
    }

    fn current_round(&self) -> u64 {
        match &self.phase {
            Phase::Round(s) | Phase::Validating(s) => s.round,
            _ => self.next_round,
        }
    }

    fn on_submission(&mut self, round: u64, sub: Submission, now: Duration, out: &mut Vec<ServerAction>) {
        let site = sub.update.client_id.clone();
        let (Phase::Round(state) | Phase::Validating(state)) = &mut self.phase else {
            debug!("ignoring submission from {site} outside a round");
            return;
        };
        if round != state.round {
            // Late update after an outage: discarded, the round goes on.
            warn!("discarding update from {site} for round {round}; current round is {}", state.round);
            self.stale_discarded += 1;
            return;
        }
        if !state.pending.remove(&site) {
            debug!("ignoring duplicate or unexpected submission from {site} for round {round}");
            return;
        }
        if sub.update.params.dim() != state.task.params.dim() {
            warn!("update from {site} has the wrong dimension; dropping it for this round");
            state.dropped.insert(site);
        } else {
            state.received.insert(site, Received { update: sub.update, eval: sub.eval, arrived_at: now });
        }
        self.maybe_complete(now, out);
    }

    fn on_disconnect(&mut self, conn: ConnId, now: Duration, out: &mut Vec<ServerAction>) {
        let Some(site) = self.forget_conn(conn) else { return };
        info!("{site} disconnected");
        let (Phase::Round(state) | Phase::Validating(state)) = &mut self.phase else {
            if matches!(self.phase, Phase::Gathering { .. }) && !self.formed {
                self.admitted.remove(&site);
            }
            return;
        };
        if !state.participants.contains(&site) {
            return;
        }
        match handle_client_loss(state, &site, &self.cfg) {
            LossDecision::Wait => {
                if state.pending.contains(&site) {
                    info!("round {}: waiting for {site} to reconnect", state.round);
                }
            }
            LossDecision::DropForRound => {
                if state.pending.remove(&site) {
                    info!("round {}: continuing without {site}", state.round);
                    state.dropped.insert(site);
                }
                self.maybe_complete(now, out);
            }
            LossDecision::Abort => {
                let reason =
                    format!("lost {site} in round {}; fewer than {} sites remain", state.round, self.cfg.min_clients());
                self.finish(Outcome::Aborted { reason }, now, out);
            }
        }
    }

    fn on_tick(&mut self, now: Duration, out: &mut Vec<ServerAction>) {
        match &mut self.phase {
            Phase::Gathering { since } if !self.formed => {
                let Some(limit) = self.opts.startup_timeout else { return };
                if now < *since + limit {
                    return;
                }
                let joined = self.admitted.len();
                if self.cfg.on_client_loss == LossPolicy::ContinueWithout && joined >= self.cfg.min_clients() {
                    self.start_next(now, true, out);
                    return;
                }
                let msg = if joined == 0 {
                    format!("no site joined within {limit:?}")
                } else {
                    format!(
                        "only {joined} of {} expected sites joined within {limit:?}",
                        self.cfg.expected_sites().len()
                    )
                };
                self.fatal = Some(Error::Startup(msg.clone()));
                self.finish(Outcome::Aborted { reason: msg }, now, out);
            }
            Phase::Round(state) | Phase::Validating(state) => {
                let Some(t) = self.cfg.round_timeout_seconds else { return };
                if now < state.started_at + Duration::from_secs_f64(t) || state.pending.is_empty() {
                    return;
                }
                let waiting: Vec<String> = state.pending.iter().cloned().collect();
                let enough = state.received.len() >= self.cfg.min_clients();
                if self.cfg.on_client_loss == LossPolicy::ContinueWithout && enough {
                    for site in waiting {
                        state.pending.remove(&site);
                        state.dropped.insert(site);
                    }
                    self.maybe_complete(now, out);
                } else {
                    let reason = format!("round {} timed out after {t} s waiting for {waiting:?}", state.round);
                    self.finish(Outcome::Aborted { reason }, now, out);
                }
            }
            _ => {}
        }
    }

    fn ready_to_start(&self) -> bool {
        if !self.formed {
            let expected = self.cfg.expected_sites();
            return expected.iter().all(|s| self.site_conn.contains_key(s));
        }
        self.round_participants().len() >= self.cfg.min_clients()
    }

    fn round_participants(&self) -> BTreeSet<String> {
        match self.cfg.on_client_loss {
            LossPolicy::Wait => self.admitted.clone(),
            LossPolicy::ContinueWithout => {
                self.admitted.iter().filter(|s| self.site_conn.contains_key(*s)).cloned().collect()
            }
        }
    }

    fn try_start(&mut self, now: Duration, out: &mut Vec<ServerAction>) {
        if self.ready_to_start() {
            self.start_next(now, false, out);
        }
    }

    /// Starts `next_round` (or the validation pass) at `at`, or goes back to
    /// gathering when the quorum is not there.
    fn start_next(&mut self, at: Duration, force: bool, out: &mut Vec<ServerAction>) {
        if !force && !self.ready_to_start() {
            self.phase = Phase::Gathering { since: at };
            return;
        }
        self.formed = true;
        let validating = self.next_round >= self.cfg.rounds;
        let participants = self.round_participants();
        let task = Task {
            params: self.global.clone(),
            algorithm: self.cfg.algorithm,
            task: if validating { TaskKind::Validate } else { TaskKind::Train },
        };
        let state = RoundState {
            round: self.next_round,
            task: task.clone(),
            pending: participants.clone(),
            participants,
            received: BTreeMap::new(),
            dropped: BTreeSet::new(),
            started_at: at,
        };
        debug!("starting round {} with {:?}", state.round, state.participants);
        for site in &state.participants {
            self.send(out, site, Body::TaskAssignment(task.clone()), state.round, at);
        }
        self.phase = if validating { Phase::Validating(state) } else { Phase::Round(state) };
    }

    fn maybe_complete(&mut self, now: Duration, out: &mut Vec<ServerAction>) {
        let (Phase::Round(state) | Phase::Validating(state)) = &self.phase else { return };
        if !state.pending.is_empty() {
            return;
        }
        if state.received.is_empty() {
            let reason = format!("round {} ended without any update", state.round);
            self.finish(Outcome::Aborted { reason }, now, out);
            return;
        }
        let state = match std::mem::replace(&mut self.phase, Phase::Gathering { since: now }) {
            Phase::Round(s) => s,
            Phase::Validating(s) => {
                self.complete_validation(s, now, out);
                return;
            }
            _ => unreachable!(),
        };
        if let Err(e) = self.complete_round(state, now, out) {
            let reason = format!("aggregation failed: {e}");
            self.fatal = Some(e);
            self.finish(Outcome::Aborted { reason }, now, out);
        }
    }

    fn complete_round(&mut self, state: RoundState, now: Duration, out: &mut Vec<ServerAction>) -> Result<()> {
        let started = Instant::now();
        let updates: Vec<ModelUpdate> = state.received.values().map(|r| r.update.clone()).collect();
        let global = federated_average(&updates, self.cfg.algorithm.weighting)?;
        let aggregation = match self.opts.aggregation {
            AggregationTiming::Measured => started.elapsed(),
            AggregationTiming::Fixed(d) => d,
        };
        self.records.push(round_record(&state, aggregation));
        self.global = global;
        self.store.save(&Checkpoint {
            round: state.round,
            global: self.global.clone(),
            config_hash: self.cfg.config_hash(),
        })?;
        info!("round {} aggregated from {} updates", state.round, updates.len());
        self.next_round = state.round + 1;
        if self.opts.halt_after_round == Some(state.round) {
            warn!("halting after round {} as instructed", state.round);
            self.phase = Phase::Halted;
            return Ok(());
        }
        self.start_next(now + aggregation, false, out);
        Ok(())
    }

    fn complete_validation(&mut self, state: RoundState, now: Duration, out: &mut Vec<ServerAction>) {
        let span = state.received.values().map(|r| r.arrived_at).max().unwrap_or(state.started_at) - state.started_at;
        if let Some(last) = self.records.last_mut() {
            last.validation_seconds += span.as_secs_f64();
        }
        self.final_scores = state.received.iter().filter_map(|(site, r)| r.eval.map(|e| (site.clone(), e))).collect();
        self.finish(Outcome::Completed, now, out);
    }

    fn finish(&mut self, outcome: Outcome, now: Duration, out: &mut Vec<ServerAction>) {
        let body = match &outcome {
            Outcome::Completed => Body::ExperimentDone,
            Outcome::Aborted { reason } | Outcome::Hung { diagnosis: reason } => {
                warn!("experiment stopped: {reason}");
                Body::Abort { reason: reason.clone() }
            }
        };
        let round = self.current_round();
        let sites: Vec<String> = self.site_conn.keys().cloned().collect();
        for site in sites {
            self.send(out, &site, body.clone(), round, now);
        }
        self.phase = Phase::Finished(outcome);
    }

    /// Marks a stalled experiment as hung. Used by drivers that detect that
    /// no further progress is possible.
    pub fn declare_hung(&mut self, diagnosis: String) {
        if !self.is_finished() {
            self.phase = Phase::Finished(Outcome::Hung { diagnosis });
        }
    }

    /// A description of what the coordinator is blocked on.
    pub fn blocked_on(&self) -> String {
        match &self.phase {
            Phase::Gathering { .. } => {
                let missing: Vec<_> =
                    self.cfg.expected_sites().into_iter().filter(|s| !self.site_conn.contains_key(s)).collect();
                format!("gathering sites before round {}; missing {missing:?}", self.next_round)
            }
            Phase::Round(s) | Phase::Validating(s) => {
                format!("round {} waiting for {:?}", s.round, s.pending)
            }
            Phase::Finished(o) => format!("finished: {o:?}"),
            Phase::Halted => "halted".into(),
        }
    }

    pub fn report(&self) -> Result<ExperimentReport> {
        let config = serde_json::to_value(&self.cfg).map_err(|e| Error::Report(e.to_string()))?;
        let outcome = self.outcome().cloned().unwrap_or_else(|| Outcome::Aborted { reason: self.blocked_on() });
        if self.records.is_empty() {
            return Ok(ExperimentReport {
                config,
                outcome,
                rounds: Vec::new(),
                totals: Totals::default(),
                final_scores: self.final_scores.clone(),
                global_mean: None,
                final_global: Some(self.global.clone()),
                local_cross: None,
            });
        }
        metrics::summarize(config, outcome, self.records.clone(), self.final_scores.clone(), Some(self.global.clone()))
    }
}

fn round_record(state: &RoundState, aggregation: Duration) -> RoundRecord {
    let end = state.received.values().map(|r| r.arrived_at).max().unwrap_or(state.started_at);
    let span = end - state.started_at;
    let per_client = state
        .participants
        .iter()
        .map(|site| {
            let stats = match state.received.get(site) {
                Some(r) => {
                    let elapsed = r.arrived_at - state.started_at;
                    let waiting = span - elapsed;
                    ClientRoundStats {
                        train_seconds: r.update.train_seconds,
                        waiting_seconds: waiting.as_secs_f64(),
                        submitted: true,
                        elapsed_nanos: elapsed.as_nanos() as u64,
                        waiting_nanos: waiting.as_nanos() as u64,
                    }
                }
                None => ClientRoundStats {
                    train_seconds: 0.0,
                    waiting_seconds: 0.0,
                    submitted: false,
                    elapsed_nanos: 0,
                    waiting_nanos: 0,
                },
            };
            (site.clone(), stats)
        })
        .collect();
    let global_eval: BTreeMap<String, EvalScore> =
        state.received.iter().filter_map(|(site, r)| r.eval.map(|e| (site.clone(), e))).collect();
    RoundRecord {
        round: state.round,
        per_client,
        span_nanos: span.as_nanos() as u64,
        aggregation_seconds: aggregation.as_secs_f64(),
        validation_seconds: 0.0,
        global_eval: if global_eval.is_empty() { None } else { Some(global_eval) },
    }
}
