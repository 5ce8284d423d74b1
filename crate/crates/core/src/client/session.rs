//! Protocol-level state of one site, independent of any transport.

use log::{debug, info};

use crate::aggregation::AlgorithmKind;
use crate::client::TimeModel;
use crate::error::{Error, Result};
use crate::params::ModelUpdate;
use crate::protocol::{Body, Message, Submission, Task, TaskKind};
use crate::training::SiteTrainer;

/// A task the session wants carried out.
#[derive(Debug, Clone, PartialEq)]
pub struct Work {
    pub round: u64,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionStep {
    Idle,
    /// Work to run; hand it back to [`ClientSession::perform`].
    Work(Work),
    /// Re-send a submission completed before the link dropped.
    Resend(Message),
    Finished,
    Aborted(String),
}

pub struct ClientSession {
    trainer: SiteTrainer,
    latest: Option<(u64, TaskKind)>,
    completed: Option<(u64, TaskKind, Message)>,
}

impl ClientSession {
    pub fn new(trainer: SiteTrainer) -> Self {
        Self { trainer, latest: None, completed: None }
    }

    pub fn site(&self) -> &str {
        &self.trainer.site
    }

    pub fn trainer(&self) -> &SiteTrainer {
        &self.trainer
    }

    pub fn join_request(&self) -> Message {
        let round = self.latest.map_or(0, |(r, _)| r);
        Message::new(round, self.site(), Body::JoinRequest)
    }

    /// Reacts to one server message. A rejected join is fatal.
    pub fn on_message(&mut self, msg: Message) -> Result<SessionStep> {
        match msg.body {
            Body::JoinAck(ack) if ack.accepted => {
                debug!("{} joined at round {}", self.site(), ack.current_round);
                Ok(SessionStep::Idle)
            }
            Body::JoinAck(ack) => Err(Error::Config(format!(
                "server rejected site {:?}: {}",
                self.site(),
                ack.reason.as_deref().unwrap_or("no reason given")
            ))),
            Body::TaskAssignment(task) => {
                let key = (msg.round, task.task);
                if let Some((r, k, done)) = &self.completed {
                    if (*r, *k) == key {
                        info!("{}: re-sending round {r} submission", self.site());
                        return Ok(SessionStep::Resend(done.clone()));
                    }
                }
                if self.latest.is_some_and(|(r, _)| r > msg.round) {
                    debug!("{}: ignoring task for old round {}", self.site(), msg.round);
                    return Ok(SessionStep::Idle);
                }
                self.latest = Some(key);
                Ok(SessionStep::Work(Work { round: msg.round, task }))
            }
            Body::ExperimentDone => Ok(SessionStep::Finished),
            Body::Abort { reason } => Ok(SessionStep::Aborted(reason)),
            Body::Heartbeat => Ok(SessionStep::Idle),
            Body::JoinRequest | Body::UpdateSubmission(_) => {
                Err(Error::Protocol(format!("server sent a client-only {:?} message", msg.kind())))
            }
        }
    }

    /// Whether `work` is still the newest task; work superseded by a later
    /// task is never submitted.
    pub fn is_current(&self, work: &Work) -> bool {
        self.latest == Some((work.round, work.task.task))
    }

    /// Runs `work` and returns the submission, or `None` if a newer task
    /// replaced it in the meantime.
    pub fn perform(&mut self, work: &Work, time: &TimeModel) -> Result<Option<Message>> {
        if !self.is_current(work) {
            return Ok(None);
        }
        if work.task.algorithm != self.trainer.acfg {
            self.trainer.set_algorithm(work.task.algorithm)?;
        }
        let global = &work.task.params;
        let (update, eval) = match work.task.task {
            TaskKind::Train => {
                let eval = self.trainer.evaluate(global)?;
                let (update, secs) = time.measure(TaskKind::Train, || self.trainer.train_round(work.round, global))?;
                (ModelUpdate { train_seconds: secs, ..update }, eval)
            }
            TaskKind::Validate => {
                let scored = match (self.trainer.acfg.kind, self.trainer.personal()) {
                    (AlgorithmKind::Ditto, Some(v)) => v.clone(),
                    _ => global.clone(),
                };
                let (eval, secs) = time.measure(TaskKind::Validate, || self.trainer.evaluate(&scored))?;
                let rows = self.trainer.validation.rows() as u64;
                (ModelUpdate::new(self.site(), work.round, scored, rows, secs)?, eval)
            }
        };
        let msg =
            Message::new(work.round, self.site(), Body::UpdateSubmission(Submission { update, eval: Some(eval) }));
        self.completed = Some((work.round, work.task.task, msg.clone()));
        Ok(Some(msg))
    }

    /// Forgets everything but the local data, as after a process restart.
    pub fn reset(&mut self) {
        self.latest = None;
        self.completed = None;
        self.trainer.reset_personal();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AlgorithmConfig;
    use crate::params::ParameterVector;
    use crate::protocol::JoinAck;
    use crate::server::config::tests::sample;

    fn session() -> ClientSession {
        let cfg = sample();
        let trainer = SiteTrainer::generate("basel", 1, &cfg.heterogeneity, cfg.trainer, cfg.algorithm).unwrap();
        ClientSession::new(trainer)
    }

    fn task(round: u64, kind: TaskKind) -> Message {
        Message::new(
            round,
            "basel",
            Body::TaskAssignment(Task {
                params: ParameterVector::zeros(3).unwrap(),
                algorithm: AlgorithmConfig::fedavg(),
                task: kind,
            }),
        )
    }

    fn sim() -> TimeModel {
        TimeModel::Simulated { train_base_seconds: 10.0, validate_base_seconds: 1.0, multiplier: 2.0 }
    }

    #[test]
    fn trains_once_and_resends_after_reconnect() {
        let mut s = session();
        let SessionStep::Work(w) = s.on_message(task(0, TaskKind::Train)).unwrap() else { panic!() };
        let sub = s.perform(&w, &sim()).unwrap().unwrap();
        let Body::UpdateSubmission(ref inner) = sub.body else { panic!() };
        assert_eq!(inner.update.train_seconds, 20.0);
        assert!(inner.eval.is_some());
        assert_eq!(s.on_message(task(0, TaskKind::Train)).unwrap(), SessionStep::Resend(sub));
    }

    #[test]
    fn newer_task_supersedes_older_work() {
        let mut s = session();
        let SessionStep::Work(old) = s.on_message(task(3, TaskKind::Train)).unwrap() else { panic!() };
        let SessionStep::Work(new) = s.on_message(task(4, TaskKind::Train)).unwrap() else { panic!() };
        assert_eq!(s.perform(&old, &sim()).unwrap(), None);
        assert!(s.perform(&new, &sim()).unwrap().is_some());
        assert_eq!(s.on_message(task(3, TaskKind::Train)).unwrap(), SessionStep::Idle);
    }

    #[test]
    fn rejection_is_fatal_and_done_finishes() {
        let mut s = session();
        let ack = JoinAck { accepted: false, current_round: 0, reason: Some("unknown".into()) };
        assert!(matches!(s.on_message(Message::new(0, "basel", Body::JoinAck(ack))), Err(Error::Config(_))));
        assert_eq!(s.on_message(Message::new(0, "basel", Body::ExperimentDone)).unwrap(), SessionStep::Finished);
    }

    #[test]
    fn validate_task_returns_a_score_without_training() {
        let mut s = session();
        let SessionStep::Work(w) = s.on_message(task(3, TaskKind::Validate)).unwrap() else { panic!() };
        let sub = s.perform(&w, &sim()).unwrap().unwrap();
        let Body::UpdateSubmission(inner) = sub.body else { panic!() };
        assert_eq!(inner.update.params, ParameterVector::zeros(3).unwrap());
        assert_eq!(inner.update.train_seconds, 2.0);
    }
}
