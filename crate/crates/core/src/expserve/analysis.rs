//! Turning the folded event log into analysis tables.

use serde::{Deserialize, Serialize};

use super::service::{Session, State, Status};
use crate::curriculum::{Phase, Variant, TRAINING_BLOCKS};
use crate::error::{Error, Result};
use crate::statlab::{OutcomeTable, ParticipantOutcome};

/// One main (non-attention) trial joined with its plan entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub session_id: String,
    pub participant_id: String,
    pub variant: Variant,
    pub trial_index: usize,
    pub block: usize,
    pub phase: Phase,
    pub image_id: String,
    pub class: usize,
    pub epsilon: f64,
    pub choice: Option<String>,
    pub correct: bool,
    pub latency_ms: u64,
}

pub fn trial_records(session: &Session) -> Vec<TrialRecord> {
    let trials: Vec<_> = session.plan.trials().collect();
    session
        .responses
        .iter()
        .filter(|r| !r.attention_check)
        .filter_map(|r| {
            let t = trials.get(r.trial_index)?;
            Some(TrialRecord {
                session_id: session.id.clone(),
                participant_id: session.participant_id.clone(),
                variant: session.variant,
                trial_index: r.trial_index,
                block: r.block,
                phase: r.phase,
                image_id: t.image_id.clone(),
                class: t.class?,
                epsilon: t.epsilon,
                choice: r.choice.clone(),
                correct: r.correct,
                latency_ms: r.latency_ms,
            })
        })
        .collect()
}

/// Outcome row of a completed session.
pub fn participant_outcome(session: &Session) -> Result<ParticipantOutcome> {
    if session.status != Status::Completed {
        return Err(Error::invalid(format!("session {} is not completed", session.id)));
    }
    let classes = &session.plan.task_classes;
    let k = classes.len();
    let mut confusion = vec![vec![0u32; k]; k];
    let mut timeouts = 0u32;
    let mut train_sequence = Vec::new();
    let mut test_sequence = Vec::new();
    for r in trial_records(session) {
        match r.phase {
            Phase::Train => train_sequence.push(r.correct),
            Phase::Test => {
                test_sequence.push(r.correct);
                let row = classes
                    .iter()
                    .position(|&c| c == r.class)
                    .ok_or_else(|| Error::InvalidClass {
                        index: r.class,
                        classes: k,
                    })?;
                match r.choice.as_deref().and_then(|a| session.plan.class_of_alias(a)) {
                    Some(c) => {
                        let col = classes
                            .iter()
                            .position(|&x| x == c)
                            .expect("alias maps to a task class");
                        confusion[row][col] += 1;
                    }
                    None => timeouts += 1,
                }
            }
        }
    }
    let test_accuracy = if test_sequence.is_empty() {
        0.0
    } else {
        test_sequence.iter().filter(|&&b| b).count() as f64 / test_sequence.len() as f64
    };
    let first = session.responses.iter().filter(|t| t.block == 0).map(|t| t.at_ms).min();
    let last = session
        .responses
        .iter()
        .filter(|t| t.block == TRAINING_BLOCKS - 1)
        .map(|t| t.at_ms)
        .max();
    let out = ParticipantOutcome {
        participant_id: session.participant_id.clone(),
        variant: session.variant,
        test_accuracy,
        training_minutes: first
            .zip(last)
            .map_or(0.0, |(a, b)| b.saturating_sub(a) as f64 / 60_000.0),
        confusion,
        test_timeouts: timeouts,
        train_sequence,
        test_sequence,
    };
    out.check()?;
    Ok(out)
}

/// Completed sessions of one experiment as an outcome table, ordered by
/// participant id. With `attention_threshold`, sessions below it are dropped.
pub fn outcome_table(state: &State, experiment_id: &str, attention_threshold: Option<f64>) -> Result<OutcomeTable> {
    let mut sessions: Vec<&Session> = state
        .sessions
        .values()
        .filter(|s| s.experiment_id == experiment_id && s.status == Status::Completed)
        .collect();
    sessions.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    let mut table = OutcomeTable {
        task_classes: sessions
            .first()
            .map(|s| s.plan.task_classes.clone())
            .unwrap_or_default(),
        rows: Vec::with_capacity(sessions.len()),
    };
    for s in sessions {
        if s.plan.task_classes != table.task_classes {
            return Err(Error::invalid("sessions disagree on the task classes"));
        }
        if let Some(th) = attention_threshold {
            if !super::service::results_of(s, th).passed_attention {
                continue;
            }
        }
        table.rows.push(participant_outcome(s)?);
    }
    Ok(table)
}
