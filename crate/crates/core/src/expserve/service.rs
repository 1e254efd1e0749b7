use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::assets::{asset_token, AssetSource};
use super::config::ExperimentConfig;
use super::events::{Event, EventLog, TrialEvent};
use crate::curriculum::{make_session_plan, Phase, SessionPlan, Variant, TRAINING_BLOCKS};
use crate::difficulty::DifficultyIndex;
use crate::error::{Error, Result};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, AtomicOrdering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, AtomicOrdering::SeqCst);
    }
}

/// Advances by a fixed step on every reading, so timestamps depend only on
/// the sequence of service calls.
pub struct TickClock {
    next: AtomicU64,
    step: u64,
}

impl TickClock {
    pub fn new(start_ms: u64, step_ms: u64) -> Self {
        TickClock {
            next: AtomicU64::new(start_ms),
            step: step_ms,
        }
    }
}

impl Clock for TickClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, AtomicOrdering::SeqCst)
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(AtomicOrdering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Completed,
    Withdrawn,
}

impl Status {
    fn name(&self) -> &'static str {
        match self {
            Status::Active => "active",
            Status::Completed => "completed",
            Status::Withdrawn => "withdrawn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub participant_id: String,
    pub experiment_id: String,
    pub variant: Variant,
    pub plan: SessionPlan,
    pub cursor: usize,
    pub status: Status,
    /// When the trial at `cursor` was first served.
    pub served_at_ms: Option<u64>,
    pub responses: Vec<TrialEvent>,
    pub bonus: f64,
    pub created_at_ms: u64,
    pub ended_at_ms: Option<u64>,
}

/// Everything the service knows; a pure fold over the event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub sessions: BTreeMap<String, Session>,
    /// `experiment id -> participant id -> session id`.
    pub participants: BTreeMap<String, BTreeMap<String, String>>,
    pub events_applied: usize,
}

impl State {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<State> {
        let mut s = State::default();
        for e in events {
            s.apply(e)?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, event: &Event) -> Result<()> {
        let missing = || Error::SessionNotFound(event.session_id().to_string());
        match event {
            Event::SessionCreated {
                session_id,
                participant_id,
                experiment_id,
                variant,
                plan,
                at_ms,
            } => {
                let by_exp = self.participants.entry(experiment_id.clone()).or_default();
                if by_exp.contains_key(participant_id) || self.sessions.contains_key(session_id) {
                    return Err(Error::Conflict {
                        experiment: experiment_id.clone(),
                        participant: participant_id.clone(),
                    });
                }
                by_exp.insert(participant_id.clone(), session_id.clone());
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        id: session_id.clone(),
                        participant_id: participant_id.clone(),
                        experiment_id: experiment_id.clone(),
                        variant: *variant,
                        plan: plan.clone(),
                        cursor: 0,
                        status: Status::Active,
                        served_at_ms: None,
                        responses: Vec::new(),
                        bonus: 0.0,
                        created_at_ms: *at_ms,
                        ended_at_ms: None,
                    },
                );
            }
            Event::TrialServed {
                session_id,
                trial_index,
                at_ms,
            } => {
                let s = self.sessions.get_mut(session_id).ok_or_else(missing)?;
                if *trial_index != s.cursor {
                    return Err(Error::Ordering {
                        expected: s.cursor,
                        got: *trial_index,
                    });
                }
                s.served_at_ms.get_or_insert(*at_ms);
            }
            Event::Response(t) => {
                let s = self.sessions.get_mut(&t.session_id).ok_or_else(missing)?;
                if s.status != Status::Active {
                    return Err(Error::Terminal(s.id.clone(), s.status.name()));
                }
                if t.trial_index != s.cursor {
                    return Err(Error::Ordering {
                        expected: s.cursor,
                        got: t.trial_index,
                    });
                }
                s.responses.push(t.clone());
                s.cursor += 1;
                s.served_at_ms = None;
            }
            Event::Completed {
                session_id,
                bonus,
                at_ms,
            } => {
                let s = self.sessions.get_mut(session_id).ok_or_else(missing)?;
                s.status = Status::Completed;
                s.bonus = *bonus;
                s.ended_at_ms = Some(*at_ms);
            }
            Event::Withdrawn { session_id, at_ms } => {
                let s = self.sessions.get_mut(session_id).ok_or_else(missing)?;
                if s.status != Status::Active {
                    return Err(Error::Terminal(s.id.clone(), s.status.name()));
                }
                s.status = Status::Withdrawn;
                s.ended_at_ms = Some(*at_ms);
            }
        }
        self.events_applied += 1;
        Ok(())
    }
}

/// What a participant sees for one trial: no labels, budgets or difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPayload {
    pub session_id: String,
    pub trial_index: usize,
    pub total_trials: usize,
    pub block: usize,
    pub phase: Phase,
    pub image_url: String,
    pub options: Vec<String>,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub session_id: String,
    pub status: Status,
    pub bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NextTrial {
    Trial(TrialPayload),
    Completed(CompletionSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub trial_index: usize,
    /// `None` reports a timeout.
    pub choice: Option<String>,
    pub latency_ms: u64,
}

/// Training trials reveal correctness and the right label; test trials
/// only acknowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Feedback {
    Train {
        correct: bool,
        correct_label: String,
        timed_out: bool,
        session_complete: bool,
    },
    Test {
        acknowledged: bool,
        session_complete: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResults {
    pub session_id: String,
    pub participant_id: String,
    pub variant: Variant,
    pub status: Status,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub attention_accuracy: Option<f64>,
    pub attention_checks: usize,
    pub passed_attention: bool,
    pub training_minutes: Option<f64>,
    pub responses: usize,
    pub bonus: f64,
}

fn accuracy<'a>(it: impl Iterator<Item = &'a TrialEvent>) -> Option<f64> {
    let (n, c) = it.fold((0usize, 0usize), |(n, c), t| (n + 1, c + t.correct as usize));
    (n > 0).then(|| c as f64 / n as f64)
}

/// Results are a pure function of the session's events.
pub fn results_of(session: &Session, attention_threshold: f64) -> SessionResults {
    let main = |p: Phase| {
        session
            .responses
            .iter()
            .filter(move |t| t.phase == p && !t.attention_check)
    };
    let checks: Vec<&TrialEvent> = session.responses.iter().filter(|t| t.attention_check).collect();
    let attention_accuracy = accuracy(checks.iter().copied());
    let first_train = session.responses.iter().filter(|t| t.block == 0).map(|t| t.at_ms).min();
    let last_train = session
        .responses
        .iter()
        .filter(|t| t.block == TRAINING_BLOCKS - 1)
        .map(|t| t.at_ms)
        .max();
    SessionResults {
        session_id: session.id.clone(),
        participant_id: session.participant_id.clone(),
        variant: session.variant,
        status: session.status,
        train_accuracy: accuracy(main(Phase::Train)),
        test_accuracy: accuracy(main(Phase::Test)),
        attention_accuracy,
        attention_checks: checks.len(),
        passed_attention: attention_accuracy.is_some_and(|a| a >= attention_threshold),
        training_minutes: first_train
            .zip(last_train)
            .map(|(a, b)| b.saturating_sub(a) as f64 / 60_000.0),
        responses: session.responses.len(),
        bonus: session.bonus,
    }
}

struct Inner {
    state: State,
    log: EventLog,
}

pub struct Service {
    config: ExperimentConfig,
    index: Arc<DifficultyIndex>,
    assets: Arc<dyn AssetSource>,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Service {
    /// Starts a service over `log`, replaying `existing` events first.
    pub fn new(
        config: ExperimentConfig,
        index: Arc<DifficultyIndex>,
        assets: Arc<dyn AssetSource>,
        clock: Arc<dyn Clock>,
        log: EventLog,
        existing: &[Event],
    ) -> Result<Self> {
        config.validate()?;
        let state = State::replay(existing)?;
        Ok(Service {
            config,
            index,
            assets,
            clock,
            inner: Mutex::new(Inner { state, log }),
        })
    }

    /// Opens (or creates) the event log at `path` and replays it.
    pub fn open(
        config: ExperimentConfig,
        index: Arc<DifficultyIndex>,
        assets: Arc<dyn AssetSource>,
        clock: Arc<dyn Clock>,
        path: impl AsRef<Path>,
    ) -> Result<Self> {
        let (log, events) = EventLog::open(path, config.durable)?;
        Self::new(config, index, assets, clock, log, &events)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn assets(&self) -> &Arc<dyn AssetSource> {
        &self.assets
    }

    pub fn state(&self) -> State {
        self.lock().state.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(inner: &mut Inner, event: Event) -> Result<()> {
        // validate against a scratch copy of the touched session first, so a
        // rejected event never reaches the log
        let mut probe = State {
            sessions: inner
                .state
                .sessions
                .get(event.session_id())
                .map(|s| BTreeMap::from([(s.id.clone(), s.clone())]))
                .unwrap_or_default(),
            participants: inner.state.participants.clone(),
            events_applied: 0,
        };
        probe.apply(&event)?;
        inner.log.append(&event)?;
        inner.state.apply(&event)
    }

    /// Session seed: derived from the master seed and participant id in
    /// deterministic mode, otherwise fresh entropy.
    fn session_seed(&self, participant_id: &str) -> u64 {
        match self.config.seed {
            Some(master) => hash_u64(&[
                &master.to_le_bytes(),
                self.config.experiment_id.as_bytes(),
                participant_id.as_bytes(),
            ]),
            None => rand::random(),
        }
    }

    fn draw_variant(&self, seed: u64) -> Result<Variant> {
        let (variants, weights): (Vec<Variant>, Vec<f64>) =
            self.config.variant_weights.iter().map(|(v, w)| (*v, *w)).unzip();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Ok(variants[dist.sample(&mut rng)])
    }

    /// Assigns a variant, materialises the plan and its assets, and persists
    /// the session before returning its id.
    pub fn create_session(&self, participant_id: &str) -> Result<String> {
        self.create_session_as(participant_id, None)
    }

    /// Like [`Service::create_session`], optionally forcing the variant.
    pub fn create_session_as(&self, participant_id: &str, variant: Option<Variant>) -> Result<String> {
        if participant_id.is_empty() {
            return Err(Error::invalid("participant id is empty"));
        }
        let exp = &self.config.experiment_id;
        {
            let inner = self.lock();
            if inner
                .state
                .participants
                .get(exp)
                .is_some_and(|m| m.contains_key(participant_id))
            {
                return Err(Error::Conflict {
                    experiment: exp.clone(),
                    participant: participant_id.to_string(),
                });
            }
        }
        let seed = self.session_seed(participant_id);
        let variant = match variant {
            Some(v) => v,
            None => self.draw_variant(seed)?,
        };
        let plan = make_session_plan(&self.config.plan, &self.index, variant, seed)?;
        let items: Vec<(String, f64)> = plan.trials().map(|t| (t.image_id.clone(), t.epsilon)).collect();
        self.assets.prepare_many(&items)?;
        let session_id = hex::encode(
            &Sha256::digest(
                [
                    exp.as_bytes(),
                    &[0],
                    participant_id.as_bytes(),
                    &[0],
                    &seed.to_le_bytes(),
                ]
                .concat(),
            )[..16],
        );
        let mut inner = self.lock();
        let event = Event::SessionCreated {
            session_id: session_id.clone(),
            participant_id: participant_id.to_string(),
            experiment_id: exp.clone(),
            variant,
            plan,
            at_ms: self.clock.now_ms(),
        };
        Self::commit(&mut inner, event)?;
        Ok(session_id)
    }

    fn lookup<'a>(inner: &'a Inner, id: &str) -> Result<&'a Session> {
        inner
            .state
            .sessions
            .get(id)
            .ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }

    /// Records timeouts for trials served longer ago than timeout + grace.
    fn expire(&self, inner: &mut Inner, id: &str) -> Result<()> {
        let now = self.clock.now_ms();
        loop {
            let s = Self::lookup(inner, id)?;
            let Some(served) = s.served_at_ms else {
                return Ok(());
            };
            if s.status != Status::Active || now <= served + self.config.timeout_ms + self.config.grace_ms {
                return Ok(());
            }
            let index = s.cursor;
            self.record(
                inner,
                id,
                index,
                None,
                self.config.timeout_ms,
                served + self.config.timeout_ms,
            )?;
        }
    }

    /// Appends the response for the trial at the cursor, and the completion
    /// event if it was the last one.
    fn record(
        &self,
        inner: &mut Inner,
        id: &str,
        index: usize,
        choice: Option<String>,
        latency_ms: u64,
        at_ms: u64,
    ) -> Result<Feedback> {
        let s = Self::lookup(inner, id)?;
        let blocks = s.plan.block_of_trials();
        let trial = s.plan.trial(index).ok_or(Error::Ordering {
            expected: s.cursor,
            got: index,
        })?;
        let correct = choice.as_deref() == Some(trial.answer.as_str());
        let event = TrialEvent {
            session_id: id.to_string(),
            trial_index: index,
            block: blocks[index],
            image_ref: asset_token(&s.experiment_id, &trial.image_id, trial.epsilon),
            phase: trial.phase,
            attention_check: trial.is_attention_check,
            options: trial.options.clone(),
            timed_out: choice.is_none(),
            choice,
            latency_ms,
            correct,
            at_ms,
        };
        let phase = trial.phase;
        let answer = trial.answer.clone();
        let timed_out = event.timed_out;
        let last = index + 1 == s.plan.len();
        Self::commit(inner, Event::Response(event))?;
        if last {
            let s = Self::lookup(inner, id)?;
            let acc = results_of(s, self.config.attention_threshold)
                .test_accuracy
                .unwrap_or(0.0);
            let bonus = self.config.bonus_for(acc);
            Self::commit(
                inner,
                Event::Completed {
                    session_id: id.to_string(),
                    bonus,
                    at_ms,
                },
            )?;
        }
        Ok(match phase {
            Phase::Train => Feedback::Train {
                correct,
                correct_label: answer,
                timed_out,
                session_complete: last,
            },
            Phase::Test => Feedback::Test {
                acknowledged: true,
                session_complete: last,
            },
        })
    }

    /// The pending trial; repeated calls return the same payload until it is
    /// answered or expires.
    pub fn next_trial(&self, id: &str) -> Result<NextTrial> {
        let mut inner = self.lock();
        self.expire(&mut inner, id)?;
        let s = Self::lookup(&inner, id)?;
        match s.status {
            Status::Completed => {
                return Ok(NextTrial::Completed(CompletionSummary {
                    session_id: s.id.clone(),
                    status: s.status,
                    bonus: s.bonus,
                }))
            }
            Status::Withdrawn => return Err(Error::Terminal(s.id.clone(), "withdrawn")),
            Status::Active => {}
        }
        let index = s.cursor;
        let trial = s.plan.trial(index).expect("active session has a pending trial").clone();
        let block = s.plan.block_of_trials()[index];
        let total = s.plan.len();
        let needs_serve = s.served_at_ms.is_none();
        let token = self.assets.prepare(&trial.image_id, trial.epsilon)?;
        if needs_serve {
            let at_ms = self.clock.now_ms();
            Self::commit(
                &mut inner,
                Event::TrialServed {
                    session_id: id.to_string(),
                    trial_index: index,
                    at_ms,
                },
            )?;
        }
        Ok(NextTrial::Trial(TrialPayload {
            session_id: id.to_string(),
            trial_index: index,
            total_trials: total,
            block,
            phase: trial.phase,
            image_url: format!("/v1/assets/{token}.png"),
            options: trial.options,
            timeout_ms: self.config.timeout_ms,
        }))
    }

    pub fn submit_response(&self, id: &str, req: &ResponseRequest) -> Result<Feedback> {
        let mut inner = self.lock();
        self.expire(&mut inner, id)?;
        let s = Self::lookup(&inner, id)?;
        if s.status != Status::Active {
            return Err(Error::Terminal(s.id.clone(), s.status.name()));
        }
        if req.trial_index != s.cursor {
            return Err(Error::Ordering {
                expected: s.cursor,
                got: req.trial_index,
            });
        }
        let trial = s.plan.trial(s.cursor).expect("active session has a pending trial");
        if let Some(c) = &req.choice {
            if !trial.options.contains(c) {
                return Err(Error::invalid(format!(
                    "choice {c:?} is not one of the presented options"
                )));
            }
        }
        let latency = req.latency_ms.min(self.config.timeout_ms);
        let now = self.clock.now_ms();
        self.record(&mut inner, id, req.trial_index, req.choice.clone(), latency, now)
    }

    pub fn withdraw(&self, id: &str) -> Result<()> {
        let mut inner = self.lock();
        let s = Self::lookup(&inner, id)?;
        if s.status != Status::Active {
            return Err(Error::Terminal(s.id.clone(), s.status.name()));
        }
        let at_ms = self.clock.now_ms();
        Self::commit(
            &mut inner,
            Event::Withdrawn {
                session_id: id.to_string(),
                at_ms,
            },
        )
    }

    pub fn session_results(&self, id: &str) -> Result<SessionResults> {
        let inner = self.lock();
        let s = Self::lookup(&inner, id)?;
        if s.status == Status::Active {
            return Err(Error::StillActive(id.to_string()));
        }
        Ok(results_of(s, self.config.attention_threshold))
    }

    /// The participant-independent view needed by in-process simulations.
    pub fn session(&self, id: &str) -> Result<Session> {
        Ok(Self::lookup(&self.lock(), id)?.clone())
    }

    /// Writes the folded state as JSON (a restart accelerator; the log
    /// remains authoritative).
    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let inner = self.lock();
        let tmp = path.with_extension("tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &inner.state)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Restores state from a snapshot plus the log events after it.
pub fn restore(snapshot: &Path, events: &[Event]) -> Result<State> {
    let f = std::fs::File::open(snapshot).map_err(|e| Error::io(snapshot, e))?;
    let mut state: State = serde_json::from_reader(std::io::BufReader::new(f))?;
    if state.events_applied > events.len() {
        return Err(Error::invalid("snapshot is newer than the event log"));
    }
    for e in &events[state.events_applied..] {
        state.apply(e)?;
    }
    Ok(state)
}
