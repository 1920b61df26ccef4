//! One human-answered run: the frozen plan of the current step, the answers
//! collected so far, and the files that let a restarted service pick it up.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use apis_core::driver::{Experiment, MetricsRow, Plan};
use apis_core::oracle::RemoteAnnotator;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const SESSION_FILE: &str = "session.json";
pub const ANSWERS_FILE: &str = "answers.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Selecting,
    AwaitingAnswers,
    Training,
    Finished,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub idempotency_key: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct AnswerLine {
    step: u32,
    query_id: u64,
    label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub pending: usize,
    pub step: u32,
}

pub(crate) enum AnswerError {
    NotAwaiting(SessionState),
    UnknownQuery(u64),
    AlreadyAnswered(u64),
    BadLabel(i64),
    Io(ServiceError),
}

pub struct Session {
    pub(crate) meta: SessionMeta,
    pub(crate) dir: PathBuf,
    pub(crate) state: SessionState,
    /// Absent while a training job owns it.
    pub(crate) exp: Option<Experiment>,
    pub(crate) plan: Option<Plan>,
    pub(crate) answers: BTreeMap<u64, u8>,
    pub(crate) metrics: Vec<MetricsRow>,
    pub(crate) error: Option<String>,
}

impl Session {
    /// Wraps `exp` and plans its next step, reloading answers already given.
    pub(crate) fn start(meta: SessionMeta, dir: PathBuf, exp: Experiment) -> Result<Self, ServiceError> {
        let mut s = Self {
            meta,
            dir,
            state: SessionState::Selecting,
            exp: None,
            plan: None,
            answers: BTreeMap::new(),
            metrics: exp.metrics().to_vec(),
            error: None,
        };
        s.advance(exp)?;
        Ok(s)
    }

    /// Installs `exp` after a completed step and plans the following one.
    pub(crate) fn advance(&mut self, exp: Experiment) -> Result<(), ServiceError> {
        let plan = plan_next(&exp)?;
        self.install(exp, plan)
    }

    /// Installs `exp` with its already computed next plan.
    pub(crate) fn install(&mut self, exp: Experiment, plan: Option<Plan>) -> Result<(), ServiceError> {
        self.metrics = exp.metrics().to_vec();
        self.answers.clear();
        self.plan = None;
        self.exp = Some(exp);
        let Some(plan) = plan else {
            self.state = SessionState::Finished;
            return Ok(());
        };
        for line in read_answers(&self.dir)? {
            if line.step == plan.step && plan.queries.iter().any(|q| q.query_id == line.query_id) {
                self.answers.entry(line.query_id).or_insert(line.label);
            }
        }
        self.plan = Some(plan);
        self.state = SessionState::AwaitingAnswers;
        Ok(())
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn progress(&self) -> Progress {
        let total = self.plan.as_ref().map_or(0, |p| p.queries.len());
        Progress {
            answered: self.answers.len(),
            pending: total - self.answers.len(),
            step: self.plan.as_ref().map_or_else(|| self.metrics.last().map_or(0, |r| r.step), |p| p.step),
        }
    }

    /// First unanswered query of the frozen plan, in plan order.
    pub(crate) fn next_query(&self) -> Option<&apis_core::oracle::PointQuery> {
        let plan = self.plan.as_ref()?;
        plan.queries.iter().find(|q| !self.answers.contains_key(&q.query_id))
    }

    pub(crate) fn answer(&mut self, query_id: u64, label: i64) -> Result<Progress, AnswerError> {
        if self.state != SessionState::AwaitingAnswers {
            return Err(AnswerError::NotAwaiting(self.state));
        }
        let plan = self.plan.as_ref().expect("awaiting sessions hold a plan");
        if !plan.queries.iter().any(|q| q.query_id == query_id) {
            return Err(AnswerError::UnknownQuery(query_id));
        }
        if self.answers.contains_key(&query_id) {
            return Err(AnswerError::AlreadyAnswered(query_id));
        }
        let label = match label {
            0 | 1 => label as u8,
            other => return Err(AnswerError::BadLabel(other)),
        };
        let line = AnswerLine {
            step: plan.step,
            query_id,
            label,
        };
        append_answer(&self.dir, &line).map_err(AnswerError::Io)?;
        self.answers.insert(query_id, label);
        Ok(self.progress())
    }

    /// Hands the experiment, plan and answers to a training job.
    pub(crate) fn take_job(&mut self) -> Option<(Experiment, Plan, RemoteAnnotator)> {
        let exp = self.exp.take()?;
        let plan = self.plan.clone().expect("awaiting sessions hold a plan");
        let mut annotator = RemoteAnnotator::new();
        for (&id, &label) in &self.answers {
            annotator.provide(id, label).expect("labels are validated on entry");
        }
        self.state = SessionState::Training;
        Some((exp, plan, annotator))
    }
}

pub(crate) fn plan_next(exp: &Experiment) -> Result<Option<Plan>, ServiceError> {
    match exp.next_step() {
        Some(_) => Ok(Some(exp.plan()?)),
        None => Ok(None),
    }
}

fn read_answers(dir: &Path) -> Result<Vec<AnswerLine>, ServiceError> {
    let path = dir.join(ANSWERS_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::Io(path, e)),
    };
    // A torn final line from a crash mid-append was never acknowledged; cut it
    // off so the next append starts on a fresh line.
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        std::fs::write(&path, &text[..keep]).map_err(|e| ServiceError::Io(path.clone(), e))?;
    }
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

fn append_answer(dir: &Path, line: &AnswerLine) -> Result<(), ServiceError> {
    let path = dir.join(ANSWERS_FILE);
    let io = |e| ServiceError::Io(path.clone(), e);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io)?;
    let text = serde_json::to_string(line).expect("answer serialization") + "\n";
    f.write_all(text.as_bytes()).map_err(io)?;
    f.sync_data().map_err(io)
}
