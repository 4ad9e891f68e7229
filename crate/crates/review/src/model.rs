//! Session state and the events that build it.
//!
//! A session is never edited in place: every change is an [`Event`], and
//! the current state is the fold of the session's event log.

use serde::{Deserialize, Serialize};

use crate::error::ReviewError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Exported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub iteration: u32,
    pub prompt: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub iteration: u32,
    pub job_id: String,
    /// Digest of the stored (PNG-decoded) image.
    pub digest: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    /// Relative to the session directory.
    pub fragment: String,
    pub sample_ids: Vec<String>,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub id: String,
    pub status: SessionStatus,
    pub created_at_ms: u64,
    pub prompt_history: Vec<PromptEntry>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export: Option<ExportRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSample {
    pub id: String,
    pub digest: String,
}

/// One line of a session's event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { session: String, prompt: String, at_ms: u64 },
    PromptRevised { iteration: u32, prompt: String, at_ms: u64 },
    SamplesAdded { job_id: String, iteration: u32, samples: Vec<NewSample>, at_ms: u64 },
    Decided { sample: String, decision: Decision, #[serde(default)] note: Option<String>, at_ms: u64 },
    Exported { fragment: String, sample_ids: Vec<String>, at_ms: u64 },
}

pub fn validate_prompt(prompt: &str) -> Result<(), ReviewError> {
    if prompt.trim().is_empty() {
        return Err(ReviewError::Validation("prompt must not be empty".into()));
    }
    Ok(())
}

impl ReviewSession {
    /// Replays a log. The first event must create the session.
    pub fn replay(events: &[Event]) -> Result<Self, ReviewError> {
        let mut it = events.iter();
        let mut session = match it.next() {
            Some(Event::Created { session, prompt, at_ms }) => {
                validate_prompt(prompt)?;
                ReviewSession {
                    id: session.clone(),
                    status: SessionStatus::Open,
                    created_at_ms: *at_ms,
                    prompt_history: vec![PromptEntry { iteration: 1, prompt: prompt.clone(), at_ms: *at_ms }],
                    samples: Vec::new(),
                    export: None,
                }
            }
            _ => return Err(ReviewError::Corrupt("log does not start with a `created` event".into())),
        };
        for e in it {
            session.apply(e)?;
        }
        Ok(session)
    }

    pub fn current_iteration(&self) -> u32 {
        self.prompt_history.last().map_or(1, |p| p.iteration)
    }

    pub fn current_prompt(&self) -> &str {
        self.prompt_history.last().map_or("", |p| p.prompt.as_str())
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn count(&self, d: Decision) -> usize {
        self.samples.iter().filter(|s| s.decision == d).count()
    }

    pub fn accepted_ids(&self) -> Vec<String> {
        self.samples.iter().filter(|s| s.decision == Decision::Accepted).map(|s| s.id.clone()).collect()
    }

    fn ensure_open(&self) -> Result<(), ReviewError> {
        match self.status {
            SessionStatus::Open => Ok(()),
            SessionStatus::Exported => Err(ReviewError::Conflict(format!("session {} is exported and read-only", self.id))),
        }
    }

    /// Applies one event, enforcing every session invariant. On error the
    /// session is left unchanged.
    pub fn apply(&mut self, event: &Event) -> Result<(), ReviewError> {
        match event {
            Event::Created { .. } => return Err(ReviewError::Conflict(format!("session {} already exists", self.id))),
            Event::PromptRevised { iteration, prompt, at_ms } => {
                self.ensure_open()?;
                validate_prompt(prompt)?;
                if *iteration != self.current_iteration() + 1 {
                    return Err(ReviewError::Corrupt(format!("iteration {iteration} out of sequence")));
                }
                self.prompt_history.push(PromptEntry { iteration: *iteration, prompt: prompt.clone(), at_ms: *at_ms });
            }
            Event::SamplesAdded { job_id, iteration, samples, .. } => {
                self.ensure_open()?;
                if !self.prompt_history.iter().any(|p| p.iteration == *iteration) {
                    return Err(ReviewError::Corrupt(format!("samples reference unknown iteration {iteration}")));
                }
                for (i, s) in samples.iter().enumerate() {
                    if self.sample(&s.id).is_some() || samples[..i].iter().any(|o| o.id == s.id) {
                        return Err(ReviewError::Corrupt(format!("duplicate sample id {}", s.id)));
                    }
                }
                self.samples.extend(samples.iter().map(|s| SampleRecord {
                    id: s.id.clone(),
                    iteration: *iteration,
                    job_id: job_id.clone(),
                    digest: s.digest.clone(),
                    decision: Decision::Pending,
                    note: None,
                    decided_at_ms: None,
                }));
            }
            Event::Decided { sample, decision, note, at_ms } => {
                self.ensure_open()?;
                if *decision == Decision::Pending {
                    return Err(ReviewError::Validation("decision must be `accepted` or `rejected`".into()));
                }
                let s = self
                    .samples
                    .iter_mut()
                    .find(|s| &s.id == sample)
                    .ok_or_else(|| ReviewError::NotFound(format!("sample {sample}")))?;
                if s.decision != Decision::Pending {
                    return Err(ReviewError::Conflict(format!("sample {sample} was already {:?}", s.decision).to_lowercase()));
                }
                s.decision = *decision;
                s.note = note.clone();
                s.decided_at_ms = Some(*at_ms);
            }
            Event::Exported { fragment, sample_ids, at_ms } => {
                self.ensure_open()?;
                if sample_ids.is_empty() {
                    return Err(ReviewError::Validation("nothing to export: no sample has been accepted".into()));
                }
                if *sample_ids != self.accepted_ids() {
                    return Err(ReviewError::Corrupt("export does not match the accepted samples".into()));
                }
                self.status = SessionStatus::Exported;
                self.export = Some(ExportRecord { fragment: fragment.clone(), sample_ids: sample_ids.clone(), at_ms: *at_ms });
            }
        }
        Ok(())
    }
}
