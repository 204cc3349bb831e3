//! Forward-pass ledger: the cost accounting behind every efficiency claim.
//!
//! Each model call, retrieval query, and decode step records one event.
//! Pending context (the question, information blocks, a fed action token)
//! rides along with the *next* model call rather than costing its own pass,
//! so a trajectory with `S` retrieval steps and `A` generated answer tokens
//! logs exactly `2S + 1 + A` forward events, and an explicit-text simulation
//! logs exactly one event per output token.  Context token counts are kept
//! separate from stage-proper token counts so summaries can report them as
//! their own input bucket.

use serde::{Deserialize, Serialize};

/// Which part of the pipeline an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "prefill")]
    Prefill,
    #[serde(rename = "thought-gen")]
    ThoughtGen,
    #[serde(rename = "subquery-gen")]
    SubqueryGen,
    #[serde(rename = "retrieval")]
    Retrieval,
    #[serde(rename = "answer-gen")]
    AnswerGen,
    #[serde(rename = "latent-decode")]
    LatentDecode,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prefill,
        Stage::ThoughtGen,
        Stage::SubqueryGen,
        Stage::Retrieval,
        Stage::AnswerGen,
        Stage::LatentDecode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::ThoughtGen => "thought-gen",
            Stage::SubqueryGen => "subquery-gen",
            Stage::Retrieval => "retrieval",
            Stage::AnswerGen => "answer-gen",
            Stage::LatentDecode => "latent-decode",
        }
    }
}

/// What kind of work an event is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// One forward over a block of positions; counts as one pass no matter
    /// how wide the block is.
    #[serde(rename = "parallel-forward")]
    ParallelForward,
    /// One generated token (for batched decoding: one step across the whole
    /// batch); counts as one pass.
    #[serde(rename = "autoregressive-decode")]
    AutoregressiveDecode,
    /// A retrieval index query; excluded from pass counts.
    #[serde(rename = "index-query")]
    IndexQuery,
}

/// One recorded event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub stage: Stage,
    pub kind: EventKind,
    /// Pending context tokens ingested by this call (the "others" bucket).
    pub context_tokens: usize,
    /// Stage-proper input tokens: slot widths, prompt widths.
    pub stage_tokens: usize,
    /// Tokens emitted by this event.
    pub tokens_out: usize,
    /// Wall-clock duration; excluded from deterministic artifacts.
    #[serde(skip)]
    pub micros: u64,
}

/// Ordered event log for one question (or one simulated run).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ForwardPassLedger {
    pub events: Vec<LedgerEvent>,
}

impl ForwardPassLedger {
    pub fn new() -> Self {
        ForwardPassLedger::default()
    }

    pub fn record(&mut self, event: LedgerEvent) {
        self.events.push(event);
    }

    /// Model forward passes: parallel forwards and decode steps count one
    /// each; index queries are free.
    pub fn passes(&self) -> usize {
        self.events
            .iter()
            .filter(|e| {
                matches!(e.kind, EventKind::ParallelForward | EventKind::AutoregressiveDecode)
            })
            .count()
    }

    /// Passes restricted to one stage.
    pub fn stage_passes(&self, stage: Stage) -> usize {
        self.events
            .iter()
            .filter(|e| {
                e.stage == stage
                    && matches!(
                        e.kind,
                        EventKind::ParallelForward | EventKind::AutoregressiveDecode
                    )
            })
            .count()
    }

    pub fn total_micros(&self) -> u64 {
        self.events.iter().map(|e| e.micros).sum()
    }

    pub fn stage_micros(&self, stage: Stage) -> u64 {
        self.events.iter().filter(|e| e.stage == stage).map(|e| e.micros).sum()
    }

    pub fn extend(&mut self, other: &ForwardPassLedger) {
        self.events.extend(other.events.iter().cloned());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(stage: Stage, kind: EventKind, micros: u64) -> LedgerEvent {
        LedgerEvent { stage, kind, context_tokens: 0, stage_tokens: 0, tokens_out: 0, micros }
    }

    #[test]
    fn passes_count_forwards_and_decodes_but_not_index_queries() {
        let mut ledger = ForwardPassLedger::new();
        ledger.record(ev(Stage::Prefill, EventKind::ParallelForward, 5));
        ledger.record(ev(Stage::SubqueryGen, EventKind::ParallelForward, 6));
        ledger.record(ev(Stage::Retrieval, EventKind::IndexQuery, 2));
        ledger.record(ev(Stage::AnswerGen, EventKind::AutoregressiveDecode, 1));
        ledger.record(ev(Stage::AnswerGen, EventKind::AutoregressiveDecode, 1));
        assert_eq!(ledger.passes(), 4);
        assert_eq!(ledger.stage_passes(Stage::AnswerGen), 2);
        assert_eq!(ledger.stage_passes(Stage::Retrieval), 0);
    }

    #[test]
    fn total_duration_is_sum_of_stage_durations() {
        let mut ledger = ForwardPassLedger::new();
        ledger.record(ev(Stage::Prefill, EventKind::ParallelForward, 10));
        ledger.record(ev(Stage::ThoughtGen, EventKind::ParallelForward, 20));
        ledger.record(ev(Stage::Retrieval, EventKind::IndexQuery, 30));
        let by_stage: u64 = Stage::ALL.iter().map(|&s| ledger.stage_micros(s)).sum();
        assert_eq!(ledger.total_micros(), by_stage);
        assert_eq!(ledger.total_micros(), 60);
    }

    #[test]
    fn stage_serde_names_are_kebab_case() {
        let json = serde_json::to_string(&Stage::ThoughtGen).unwrap();
        assert_eq!(json, "\"thought-gen\"");
        let kind = serde_json::to_string(&EventKind::IndexQuery).unwrap();
        assert_eq!(kind, "\"index-query\"");
    }
}
