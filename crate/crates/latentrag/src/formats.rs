//! On-disk artifact files: line-delimited JSON with a tagged header, plus
//! the trajectory dump record and the latency sidecar.
//!
//! Every artifact a run produces opens with a header line naming what the
//! file is and which configuration made it, so files can never be confused
//! across artifact kinds or traced to the wrong run.  Record lines are one
//! JSON object each; JSON escaping keeps embedded newlines and tabs safe.
//! Wall-clock durations are deliberately absent from every record (the
//! ledger skips them during serialization) — they go to a separate latency
//! table that is excluded from bit-identical rerun comparisons.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agent::{Action, LatentTrajectory, TerminationReason};
use crate::decode::DecodedStep;
use crate::error::{Error, Result};
use crate::ledger::{ForwardPassLedger, Stage};

/// Artifact names stamped into file headers.
pub const CORPUS_ARTIFACT: &str = "corpus";
pub const QA_ARTIFACT: &str = "qa";
pub const TEACHER_ARTIFACT: &str = "teacher-trajectories";
pub const TRAJECTORY_ARTIFACT: &str = "latent-trajectories";

const FILE_VERSION: u32 = 1;

/// First line of every line-delimited artifact file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub artifact: String,
    pub version: u32,
    pub config_hash: String,
}

/// A parsed artifact file: provenance plus records.
#[derive(Debug, Clone)]
pub struct ArtifactFile<T> {
    pub config_hash: String,
    pub items: Vec<T>,
}

fn json_err(what: &str, line: usize, err: &serde_json::Error) -> Error {
    Error::Format(format!("{what} at line {line}: {err}"))
}

/// Render records as header + one JSON object per line.
pub fn render_jsonl<T: Serialize>(
    artifact: &str,
    config_hash: &str,
    items: &[T],
) -> Result<String> {
    let header = FileHeader {
        artifact: artifact.to_string(),
        version: FILE_VERSION,
        config_hash: config_hash.to_string(),
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("unserializable header: {e}")))?;
    out.push('\n');
    for (i, item) in items.iter().enumerate() {
        out.push_str(
            &serde_json::to_string(item)
                .map_err(|e| json_err("unserializable record", i + 2, &e))?,
        );
        out.push('\n');
    }
    Ok(out)
}

/// Parse an artifact file, insisting it is the expected kind.  Blank lines
/// are not tolerated: every line after the header must be one record.
pub fn parse_jsonl<T: DeserializeOwned>(artifact: &str, text: &str) -> Result<ArtifactFile<T>> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty file: missing artifact header".into()))?;
    let header: FileHeader =
        serde_json::from_str(first).map_err(|e| json_err("bad artifact header", 1, &e))?;
    if header.artifact != artifact {
        return Err(Error::Format(format!(
            "expected a '{artifact}' file, found '{}'",
            header.artifact
        )));
    }
    if header.version != FILE_VERSION {
        return Err(Error::Format(format!(
            "unsupported {artifact} file version {}",
            header.version
        )));
    }
    let mut items = Vec::new();
    for (i, line) in lines.enumerate() {
        items.push(
            serde_json::from_str(line).map_err(|e| json_err("bad record", i + 2, &e))?,
        );
    }
    Ok(ArtifactFile { config_hash: header.config_hash, items })
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    artifact: &str,
    config_hash: &str,
    items: &[T],
) -> Result<()> {
    std::fs::write(path, render_jsonl(artifact, config_hash, items)?)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, artifact: &str) -> Result<ArtifactFile<T>> {
    parse_jsonl(artifact, &std::fs::read_to_string(path)?)
}

// ── delimited-table stamping ───────────────────────────────────────────────

/// Provenance comment lines for delimited-table artifacts (reports, loss
/// logs, latency tables).
pub fn stamp(artifact: &str, config_hash: &str) -> String {
    format!("# artifact {artifact}\n# config {config_hash}\n")
}

/// Read back a table stamp: `(artifact, config_hash)`.
pub fn parse_stamp(text: &str) -> Result<(String, String)> {
    let mut lines = text.lines();
    let artifact = lines
        .next()
        .and_then(|l| l.strip_prefix("# artifact "))
        .ok_or_else(|| Error::Format("missing '# artifact' stamp line".into()))?;
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config "))
        .ok_or_else(|| Error::Format("missing '# config' stamp line".into()))?;
    Ok((artifact.to_string(), hash.to_string()))
}

// ── trajectory dumps ───────────────────────────────────────────────────────

/// One step of a dumped trajectory: the action, the retrieved document ids
/// in rank order, and — when decoding ran — the reconstructed texts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpStep {
    pub action: Action,
    pub retrieved: Vec<String>,
    pub thought_text: Option<String>,
    pub subquery_text: Option<String>,
    /// Decoded lengths in tokens, terminator included — the inputs to the
    /// max-length ratio that bounds parallel-decoding savings.
    pub thought_len: Option<usize>,
    pub subquery_len: Option<usize>,
}

/// A latent trajectory rendered for files: question, per-step fields
/// (decoded text or just the raw action/retrieval record), answer, and the
/// cost ledger.  Latent hidden-state blocks stay out of dumps; they live in
/// memory and checkpoints, not artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub item_id: String,
    pub question: String,
    pub steps: Vec<DumpStep>,
    pub answer: Option<String>,
    pub termination: TerminationReason,
    pub ledger: ForwardPassLedger,
}

impl TrajectoryDump {
    /// Render a finished trajectory, attaching decoded texts when given.
    /// `decoded` must cover the steps one-to-one.
    pub fn from_latent(
        item_id: &str,
        trajectory: &LatentTrajectory,
        decoded: Option<&[DecodedStep]>,
    ) -> Result<TrajectoryDump> {
        if let Some(d) = decoded {
            if d.len() != trajectory.steps.len() {
                return Err(Error::Data(format!(
                    "trajectory '{item_id}' has {} steps but {} decoded steps",
                    trajectory.steps.len(),
                    d.len()
                )));
            }
        }
        let steps = trajectory
            .steps
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let texts = decoded.map(|d| &d[i]);
                DumpStep {
                    action: step.action,
                    retrieved: step
                        .retrieved
                        .as_ref()
                        .map(|docs| docs.iter().map(|d| d.id.clone()).collect())
                        .unwrap_or_default(),
                    thought_text: texts.map(|t| t.thought.text.clone()),
                    subquery_text: texts.and_then(|t| t.subquery.as_ref().map(|b| b.text.clone())),
                    thought_len: texts.map(|t| t.thought.tokens.len()),
                    subquery_len: texts
                        .and_then(|t| t.subquery.as_ref().map(|b| b.tokens.len())),
                }
            })
            .collect();
        Ok(TrajectoryDump {
            item_id: item_id.to_string(),
            question: trajectory.question.clone(),
            steps,
            answer: trajectory.answer.clone(),
            termination: trajectory.termination,
            ledger: trajectory.ledger.clone(),
        })
    }
}

// ── latency sidecar ────────────────────────────────────────────────────────

/// Wall-clock stage table: one row per question and stage plus a total row,
/// in microseconds.  This is the only artifact carrying timings, and the
/// only one allowed to differ between reruns.
pub fn render_latency_table(
    config_hash: &str,
    entries: &[(String, &ForwardPassLedger)],
) -> String {
    let mut out = stamp("latency", config_hash);
    out.push_str("question\tstage\tmicros\n");
    for (id, ledger) in entries {
        for &stage in &Stage::ALL {
            out.push_str(&format!("{id}\t{}\t{}\n", stage.name(), ledger.stage_micros(stage)));
        }
        out.push_str(&format!("{id}\ttotal\t{}\n", ledger.total_micros()));
    }
    out
}
