//! Single-file record store with optimistic versioning and an append-only
//! edit history.

use std::path::Path;

use chrono::{SecondsFormat, Utc};
use dmsl_core::masks::boundary_from_landmarks;
use dmsl_core::{BoundaryBox, LandmarkSet, SampleRecord, Variation};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS records (
    record_id  TEXT PRIMARY KEY,
    position   INTEGER NOT NULL,
    variation  TEXT NOT NULL,
    fold_group INTEGER NOT NULL,
    calibrated INTEGER NOT NULL,
    version    INTEGER NOT NULL,
    body       TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS history (
    seq        INTEGER PRIMARY KEY AUTOINCREMENT,
    record_id  TEXT NOT NULL,
    version    INTEGER NOT NULL,
    landmarks  TEXT,
    boundary   TEXT,
    calibrated INTEGER NOT NULL,
    editor_id  TEXT NOT NULL,
    action     TEXT NOT NULL,
    at         TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS history_by_record ON history(record_id, seq);
CREATE TRIGGER IF NOT EXISTS history_no_update BEFORE UPDATE ON history
    BEGIN SELECT RAISE(ABORT, 'history is append-only'); END;
CREATE TRIGGER IF NOT EXISTS history_no_delete BEFORE DELETE ON history
    BEGIN SELECT RAISE(ABORT, 'history is append-only'); END;
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    #[serde(flatten)]
    pub record: SampleRecord,
    pub version: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: i64,
    pub version: i64,
    pub landmarks: Option<LandmarkSet>,
    pub boundary: Option<BoundaryBox>,
    pub calibrated: bool,
    pub editor_id: String,
    pub action: String,
    pub at: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListFilter {
    pub fold: Option<u8>,
    pub variation: Option<Variation>,
    pub calibrated: Option<bool>,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<StoredRecord>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

/// A change to a record's annotation.
#[derive(Debug, Clone)]
pub struct Edit<'a> {
    pub landmarks: Option<LandmarkSet>,
    pub calibrated: bool,
    pub editor_id: &'a str,
    pub action: &'a str,
    /// Version the editor saw; `None` skips the check.
    pub expected_version: Option<i64>,
}

pub struct Store {
    conn: Connection,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn to_json<T: Serialize>(v: &Option<T>) -> Result<Option<String>> {
    v.as_ref().map(serde_json::to_string).transpose().map_err(Into::into)
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    /// Adds records that are not stored yet (all of them with `replace`),
    /// keeping manifest order. Returns how many were written.
    pub fn import(&mut self, records: &[SampleRecord], replace: bool) -> Result<usize> {
        let tx = self.conn.transaction()?;
        let mut written = 0;
        let base: i64 = tx.query_row("SELECT COALESCE(MAX(position) + 1, 0) FROM records", [], |r| r.get(0))?;
        for (i, rec) in records.iter().enumerate() {
            let existing: Option<i64> = tx
                .query_row("SELECT version FROM records WHERE record_id = ?1", [&rec.record_id], |r| r.get(0))
                .optional()?;
            if existing.is_some() && !replace {
                continue;
            }
            let mut rec = rec.clone();
            rec.boundary = rec.landmarks.as_ref().map(boundary_from_landmarks).transpose()?;
            let version = existing.map_or(0, |v| v + 1);
            tx.execute(
                "INSERT INTO records (record_id, position, variation, fold_group, calibrated, version, body)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
                 ON CONFLICT(record_id) DO UPDATE SET variation = ?3, fold_group = ?4,
                    calibrated = ?5, version = ?6, body = ?7",
                params![
                    rec.record_id,
                    base + i as i64,
                    rec.variation.acronym(),
                    rec.fold_group,
                    rec.calibrated,
                    version,
                    serde_json::to_string(&rec)?
                ],
            )?;
            tx.execute(
                "INSERT INTO history (record_id, version, landmarks, boundary, calibrated, editor_id, action, at)
                 VALUES (?1, ?2, ?3, ?4, ?5, 'import', 'import', ?6)",
                params![
                    rec.record_id,
                    version,
                    to_json(&rec.landmarks)?,
                    to_json(&rec.boundary)?,
                    rec.calibrated,
                    now()
                ],
            )?;
            written += 1;
        }
        tx.commit()?;
        Ok(written)
    }

    fn get_in(conn: &Connection, id: &str) -> Result<StoredRecord> {
        conn.query_row("SELECT body, version FROM records WHERE record_id = ?1", [id], |r| {
            Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?))
        })
        .optional()?
        .ok_or_else(|| AnnotateError::NotFound(id.to_string()))
        .and_then(|(body, version)| {
            Ok(StoredRecord {
                record: serde_json::from_str(&body)?,
                version,
            })
        })
    }

    pub fn get(&self, id: &str) -> Result<StoredRecord> {
        Self::get_in(&self.conn, id)
    }

    pub fn list(&self, f: &ListFilter) -> Result<Page> {
        let clause = "WHERE (?1 IS NULL OR fold_group = ?1)
                        AND (?2 IS NULL OR variation = ?2)
                        AND (?3 IS NULL OR calibrated = ?3)";
        let args = params![f.fold, f.variation.map(|v| v.acronym()), f.calibrated];
        let total: i64 = self
            .conn
            .query_row(&format!("SELECT COUNT(*) FROM records {clause}"), args, |r| r.get(0))?;
        let limit = if f.limit == 0 { i64::MAX } else { f.limit as i64 };
        let mut stmt = self.conn.prepare(&format!(
            "SELECT body, version FROM records {clause} ORDER BY position LIMIT ?4 OFFSET ?5"
        ))?;
        let rows = stmt.query_map(
            params![f.fold, f.variation.map(|v| v.acronym()), f.calibrated, limit, f.offset as i64],
            |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)),
        )?;
        let mut items = Vec::new();
        for row in rows {
            let (body, version) = row?;
            items.push(StoredRecord {
                record: serde_json::from_str(&body)?,
                version,
            });
        }
        Ok(Page {
            items,
            total: total as usize,
            offset: f.offset,
            limit: f.limit,
        })
    }

    pub fn history(&self, id: &str) -> Result<Vec<HistoryEntry>> {
        let mut stmt = self.conn.prepare(
            "SELECT seq, version, landmarks, boundary, calibrated, editor_id, action, at
             FROM history WHERE record_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([id], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, Option<String>>(2)?,
                r.get::<_, Option<String>>(3)?,
                r.get::<_, bool>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, String>(6)?,
                r.get::<_, String>(7)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (seq, version, l, b, calibrated, editor_id, action, at) = row?;
            out.push(HistoryEntry {
                seq,
                version,
                landmarks: l.map(|s| serde_json::from_str(&s)).transpose()?,
                boundary: b.map(|s| serde_json::from_str(&s)).transpose()?,
                calibrated,
                editor_id,
                action,
                at,
            });
        }
        Ok(out)
    }

    /// Applies an edit atomically: checks the version, recomputes the
    /// boundary from the landmarks, bumps the version and appends history.
    pub fn apply(&mut self, id: &str, edit: Edit) -> Result<StoredRecord> {
        let tx = self.conn.transaction()?;
        let current = Self::get_in(&tx, id)?;
        if let Some(expected) = edit.expected_version {
            if expected != current.version {
                return Err(AnnotateError::Conflict {
                    record_id: id.to_string(),
                    expected,
                    current: current.version,
                });
            }
        }
        let boundary = edit.landmarks.as_ref().map(boundary_from_landmarks).transpose()?;
        let record = SampleRecord {
            landmarks: edit.landmarks,
            boundary,
            calibrated: edit.calibrated,
            ..current.record
        };
        let version = current.version + 1;
        tx.execute(
            "UPDATE records SET calibrated = ?2, version = ?3, body = ?4 WHERE record_id = ?1",
            params![id, record.calibrated, version, serde_json::to_string(&record)?],
        )?;
        tx.execute(
            "INSERT INTO history (record_id, version, landmarks, boundary, calibrated, editor_id, action, at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                id,
                version,
                to_json(&record.landmarks)?,
                to_json(&record.boundary)?,
                record.calibrated,
                edit.editor_id,
                edit.action,
                now()
            ],
        )?;
        tx.commit()?;
        Ok(StoredRecord { record, version })
    }

    /// All records in manifest order, ready to write as a manifest.
    pub fn export(&self) -> Result<Vec<SampleRecord>> {
        Ok(self
            .list(&ListFilter::default())?
            .items
            .into_iter()
            .map(|s| s.record)
            .collect())
    }

    #[cfg(test)]
    pub(crate) fn raw(&self) -> &Connection {
        &self.conn
    }
}
