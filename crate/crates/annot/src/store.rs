//! Append-only rating log. Each rating is one JSON line; identical resubmissions
//! are recognized by content hash and stored once, and a different score for an
//! already rated (rater, target, alias) is refused.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use attnprobe::seed;

use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_prompt: Option<String>,
    pub model_alias: String,
    pub true_model_id: String,
    pub recall: u8,
    pub precision: u8,
    pub intuitiveness: u8,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

impl Rating {
    /// What was rated, independent of the scores.
    fn target_key(&self) -> String {
        let target = match (&self.sentence_index, &self.custom_prompt) {
            (Some(i), _) => format!("s{i}"),
            (None, Some(p)) => format!("p{p}"),
            (None, None) => String::new(),
        };
        format!("{}\u{1f}{}\u{1f}{}\u{1f}{}", self.rater_id, self.instance_id, target, self.model_alias)
    }

    /// Hash of everything except the timestamp.
    pub fn content_hash(&self) -> String {
        let key = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.target_key(),
            self.true_model_id,
            self.recall,
            self.precision,
            self.intuitiveness
        );
        seed::content_hash(key.as_bytes())
    }

    pub fn is_custom(&self) -> bool {
        self.custom_prompt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Appended {
    New(String),
    Duplicate(String),
}

#[derive(Debug)]
pub struct Store {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<Rating>,
    by_target: HashMap<String, String>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            records: Vec::new(),
            by_target: HashMap::new(),
        }
    }

    /// Opens (creating if needed) a JSONL log and replays its contents.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: Rating = serde_json::from_str(&line)
                    .map_err(|e| Error::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
                store.insert(r)?;
            }
        }
        store.file = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        store.path = Some(path);
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn insert(&mut self, r: Rating) -> Result<Appended, Error> {
        let hash = r.content_hash();
        let target = r.target_key();
        match self.by_target.get(&target) {
            Some(h) if *h == hash => return Ok(Appended::Duplicate(hash)),
            Some(_) => return Err(Error::Conflict("this item was already rated with different scores".into())),
            None => {}
        }
        self.by_target.insert(target, hash.clone());
        self.records.push(r);
        Ok(Appended::New(hash))
    }

    pub fn append(&mut self, r: Rating) -> Result<Appended, Error> {
        let line = serde_json::to_string(&r).expect("rating serializes");
        let out = self.insert(r)?;
        if let (Appended::New(_), Some(f)) = (&out, self.file.as_mut()) {
            writeln!(f, "{line}")?;
            f.flush()?;
            f.sync_data()?;
        }
        Ok(out)
    }

    pub fn records(&self) -> &[Rating] {
        &self.records
    }

    pub fn rated_instance(&self, rater_id: &str, instance_id: &str) -> bool {
        self.records
            .iter()
            .any(|r| r.rater_id == rater_id && r.instance_id == instance_id)
    }
}

pub const EXPORT_COLUMNS: [&str; 11] = [
    "instance_id",
    "sentence_index",
    "custom",
    "custom_prompt",
    "model_id",
    "model_alias",
    "rater_id",
    "recall",
    "precision",
    "intuitiveness",
    "timestamp_ms",
];

/// De-aliased ratings table, one row per stored rating.
pub fn export_csv(records: &[Rating]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EXPORT_COLUMNS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.instance_id.clone(),
            r.sentence_index.map(|i| i.to_string()).unwrap_or_default(),
            r.is_custom().to_string(),
            r.custom_prompt.clone().unwrap_or_default(),
            r.true_model_id.clone(),
            r.model_alias.clone(),
            r.rater_id.clone(),
            r.recall.to_string(),
            r.precision.to_string(),
            r.intuitiveness.to_string(),
            r.timestamp_ms.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(alias: &str, score: u8) -> Rating {
        Rating {
            rater_id: "r".into(),
            instance_id: "i".into(),
            sentence_index: Some(0),
            custom_prompt: None,
            model_alias: alias.into(),
            true_model_id: "m".into(),
            recall: score,
            precision: 3,
            intuitiveness: 4,
            timestamp_ms: 1,
        }
    }

    #[test]
    fn dedup_and_conflict() {
        let mut s = Store::in_memory();
        assert!(matches!(s.append(rating("A", 2)).unwrap(), Appended::New(_)));
        let mut again = rating("A", 2);
        again.timestamp_ms = 99;
        assert!(matches!(s.append(again).unwrap(), Appended::Duplicate(_)));
        assert!(matches!(s.append(rating("A", 5)), Err(Error::Conflict(_))));
        assert!(matches!(s.append(rating("B", 5)).unwrap(), Appended::New(_)));
        assert_eq!(s.records().len(), 2);
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        {
            let mut s = Store::open(&path).unwrap();
            s.append(rating("A", 2)).unwrap();
            s.append(rating("B", 1)).unwrap();
        }
        let mut s = Store::open(&path).unwrap();
        assert_eq!(s.records().len(), 2);
        assert!(matches!(s.append(rating("A", 2)).unwrap(), Appended::Duplicate(_)));
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn export_header_only_when_empty() {
        let csv = export_csv(&[]);
        assert_eq!(csv.trim_end(), EXPORT_COLUMNS.join(","));
    }

    #[test]
    fn export_row_per_rating() {
        let mut custom = rating("A", 1);
        custom.sentence_index = None;
        custom.custom_prompt = Some("There is no effusion.".into());
        let csv = export_csv(&[rating("A", 2), custom]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("i,0,false,,m,A,r,2,3,4,"));
        assert!(lines[2].starts_with("i,,true,There is no effusion.,m,A,r,1,3,4,"));
    }
}
