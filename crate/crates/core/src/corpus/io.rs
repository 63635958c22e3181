//! JSON-lines dataset files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, IntentLabel, LabeledExample, ShotClass};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Many,
    Few,
}

impl From<ShotClass> for Shot {
    fn from(s: ShotClass) -> Self {
        match s {
            ShotClass::ManyShot => Shot::Many,
            ShotClass::FewShot => Shot::Few,
        }
    }
}

impl From<Shot> for ShotClass {
    fn from(s: Shot) -> Self {
        match s {
            Shot::Many => ShotClass::ManyShot,
            Shot::Few => ShotClass::FewShot,
        }
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub utterance: String,
    pub domain: String,
    pub action: String,
    pub split: Split,
    pub shot: Shot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl DatasetRecord {
    pub fn from_example(ex: &LabeledExample, split: Split) -> Self {
        Self {
            utterance: ex.utterance().to_string(),
            domain: ex.intent.domain().to_string(),
            action: ex.intent.action().to_string(),
            split,
            shot: ex.shot.into(),
            source: None,
        }
    }

    pub fn to_example(&self) -> Result<LabeledExample> {
        LabeledExample::new(
            &self.utterance,
            IntentLabel::new(&self.domain, &self.action)?,
            self.shot.into(),
        )
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let ex = rec.to_example().map_err(|e| parse_err(e.to_string()))?;
        match rec.split {
            Split::Train => ds.train.push(ex),
            Split::Test => ds.test.push(ex),
        }
    }
    Ok(ds)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes train examples first, then test examples.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let records: Vec<_> = ds
        .train
        .iter()
        .map(|e| DatasetRecord::from_example(e, Split::Train))
        .chain(ds.test.iter().map(|e| DatasetRecord::from_example(e, Split::Test)))
        .collect();
    write_records(path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_wire_format() {
        let ex = LabeledExample::new(
            "Set an alarm!",
            IntentLabel::new("alarm", "set").unwrap(),
            ShotClass::FewShot,
        )
        .unwrap();
        let line = serde_json::to_string(&DatasetRecord::from_example(&ex, Split::Train)).unwrap();
        assert_eq!(
            line,
            r#"{"utterance":"set an alarm","domain":"alarm","action":"set","split":"train","shot":"few"}"#
        );
    }

    #[test]
    fn file_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let intent = IntentLabel::new("weather", "query").unwrap();
        let ds = Dataset {
            train: vec![LabeledExample::new("is it cold", intent.clone(), ShotClass::ManyShot).unwrap()],
            test: vec![LabeledExample::new("will it rain", intent, ShotClass::ManyShot).unwrap()],
        };
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);

        std::fs::write(&path, "{\"utterance\":\"x\"}\n").unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
