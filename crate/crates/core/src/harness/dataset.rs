//! JSONL query datasets and the seeded 1:4 train/test split.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::executor::QueryRecord;

/// Parses one record per non-blank line. Line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<QueryRecord>, HarnessError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(line).map_err(|e| HarnessError::ParseError {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.difficulty) {
            return Err(HarnessError::ParseError {
                line: line_no,
                reason: format!("difficulty {} outside [0, 1]", record.difficulty),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(HarnessError::DuplicateQueryId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QueryRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_dataset(&text)
}

/// Seeded shuffle, then the first `⌈n/5⌉` records train and the rest test.
pub fn split_dataset(
    records: &[QueryRecord],
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>), HarnessError> {
    if records.len() < 5 {
        return Err(HarnessError::TooFewRecords(records.len()));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = records.len().div_ceil(5);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}
