//! The timed odd-one-out protocol for human observers.
//!
//! A schedule interleaves one catch trial after every ten standard trials
//! and marks a break after every hundred standard trials. Standard trials
//! show a DiST triplet (the original is the answer); catch trials show an
//! original, its mirror image and a disrupted variant (the disrupted image
//! is the answer). Responses later than the window are recorded as invalid.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::seed;

pub const CATCH_EVERY: usize = 10;
pub const BREAK_EVERY: usize = 100;
pub const RESPONSE_WINDOW_MS: f64 = 2000.0;
/// Allowed excess of client-reported time over the server-observed window before a record is flagged.
pub const TIMING_SLACK_MS: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Standard,
    Catch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub kind: TrialKind,
    /// Triplet or catch-record id.
    pub source_id: String,
    /// Image paths in display order.
    pub images: [String; 3],
    /// Display position (0-based) of the correct answer.
    pub correct_index: usize,
    pub permutation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSchedule {
    pub seed: u64,
    pub n_standard: usize,
    pub trials: Vec<Trial>,
    /// Trial indices after which a break is offered.
    pub break_after: Vec<usize>,
}

impl TrialSchedule {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn is_break_after(&self, index: usize) -> bool {
        self.break_after.binary_search(&index).is_ok()
    }
}

/// Total trial count for `n_standard` standard trials.
pub fn trial_count(n_standard: usize) -> usize {
    n_standard + n_standard / CATCH_EVERY
}

fn permuted(items: [&str; 3], answer: usize, seed: u64) -> ([String; 3], usize) {
    let mut order = [0usize, 1, 2];
    order.shuffle(&mut seed::rng(seed));
    let images = order.map(|i| items[i].to_string());
    let correct = order.iter().position(|&i| i == answer).expect("permutation of 0..3");
    (images, correct)
}

/// Draws `n_standard` distinct triplets and `n_standard / 10` distinct catch
/// records, interleaves them and permutes each display with its own seed.
pub fn build_schedule(manifest: &DatasetManifest, n_standard: usize, seed: u64) -> Result<TrialSchedule> {
    let n_catch = n_standard / CATCH_EVERY;
    if n_standard == 0 {
        return Err(Error::Config("a schedule needs at least one standard trial".into()));
    }
    if manifest.records.len() < n_standard {
        return Err(Error::Config(format!(
            "{n_standard} standard trials requested, manifest has {} triplets",
            manifest.records.len()
        )));
    }
    if manifest.catch.len() < n_catch {
        return Err(Error::Config(format!(
            "{n_catch} catch trials needed, manifest has {} catch records",
            manifest.catch.len()
        )));
    }
    let standard_images: HashSet<&str> = manifest
        .records
        .iter()
        .flat_map(|r| [r.original_path.as_str(), r.variant_paths[0].as_str(), r.variant_paths[1].as_str()])
        .collect();
    if let Some(c) = manifest.catch.iter().find(|c| c.paths().iter().any(|p| standard_images.contains(p))) {
        return Err(Error::Config(format!("catch record {} reuses a standard-trial image", c.id)));
    }

    let mut rng = seed::rng(seed);
    let standard: Vec<_> = manifest.records.choose_multiple(&mut rng, n_standard).collect();
    let catch: Vec<_> = manifest.catch.choose_multiple(&mut rng, n_catch).collect();

    let mut trials = Vec::with_capacity(trial_count(n_standard));
    let mut break_after = Vec::new();
    let mut catch_iter = catch.into_iter();
    for (s, rec) in standard.into_iter().enumerate() {
        let index = trials.len();
        let pseed = seed::derive(seed, &[index as u64]);
        let (images, correct_index) = permuted(
            [&rec.original_path, &rec.variant_paths[0], &rec.variant_paths[1]],
            0,
            pseed,
        );
        trials.push(Trial {
            index,
            kind: TrialKind::Standard,
            source_id: rec.id.clone(),
            images,
            correct_index,
            permutation_seed: pseed,
        });
        if (s + 1) % BREAK_EVERY == 0 {
            break_after.push(index);
        }
        if (s + 1) % CATCH_EVERY == 0 {
            let c = catch_iter.next().expect("catch count matches standard count");
            let index = trials.len();
            let pseed = seed::derive(seed, &[index as u64]);
            let (images, correct_index) = permuted(c.paths(), 2, pseed);
            trials.push(Trial {
                index,
                kind: TrialKind::Catch,
                source_id: c.id.clone(),
                images,
                correct_index,
                permutation_seed: pseed,
            });
        }
    }
    Ok(TrialSchedule { seed, n_standard, trials, break_after })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub session_id: String,
    pub trial_index: usize,
    pub kind: TrialKind,
    /// 1, 2 or 3; `None` for a timeout.
    pub key: Option<u8>,
    pub elapsed_ms: f64,
    pub valid: bool,
    /// Whether the key names the correct position, independent of timing.
    pub correct: bool,
    /// Client time exceeded the server-observed window plus slack.
    pub timing_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    /// Correct valid standard trials over valid standard trials; `None` when there are none.
    pub accuracy: Option<f64>,
    pub valid_standard: usize,
    pub correct_standard: usize,
    pub catch_accuracy: Option<f64>,
    pub valid_catch: usize,
    pub timeouts: usize,
    pub late: usize,
    pub answered: usize,
    pub total_trials: usize,
    pub complete: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header {
        session_id: String,
        schedule_hash: String,
        seed: u64,
        n_standard: usize,
        trial_count: usize,
    },
    Response(ResponseRecord),
    Score(SessionScore),
}

/// One observer's run through a schedule.
#[derive(Debug)]
pub struct Session {
    id: String,
    schedule: TrialSchedule,
    responses: Vec<ResponseRecord>,
    finalized: bool,
    log: Option<(PathBuf, File)>,
}

impl Session {
    pub fn new(id: impl Into<String>, schedule: TrialSchedule) -> Self {
        Self {
            id: id.into(),
            schedule,
            responses: Vec::new(),
            finalized: false,
            log: None,
        }
    }

    /// Like [`Session::new`], appending every record to `path` as JSON lines.
    pub fn with_log(id: impl Into<String>, schedule: TrialSchedule, path: &Path) -> Result<Self> {
        let mut s = Self::new(id, schedule);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        s.log = Some((path.to_path_buf(), file));
        let header = LogLine::Header {
            session_id: s.id.clone(),
            schedule_hash: s.schedule.hash()?,
            seed: s.schedule.seed,
            n_standard: s.schedule.n_standard,
            trial_count: s.schedule.len(),
        };
        s.append(&header)?;
        Ok(s)
    }

    fn append(&mut self, line: &LogLine) -> Result<()> {
        if let Some((path, file)) = &mut self.log {
            let mut text = serde_json::to_string(line)?;
            text.push('\n');
            file.write_all(text.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            file.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn schedule(&self) -> &TrialSchedule {
        &self.schedule
    }

    pub fn responses(&self) -> &[ResponseRecord] {
        &self.responses
    }

    /// Index of the trial awaiting a response, or `None` when all are answered.
    pub fn current(&self) -> Option<usize> {
        (self.responses.len() < self.schedule.len()).then_some(self.responses.len())
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Records the answer to the current trial.
    ///
    /// `server_window_ms` is the time the server saw between serving the
    /// trial and receiving the response; a client time beyond it plus
    /// [`TIMING_SLACK_MS`] is flagged, not rejected.
    pub fn submit_response(
        &mut self,
        trial_index: usize,
        key: Option<u8>,
        elapsed_ms: f64,
        server_window_ms: Option<f64>,
    ) -> Result<ResponseRecord> {
        if self.finalized {
            return Err(Error::Protocol(format!("session {} is finalized", self.id)));
        }
        match self.current() {
            Some(cur) if trial_index < cur => {
                return Err(Error::Protocol(format!("trial {trial_index} was already answered")));
            }
            Some(cur) if trial_index != cur => {
                return Err(Error::Protocol(format!("trial {trial_index} is out of order, current trial is {cur}")));
            }
            None => return Err(Error::Protocol(format!("session {} has no trials left", self.id))),
            Some(_) => {}
        }
        if let Some(k) = key {
            if !(1..=3).contains(&k) {
                return Err(Error::Protocol(format!("key {k} is not one of 1, 2, 3")));
            }
        }
        if !(elapsed_ms.is_finite() && elapsed_ms >= 0.0) {
            return Err(Error::Protocol(format!("elapsed time {elapsed_ms} is invalid")));
        }
        let trial = &self.schedule.trials[trial_index];
        let record = ResponseRecord {
            session_id: self.id.clone(),
            trial_index,
            kind: trial.kind,
            key,
            elapsed_ms,
            valid: key.is_some() && elapsed_ms <= RESPONSE_WINDOW_MS,
            correct: key.is_some_and(|k| usize::from(k) == trial.correct_index + 1),
            timing_flag: server_window_ms.is_some_and(|w| elapsed_ms > w + TIMING_SLACK_MS),
        };
        self.append(&LogLine::Response(record.clone()))?;
        self.responses.push(record.clone());
        Ok(record)
    }

    pub fn score(&self) -> SessionScore {
        score_responses(&self.responses, self.schedule.len())
    }

    /// Closes the session and appends the score to the log.
    pub fn finalize(&mut self) -> Result<SessionScore> {
        if self.finalized {
            return Err(Error::Protocol(format!("session {} is already finalized", self.id)));
        }
        let score = self.score();
        self.append(&LogLine::Score(score.clone()))?;
        self.finalized = true;
        Ok(score)
    }
}

pub fn score_responses(responses: &[ResponseRecord], total_trials: usize) -> SessionScore {
    let count = |kind: TrialKind, correct: bool| {
        responses
            .iter()
            .filter(|r| r.kind == kind && r.valid && (!correct || r.correct))
            .count()
    };
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let valid_standard = count(TrialKind::Standard, false);
    let correct_standard = count(TrialKind::Standard, true);
    let valid_catch = count(TrialKind::Catch, false);
    SessionScore {
        accuracy: ratio(correct_standard, valid_standard),
        valid_standard,
        correct_standard,
        catch_accuracy: ratio(count(TrialKind::Catch, true), valid_catch),
        valid_catch,
        timeouts: responses.iter().filter(|r| r.key.is_none()).count(),
        late: responses.iter().filter(|r| r.key.is_some() && !r.valid).count(),
        answered: responses.len(),
        total_trials,
        complete: responses.len() == total_trials,
    }
}

/// Reads a session log back into its lines.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
