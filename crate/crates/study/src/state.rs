use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use nariqa_core::config::StudyConfig;
use nariqa_core::corpus::{write_manifest, Manifest, TripletRecord};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};
use crate::log::VoteLog;
use crate::vote::{permutation_for, validate_rater, Permutation, VoteRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TallyStatus {
    Pending,
    Labeled { label: u8 },
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub count0: usize,
    pub count1: usize,
    pub total: usize,
    /// Majority fraction; absent while no votes exist.
    pub fraction: Option<f64>,
    #[serde(flatten)]
    pub status: TallyStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub tallies: BTreeMap<String, Tally>,
}

impl Aggregation {
    fn ids_with(&self, pred: impl Fn(&TallyStatus) -> bool) -> Vec<String> {
        self.tallies
            .iter()
            .filter(|(_, t)| pred(&t.status))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn labels(&self) -> BTreeMap<String, u8> {
        self.tallies
            .iter()
            .filter_map(|(id, t)| match t.status {
                TallyStatus::Labeled { label } => Some((id.clone(), label)),
                _ => None,
            })
            .collect()
    }

    pub fn excluded(&self) -> Vec<String> {
        self.ids_with(|s| *s == TallyStatus::Excluded)
    }

    pub fn pending(&self) -> Vec<String> {
        self.ids_with(|s| *s == TallyStatus::Pending)
    }
}

/// Latest vote per (triplet, rater): greatest timestamp, then latest in log order.
pub fn effective_votes(votes: &[VoteRecord]) -> BTreeMap<(String, String), &VoteRecord> {
    let mut out: BTreeMap<(String, String), &VoteRecord> = BTreeMap::new();
    for v in votes {
        let key = (v.triplet_id.clone(), v.rater_id.clone());
        match out.get(&key) {
            Some(prev) if prev.timestamp_ms > v.timestamp_ms => {}
            _ => {
                out.insert(key, v);
            }
        }
    }
    out
}

/// Majority labels over the effective votes of every id in `triplet_ids`.
pub fn aggregate_votes<'a>(
    triplet_ids: impl IntoIterator<Item = &'a str>,
    votes: &[VoteRecord],
    rule: &StudyConfig,
) -> Aggregation {
    let mut counts: BTreeMap<String, [usize; 2]> =
        triplet_ids.into_iter().map(|id| (id.to_string(), [0, 0])).collect();
    for ((tid, _), v) in effective_votes(votes) {
        if let Some(c) = counts.get_mut(&tid) {
            c[usize::from(v.choice.min(1))] += 1;
        }
    }
    let tallies = counts
        .into_iter()
        .map(|(id, [c0, c1])| {
            let total = c0 + c1;
            let fraction = (total > 0).then(|| c0.max(c1) as f64 / total as f64);
            let status = if total < rule.min_raters.max(1) {
                TallyStatus::Pending
            } else if c0 != c1 && fraction.is_some_and(|f| f >= rule.theta) {
                TallyStatus::Labeled {
                    label: u8::from(c1 > c0),
                }
            } else {
                TallyStatus::Excluded
            };
            (
                id,
                Tally {
                    count0: c0,
                    count1: c1,
                    total,
                    fraction,
                    status,
                },
            )
        })
        .collect();
    Aggregation { tallies }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presented {
    pub triplet_id: String,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterProgress {
    pub voted: usize,
    pub total: usize,
}

/// Result of `assign_next`; `triplet` is `None` once the rater is done.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub triplet: Option<Presented>,
    pub progress: RaterProgress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub log_index: usize,
    pub triplet_id: String,
    pub rater_id: String,
    pub choice: u8,
    pub permutation: Permutation,
    /// True when an earlier request with the same idempotency key was replayed.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyProgress {
    pub triplets: usize,
    pub votes_logged: usize,
    pub labeled: usize,
    pub excluded: usize,
    pub pending: usize,
    pub raters: BTreeMap<String, RaterProgress>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub manifest: PathBuf,
    pub tallies: PathBuf,
    pub labeled: usize,
    pub excluded: usize,
    pub pending: usize,
}

#[derive(Debug, Default)]
struct Rater {
    voted: BTreeSet<usize>,
    cursor: usize,
    assigned_at: HashMap<usize, u64>,
}

/// A running study over one manifest.
#[derive(Debug)]
pub struct StudyState {
    manifest: Manifest,
    ids: Vec<String>,
    rank: HashMap<String, usize>,
    record_of: Vec<usize>,
    rule: StudyConfig,
    seed: u64,
    log: VoteLog,
    votes: Vec<VoteRecord>,
    raters: BTreeMap<String, Rater>,
    keys: HashMap<(String, String), usize>,
}

impl StudyState {
    pub fn in_memory(manifest: Manifest, rule: StudyConfig, seed: u64) -> Result<Self> {
        Self::with_log(manifest, rule, seed, VoteLog::in_memory(), Vec::new())
    }

    /// Opens a study backed by the vote log at `log_path`, replaying any votes in it.
    pub fn open(manifest: Manifest, rule: StudyConfig, seed: u64, log_path: impl AsRef<Path>) -> Result<Self> {
        let (log, votes) = VoteLog::open(log_path)?;
        Self::with_log(manifest, rule, seed, log, votes)
    }

    fn with_log(manifest: Manifest, rule: StudyConfig, seed: u64, log: VoteLog, replay: Vec<VoteRecord>) -> Result<Self> {
        let mut order: Vec<usize> = (0..manifest.records.len()).collect();
        order.sort_by(|&a, &b| manifest.records[a].triplet_id.cmp(&manifest.records[b].triplet_id));
        let ids: Vec<String> = order.iter().map(|&i| manifest.records[i].triplet_id.clone()).collect();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(StudyError::DuplicateTriplet(w[0].clone()));
        }
        let rank = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut state = Self {
            manifest,
            ids,
            rank,
            record_of: order,
            rule,
            seed,
            log,
            votes: Vec::new(),
            raters: BTreeMap::new(),
            keys: HashMap::new(),
        };
        for (line, v) in replay.into_iter().enumerate() {
            if state.check(&v).is_err() {
                return Err(StudyError::LogCorrupt {
                    path: state.log.path().map(Path::to_path_buf).unwrap_or_default(),
                    line: line + 1,
                    message: format!("vote for `{}` by `{}` does not fit this manifest", v.triplet_id, v.rater_id),
                });
            }
            state.apply(v);
        }
        Ok(state)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn rule(&self) -> &StudyConfig {
        &self.rule
    }

    pub fn votes(&self) -> &[VoteRecord] {
        &self.votes
    }

    pub fn record(&self, triplet_id: &str) -> Result<&TripletRecord> {
        let r = self.rank_of(triplet_id)?;
        Ok(&self.manifest.records[self.record_of[r]])
    }

    fn rank_of(&self, triplet_id: &str) -> Result<usize> {
        self.rank
            .get(triplet_id)
            .copied()
            .ok_or_else(|| StudyError::UnknownTriplet(triplet_id.to_string()))
    }

    pub fn permutation(&self, rater_id: &str, triplet_id: &str) -> Permutation {
        permutation_for(self.seed, rater_id, triplet_id)
    }

    fn rater_progress(&self, rater_id: &str) -> RaterProgress {
        RaterProgress {
            voted: self.raters.get(rater_id).map_or(0, |r| r.voted.len()),
            total: self.ids.len(),
        }
    }

    /// Lowest-id triplet the rater has not voted on. Registers unknown raters
    /// and remembers when the triplet was handed out.
    pub fn assign_next(&mut self, rater_id: &str, now_ms: u64) -> Result<Assignment> {
        validate_rater(rater_id)?;
        let n = self.ids.len();
        let rater = self.raters.entry(rater_id.to_string()).or_default();
        while rater.cursor < n && rater.voted.contains(&rater.cursor) {
            rater.cursor += 1;
        }
        let triplet = if rater.cursor < n {
            let c = rater.cursor;
            rater.assigned_at.entry(c).or_insert(now_ms);
            Some(Presented {
                triplet_id: self.ids[c].clone(),
                permutation: permutation_for(self.seed, rater_id, &self.ids[c]),
            })
        } else {
            None
        };
        Ok(Assignment {
            triplet,
            progress: self.rater_progress(rater_id),
        })
    }

    fn check(&self, v: &VoteRecord) -> Result<()> {
        validate_rater(&v.rater_id)?;
        self.rank_of(&v.triplet_id)?;
        if v.choice > 1 {
            return Err(StudyError::InvalidChoice(v.choice));
        }
        if v.permutation.is_some_and(|p| p != self.permutation(&v.rater_id, &v.triplet_id)) {
            return Err(StudyError::PermutationMismatch {
                triplet_id: v.triplet_id.clone(),
                rater_id: v.rater_id.clone(),
            });
        }
        Ok(())
    }

    fn apply(&mut self, v: VoteRecord) {
        let rank = self.rank[&v.triplet_id];
        let rater = self.raters.entry(v.rater_id.clone()).or_default();
        rater.voted.insert(rank);
        if let Some(k) = &v.idempotency_key {
            self.keys.insert((v.rater_id.clone(), k.clone()), self.votes.len());
        }
        self.votes.push(v);
    }

    /// Validates, logs durably, then applies a vote whose choice is already
    /// in canonical order.
    pub fn record_vote(&mut self, mut v: VoteRecord) -> Result<Ack> {
        self.check(&v)?;
        let permutation = self.permutation(&v.rater_id, &v.triplet_id);
        if let Some(k) = &v.idempotency_key {
            if let Some(&i) = self.keys.get(&(v.rater_id.clone(), k.clone())) {
                let prev = &self.votes[i];
                return Ok(Ack {
                    log_index: i,
                    triplet_id: prev.triplet_id.clone(),
                    rater_id: prev.rater_id.clone(),
                    choice: prev.choice,
                    permutation: prev.permutation.unwrap_or(permutation),
                    duplicate: true,
                });
            }
        }
        v.permutation = Some(permutation);
        if v.dwell_ms.is_none() {
            let rank = self.rank[&v.triplet_id];
            v.dwell_ms = self
                .raters
                .get(&v.rater_id)
                .and_then(|r| r.assigned_at.get(&rank))
                .map(|&t| v.timestamp_ms.saturating_sub(t));
        }
        self.log.append(&v)?;
        let ack = Ack {
            log_index: self.votes.len(),
            triplet_id: v.triplet_id.clone(),
            rater_id: v.rater_id.clone(),
            choice: v.choice,
            permutation,
            duplicate: false,
        };
        self.apply(v);
        Ok(ack)
    }

    pub fn aggregate(&self) -> Aggregation {
        aggregate_votes(self.ids.iter().map(String::as_str), &self.votes, &self.rule)
    }

    pub fn progress(&self) -> StudyProgress {
        let agg = self.aggregate();
        StudyProgress {
            triplets: self.ids.len(),
            votes_logged: self.votes.len(),
            labeled: agg.labels().len(),
            excluded: agg.excluded().len(),
            pending: agg.pending().len(),
            raters: self.raters.keys().map(|r| (r.clone(), self.rater_progress(r))).collect(),
        }
    }

    /// The manifest restricted to labeled triplets, in manifest order.
    pub fn labeled_manifest(&self) -> (Manifest, Aggregation) {
        let agg = self.aggregate();
        let labels = agg.labels();
        let records = self
            .manifest
            .records
            .iter()
            .filter_map(|r| {
                labels.get(&r.triplet_id).map(|&l| TripletRecord {
                    label: Some(l),
                    ..r.clone()
                })
            })
            .collect();
        (self.manifest.with_records(records), agg)
    }

    /// Writes the labeled manifest to `path` and the per-triplet tallies next
    /// to it (`<stem>.tallies.json`).
    pub fn export_labels(&self, path: impl AsRef<Path>) -> Result<ExportSummary> {
        let path = path.as_ref();
        let (manifest, agg) = self.labeled_manifest();
        write_manifest(&manifest, path)?;
        let sidecar = tallies_path(path);
        let json = serde_json::to_vec_pretty(&agg).map_err(|e| StudyError::InvalidVote(e.to_string()))?;
        std::fs::write(&sidecar, json).map_err(|e| StudyError::io(&sidecar, e))?;
        Ok(ExportSummary {
            manifest: path.to_path_buf(),
            tallies: sidecar,
            labeled: manifest.records.len(),
            excluded: agg.excluded().len(),
            pending: agg.pending().len(),
        })
    }
}

pub fn tallies_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("tallies.json")
}
