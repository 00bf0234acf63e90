//! Corpus filtering: long/silent discards, reference-WER filter (F1),
//! short-transcript filter (F2) and in-session packing into 25–30 s samples (F3).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{estimate_stnr, ingest, AudioError, StnrEstimate};
use crate::wer::{normalize, wer};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("F1 needs ref_hyp for every record; missing for: {}", .0.join(", "))]
    MissingRefHyp(Vec<String>),
    #[error("record {utt_id}: {reason}")]
    InvalidRecord { utt_id: String, reason: String },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("audio for {utt_id}: {source}")]
    Audio { utt_id: String, source: AudioError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One source utterance of a packed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub utt_id: String,
    pub audio_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub session_id: String,
    pub split: Split,
    /// Empty for packed records; see `sources`.
    pub audio_path: PathBuf,
    pub transcript: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_hyp: Option<String>,
    pub order_index: usize,
    /// Concatenated utterances, in order, when produced by F3.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub wer_threshold: f64,
    pub min_words: usize,
    pub pack_min_s: f64,
    pub pack_max_s: f64,
    pub max_utt_s: f64,
    /// Records below this STNR (or whose STNR cannot be estimated) are silent.
    pub silence_stnr_db: f64,
    pub apply_f1: bool,
    pub apply_f2: bool,
    pub apply_f3: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            wer_threshold: 0.50,
            min_words: 3,
            pack_min_s: 25.0,
            pack_max_s: 30.0,
            max_utt_s: 30.0,
            silence_stnr_db: 3.0,
            apply_f1: false,
            apply_f2: false,
            apply_f3: false,
        }
    }
}

/// Preset stage selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataVersion {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for DataVersion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(DataVersion::A),
            "B" => Ok(DataVersion::B),
            "C" => Ok(DataVersion::C),
            "D" => Ok(DataVersion::D),
            _ => Err(format!("unknown data version {s:?} (A, B, C or D)")),
        }
    }
}

impl FilterConfig {
    pub fn for_version(version: DataVersion) -> Self {
        let (f12, f3) = match version {
            DataVersion::A => (false, false),
            DataVersion::B => (true, false),
            DataVersion::C => (false, true),
            DataVersion::D => (true, true),
        };
        Self {
            apply_f1: f12,
            apply_f2: f12,
            apply_f3: f3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.pack_min_s > 0.0 && self.pack_min_s <= self.pack_max_s) {
            return Err(FilterError::InvalidConfig(format!(
                "need 0 < pack_min_s ({}) <= pack_max_s ({})",
                self.pack_min_s, self.pack_max_s
            )));
        }
        if self.min_words == 0 {
            return Err(FilterError::InvalidConfig("min_words must be >= 1".into()));
        }
        if !(self.max_utt_s > 0.0) || !self.wer_threshold.is_finite() || self.wer_threshold < 0.0 {
            return Err(FilterError::InvalidConfig("max_utt_s and wer_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Source of STNR estimates for the silence check.
pub trait SignalProbe: Sync {
    fn probe(&self, record: &UtteranceRecord) -> Result<Result<StnrEstimate, AudioError>, FilterError>;
}

/// Reads each record's audio file. Unreadable audio is an error; an audio
/// file whose STNR cannot be estimated is reported as such.
pub struct FileProbe;

impl SignalProbe for FileProbe {
    fn probe(&self, record: &UtteranceRecord) -> Result<Result<StnrEstimate, AudioError>, FilterError> {
        let clip = ingest(&record.audio_path).map_err(|source| FilterError::Audio {
            utt_id: record.utt_id.clone(),
            source,
        })?;
        Ok(estimate_stnr(&clip))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Tally {
    pub count: usize,
    pub hours: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SplitStats {
    pub train: Tally,
    pub dev: Tally,
    pub test: Tally,
}

impl SplitStats {
    pub fn of(records: &[UtteranceRecord]) -> Self {
        let mut s = SplitStats::default();
        for r in records {
            let t = s.get_mut(r.split);
            t.count += 1;
            t.hours += r.duration_s / 3600.0;
        }
        s
    }

    pub fn get(&self, split: Split) -> Tally {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Tally {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn total_hours(&self) -> f64 {
        self.train.hours + self.dev.hours + self.test.hours
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discard {
    pub utt_id: String,
    pub split: Split,
    pub duration_s: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub before: SplitStats,
    pub after: SplitStats,
    pub discarded: Vec<Discard>,
    /// Packed records emitted (F3 only).
    pub packed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub schema_version: u32,
    pub notes: Vec<String>,
    pub config: FilterConfig,
    pub input: SplitStats,
    pub stages: Vec<StageReport>,
    pub output: SplitStats,
}

impl FilterReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `hours [#]` per split after each stage.
    pub fn to_table(&self) -> String {
        let cell = |t: Tally| format!("{:.2} [{}]", t.hours, t.count);
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>18} {:>18} {:>18}", "stage", "train hrs [#]", "dev hrs [#]", "test hrs [#]");
        let mut row = |name: &str, st: &SplitStats| {
            let _ = writeln!(
                s,
                "{:<24} {:>18} {:>18} {:>18}",
                name,
                cell(st.train),
                cell(st.dev),
                cell(st.test)
            );
        };
        row("input", &self.input);
        for st in &self.stages {
            row(&st.stage, &st.after);
        }
        s
    }
}

fn stage(name: &str, before: &[UtteranceRecord], after: &[UtteranceRecord], discarded: Vec<Discard>, packed: usize) -> StageReport {
    StageReport {
        stage: name.to_string(),
        before: SplitStats::of(before),
        after: SplitStats::of(after),
        discarded,
        packed,
    }
}

fn discard(r: &UtteranceRecord, reason: impl Into<String>) -> Discard {
    Discard {
        utt_id: r.utt_id.clone(),
        split: r.split,
        duration_s: r.duration_s,
        reason: reason.into(),
    }
}

/// Checks per-record invariants: positive duration, unique ids, and unique
/// `order_index` within each `(session, split)`.
pub fn validate_manifest(manifest: &[UtteranceRecord]) -> Result<(), FilterError> {
    let mut ids = HashSet::new();
    let mut orders = HashSet::new();
    for r in manifest {
        let bad = |reason: String| FilterError::InvalidRecord {
            utt_id: r.utt_id.clone(),
            reason,
        };
        if !(r.duration_s > 0.0) || !r.duration_s.is_finite() {
            return Err(bad(format!("duration_s {} must be positive", r.duration_s)));
        }
        if !ids.insert(r.utt_id.as_str()) {
            return Err(bad("duplicate utt_id".into()));
        }
        if !orders.insert((r.session_id.as_str(), r.split, r.order_index)) {
            return Err(bad(format!(
                "order_index {} repeated in session {} ({})",
                r.order_index,
                r.session_id,
                r.split.as_str()
            )));
        }
    }
    Ok(())
}

/// Removes train/dev records longer than `max_utt_s` and silent records in any split.
pub fn discard_long_and_empty(
    manifest: &[UtteranceRecord],
    cfg: &FilterConfig,
    probe: &dyn SignalProbe,
) -> Result<(Vec<UtteranceRecord>, StageReport), FilterError> {
    let verdicts: Vec<Option<String>> = manifest
        .par_iter()
        .map(|r| {
            if r.split != Split::Test && r.duration_s > cfg.max_utt_s {
                return Ok(Some(format!("longer than {} s", cfg.max_utt_s)));
            }
            Ok(match probe.probe(r)? {
                Err(e) => Some(e.to_string()),
                Ok(est) if est.stnr_db < cfg.silence_stnr_db => {
                    Some(format!("silent (stnr {:.1} dB < {} dB)", est.stnr_db, cfg.silence_stnr_db))
                }
                Ok(_) => None,
            })
        })
        .collect::<Result<_, FilterError>>()?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (r, v) in manifest.iter().zip(verdicts) {
        match v {
            Some(reason) => dropped.push(discard(r, reason)),
            None => kept.push(r.clone()),
        }
    }
    let report = stage("discard_long_and_empty", manifest, &kept, dropped, 0);
    Ok((kept, report))
}

/// F1: drops records whose transcript disagrees with the reference model by
/// more than `wer_threshold`.
pub fn filter_f1(manifest: &[UtteranceRecord], cfg: &FilterConfig) -> Result<(Vec<UtteranceRecord>, StageReport), FilterError> {
    let missing: Vec<String> = manifest
        .iter()
        .filter(|r| r.ref_hyp.is_none())
        .map(|r| r.utt_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(FilterError::MissingRefHyp(missing));
    }
    let scores: Vec<f64> = manifest
        .par_iter()
        .map(|r| wer(&r.transcript, r.ref_hyp.as_deref().unwrap()).wer)
        .collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (r, w) in manifest.iter().zip(scores) {
        if w > cfg.wer_threshold {
            dropped.push(discard(r, format!("reference-model WER {w:.3} > {}", cfg.wer_threshold)));
        } else {
            kept.push(r.clone());
        }
    }
    let report = stage("f1_reference_wer", manifest, &kept, dropped, 0);
    Ok((kept, report))
}

pub fn word_count(transcript: &str) -> usize {
    normalize(transcript).split_whitespace().count()
}

/// F2: drops records with fewer than `min_words` normalized words.
pub fn filter_f2(manifest: &[UtteranceRecord], cfg: &FilterConfig) -> (Vec<UtteranceRecord>, StageReport) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in manifest {
        let n = word_count(&r.transcript);
        if n < cfg.min_words {
            dropped.push(discard(r, format!("{n} words < {}", cfg.min_words)));
        } else {
            kept.push(r.clone());
        }
    }
    let report = stage("f2_min_words", manifest, &kept, dropped, 0);
    (kept, report)
}

fn pack_record(session: &str, split: Split, index: usize, group: &[&UtteranceRecord]) -> UtteranceRecord {
    let ref_hyp = group
        .iter()
        .map(|r| r.ref_hyp.as_deref())
        .collect::<Option<Vec<_>>>()
        .map(|v| v.join(" "));
    UtteranceRecord {
        utt_id: format!("{session}-{}-pack{index:03}", split.as_str()),
        session_id: session.to_string(),
        split,
        audio_path: PathBuf::new(),
        transcript: group.iter().map(|r| r.transcript.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" "),
        duration_s: group.iter().map(|r| r.duration_s).sum(),
        ref_hyp,
        order_index: index,
        sources: group
            .iter()
            .flat_map(|r| {
                if r.sources.is_empty() {
                    vec![SourceRef {
                        utt_id: r.utt_id.clone(),
                        audio_path: r.audio_path.clone(),
                    }]
                } else {
                    r.sources.clone()
                }
            })
            .collect(),
    }
}

/// Greedy in-order packing of one session. Returns emitted records and discards.
fn pack_session(
    session: &str,
    split: Split,
    records: &[&UtteranceRecord],
    cfg: &FilterConfig,
) -> (Vec<UtteranceRecord>, Vec<Discard>) {
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    let mut group: Vec<&UtteranceRecord> = Vec::new();
    let mut total = 0.0;
    let under = |group: &[&UtteranceRecord], dropped: &mut Vec<Discard>| {
        let sum: f64 = group.iter().map(|r| r.duration_s).sum();
        for r in group {
            dropped.push(discard(r, format!("pack group of {sum:.2} s under {} s", cfg.pack_min_s)));
        }
    };
    for &r in records {
        if r.duration_s > cfg.pack_max_s {
            under(&group, &mut dropped);
            group.clear();
            total = 0.0;
            dropped.push(discard(r, format!("longer than {} s", cfg.pack_max_s)));
            continue;
        }
        if r.duration_s >= cfg.pack_min_s {
            // Already the right length: passes alone and breaks any open group.
            under(&group, &mut dropped);
            group.clear();
            total = 0.0;
            out.push(r.clone());
            continue;
        }
        if total + r.duration_s > cfg.pack_max_s {
            under(&group, &mut dropped);
            group.clear();
            total = 0.0;
        }
        group.push(r);
        total += r.duration_s;
        if total >= cfg.pack_min_s {
            out.push(pack_record(session, split, out.len(), &group));
            group.clear();
            total = 0.0;
        }
    }
    under(&group, &mut dropped);
    (out, dropped)
}

/// F3: packs each train/dev session into `[pack_min_s, pack_max_s]` samples.
/// Test records pass through unchanged.
pub fn pack_f3(manifest: &[UtteranceRecord], cfg: &FilterConfig) -> (Vec<UtteranceRecord>, StageReport) {
    let mut sessions: BTreeMap<(Split, &str), Vec<&UtteranceRecord>> = BTreeMap::new();
    let mut kept: Vec<UtteranceRecord> = Vec::new();
    for r in manifest {
        if r.split == Split::Test {
            kept.push(r.clone());
        } else {
            sessions.entry((r.split, r.session_id.as_str())).or_default().push(r);
        }
    }
    let results: Vec<(Vec<UtteranceRecord>, Vec<Discard>)> = sessions
        .into_par_iter()
        .map(|((split, session), mut recs)| {
            recs.sort_by_key(|r| r.order_index);
            pack_session(session, split, &recs, cfg)
        })
        .collect();
    let mut dropped = Vec::new();
    let mut packed = 0;
    let mut out = Vec::new();
    for (recs, d) in results {
        packed += recs.iter().filter(|r| !r.sources.is_empty()).count();
        out.extend(recs);
        dropped.extend(d);
    }
    out.extend(kept);
    let report = stage("f3_pack", manifest, &out, dropped, packed);
    (out, report)
}

/// Discards, then F1, F2 and F3 as enabled, always in that order.
pub fn run_pipeline(
    manifest: &[UtteranceRecord],
    cfg: &FilterConfig,
    probe: &dyn SignalProbe,
) -> Result<(Vec<UtteranceRecord>, FilterReport), FilterError> {
    cfg.validate()?;
    validate_manifest(manifest)?;
    let mut stages = Vec::new();
    let (mut current, r) = discard_long_and_empty(manifest, cfg, probe)?;
    stages.push(r);
    if cfg.apply_f1 {
        let (next, r) = filter_f1(&current, cfg)?;
        current = next;
        stages.push(r);
    }
    if cfg.apply_f2 {
        let (next, r) = filter_f2(&current, cfg);
        current = next;
        stages.push(r);
    }
    if cfg.apply_f3 {
        let (next, r) = pack_f3(&current, cfg);
        current = next;
        stages.push(r);
    }
    let report = FilterReport {
        schema_version: 1,
        notes: vec![
            "F1 and F2 run before F3 when both are enabled".into(),
            "F1 scores transcripts against ref_hyp with the built-in normalizer".into(),
            format!(
                "silence: STNR below {} dB or no estimate; long-utterance discard applies to train/dev only",
                cfg.silence_stnr_db
            ),
            "F3 packs consecutive utterances in order_index order and never reorders".into(),
        ],
        config: cfg.clone(),
        input: SplitStats::of(manifest),
        output: SplitStats::of(&current),
        stages,
    };
    Ok((current, report))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>, FilterError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| FilterError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    validate_manifest(&out)?;
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<(), FilterError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
