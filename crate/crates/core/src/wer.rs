//! Transcript normalization and word error rate.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Versioned normalizer rule table.
pub const NORMALIZER_RULES: &str = include_str!("../data/normalizer_rules.tsv");
pub const NORMALIZER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WerError {
    #[error("no utterance pairs given")]
    EmptyCorpus,
    #[error("every reference is empty after normalization")]
    AllReferencesEmpty,
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("no hypothesis for {} reference ids: {}", .0.len(), .0.join(", "))]
    MissingHypotheses(Vec<String>),
    #[error("hypotheses without a reference: {}", .0.join(", "))]
    UnknownHypotheses(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn rules() -> &'static HashMap<String, String> {
    static RULES: OnceLock<HashMap<String, String>> = OnceLock::new();
    RULES.get_or_init(|| {
        NORMALIZER_RULES
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('\t'))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    })
}

const ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const TENS: [&str; 10] = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"];

fn below_thousand(n: u64, out: &mut Vec<&'static str>) {
    if n >= 100 {
        out.push(ONES[(n / 100) as usize]);
        out.push("hundred");
        if n % 100 == 0 {
            return;
        }
    }
    let r = n % 100;
    if r < 20 {
        out.push(ONES[r as usize]);
    } else {
        out.push(TENS[(r / 10) as usize]);
        if r % 10 != 0 {
            out.push(ONES[(r % 10) as usize]);
        }
    }
}

/// Spoken form of a digit string. Up to 999 999 999 is read as a number;
/// longer strings (and leading zeros) are read digit by digit.
pub fn spell_number(digits: &str) -> String {
    let as_digits = || digits.bytes().map(|b| ONES[(b - b'0') as usize]).collect::<Vec<_>>().join(" ");
    if digits.len() > 9 || (digits.len() > 1 && digits.starts_with('0')) {
        return as_digits();
    }
    let n: u64 = digits.parse().unwrap();
    if n == 0 {
        return "zero".into();
    }
    let mut out = Vec::new();
    for (scale, name) in [(1_000_000, "million"), (1_000, "thousand")] {
        if n / scale % 1000 != 0 {
            below_thousand(n / scale % 1000, &mut out);
            out.push(name);
        }
    }
    if n % 1000 != 0 {
        below_thousand(n % 1000, &mut out);
    }
    out.join(" ")
}

/// Lowercases, drops `[...]` and `<...>` markers, strips punctuation except
/// apostrophes inside words, expands the rule table and digit strings, and
/// collapses whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text
        .to_lowercase()
        .replace(['\u{2019}', '\u{2018}'], "'")
        .replace('%', " % ")
        .replace('&', " & ");

    let mut unmarked = String::with_capacity(lower.len());
    let mut close: Option<char> = None;
    for ch in lower.chars() {
        match (close, ch) {
            (None, '[') => close = Some(']'),
            (None, '<') => close = Some('>'),
            (Some(c), _) if ch == c => {
                close = None;
                unmarked.push(' ');
            }
            (Some(_), _) => {}
            (None, _) => unmarked.push(ch),
        }
    }
    if close.is_some() {
        // Unterminated marker: keep the text, drop the bracket.
        unmarked = lower.replace(['[', '<'], " ");
    }

    let table = rules();
    let mut words: Vec<String> = Vec::new();
    for raw in unmarked.split_whitespace() {
        if let Some(rep) = table.get(raw) {
            words.extend(rep.split(' ').map(str::to_string));
            continue;
        }
        let chars: Vec<char> = raw.chars().collect();
        let mut cleaned = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                cleaned.push(c);
            } else if c == '\'' {
                let prev = i > 0 && chars[i - 1].is_alphanumeric();
                let next = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
                cleaned.push(if prev && next { '\'' } else { ' ' });
            } else {
                cleaned.push(' ');
            }
        }
        for tok in cleaned.split_whitespace() {
            if let Some(rep) = table.get(tok) {
                words.extend(rep.split(' ').map(str::to_string));
            } else if tok.bytes().all(|b| b.is_ascii_digit()) {
                words.extend(spell_number(tok).split(' ').map(str::to_string));
            } else {
                words.push(tok.to_string());
            }
        }
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref_words: usize,
    /// `(S + D + I) / max(1, N)`.
    pub wer: f64,
    /// Set when the reference has no words.
    pub degenerate_reference: bool,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(substitutions: usize, deletions: usize, insertions: usize, n_ref_words: usize) -> Self {
        Self {
            substitutions,
            deletions,
            insertions,
            n_ref_words,
            wer: (substitutions + deletions + insertions) as f64 / n_ref_words.max(1) as f64,
            degenerate_reference: n_ref_words == 0,
        }
    }
}

/// Word alignment over token slices. Minimises total edits, then the number
/// of insertions plus deletions, so substitutions win ties.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    // (edits, indels) per cell, one row at a time.
    let mut prev: Vec<(usize, usize)> = (0..=m).map(|j| (j, j)).collect();
    let mut cur = vec![(0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, i);
        for j in 1..=m {
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                prev[j - 1]
            } else {
                (prev[j - 1].0 + 1, prev[j - 1].1)
            };
            let del = (prev[j].0 + 1, prev[j].1 + 1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1 + 1);
            cur[j] = diag.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (edits, indels) = prev[m];
    // n − m = D − I and indels = D + I.
    let deletions = ((indels as i64 + n as i64 - m as i64) / 2) as usize;
    let insertions = indels - deletions;
    WerBreakdown::from_counts(edits - indels, deletions, insertions, n)
}

pub fn wer(reference: &str, hypothesis: &str) -> WerBreakdown {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    align(&rw, &hw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerPair {
    #[serde(alias = "utt_id")]
    pub id: String,
    #[serde(alias = "ref")]
    pub reference: String,
    #[serde(alias = "hyp")]
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceWer {
    pub id: String,
    #[serde(flatten)]
    pub breakdown: WerBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusWer {
    pub schema_version: u32,
    pub normalizer_version: u32,
    pub n_utterances: usize,
    /// Pooled: total errors over total reference words.
    pub summary: WerBreakdown,
    #[serde(skip)]
    pub utterances: Vec<UtteranceWer>,
}

impl CorpusWer {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn utterances_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "substitutions", "deletions", "insertions", "n_ref_words", "wer"])
            .unwrap();
        for u in &self.utterances {
            let b = &u.breakdown;
            w.write_record([
                u.id.clone(),
                b.substitutions.to_string(),
                b.deletions.to_string(),
                b.insertions.to_string(),
                b.n_ref_words.to_string(),
                format!("{:.6}", b.wer),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub fn corpus_wer(pairs: &[WerPair]) -> Result<CorpusWer, WerError> {
    if pairs.is_empty() {
        return Err(WerError::EmptyCorpus);
    }
    let utterances: Vec<UtteranceWer> = pairs
        .par_iter()
        .map(|p| UtteranceWer {
            id: p.id.clone(),
            breakdown: wer(&p.reference, &p.hypothesis),
        })
        .collect();
    let sum = |f: fn(&WerBreakdown) -> usize| utterances.iter().map(|u| f(&u.breakdown)).sum::<usize>();
    let n = sum(|b| b.n_ref_words);
    if n == 0 {
        return Err(WerError::AllReferencesEmpty);
    }
    let summary = WerBreakdown::from_counts(
        sum(|b| b.substitutions),
        sum(|b| b.deletions),
        sum(|b| b.insertions),
        n,
    );
    Ok(CorpusWer {
        schema_version: 1,
        normalizer_version: NORMALIZER_VERSION,
        n_utterances: utterances.len(),
        summary,
        utterances,
    })
}

/// Two-column `id<TAB>text` file; a line with no tab is an id with empty text.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, WerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(WerError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason: "empty utterance id".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(WerError::DuplicateId(id.to_string()));
        }
        rows.push((id.to_string(), body.to_string()));
    }
    Ok(rows)
}

/// Joins references and hypotheses by id, in reference order.
pub fn pair_by_id(refs: Vec<(String, String)>, hyps: Vec<(String, String)>) -> Result<Vec<WerPair>, WerError> {
    let mut hyp_map: BTreeMap<String, String> = hyps.into_iter().collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, reference) in refs {
        match hyp_map.remove(&id) {
            Some(hypothesis) => pairs.push(WerPair {
                id,
                reference,
                hypothesis,
            }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(WerError::MissingHypotheses(missing));
    }
    if !hyp_map.is_empty() {
        return Err(WerError::UnknownHypotheses(hyp_map.into_keys().collect()));
    }
    Ok(pairs)
}

/// JSON-lines file of `{"id", "reference", "hypothesis"}` objects
/// (`utt_id`, `ref`, `hyp` are accepted too).
pub fn read_jsonl_pairs(path: impl AsRef<Path>) -> Result<Vec<WerPair>, WerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: WerPair = serde_json::from_str(line).map_err(|e| WerError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !seen.insert(p.id.clone()) {
            return Err(WerError::DuplicateId(p.id));
        }
        pairs.push(p);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizer_examples() {
        assert_eq!(normalize("Hello,  WORLD!"), "hello world");
        assert_eq!(normalize("[noise] it's right."), "it's right");
        assert_eq!(normalize("I'm GONNA go <laugh> now"), "i'm going to go now");
        assert_eq!(normalize("'quoted' dogs' bones"), "quoted dogs bones");
        assert_eq!(normalize("I have 21 cats and 3 dogs"), "i have twenty one cats and three dogs");
        assert_eq!(normalize("it's 100% ok"), "it's one hundred percent okay");
        assert_eq!(normalize("room [unfinished"), "room unfinished");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn rule_values_are_not_keys() {
        let table = rules();
        assert!(table.len() > 20);
        for v in table.values() {
            for w in v.split(' ') {
                assert!(!table.contains_key(w), "{w}");
                assert_eq!(normalize(w), w);
            }
        }
    }

    #[test]
    fn numbers() {
        assert_eq!(spell_number("0"), "zero");
        assert_eq!(spell_number("15"), "fifteen");
        assert_eq!(spell_number("40"), "forty");
        assert_eq!(spell_number("305"), "three hundred five");
        assert_eq!(spell_number("1200"), "one thousand two hundred");
        assert_eq!(spell_number("2000000"), "two million");
        assert_eq!(spell_number("007"), "zero zero seven");
    }

    #[test]
    fn wer_examples() {
        let w = wer("the cat sat", "the cat sat");
        assert_eq!((w.errors(), w.wer), (0, 0.0));
        let w = wer("the cat sat", "the cat");
        assert_eq!((w.substitutions, w.deletions, w.insertions), (0, 1, 0));
        assert!((w.wer - 1.0 / 3.0).abs() < 1e-12);
        let w = wer("a b c", "a x c y");
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 0, 1));
        assert!((w.wer - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_degenerate() {
        let w = wer("", "uh huh");
        assert!(w.degenerate_reference);
        assert_eq!((w.insertions, w.wer), (2, 2.0));
        assert!(!wer("", "").wer.is_nan());
    }

    #[test]
    fn substitution_preferred_over_indel_pair() {
        let w = align(&["a"], &["b"]);
        assert_eq!((w.substitutions, w.deletions, w.insertions), (1, 0, 0));
    }

    fn pair(id: &str, r: &str, h: &str) -> WerPair {
        WerPair {
            id: id.into(),
            reference: r.into(),
            hypothesis: h.into(),
        }
    }

    #[test]
    fn corpus_pooling() {
        let pairs = vec![
            pair("u1", "a b", "a c"),
            pair("u2", "a b c d e f g h", "a b c d e f g h"),
        ];
        let c = corpus_wer(&pairs).unwrap();
        assert!((c.summary.wer - 0.1).abs() < 1e-12);
        assert_eq!(c.utterances.len(), 2);
        let mean = c.utterances.iter().map(|u| u.breakdown.wer).sum::<f64>() / 2.0;
        assert!((mean - 0.25).abs() < 1e-12);

        let single = corpus_wer(&pairs[..1]).unwrap();
        assert_eq!(single.summary, wer("a b", "a c"));
        let mut rev = pairs.clone();
        rev.reverse();
        assert_eq!(corpus_wer(&rev).unwrap().summary, c.summary);

        assert!(matches!(corpus_wer(&[]), Err(WerError::EmptyCorpus)));
        assert!(matches!(corpus_wer(&[pair("x", "[noise]", "hi")]), Err(WerError::AllReferencesEmpty)));
        assert!(c.utterances_csv().starts_with("id,substitutions,deletions,insertions,n_ref_words,wer\nu1,1,0,0,2,0.500000\n"));
    }

    #[test]
    fn tsv_and_jsonl_io() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("ref.tsv");
        let h = dir.path().join("hyp.tsv");
        std::fs::write(&r, "u1\tthe cat sat\nu2\ta b c\n\n").unwrap();
        std::fs::write(&h, "u2\ta x c y\nu1\tthe cat\n").unwrap();
        let pairs = pair_by_id(read_tsv(&r).unwrap(), read_tsv(&h).unwrap()).unwrap();
        assert_eq!(pairs[0], pair("u1", "the cat sat", "the cat"));
        std::fs::write(&h, "u1\tthe cat\n").unwrap();
        assert!(matches!(
            pair_by_id(read_tsv(&r).unwrap(), read_tsv(&h).unwrap()),
            Err(WerError::MissingHypotheses(ids)) if ids == vec!["u2".to_string()]
        ));
        std::fs::write(&h, "u1\ta\nu1\tb\n").unwrap();
        assert!(matches!(read_tsv(&h), Err(WerError::DuplicateId(_))));

        let j = dir.path().join("pairs.jsonl");
        std::fs::write(&j, "{\"id\":\"a\",\"reference\":\"x y\",\"hypothesis\":\"x\"}\n{\"utt_id\":\"b\",\"ref\":\"z\",\"hyp\":\"z\"}\n").unwrap();
        let p = read_jsonl_pairs(&j).unwrap();
        assert_eq!(p[1], pair("b", "z", "z"));
        std::fs::write(&j, "{\"id\":\"a\"}\n").unwrap();
        assert!(matches!(read_jsonl_pairs(&j), Err(WerError::Parse { line: 1, .. })));
    }

    /// Exhaustive search over every alignment path.
    fn brute(r: &[u8], h: &[u8]) -> (usize, usize, usize, usize) {
        fn go(r: &[u8], h: &[u8], s: usize, d: usize, i: usize, best: &mut Option<(usize, usize, usize, usize)>) {
            if r.is_empty() && h.is_empty() {
                let cand = (s + d + i, d + i, s, d);
                if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                    *best = Some(cand);
                }
                return;
            }
            if !r.is_empty() && !h.is_empty() {
                let sub = usize::from(r[0] != h[0]);
                go(&r[1..], &h[1..], s + sub, d, i, best);
            }
            if !r.is_empty() {
                go(&r[1..], h, s, d + 1, i, best);
            }
            if !h.is_empty() {
                go(r, &h[1..], s, d, i + 1, best);
            }
        }
        let mut best = None;
        go(r, h, 0, 0, 0, &mut best);
        let (total, indels, s, d) = best.unwrap();
        (s, d, indels - d, total)
    }

    fn levenshtein(a: &[u8], b: &[u8]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for w in 0..4u8 {
                    let mut t: Vec<u8> = s.clone();
                    t.push(w);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn dp_equals_exhaustive_search_for_all_short_pairs() {
        let seqs = all_sequences(5);
        assert_eq!(seqs.len(), 1365);
        let checked: usize = seqs
            .par_iter()
            .map(|r| {
                for h in &seqs {
                    let dp = align(r, h);
                    let (s, d, i, total) = brute(r, h);
                    assert_eq!((dp.substitutions, dp.deletions, dp.insertions), (s, d, i), "{r:?} {h:?}");
                    assert_eq!(dp.errors(), total);
                }
                seqs.len()
            })
            .sum();
        assert_eq!(checked, 1365 * 1365);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[A-Za-z0-9 ,.!?'\\[\\]<>%&-]{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn total_edits_equal_levenshtein(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
        ) {
            let w = align(&a, &b);
            prop_assert_eq!(w.errors(), levenshtein(&a, &b));
            prop_assert!(w.substitutions + w.deletions <= a.len());
        }

        #[test]
        fn triangle_bound(
            a in prop::collection::vec(0u8..4, 1..7),
            b in prop::collection::vec(0u8..4, 0..7),
            c in prop::collection::vec(0u8..4, 0..7),
        ) {
            let ac = align(&a, &c).errors();
            let ab = align(&a, &b).errors();
            prop_assert!(ac <= ab + levenshtein(&b, &c));
        }
    }
}
