//! Data model and file ingestion for judged datasets and click logs.
//!
//! Two on-disk formats are supported:
//!
//! * Judged data: LETOR/SVMLight text, one `<grade> qid:<id> <fid>:<val> ...`
//!   line per query-document pair, `#` starting a comment that (when present)
//!   carries the document id.
//! * Click logs: JSON Lines, one session object per line. Unknown fields are
//!   ignored, field order is irrelevant.
//!
//! All corpus types are immutable after construction and safe to share
//! across threads.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// One annotated query-document pair.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedDoc {
    pub doc_id: String,
    pub features: Vec<f64>,
    /// Graded relevance in `0..=4`.
    pub grade: u8,
}

/// A query with its annotated candidate documents.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedQuery {
    pub query_id: String,
    pub docs: Vec<JudgedDoc>,
}

/// Queries with candidate documents, feature vectors, and graded relevance
/// labels, used for evaluation and click simulation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JudgedDataset {
    pub queries: Vec<JudgedQuery>,
}

/// One displayed result within a logged session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItem {
    pub doc_id: String,
    /// Displayed rank, 1-based. Gaps are legal: removed documents keep the
    /// positions of their neighbours intact.
    pub rank: u32,
    pub click: u8,
    pub features: Vec<f64>,
}

/// One logged result page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub query_id: String,
    pub items: Vec<SessionItem>,
}

/// A collection of sessions. Sessions without any click are retained: they
/// carry no pairwise signal but are essential for calibrated click
/// prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClickLog {
    pub sessions: Vec<Session>,
    /// Maximum rank present in any session.
    pub n_ranks: u32,
}

impl JudgedDataset {
    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    /// Shared feature dimensionality, or 0 for an empty dataset.
    pub fn feature_dim(&self) -> usize {
        self.queries
            .first()
            .and_then(|q| q.docs.first())
            .map_or(0, |d| d.features.len())
    }

    /// Drop queries with fewer than `min_docs` documents, preserving order.
    /// Idempotent; may return an empty dataset.
    pub fn filter_min_docs(&self, min_docs: usize) -> JudgedDataset {
        JudgedDataset {
            queries: self
                .queries
                .iter()
                .filter(|q| q.docs.len() >= min_docs)
                .cloned()
                .collect(),
        }
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<JudgedDataset> {
        parse_judged(BufReader::new(File::open(path)?))
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_judged(self, &mut out)?;
        Ok(())
    }
}

impl ClickLog {
    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Feature dimensionality of the first item, or 0 for an empty log.
    pub fn feature_dim(&self) -> usize {
        self.sessions
            .iter()
            .find_map(|s| s.items.first())
            .map_or(0, |i| i.features.len())
    }

    /// Drop sessions with fewer than `min_docs` items, preserving order.
    pub fn filter_min_docs(&self, min_docs: usize) -> ClickLog {
        let sessions: Vec<Session> = self
            .sessions
            .iter()
            .filter(|s| s.items.len() >= min_docs)
            .cloned()
            .collect();
        ClickLog::from_sessions(sessions)
    }

    /// Build a log from sessions, computing `n_ranks`.
    pub fn from_sessions(sessions: Vec<Session>) -> ClickLog {
        let n_ranks = sessions
            .iter()
            .flat_map(|s| s.items.iter().map(|i| i.rank))
            .max()
            .unwrap_or(0);
        ClickLog { sessions, n_ranks }
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<ClickLog> {
        parse_click_log(BufReader::new(File::open(path)?))
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_click_log(self, &mut out)?;
        Ok(())
    }
}

/// Parse LETOR/SVMLight text with `qid` markers into a judged dataset.
///
/// Sparse features are densified with `0.0`; dimensionality is the maximum
/// feature id seen in the stream. Queries keep first-seen order. The
/// trailing comment, when non-empty, becomes the document id.
pub fn parse_judged(reader: impl BufRead) -> Result<JudgedDataset> {
    struct RawDoc {
        qid: String,
        grade: u8,
        feats: Vec<(usize, f64)>,
        comment: Option<String>,
    }

    let mut raw: Vec<RawDoc> = Vec::new();
    let mut max_fid = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let (body, comment) = match line.split_once('#') {
            Some((b, c)) => (b, Some(c.trim().to_string()).filter(|c| !c.is_empty())),
            None => (line.as_str(), None),
        };
        let mut tokens = body.split_whitespace();
        let Some(grade_tok) = tokens.next() else {
            continue; // blank line
        };
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let grade: i64 = grade_tok
            .parse()
            .map_err(|_| parse_err(format!("invalid grade `{grade_tok}`")))?;
        if !(0..=4).contains(&grade) {
            return Err(Error::validation(format!(
                "grade {grade} outside 0..4 at line {line_no}"
            )));
        }
        let qid_tok = tokens
            .next()
            .ok_or_else(|| parse_err("missing qid field".into()))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .ok_or_else(|| parse_err(format!("expected qid:<id>, got `{qid_tok}`")))?;
        if qid.is_empty() {
            return Err(parse_err("empty qid".into()));
        }

        let mut feats: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (fid, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(format!("expected <fid>:<val>, got `{tok}`")))?;
            let fid: usize = fid
                .parse()
                .map_err(|_| parse_err(format!("invalid feature id `{fid}`")))?;
            if fid == 0 {
                return Err(parse_err("feature ids are 1-based".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(format!("invalid feature value `{val}`")))?;
            if feats.iter().any(|(f, _)| *f == fid) {
                return Err(parse_err(format!("duplicate feature id {fid}")));
            }
            max_fid = max_fid.max(fid);
            feats.push((fid, val));
        }
        raw.push(RawDoc {
            qid: qid.to_string(),
            grade: grade as u8,
            feats,
            comment,
        });
    }

    let mut queries: Vec<JudgedQuery> = Vec::new();
    let mut by_qid: HashMap<String, usize> = HashMap::new();
    for doc in raw {
        let slot = *by_qid.entry(doc.qid.clone()).or_insert_with(|| {
            queries.push(JudgedQuery {
                query_id: doc.qid.clone(),
                docs: Vec::new(),
            });
            queries.len() - 1
        });
        let mut features = vec![0.0; max_fid];
        for (fid, val) in doc.feats {
            features[fid - 1] = val;
        }
        let doc_id = doc
            .comment
            .unwrap_or_else(|| format!("q{}_d{}", doc.qid, queries[slot].docs.len()));
        queries[slot].docs.push(JudgedDoc {
            doc_id,
            features,
            grade: doc.grade,
        });
    }
    Ok(JudgedDataset { queries })
}

/// Write a judged dataset in the format accepted by [`parse_judged`].
/// Features are written densely so that dimensionality survives the
/// round trip even when a trailing feature is zero everywhere.
pub fn write_judged(data: &JudgedDataset, out: &mut impl Write) -> Result<()> {
    for query in &data.queries {
        for doc in &query.docs {
            write!(out, "{} qid:{}", doc.grade, query.query_id)?;
            for (i, v) in doc.features.iter().enumerate() {
                write!(out, " {}:{}", i + 1, v)?;
            }
            writeln!(out, " # {}", doc.doc_id)?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct SessionRecord {
    session_id: String,
    query_id: String,
    items: Vec<SessionItem>,
}

/// Parse a JSON-Lines click log. Sessions keep file order; `n_ranks` is the
/// maximum rank observed.
pub fn parse_click_log(reader: impl BufRead) -> Result<ClickLog> {
    let mut sessions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SessionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let session = Session {
            session_id: rec.session_id,
            query_id: rec.query_id,
            items: rec.items,
        };
        validate_session(&session)?;
        sessions.push(session);
    }
    Ok(ClickLog::from_sessions(sessions))
}

fn validate_session(session: &Session) -> Result<()> {
    let mut prev_rank = 0u32;
    for item in &session.items {
        if item.rank < 1 {
            return Err(Error::validation(format!(
                "rank must be >= 1 in session {}",
                session.session_id
            )));
        }
        if item.rank == prev_rank {
            return Err(Error::validation(format!(
                "duplicate rank {} in session {}",
                item.rank, session.session_id
            )));
        }
        if item.rank < prev_rank {
            return Err(Error::validation(format!(
                "ranks not strictly increasing in session {}",
                session.session_id
            )));
        }
        if item.click > 1 {
            return Err(Error::validation(format!(
                "click must be 0 or 1 in session {}",
                session.session_id
            )));
        }
        prev_rank = item.rank;
    }
    Ok(())
}

/// Write a click log in the format accepted by [`parse_click_log`].
pub fn write_click_log(log: &ClickLog, out: &mut impl Write) -> Result<()> {
    for session in &log.sessions {
        serde_json::to_writer(&mut *out, session)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Partition a log's sessions into train/validation/test splits.
///
/// Assignment is at the session level, deterministic in `seed`, and drawn
/// from a split-specific RNG stream so unrelated randomized operations never
/// perturb it. Each returned split preserves the original session order.
pub fn split_log(
    log: ClickLog,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ClickLog, ClickLog, ClickLog)> {
    let (f1, f2, f3) = fractions;
    if !(f1 > 0.0 && f2 > 0.0 && f3 > 0.0) {
        return Err(Error::validation(format!(
            "split fractions must all be positive, got ({f1}, {f2}, {f3})"
        )));
    }
    if (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split fractions must sum to 1, got {}",
            f1 + f2 + f3
        )));
    }
    let n = log.sessions.len();
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream_rng(seed, stream::SPLIT, 0));

    let b1 = (f1 * n as f64).round() as usize;
    let b2 = ((f1 + f2) * n as f64).round() as usize;
    let (b1, b2) = (b1.min(n), b2.max(b1).min(n));

    // 0 = train, 1 = val, 2 = test, indexed by original position.
    let mut assignment = vec![0u8; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = if pos < b1 {
            0
        } else if pos < b2 {
            1
        } else {
            2
        };
    }
    let mut parts: [Vec<Session>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (session, &part) in log.sessions.into_iter().zip(&assignment) {
        parts[part as usize].push(session);
    }
    let [train, val, test] = parts;
    Ok((
        ClickLog::from_sessions(train),
        ClickLog::from_sessions(val),
        ClickLog::from_sessions(test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn session(id: &str, ranks_clicks: &[(u32, u8)]) -> Session {
        Session {
            session_id: id.to_string(),
            query_id: format!("q_{id}"),
            items: ranks_clicks
                .iter()
                .map(|&(rank, click)| SessionItem {
                    doc_id: format!("d{rank}"),
                    rank,
                    click,
                    features: vec![0.5],
                })
                .collect(),
        }
    }

    #[test]
    fn parse_judged_single_line() {
        let data = parse_judged(Cursor::new("2 qid:1 1:0.5 3:1.0")).unwrap();
        assert_eq!(data.n_queries(), 1);
        let doc = &data.queries[0].docs[0];
        assert_eq!(doc.grade, 2);
        assert_eq!(doc.features, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn parse_judged_empty_stream() {
        let data = parse_judged(Cursor::new("")).unwrap();
        assert_eq!(data.n_queries(), 0);
    }

    #[test]
    fn parse_judged_two_queries() {
        let data = parse_judged(Cursor::new("1 qid:1 1:1.0\n0 qid:2 1:2.0\n")).unwrap();
        assert_eq!(data.n_queries(), 2);
        assert_eq!(data.queries[0].docs.len(), 1);
        assert_eq!(data.queries[1].docs.len(), 1);
    }

    #[test]
    fn parse_judged_groups_noncontiguous_qids() {
        let data =
            parse_judged(Cursor::new("1 qid:a 1:1\n2 qid:b 1:2\n3 qid:a 1:3\n")).unwrap();
        assert_eq!(data.n_queries(), 2);
        assert_eq!(data.queries[0].query_id, "a");
        assert_eq!(data.queries[0].docs.len(), 2);
    }

    #[test]
    fn parse_judged_reports_line_numbers() {
        let err = parse_judged(Cursor::new("1 qid:1 1:1\nbogus qid:1 1:1\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn parse_judged_rejects_out_of_range_grade() {
        let err = parse_judged(Cursor::new("7 qid:1 1:1")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn parse_judged_comment_becomes_doc_id() {
        let data = parse_judged(Cursor::new("2 qid:1 1:0.5 # doc-42")).unwrap();
        assert_eq!(data.queries[0].docs[0].doc_id, "doc-42");
    }

    #[test]
    fn parse_click_log_basic() {
        let line = r#"{"session_id":"s1","query_id":"q1","items":[
            {"doc_id":"a","rank":1,"click":1,"features":[1.0]},
            {"doc_id":"b","rank":2,"click":0,"features":[2.0]},
            {"doc_id":"c","rank":3,"click":0,"features":[3.0]}]}"#
            .replace('\n', "");
        let log = parse_click_log(Cursor::new(line)).unwrap();
        assert_eq!(log.n_sessions(), 1);
        assert_eq!(log.n_ranks, 3);
    }

    #[test]
    fn parse_click_log_rejects_duplicate_rank() {
        let line = r#"{"session_id":"s1","query_id":"q1","items":[
            {"doc_id":"a","rank":1,"click":0,"features":[]},
            {"doc_id":"b","rank":1,"click":0,"features":[]},
            {"doc_id":"c","rank":2,"click":0,"features":[]}]}"#
            .replace('\n', "");
        let err = parse_click_log(Cursor::new(line)).unwrap_err();
        assert!(err.to_string().contains("duplicate rank"), "{err}");
    }

    #[test]
    fn parse_click_log_missing_field_is_parse_error() {
        let line = r#"{"session_id":"s1","items":[]}"#;
        let err = parse_click_log(Cursor::new(line)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn parse_click_log_preserves_order_and_ignores_unknown_fields() {
        let lines = concat!(
            r#"{"session_id":"s1","query_id":"q1","items":[],"dwell":3}"#,
            "\n",
            r#"{"query_id":"q2","session_id":"s2","items":[]}"#,
            "\n"
        );
        let log = parse_click_log(Cursor::new(lines)).unwrap();
        assert_eq!(log.n_sessions(), 2);
        assert_eq!(log.sessions[0].session_id, "s1");
        assert_eq!(log.sessions[1].session_id, "s2");
    }

    #[test]
    fn filter_min_docs_keeps_large_sessions() {
        let sizes = [4usize, 5, 8];
        let sessions = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let ranks: Vec<(u32, u8)> = (1..=n as u32).map(|r| (r, 0)).collect();
                session(&format!("s{i}"), &ranks)
            })
            .collect();
        let log = ClickLog::from_sessions(sessions);
        let filtered = log.filter_min_docs(5);
        let kept: Vec<usize> = filtered.sessions.iter().map(|s| s.items.len()).collect();
        assert_eq!(kept, vec![5, 8]);

        assert_eq!(log.filter_min_docs(1), log);
        assert_eq!(log.filter_min_docs(9).n_sessions(), 0);
    }

    #[test]
    fn split_log_sizes_and_determinism() {
        let sessions: Vec<Session> = (0..10).map(|i| session(&format!("s{i}"), &[(1, 0)])).collect();
        let log = ClickLog::from_sessions(sessions);
        let (a, b, c) = split_log(log.clone(), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.n_sessions(), b.n_sessions(), c.n_sessions()), (8, 1, 1));

        let (a2, b2, c2) = split_log(log.clone(), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));

        let err = split_log(log, (1.0, 0.0, 0.0), 7).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    proptest! {
        #[test]
        fn split_log_partitions(n in 1usize..40, seed in 0u64..1000) {
            let sessions: Vec<Session> =
                (0..n).map(|i| session(&format!("s{i}"), &[(1, 0)])).collect();
            let log = ClickLog::from_sessions(sessions.clone());
            let (a, b, c) = split_log(log, (0.6, 0.2, 0.2), seed).unwrap();
            let mut all: Vec<&Session> =
                a.sessions.iter().chain(&b.sessions).chain(&c.sessions).collect();
            prop_assert_eq!(all.len(), n);
            all.sort_by(|x, y| x.session_id.cmp(&y.session_id));
            let mut expected: Vec<&Session> = sessions.iter().collect();
            expected.sort_by(|x, y| x.session_id.cmp(&y.session_id));
            for (got, want) in all.iter().zip(&expected) {
                prop_assert_eq!(*got, *want);
            }
        }

        #[test]
        fn filter_min_docs_is_idempotent(sizes in proptest::collection::vec(0usize..8, 0..20),
                                         min in 1usize..6) {
            let sessions = sizes.iter().enumerate().map(|(i, &n)| {
                let ranks: Vec<(u32, u8)> = (1..=n as u32).map(|r| (r, 0)).collect();
                session(&format!("s{i}"), &ranks)
            }).collect();
            let log = ClickLog::from_sessions(sessions);
            let once = log.filter_min_docs(min);
            prop_assert_eq!(once.filter_min_docs(min), once);
        }

        #[test]
        fn judged_round_trip(grades in proptest::collection::vec(0u8..=4, 1..12),
                             dim in 1usize..5) {
            let queries: Vec<JudgedQuery> = grades
                .chunks(3)
                .enumerate()
                .map(|(qi, chunk)| JudgedQuery {
                    query_id: format!("q{qi}"),
                    docs: chunk.iter().enumerate().map(|(di, &grade)| JudgedDoc {
                        doc_id: format!("q{qi}_d{di}"),
                        features: (0..dim).map(|f| (f + di) as f64 * 0.25).collect(),
                        grade,
                    }).collect(),
                })
                .collect();
            let data = JudgedDataset { queries };
            let mut buf = Vec::new();
            write_judged(&data, &mut buf).unwrap();
            let parsed = parse_judged(Cursor::new(buf)).unwrap();
            prop_assert_eq!(parsed, data);
        }

        #[test]
        fn click_log_round_trip(n in 0usize..6, clicks in proptest::collection::vec(0u8..=1, 6)) {
            let sessions: Vec<Session> = (0..n).map(|i| {
                let ranks: Vec<(u32, u8)> =
                    (0..=i as u32).map(|r| (2 * r + 1, clicks[r as usize])).collect();
                session(&format!("s{i}"), &ranks)
            }).collect();
            let log = ClickLog::from_sessions(sessions);
            let mut buf = Vec::new();
            write_click_log(&log, &mut buf).unwrap();
            let parsed = parse_click_log(Cursor::new(buf)).unwrap();
            prop_assert_eq!(parsed, log);
        }
    }
}
