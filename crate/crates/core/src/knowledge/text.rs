//! KS/1 parsing and canonical serialization.
//!
//! The format is line-oriented. A document is the header line `KS/1`,
//! a `CIRCUIT <token>` line, then zero or more record lines. `#` starts
//! a comment running to end of line, except inside a quoted note.
//! Notes are double-quoted with `\"` and `\\` as the only escapes and
//! must be the last field on their line.

use thiserror::Error;

use super::{
    AssociationRecord, InfluenceDirection, InfluenceRecord, KnowledgeSummary, TradeoffRecord,
};
use crate::circuit::{Ident, MetricId, ParamId, SubStructureId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate record")]
    DuplicateRecord { line: usize },
    #[error("line {line}: unknown directive {directive:?}")]
    UnknownDirective { line: usize, directive: String },
}

impl ParseError {
    fn syntax(line: usize, reason: impl Into<String>) -> Self {
        ParseError::Syntax {
            line,
            reason: reason.into(),
        }
    }

    pub fn line(&self) -> usize {
        match self {
            ParseError::Syntax { line, .. }
            | ParseError::DuplicateRecord { line }
            | ParseError::UnknownDirective { line, .. } => *line,
        }
    }
}

/// One field of a record line: a bare token or a quoted note.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Field {
    Token(String),
    Note(String),
}

/// Splits a line into fields, honoring quotes and dropping comments.
///
/// Returns `Ok(vec![])` for blank and comment-only lines.
fn split_fields(line: &str, line_no: usize) -> Result<Vec<Field>, ParseError> {
    let mut fields = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            None => break,
            Some('#') => break,
            Some('"') => {
                chars.next();
                let mut note = String::new();
                let mut closed = false;
                while let Some(c) = chars.next() {
                    match c {
                        '\\' => match chars.next() {
                            Some('"') => note.push('"'),
                            Some('\\') => note.push('\\'),
                            Some(other) => {
                                return Err(ParseError::syntax(
                                    line_no,
                                    format!("invalid escape \\{other} in note"),
                                ))
                            }
                            None => {
                                return Err(ParseError::syntax(
                                    line_no,
                                    "unterminated escape in note",
                                ))
                            }
                        },
                        '"' => {
                            closed = true;
                            break;
                        }
                        other => note.push(other),
                    }
                }
                if !closed {
                    return Err(ParseError::syntax(line_no, "unterminated note"));
                }
                fields.push(Field::Note(note));
            }
            Some(_) => {
                let mut tok = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '#' || c == '"' {
                        break;
                    }
                    tok.push(c);
                    chars.next();
                }
                fields.push(Field::Token(tok));
            }
        }
    }
    Ok(fields)
}

/// Fields of one record line after comment stripping: the directive,
/// its bare tokens, and an optional trailing note.
struct RecordLine {
    tokens: Vec<String>,
    note: String,
}

fn record_line(fields: Vec<Field>, line_no: usize) -> Result<RecordLine, ParseError> {
    let mut tokens = Vec::new();
    let mut note = None;
    for field in fields {
        match field {
            Field::Token(t) => {
                if note.is_some() {
                    return Err(ParseError::syntax(
                        line_no,
                        "note must be the last field on the line",
                    ));
                }
                tokens.push(t);
            }
            Field::Note(n) => {
                if note.is_some() {
                    return Err(ParseError::syntax(line_no, "more than one note on the line"));
                }
                note = Some(n);
            }
        }
    }
    Ok(RecordLine {
        tokens,
        note: note.unwrap_or_default(),
    })
}

fn parse_ident<T: std::str::FromStr>(
    tok: &str,
    what: &str,
    line_no: usize,
) -> Result<T, ParseError> {
    tok.parse()
        .map_err(|_| ParseError::syntax(line_no, format!("invalid {what} token {tok:?}")))
}

/// A record parsed from a single KS/1 line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Tradeoff(TradeoffRecord),
    Association(AssociationRecord),
    Influence(InfluenceRecord),
}

fn parse_record(rl: RecordLine, line_no: usize) -> Result<Record, ParseError> {
    let kw = rl.tokens[0].as_str();
    let args = &rl.tokens[1..];
    match kw {
        "TRADEOFF" => {
            if args.len() != 2 {
                return Err(ParseError::syntax(
                    line_no,
                    "TRADEOFF takes exactly two metrics",
                ));
            }
            let a: MetricId = parse_ident(&args[0], "metric", line_no)?;
            let b: MetricId = parse_ident(&args[1], "metric", line_no)?;
            TradeoffRecord::new(a, b, rl.note)
                .map(Record::Tradeoff)
                .map_err(|e| ParseError::syntax(line_no, e.to_string()))
        }
        "ASSOC" => {
            if args.len() < 2 {
                return Err(ParseError::syntax(
                    line_no,
                    "ASSOC takes a sub-structure then METRIC or TRADEOFF",
                ));
            }
            let sub: SubStructureId = parse_ident(&args[0], "sub-structure", line_no)?;
            match args[1].as_str() {
                "METRIC" => {
                    if args.len() != 3 {
                        return Err(ParseError::syntax(
                            line_no,
                            "ASSOC ... METRIC takes exactly one metric",
                        ));
                    }
                    let m: MetricId = parse_ident(&args[2], "metric", line_no)?;
                    AssociationRecord::to_metric(sub, m, rl.note)
                        .map(Record::Association)
                        .map_err(|e| ParseError::syntax(line_no, e.to_string()))
                }
                "TRADEOFF" => {
                    if args.len() != 4 {
                        return Err(ParseError::syntax(
                            line_no,
                            "ASSOC ... TRADEOFF takes exactly two metrics",
                        ));
                    }
                    let a: MetricId = parse_ident(&args[2], "metric", line_no)?;
                    let b: MetricId = parse_ident(&args[3], "metric", line_no)?;
                    AssociationRecord::to_tradeoff(sub, a, b, rl.note)
                        .map(Record::Association)
                        .map_err(|e| ParseError::syntax(line_no, e.to_string()))
                }
                other => Err(ParseError::syntax(
                    line_no,
                    format!("expected METRIC or TRADEOFF after sub-structure, got {other:?}"),
                )),
            }
        }
        "INFL" => {
            // INFL <param> IN <sub> ON <metric> DIR <+|-|~>
            if args.len() != 7 || args[1] != "IN" || args[3] != "ON" || args[5] != "DIR" {
                return Err(ParseError::syntax(
                    line_no,
                    "INFL syntax is: INFL <param> IN <sub> ON <metric> DIR <+|-|~>",
                ));
            }
            let param: ParamId = parse_ident(&args[0], "parameter", line_no)?;
            let sub: SubStructureId = parse_ident(&args[2], "sub-structure", line_no)?;
            let metric: MetricId = parse_ident(&args[4], "metric", line_no)?;
            let dir = InfluenceDirection::from_token(&args[6]).ok_or_else(|| {
                ParseError::syntax(
                    line_no,
                    format!("invalid direction {:?}: expected +, - or ~", args[6]),
                )
            })?;
            InfluenceRecord::new(param, sub, metric, dir, rl.note)
                .map(Record::Influence)
                .map_err(|e| ParseError::syntax(line_no, e.to_string()))
        }
        other => Err(ParseError::UnknownDirective {
            line: line_no,
            directive: other.to_string(),
        }),
    }
}

/// Parses one record line leniently: returns the record if the line is a
/// well-formed TRADEOFF/ASSOC/INFL line, `None` otherwise.
///
/// Used to salvage records from free-form advisor responses; strict
/// document parsing goes through [`parse_summary`].
pub fn parse_record_lenient(line: &str) -> Option<Record> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields = split_fields(line, 0).ok()?;
    let rl = record_line(fields, 0).ok()?;
    if rl.tokens.is_empty() {
        return None;
    }
    parse_record(rl, 0).ok()
}

/// Parses a full KS/1 document.
///
/// Line numbers in errors are 1-based over the raw input, counting
/// blank and comment lines. Provenance and iteration of the result are
/// the defaults (`Generated`, 0); they are not document content.
pub fn parse_summary(text: &str) -> Result<KnowledgeSummary, ParseError> {
    enum State {
        ExpectHeader,
        ExpectCircuit,
        Records,
    }
    let mut state = State::ExpectHeader;
    let mut summary: Option<KnowledgeSummary> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let fields = split_fields(line, line_no)?;
        if fields.is_empty() {
            continue;
        }
        match state {
            State::ExpectHeader => {
                if fields == [Field::Token("KS/1".into())] {
                    state = State::ExpectCircuit;
                } else {
                    return Err(ParseError::syntax(line_no, "expected KS/1 header"));
                }
            }
            State::ExpectCircuit => {
                let rl = record_line(fields, line_no)?;
                if rl.tokens.len() == 2 && rl.tokens[0] == "CIRCUIT" && rl.note.is_empty() {
                    let id: Ident = parse_ident(&rl.tokens[1], "circuit", line_no)?;
                    summary = Some(KnowledgeSummary::new(id));
                    state = State::Records;
                } else {
                    return Err(ParseError::syntax(line_no, "expected CIRCUIT <token>"));
                }
            }
            State::Records => {
                let rl = record_line(fields, line_no)?;
                let summary = summary.as_mut().expect("circuit line already parsed");
                let inserted = match parse_record(rl, line_no)? {
                    Record::Tradeoff(r) => summary.insert_tradeoff(r),
                    Record::Association(r) => summary.insert_association(r),
                    Record::Influence(r) => summary.insert_influence(r),
                };
                if !inserted {
                    return Err(ParseError::DuplicateRecord { line: line_no });
                }
            }
        }
    }

    match state {
        State::ExpectHeader => Err(ParseError::syntax(1, "expected KS/1 header")),
        State::ExpectCircuit => Err(ParseError::syntax(
            text.lines().count().max(1),
            "expected CIRCUIT <token>",
        )),
        State::Records => Ok(summary.expect("set when entering Records state")),
    }
}

fn escape_note(note: &str) -> String {
    let mut out = String::with_capacity(note.len() + 2);
    for c in note.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            other => out.push(other),
        }
    }
    out
}

fn push_note(line: &mut String, note: &str) {
    if !note.is_empty() {
        line.push_str(" \"");
        line.push_str(&escape_note(note));
        line.push('"');
    }
}

/// Renders one record as its canonical KS/1 line, without a trailing
/// newline. Empty notes are omitted rather than written as `""`.
pub fn serialize_record(r: &Record) -> String {
    match r {
        Record::Tradeoff(t) => {
            let mut line = format!("TRADEOFF {} {}", t.metric_a(), t.metric_b());
            push_note(&mut line, &t.note);
            line
        }
        Record::Association(a) => {
            let mut line = match a.target() {
                super::AssocTarget::Metric(m) => {
                    format!("ASSOC {} METRIC {}", a.substructure, m)
                }
                super::AssocTarget::Tradeoff(m1, m2) => {
                    format!("ASSOC {} TRADEOFF {} {}", a.substructure, m1, m2)
                }
            };
            push_note(&mut line, &a.note);
            line
        }
        Record::Influence(i) => {
            let mut line = format!(
                "INFL {} IN {} ON {} DIR {}",
                i.param,
                i.substructure,
                i.metric,
                i.direction.token()
            );
            push_note(&mut line, &i.note);
            line
        }
    }
}

/// Serializes a summary to its canonical KS/1 document.
///
/// Records are emitted grouped by kind (TRADEOFF, ASSOC, INFL) and
/// sorted within each group, with LF endings and no trailing spaces,
/// so equal summaries serialize to byte-identical documents.
pub fn serialize_summary(k: &KnowledgeSummary) -> String {
    let mut out = String::from("KS/1\n");
    out.push_str(&format!("CIRCUIT {}\n", k.circuit_id));
    for t in k.tradeoffs() {
        out.push_str(&serialize_record(&Record::Tradeoff(t.clone())));
        out.push('\n');
    }
    for a in k.associations() {
        out.push_str(&serialize_record(&Record::Association(a.clone())));
        out.push('\n');
    }
    for i in k.influences() {
        out.push_str(&serialize_record(&Record::Influence(i.clone())));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid(s: &str) -> MetricId {
        MetricId::new(s).unwrap()
    }

    fn sid(s: &str) -> SubStructureId {
        SubStructureId::new(s).unwrap()
    }

    fn pid(s: &str) -> ParamId {
        ParamId::new(s).unwrap()
    }

    #[test]
    fn parses_minimal_document() {
        let text = "KS/1\nCIRCUIT two_stage_amp\nTRADEOFF gain ugf \"compensation cap couples them\"\n";
        let k = parse_summary(text).unwrap();
        assert_eq!(k.circuit_id.as_str(), "two_stage_amp");
        assert_eq!(k.tradeoffs().len(), 1);
        assert_eq!(k.associations().len(), 0);
        assert_eq!(k.influences().len(), 0);
        assert_eq!(k.tradeoffs()[0].note, "compensation cap couples them");
    }

    #[test]
    fn empty_summary_serializes_to_header_only() {
        let k = KnowledgeSummary::new(Ident::new("c").unwrap());
        assert_eq!(serialize_summary(&k), "KS/1\nCIRCUIT c\n");
    }

    #[test]
    fn bad_direction_is_a_syntax_error_with_line() {
        let text = "KS/1\nCIRCUIT c\nINFL w1 IN dp ON gain DIR ?\n";
        match parse_summary(text) {
            Err(ParseError::Syntax { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("direction"), "reason: {reason}");
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_and_missing_circuit_are_rejected() {
        match parse_summary("CIRCUIT c\n") {
            Err(ParseError::Syntax { line: 1, .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }
        assert!(parse_summary("").is_err());
        assert!(parse_summary("KS/1\n").is_err());
        // Records before the CIRCUIT line are rejected.
        assert!(matches!(
            parse_summary("KS/1\nTRADEOFF a b\n"),
            Err(ParseError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_directive_reports_line_and_word() {
        let text = "KS/1\nCIRCUIT c\nFOO bar\n";
        match parse_summary(text) {
            Err(ParseError::UnknownDirective { line, directive }) => {
                assert_eq!(line, 3);
                assert_eq!(directive, "FOO");
            }
            other => panic!("expected unknown directive, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_records_report_the_repeat_line() {
        let text = "KS/1\nCIRCUIT c\nTRADEOFF gain ugf\n\n# comment\nTRADEOFF ugf gain \"other note\"\n";
        assert_eq!(
            parse_summary(text),
            Err(ParseError::DuplicateRecord { line: 6 })
        );
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# leading comment\nKS/1\n\nCIRCUIT c  # trailing comment\n# full line\nTRADEOFF gain ugf # after record\n";
        let k = parse_summary(text).unwrap();
        assert_eq!(k.tradeoffs().len(), 1);
        assert_eq!(k.tradeoffs()[0].note, "");
    }

    #[test]
    fn hash_inside_note_is_not_a_comment() {
        let text = "KS/1\nCIRCUIT c\nTRADEOFF gain ugf \"see issue #42\"\n";
        let k = parse_summary(text).unwrap();
        assert_eq!(k.tradeoffs()[0].note, "see issue #42");
    }

    #[test]
    fn note_escapes_round_trip() {
        let mut k = KnowledgeSummary::new(Ident::new("c").unwrap());
        k.insert_tradeoff(
            TradeoffRecord::new(mid("a"), mid("b"), "say \"hi\" and a back\\slash").unwrap(),
        );
        let text = serialize_summary(&k);
        assert!(text.contains(r#""say \"hi\" and a back\\slash""#));
        let back = parse_summary(&text).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn invalid_escape_is_rejected() {
        let text = "KS/1\nCIRCUIT c\nTRADEOFF a b \"bad \\n escape\"\n";
        assert!(matches!(
            parse_summary(text),
            Err(ParseError::Syntax { line: 3, .. })
        ));
    }

    #[test]
    fn note_must_be_last_field() {
        let text = "KS/1\nCIRCUIT c\nTRADEOFF a \"note\" b\n";
        assert!(matches!(
            parse_summary(text),
            Err(ParseError::Syntax { line: 3, .. })
        ));
    }

    #[test]
    fn full_document_round_trips() {
        let mut k = KnowledgeSummary::new(Ident::new("two_stage_amp").unwrap());
        k.insert_tradeoff(TradeoffRecord::new(mid("gain"), mid("ugf"), "cc").unwrap());
        k.insert_tradeoff(TradeoffRecord::new(mid("iq"), mid("gain"), "").unwrap());
        k.insert_association(
            AssociationRecord::to_metric(sid("diffpair"), mid("gain"), "input pair").unwrap(),
        );
        k.insert_association(
            AssociationRecord::to_tradeoff(sid("out_stage"), mid("ugf"), mid("gain"), "").unwrap(),
        );
        k.insert_influence(
            InfluenceRecord::new(
                pid("w1"),
                sid("diffpair"),
                mid("gain"),
                InfluenceDirection::Positive,
                "gm rises",
            )
            .unwrap(),
        );
        k.insert_influence(
            InfluenceRecord::new(
                pid("cl"),
                sid("out_stage"),
                mid("ugf"),
                InfluenceDirection::Negative,
                "",
            )
            .unwrap(),
        );
        k.insert_influence(
            InfluenceRecord::new(
                pid("vb"),
                sid("out_stage"),
                mid("gain"),
                InfluenceDirection::Nonmonotonic,
                "",
            )
            .unwrap(),
        );
        let text = serialize_summary(&k);
        let back = parse_summary(&text).unwrap();
        assert_eq!(back, k);
        // Canonical documents re-serialize byte-identically.
        assert_eq!(serialize_summary(&back), text);
    }

    #[test]
    fn serialization_is_canonical_across_insertion_orders() {
        let recs = [
            TradeoffRecord::new(mid("ugf"), mid("pm"), "").unwrap(),
            TradeoffRecord::new(mid("gain"), mid("iq"), "x").unwrap(),
            TradeoffRecord::new(mid("cmrr"), mid("psrr"), "").unwrap(),
        ];
        let mut k1 = KnowledgeSummary::new(Ident::new("c").unwrap());
        let mut k2 = KnowledgeSummary::new(Ident::new("c").unwrap());
        for r in &recs {
            k1.insert_tradeoff(r.clone());
        }
        for r in recs.iter().rev() {
            k2.insert_tradeoff(r.clone());
        }
        assert_eq!(serialize_summary(&k1), serialize_summary(&k2));
        let text = serialize_summary(&k1);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "TRADEOFF cmrr psrr");
        assert_eq!(lines[3], "TRADEOFF gain iq \"x\"");
        assert_eq!(lines[4], "TRADEOFF pm ugf");
    }

    #[test]
    fn non_canonical_input_canonicalizes_idempotently() {
        // Out-of-order records, noise whitespace, an empty note written
        // as "": one parse+serialize pass normalizes all of it.
        let messy = "KS/1\nCIRCUIT c\nINFL  w1   IN dp ON gain DIR +\nTRADEOFF ugf gain \"\"\nASSOC dp METRIC gain\n";
        let k = parse_summary(messy).unwrap();
        let canonical = serialize_summary(&k);
        assert_eq!(
            canonical,
            "KS/1\nCIRCUIT c\nTRADEOFF gain ugf\nASSOC dp METRIC gain\nINFL w1 IN dp ON gain DIR +\n"
        );
        let again = serialize_summary(&parse_summary(&canonical).unwrap());
        assert_eq!(again, canonical);
    }

    #[test]
    fn lenient_line_parse_salvages_records_only() {
        assert!(parse_record_lenient("TRADEOFF gain ugf").is_some());
        assert!(parse_record_lenient("  INFL w1 IN dp ON gain DIR -  ").is_some());
        assert!(parse_record_lenient("Sure! Here are the records:").is_none());
        assert!(parse_record_lenient("TRADEOFF gain").is_none());
        assert!(parse_record_lenient("").is_none());
    }

    #[test]
    fn crlf_input_is_tolerated() {
        let text = "KS/1\r\nCIRCUIT c\r\nTRADEOFF gain ugf\r\n";
        let k = parse_summary(text).unwrap();
        assert_eq!(k.tradeoffs().len(), 1);
    }
}
