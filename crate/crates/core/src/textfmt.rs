//! Line-oriented record format shared by the scenario, catalog, registry and
//! configuration files.
//!
//! Each non-blank line is `keyword [positional ...] [key=value ...]`. Text after
//! `#` is a comment. Values never contain whitespace.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub line: usize,
    pub keyword: String,
    pub positional: Vec<String>,
    pub fields: BTreeMap<String, String>,
}

/// A problem found while reading a record, tagged with its line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl Record {
    pub fn error(&self, message: impl Into<String>) -> FieldError {
        FieldError {
            line: self.line,
            message: message.into(),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.fields.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn required(&self, key: &str) -> Result<&str, FieldError> {
        self.raw(key)
            .ok_or_else(|| self.error(format!("{} record is missing `{key}=`", self.keyword)))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, FieldError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.error(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, FieldError> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, FieldError> {
        let v = self.required(key)?;
        v.parse()
            .map_err(|_| self.error(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn positional(&self, idx: usize, what: &str) -> Result<&str, FieldError> {
        self.positional
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| self.error(format!("{} record is missing {what}", self.keyword)))
    }

    /// Rejects any field not listed in `allowed`.
    pub fn check_fields(&self, allowed: &[&str]) -> Vec<FieldError> {
        self.fields
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .map(|k| self.error(format!("unknown field `{k}` in {} record", self.keyword)))
            .collect()
    }
}

pub fn parse_line(line_no: usize, line: &str) -> Result<Option<Record>, FieldError> {
    let content = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut tokens = content.split_whitespace();
    let Some(keyword) = tokens.next() else {
        return Ok(None);
    };
    let mut rec = Record {
        line: line_no,
        keyword: keyword.to_owned(),
        positional: Vec::new(),
        fields: BTreeMap::new(),
    };
    for tok in tokens {
        match tok.split_once('=') {
            Some((k, v)) => {
                if k.is_empty() {
                    return Err(FieldError {
                        line: line_no,
                        message: format!("empty key in `{tok}`"),
                    });
                }
                if rec.fields.insert(k.to_owned(), v.to_owned()).is_some() {
                    return Err(FieldError {
                        line: line_no,
                        message: format!("duplicate key `{k}`"),
                    });
                }
            }
            None => {
                if !rec.fields.is_empty() {
                    return Err(FieldError {
                        line: line_no,
                        message: format!("positional value `{tok}` after key=value fields"),
                    });
                }
                rec.positional.push(tok.to_owned());
            }
        }
    }
    Ok(Some(rec))
}

/// Parses a whole document. The first non-blank line must equal `header`.
pub fn parse_document(text: &str, header: &str) -> Result<Vec<Record>, Vec<FieldError>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut errors = Vec::new();
    match lines.find(|(_, l)| !l.trim().is_empty()) {
        Some((_, l)) if l.trim() == header => {}
        Some((n, l)) => errors.push(FieldError {
            line: n,
            message: format!("expected header `{header}`, found `{}`", l.trim()),
        }),
        None => {
            return Err(vec![FieldError {
                line: 1,
                message: format!("empty document, expected header `{header}`"),
            }])
        }
    }
    let mut records = Vec::new();
    for (n, l) in lines {
        match parse_line(n, l) {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(errors)
    }
}

/// Stashes the error of `r` in `errs`, so parsing can continue and report
/// every problem at once.
pub fn keep<T>(errs: &mut Vec<FieldError>, r: Result<T, FieldError>) -> Option<T> {
    r.map_err(|e| errs.push(e)).ok()
}

/// Formats a float so that it parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_then_fields() {
        let r = parse_line(3, "at 10 arrive s1 model=topmodel-stub # comment")
            .unwrap()
            .unwrap();
        assert_eq!(r.keyword, "at");
        assert_eq!(r.positional, vec!["10", "arrive", "s1"]);
        assert_eq!(r.raw("model"), Some("topmodel-stub"));
        assert_eq!(r.line, 3);
    }

    #[test]
    fn blank_and_comment_lines_skip() {
        assert_eq!(parse_line(1, "   ").unwrap(), None);
        assert_eq!(parse_line(1, "# just a comment").unwrap(), None);
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_line(1, "x a=1 a=2").is_err());
    }

    #[test]
    fn positional_after_field_rejected() {
        assert!(parse_line(1, "x a=1 b").is_err());
    }

    #[test]
    fn header_is_checked() {
        let err = parse_document("wrong v1\nx\n", "evop-scenario v1").unwrap_err();
        assert_eq!(err[0].line, 1);
        assert!(parse_document("\n\nevop-scenario v1\nx a=1\n", "evop-scenario v1").is_ok());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.0, 1.0, 0.9, 1e-7, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0");
    }
}
