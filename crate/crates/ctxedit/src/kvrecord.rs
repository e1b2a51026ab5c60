//! Self-describing structured text records.
//!
//! A record is a magic line, ordered `key = value` pairs, optional named
//! binary blobs, and a terminating `end` line:
//!
//! ```text
//! ctxedit-episode-v1
//! h = 64
//! blob scene_ppm 12303
//! <12303 raw bytes>
//! end
//! ```
//!
//! Write-then-parse is byte-exact: keys keep insertion order and values are
//! stored verbatim. Floats should be formatted with `{}` (shortest
//! round-trip) by callers.

use std::fmt;

#[derive(Debug)]
pub enum RecordError {
    BadMagic { expected: String, got: String },
    Syntax { line: usize, detail: String },
    Truncated,
    MissingKey(String),
    BadValue { key: String, detail: String },
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic { expected, got } => {
                write!(f, "record magic mismatch: expected {expected:?}, got {got:?}")
            }
            Self::Syntax { line, detail } => write!(f, "record syntax error at line {line}: {detail}"),
            Self::Truncated => write!(f, "record truncated"),
            Self::MissingKey(k) => write!(f, "record missing key {k:?}"),
            Self::BadValue { key, detail } => write!(f, "bad value for key {key:?}: {detail}"),
        }
    }
}

impl std::error::Error for RecordError {}

/// Ordered key-value header plus named binary blobs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    pairs: Vec<(String, String)>,
    blobs: Vec<(String, Vec<u8>)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, RecordError> {
        self.get(key)
            .ok_or_else(|| RecordError::MissingKey(key.to_string()))
    }

    pub fn require_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, RecordError> {
        self.require(key)?
            .parse()
            .map_err(|_| RecordError::BadValue {
                key: key.to_string(),
                detail: "parse failure".into(),
            })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn add_blob(&mut self, name: &str, bytes: Vec<u8>) {
        self.blobs.push((name.to_string(), bytes));
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn require_blob(&self, name: &str) -> Result<&[u8], RecordError> {
        self.blob(name)
            .ok_or_else(|| RecordError::MissingKey(format!("blob {name}")))
    }

    pub fn to_bytes(&self, magic: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.pairs {
            out.extend_from_slice(format!("{k} = {v}\n").as_bytes());
        }
        for (name, bytes) in &self.blobs {
            out.extend_from_slice(format!("blob {name} {}\n", bytes.len()).as_bytes());
            out.extend_from_slice(bytes);
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &str) -> Result<Self, RecordError> {
        let mut rec = Self::new();
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let next_line = |pos: &mut usize, line_no: &mut usize| -> Result<String, RecordError> {
            if *pos >= bytes.len() {
                return Err(RecordError::Truncated);
            }
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            let line = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
            *pos += 1; // consume newline
            *line_no += 1;
            Ok(line)
        };

        let got = next_line(&mut pos, &mut line_no)?;
        if got != magic {
            return Err(RecordError::BadMagic {
                expected: magic.to_string(),
                got,
            });
        }
        loop {
            let line = next_line(&mut pos, &mut line_no)?;
            if line == "end" {
                return Ok(rec);
            }
            if let Some(rest) = line.strip_prefix("blob ") {
                let mut parts = rest.rsplitn(2, ' ');
                let len: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or(RecordError::Syntax {
                        line: line_no,
                        detail: "bad blob length".into(),
                    })?;
                let name = parts
                    .next()
                    .ok_or(RecordError::Syntax {
                        line: line_no,
                        detail: "blob missing name".into(),
                    })?
                    .to_string();
                if pos + len + 1 > bytes.len() {
                    return Err(RecordError::Truncated);
                }
                rec.blobs.push((name, bytes[pos..pos + len].to_vec()));
                pos += len;
                if bytes[pos] != b'\n' {
                    return Err(RecordError::Syntax {
                        line: line_no,
                        detail: "blob not newline-terminated".into(),
                    });
                }
                pos += 1;
            } else if let Some((k, v)) = line.split_once(" = ") {
                rec.pairs.push((k.to_string(), v.to_string()));
            } else {
                return Err(RecordError::Syntax {
                    line: line_no,
                    detail: format!("unparseable line {line:?}"),
                });
            }
        }
    }
}

/// Parse a `key = value` config file: blank lines and `#` comments allowed,
/// later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, RecordError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(RecordError::Syntax {
            line: i + 1,
            detail: "expected key = value".into(),
        })?;
        let key = k.trim().to_string();
        let val = v.trim().to_string();
        if let Some(slot) = out.iter_mut().find(|(ek, _)| *ek == key) {
            slot.1 = val;
        } else {
            out.push((key, val));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_blobs_is_byte_exact() {
        let mut rec = KvRecord::new();
        rec.set("alpha", 1.5f64);
        rec.set("name", "scene shows red box");
        rec.add_blob("payload", vec![0, 10, 255, b'\n', 7]);
        let bytes = rec.to_bytes("test-v1");
        let back = KvRecord::from_bytes(&bytes, "test-v1").unwrap();
        assert_eq!(rec, back);
        assert_eq!(bytes, back.to_bytes("test-v1"));
    }

    #[test]
    fn magic_mismatch_is_rejected() {
        let rec = KvRecord::new();
        let bytes = rec.to_bytes("a-v1");
        assert!(matches!(
            KvRecord::from_bytes(&bytes, "b-v1"),
            Err(RecordError::BadMagic { .. })
        ));
    }

    #[test]
    fn config_parsing_handles_comments_and_overrides() {
        let cfg = parse_config("# comment\nlr = 0.1\n\nsteps= 20\nlr =0.2\n").unwrap();
        assert_eq!(
            cfg,
            vec![
                ("lr".to_string(), "0.2".to_string()),
                ("steps".to_string(), "20".to_string())
            ]
        );
    }
}
