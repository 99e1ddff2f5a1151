//! Line-oriented text serialization shared by the dataset, certificate and
//! problem-dump formats. All floating-point numbers are written with 17
//! significant digits so files diff cleanly across platforms and languages.

use std::fmt::Write as _;

/// `1.2345678901234567e0`-style rendering, 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{}", fmt_f64(v));
    }
    s
}

/// Cursor over the non-comment lines of a document.
pub struct Lines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("unexpected end of file (expected {0})")]
    Eof(String),
    #[error("line {line}: expected `{expected}`, found `{found}`")]
    Expected {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Lines {
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn skip_blank_and_comments(&mut self) {
        while self.pos < self.lines.len() {
            let t = self.lines[self.pos].trim();
            if t.is_empty() || t.starts_with('#') {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    pub fn next_line(&mut self) -> Option<(usize, &'a str)> {
        self.skip_blank_and_comments();
        if self.pos < self.lines.len() {
            let out = (self.pos + 1, self.lines[self.pos].trim());
            self.pos += 1;
            Some(out)
        } else {
            None
        }
    }

    pub fn peek(&mut self) -> Option<&'a str> {
        self.skip_blank_and_comments();
        self.lines.get(self.pos).map(|s| s.trim())
    }

    /// Consumes `key <value>` and returns the value part.
    pub fn expect_key(&mut self, key: &str) -> Result<(usize, &'a str), ParseError> {
        let (ln, line) = self
            .next_line()
            .ok_or_else(|| ParseError::Eof(key.to_string()))?;
        match line.strip_prefix(key) {
            Some(rest) if rest.is_empty() || rest.starts_with(' ') => Ok((ln, rest.trim())),
            _ => Err(ParseError::Expected {
                line: ln,
                expected: key.to_string(),
                found: line.to_string(),
            }),
        }
    }

    pub fn expect_usize(&mut self, key: &str) -> Result<usize, ParseError> {
        let (ln, v) = self.expect_key(key)?;
        v.parse().map_err(|_| ParseError::Malformed {
            line: ln,
            msg: format!("bad integer `{v}` for {key}"),
        })
    }

    pub fn expect_f64(&mut self, key: &str) -> Result<f64, ParseError> {
        let (ln, v) = self.expect_key(key)?;
        v.parse().map_err(|_| ParseError::Malformed {
            line: ln,
            msg: format!("bad number `{v}` for {key}"),
        })
    }

    /// Parses a whitespace-separated row of floats.
    pub fn expect_f64_row(&mut self, count: usize) -> Result<Vec<f64>, ParseError> {
        let (ln, line) = self
            .next_line()
            .ok_or_else(|| ParseError::Eof(format!("{count} numbers")))?;
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| ParseError::Malformed {
            line: ln,
            msg: format!("bad numeric row `{line}`"),
        })?;
        if vals.len() != count {
            return Err(ParseError::Malformed {
                line: ln,
                msg: format!("expected {count} numbers, found {}", vals.len()),
            });
        }
        Ok(vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_17_digits() {
        let x = std::f64::consts::PI * 1e-7;
        let s = fmt_f64(x);
        let y: f64 = s.parse().unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn key_value_parsing_skips_comments() {
        let doc = "# header\n\nn 3\nvalue 2.5\n";
        let mut lines = Lines::new(doc);
        assert_eq!(lines.expect_usize("n").unwrap(), 3);
        assert_eq!(lines.expect_f64("value").unwrap(), 2.5);
        assert!(lines.next_line().is_none());
    }
}
