//! Plain `key=value` text used for nonlinearity specs, experiment configs and
//! run summaries.

use crate::error::{Error, Result};

/// One parsed assignment together with its 1-based source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped;
/// anything else without a `=` is an error carrying its line number.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected key=value, got `{line}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                message: "empty key".into(),
            });
        }
        out.push(Entry {
            line: idx + 1,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_f64(entry: &Entry) -> Result<f64> {
    entry.value.parse::<f64>().map_err(|_| Error::Parse {
        line: entry.line,
        message: format!("`{}` is not a number (key `{}`)", entry.value, entry.key),
    })
}

pub fn parse_u64(entry: &Entry) -> Result<u64> {
    entry.value.parse::<u64>().map_err(|_| Error::Parse {
        line: entry.line,
        message: format!(
            "`{}` is not a non-negative integer (key `{}`)",
            entry.value, entry.key
        ),
    })
}

/// Float formatting that round-trips exactly through `str::parse`.
pub fn fmt_exact(x: f64) -> String {
    format!("{x:?}")
}

/// Fixed 17-significant-digit scientific formatting for tabular output.
pub fn fmt_sci(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let entries = parse("# comment\n\nfamily = power_law\ngamma=0.5\n").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].line, 3);
        assert_eq!(entries[0].key, "family");
        assert_eq!(entries[1].value, "0.5");

        let err = parse("a=1\nbroken\n").unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 2,
                message: "expected key=value, got `broken`".into()
            }
        );
    }

    #[test]
    fn exact_format_round_trips() {
        for x in [0.1, 1e-300, 2.5e17, -3.0, f64::MIN_POSITIVE, 1.0 / 3.0] {
            assert_eq!(fmt_exact(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_sci(0.5), "5.0000000000000000e-1");
    }
}
