//! `key = value` text files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed pairs keyed by name, each with its 1-based line number.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty key".into(),
            });
        }
        if out.insert(key.to_string(), (value.trim().to_string(), line_no)).is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

pub(crate) fn parse_f64(value: &str, line: usize) -> Result<f64> {
    let v: f64 = value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("`{value}` is not a number"),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Parse {
            line,
            msg: format!("`{value}` is not finite"),
        })
    }
}

/// Reads the named keys as numbers, failing on missing or unknown keys.
pub(crate) fn take_numbers(text: &str, keys: &[&str]) -> Result<Vec<f64>> {
    let map = parse_key_values(text)?;
    if let Some((k, (_, line))) = map.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
        return Err(Error::Parse {
            line: *line,
            msg: format!("unknown key `{k}`"),
        });
    }
    keys.iter()
        .map(|k| {
            let (v, line) = map
                .get(*k)
                .ok_or_else(|| Error::Config(format!("missing key `{k}`")))?;
            parse_f64(v, *line)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let m = parse_key_values("# header\na = 1.5\n\nb=x # trailing\n").unwrap();
        assert_eq!(m["a"], ("1.5".to_string(), 2));
        assert_eq!(m["b"], ("x".to_string(), 4));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(parse_key_values("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_key_values("a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_key_values(" = 2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn numbers() {
        assert_eq!(take_numbers("b = 2\na = 1\n", &["a", "b"]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(take_numbers("a = 1\n", &["a", "b"]), Err(Error::Config(_))));
        assert!(matches!(take_numbers("a = 1\nc = 3\n", &["a"]), Err(Error::Parse { line: 2, .. })));
        assert!(take_numbers("a = nan\n", &["a"]).is_err());
        assert!(take_numbers("a = one\n", &["a"]).is_err());
    }
}
