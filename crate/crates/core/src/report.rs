//! Small helpers for the machine-readable `key = value` report format
//! shared by corpus statistics, coverage, training and evaluation outputs.

use std::fs;
use std::io;
use std::path::Path;

/// Render `key = value` lines in the given order.
pub fn render_key_values(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> io::Result<()> {
    fs::write(path, render_key_values(pairs))
}

/// Parse `key = value` lines (comments with `#`, blank lines allowed).
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_pairs() {
        let pairs = vec![
            ("a.b".to_string(), "1".to_string()),
            ("c".to_string(), "hello world".to_string()),
        ];
        let text = render_key_values(&pairs);
        assert_eq!(parse_key_values(&text), pairs);
    }
}
