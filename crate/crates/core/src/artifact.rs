//! Provenance-stamped CSV/JSON artifacts.
//!
//! CSV artifacts start with one comment line of `key=value` pairs
//! (`# config_hash=… master_seed=…`); readers skip `#` lines, so the files stay
//! loadable by ordinary CSV tooling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub fn header_line(meta: &[(&str, String)]) -> String {
    let body: Vec<String> = meta
        .iter()
        .map(|(k, v)| {
            let v: String = v.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
            format!("{k}={v}")
        })
        .collect();
    format!("# {}", body.join(" "))
}

pub fn csv_writer(path: impl AsRef<Path>, meta: &[(&str, String)]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    if !meta.is_empty() {
        writeln!(file, "{}", header_line(meta))?;
    }
    Ok(csv::Writer::from_writer(file))
}

pub fn csv_reader(path: impl AsRef<Path>) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?)
}

/// Parses the leading `# key=value ...` line; empty map when absent.
pub fn read_header(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let mut meta = HashMap::new();
    if let Some(rest) = first.trim_end().strip_prefix('#') {
        for token in rest.split_whitespace() {
            if let Some((k, v)) = token.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    Ok(meta)
}

/// Pretty JSON with a trailing newline; key order follows struct order.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let mut w = csv_writer(&path, &[("config_hash", "ab12".into()), ("note", "two words".into())]).unwrap();
        w.write_record(["x", "y"]).unwrap();
        w.write_record(["1", "2"]).unwrap();
        w.flush().unwrap();
        drop(w);
        let meta = read_header(&path).unwrap();
        assert_eq!(meta["config_hash"], "ab12");
        assert_eq!(meta["note"], "two_words");
        let mut r = csv_reader(&path).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), vec!["x", "y"]);
        assert_eq!(r.records().count(), 1);
    }
}
