//! JSON-lines dataset manifests: one `{"path": ..., "age": ..., "split": ...}` per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use caae_core::data::age_to_bin;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Relative entries are resolved against the manifest's directory.
    pub image_path: PathBuf,
    pub age_years: f64,
    pub split: Split,
}

impl DatasetRecord {
    pub fn bin(&self) -> usize {
        age_to_bin(self.age_years).expect("validated on load")
    }
}

#[derive(Serialize)]
struct Line<'a> {
    path: &'a str,
    age: f64,
    split: Split,
}

fn parse_line(text: &str, base: &Path) -> std::result::Result<DatasetRecord, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON ({e})"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let path = match obj.get("path") {
        None => return Err("missing field \"path\"".into()),
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(_) => return Err("field \"path\" must be a non-empty string".into()),
    };
    let age = match obj.get("age") {
        None => return Err("missing field \"age\"".into()),
        Some(v) => v.as_f64().ok_or("field \"age\" must be a number")?,
    };
    if !(age >= 0.0) || !age.is_finite() {
        return Err(format!("field \"age\" must be a non-negative number, got {age}"));
    }
    let split = match obj.get("split") {
        None | Some(Value::Null) => Split::Train,
        Some(v) => Split::deserialize(v).map_err(|_| format!("field \"split\" must be \"train\" or \"eval\", got {v}"))?,
    };
    let p = Path::new(path);
    let image_path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(DatasetRecord { image_path, age_years: age, split })
}

/// Read and validate a manifest. Every bad line is reported, not just the first.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, base) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Validation(errors))
    }
}

/// Write `(relative path, age, split)` entries as a manifest.
pub fn write_manifest(path: &Path, entries: &[(String, f64, Split)]) -> Result<()> {
    let mut out = Vec::new();
    for (p, age, split) in entries {
        serde_json::to_writer(&mut out, &Line { path: p, age: *age, split: *split }).expect("in-memory write");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<Vec<DatasetRecord>> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, text).unwrap();
        load_manifest(&p)
    }

    #[test]
    fn parses_records_and_bins() {
        let r = load("{\"path\":\"a.png\",\"age\":27}\n\n{\"path\":\"/x/b.png\",\"age\":3.5,\"split\":\"eval\"}\n").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].bin(), 4);
        assert!(r[0].image_path.ends_with("a.png"));
        assert_eq!(r[0].split, Split::Train);
        assert_eq!(r[1].image_path, PathBuf::from("/x/b.png"));
        assert_eq!(r[1].split, Split::Eval);
        assert!(load("").unwrap().is_empty());
    }

    #[test]
    fn reports_every_bad_line() {
        let err = load("{\"path\":\"a.png\"}\nnot json\n{\"path\":\"b.png\",\"age\":-1}\n{\"path\":\"c.png\",\"age\":5,\"split\":\"test\"}\n")
            .unwrap_err();
        let Error::Validation(msgs) = err else { panic!("{err:?}") };
        assert_eq!(msgs.len(), 4);
        assert!(msgs[0].ends_with(":1: missing field \"age\""), "{}", msgs[0]);
        assert!(msgs[1].contains(":2: malformed JSON"));
        assert!(msgs[2].contains(":3: field \"age\""));
        assert!(msgs[3].contains(":4: field \"split\""));
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_manifest(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &[("img/0.png".into(), 42.0, Split::Train), ("img/1.png".into(), 7.0, Split::Eval)]).unwrap();
        let r = load_manifest(&p).unwrap();
        assert_eq!(r[0].image_path, dir.path().join("img/0.png"));
        assert_eq!((r[1].age_years, r[1].split), (7.0, Split::Eval));
    }
}
