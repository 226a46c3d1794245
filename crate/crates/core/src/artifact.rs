//! JSON Lines artifacts with a `kind` discriminator.
//!
//! Every intermediate file the pipeline produces is a JSON Lines file where
//! each line is one object carrying a `kind` field naming its record type.
//! Files are written to a sibling `.partial` path and renamed into place so
//! a failed stage never leaves a truncated artifact behind.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A record type that can live in a JSON Lines artifact.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize item {index}: field `{field}`: {message}")]
    Serialize {
        index: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: expected kind `{expected}`, found `{found}`")]
    KindMismatch {
        path: PathBuf,
        line: usize,
        expected: &'static str,
        found: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize one record into a JSON line (without the trailing newline).
pub fn to_line<T: Artifact>(item: &T, index: usize) -> Result<String, ArtifactError> {
    let value = serde_path_to_error::serialize(item, serde_json::value::Serializer).map_err(
        |e| ArtifactError::Serialize {
            index,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        },
    )?;
    let mut obj = match value {
        serde_json::Value::Object(map) => map,
        other => {
            let mut map = serde_json::Map::new();
            map.insert("value".into(), other);
            map
        }
    };
    obj.insert("kind".into(), serde_json::Value::String(T::KIND.into()));
    Ok(serde_json::Value::Object(obj).to_string())
}

/// JSON Lines bytes for `items`.
pub fn artifact_bytes<T: Artifact>(items: &[T]) -> Result<Vec<u8>, ArtifactError> {
    let mut buf = String::new();
    for (i, item) in items.iter().enumerate() {
        buf.push_str(&to_line(item, i)?);
        buf.push('\n');
    }
    Ok(buf.into_bytes())
}

/// Write `items` as JSON Lines; returns the number of lines written.
pub fn write_artifact<T: Artifact>(items: &[T], path: &Path) -> Result<usize, ArtifactError> {
    write_atomic(path, &artifact_bytes(items)?)?;
    Ok(items.len())
}

/// Write bytes to `path` via a `.partial` sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Pretty-printed JSON document bytes.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, ArtifactError> {
    let v = serde_path_to_error::serialize(value, serde_json::value::Serializer).map_err(|e| {
        ArtifactError::Serialize {
            index: 0,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        }
    })?;
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    Ok(s.into_bytes())
}

/// Write a single pretty-printed JSON document.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ArtifactError> {
    write_atomic(path, &json_bytes(value)?)
}

pub fn read_artifact<T: Artifact>(path: &Path) -> Result<Vec<T>, ArtifactError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, path, i + 1)?);
    }
    Ok(out)
}

fn parse_line<T: Artifact>(line: &str, path: &Path, lineno: usize) -> Result<T, ArtifactError> {
    let parse_err = |message: String| ArtifactError::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| parse_err("line is not a JSON object".into()))?;
    match obj.remove("kind") {
        Some(serde_json::Value::String(k)) if k == T::KIND => {}
        Some(other) => {
            return Err(ArtifactError::KindMismatch {
                path: path.to_path_buf(),
                line: lineno,
                expected: T::KIND,
                found: other.as_str().map(str::to_owned).unwrap_or_else(|| other.to_string()),
            })
        }
        None => return Err(parse_err("missing `kind` field".into())),
    }
    serde_path_to_error::deserialize(value).map_err(|e| parse_err(format!("{}: {}", e.path(), e.inner())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String, ArtifactError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::collections::HashMap;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Item {
        id: u32,
        name: String,
    }
    impl Artifact for Item {
        const KIND: &'static str = "item";
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct Bad {
        ok: u32,
        weights: HashMap<(u8, u8), u8>,
    }
    impl Artifact for Bad {
        const KIND: &'static str = "bad";
    }

    #[test]
    fn empty_list_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        assert_eq!(write_artifact::<Item>(&[], &p).unwrap(), 0);
        assert_eq!(fs::read(&p).unwrap().len(), 0);
        assert!(read_artifact::<Item>(&p).unwrap().is_empty());
    }

    #[test]
    fn lines_carry_kind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let items = vec![
            Item { id: 1, name: "a".into() },
            Item { id: 2, name: "b".into() },
        ];
        write_artifact(&items, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.contains("\"kind\":\"item\"")));
        assert_eq!(read_artifact::<Item>(&p).unwrap(), items);
        assert!(!dir.path().join("x.jsonl.partial").exists());
    }

    #[test]
    fn serialization_error_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut weights = HashMap::new();
        weights.insert((1, 2), 3);
        let err = write_artifact(&[Bad { ok: 1, weights }], &dir.path().join("b.jsonl")).unwrap_err();
        match err {
            ArtifactError::Serialize { field, .. } => assert!(field.contains("weights"), "{field}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"kind\":\"other\",\"id\":1,\"name\":\"a\"}\n").unwrap();
        assert!(matches!(
            read_artifact::<Item>(&p),
            Err(ArtifactError::KindMismatch { line: 1, .. })
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let r = write_artifact::<Item>(&[], Path::new("/nonexistent-dir/x/y.jsonl"));
        assert!(matches!(r, Err(ArtifactError::Io { .. })));
    }
}
