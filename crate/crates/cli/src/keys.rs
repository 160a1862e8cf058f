//! Key files on disk.
//!
//! Zero-bit and L-bit keys are single JSON files. A multi-user key is a JSON
//! file holding the tracing key and L-bit key, plus a packed codebook stored
//! next to it and referenced by file name.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use markbench::fpcode::{Codebook, CodebookHeader, TracingKey};
use markbench::lbit::{LBitKey, LBitKeyFile};
use markbench::multiuser::MultiUserKey;
use markbench::zerobit::{ZeroBitKey, ZeroBitKeyFile};
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Outcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Zero,
    Lbit,
    Multi,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Zero => "zero",
            Level::Lbit => "lbit",
            Level::Multi => "multi",
        })
    }
}

#[allow(clippy::large_enum_variant)]
pub enum Key {
    Zero(ZeroBitKey),
    Lbit(LBitKey),
    Multi(Box<MultiUserKey>),
}

impl Key {
    pub fn level(&self) -> Level {
        match self {
            Key::Zero(_) => Level::Zero,
            Key::Lbit(_) => Level::Lbit,
            Key::Multi(_) => Level::Multi,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MultiKeyFile {
    level: Level,
    /// Packed codebook, relative to the key file's directory.
    codebook: String,
    tracing_key: TracingKey,
    lbit: LBitKeyFile,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyKeyFile {
    Multi(MultiKeyFile),
    Lbit(LBitKeyFile),
    Zero(ZeroBitKeyFile),
}

/// Pretty JSON with object keys in sorted order, newline terminated.
pub fn canonical_json<T: Serialize>(v: &T) -> Outcome<String> {
    let value = serde_json::to_value(v)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, contents: &str) -> Outcome<()> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

pub fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn codebook_path(key_path: &Path) -> PathBuf {
    key_path.with_extension("codebook")
}

/// Writes `key` to `path`; returns every file written.
pub fn save(key: &Key, path: &Path) -> Outcome<Vec<PathBuf>> {
    match key {
        Key::Zero(k) => write_text(path, &canonical_json(&k.to_file())?)?,
        Key::Lbit(k) => write_text(path, &canonical_json(&k.to_file())?)?,
        Key::Multi(k) => {
            let book_path = codebook_path(path);
            let header = CodebookHeader {
                n: k.n(),
                len: k.code_length(),
                params: k.tk.params.clone(),
            };
            let f = File::create(&book_path).map_err(|e| Failure::io(&book_path, e))?;
            k.codebook.write_packed(&header, BufWriter::new(f))?;
            let file = MultiKeyFile {
                level: Level::Multi,
                codebook: book_path
                    .file_name()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Failure::usage(format!("unusable key path {}", path.display())))?
                    .to_owned(),
                tracing_key: k.tk.clone(),
                lbit: k.sk.to_file(),
            };
            write_text(path, &canonical_json(&file)?)?;
            return Ok(vec![path.to_owned(), book_path]);
        }
    }
    Ok(vec![path.to_owned()])
}

pub fn load(path: &Path) -> Outcome<Key> {
    let text = read_text(path)?;
    let file: AnyKeyFile = serde_json::from_str(&text)
        .map_err(|e| Failure::invalid(format!("{}: not a key file: {e}", path.display())))?;
    Ok(match file {
        AnyKeyFile::Zero(f) => Key::Zero(ZeroBitKey::from_file(&f)?),
        AnyKeyFile::Lbit(f) => Key::Lbit(LBitKey::from_file(&f)?),
        AnyKeyFile::Multi(f) => {
            let book_path = path.parent().unwrap_or(Path::new(".")).join(&f.codebook);
            let reader = File::open(&book_path).map_err(|e| Failure::io(&book_path, e))?;
            let (header, book) = Codebook::read_packed(BufReader::new(reader))?;
            if header.params != f.tracing_key.params {
                return Err(Failure::invalid(format!(
                    "{}: codebook header does not match the tracing key",
                    book_path.display()
                )));
            }
            Key::Multi(Box::new(MultiUserKey::from_parts(
                book,
                f.tracing_key,
                LBitKey::from_file(&f.lbit)?,
            )?))
        }
    })
}
