//! Serialized artifacts: checkpoints, worlds, CSV streams and content
//! addresses.

mod checkpoint;
mod csvio;

pub use checkpoint::{Checkpoint, Provenance, SeedEntry, CHECKPOINT_SCHEMA, FORMAT_VERSION};
pub use csvio::{read_records_csv, write_records_csv, CsvRecord};

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Git-style address: sha256 over `"blob <len>\0"` followed by the bytes.
pub fn content_address(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Writes through a sibling temp file so readers never see a torn file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Serde adapter for `autodiff::Array` as `{rows, cols, data}`.
pub mod array_serde {
    use autodiff::Array;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(a: &Array, s: S) -> Result<S::Ok, S::Error> {
        Repr { rows: a.rows(), cols: a.cols(), data: a.data().to_vec() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.rows.checked_mul(r.cols) != Some(r.data.len()) {
            return Err(D::Error::custom(format!(
                "array {}x{} holds {} values",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        if r.data.iter().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("non-finite array entry"));
        }
        Ok(Array::new(r.rows, r.cols, r.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_blob_hash() {
        // `printf 'hello\n' | git hash-object --stdin` uses sha1; the sha256
        // object format hashes the same header
        assert_eq!(
            content_address(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
        assert_ne!(content_address(b""), content_address(b" "));
    }
}
