//! Output files are written to a sibling temporary file and renamed into
//! place, so a failed command never leaves a partial file behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub const FIT_SCHEMA: &str = "hmm-order/fit/v1";
pub const TRUTH_SCHEMA: &str = "hmm-order/truth/v1";
pub const BENCHMARK_SCHEMA: &str = "hmm-order/benchmark/v1";
pub const PREPROCESS_SCHEMA: &str = "hmm-order/preprocess/v1";

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

/// Writes through `body` into a temporary file, then renames it to `path`.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let file = File::create(&tmp).map_err(|e| CliError::io(path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(path, e))?;
        w.get_ref().sync_all().map_err(|e| CliError::io(path, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(hmm_order::Error::from)?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))
    })
}

/// Manifest line printed for each written file.
pub fn manifest_line(path: &Path, what: &str) -> String {
    let bytes = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    format!("{}\t{what}\t{bytes} bytes", path.display())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial").unwrap();
            Err(CliError::Config("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        write_json(&path, &vec![1, 2]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "[\n  1,\n  2\n]\n");
    }
}
