//! Line-delimited JSON training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one JSON object per record; a log without a file only forwards to `log`.
#[derive(Default)]
pub struct RunLog {
    out: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl RunLog {
    pub fn discard() -> Self {
        Self { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: Some((BufWriter::new(f), path.to_path_buf())) })
    }

    pub fn record<R: Serialize>(&mut self, rec: &R) -> Result<()> {
        if let Some((w, path)) = &mut self.out {
            let line = serde_json::to_string(rec).map_err(|e| Error::Numeric(format!("unserializable log record: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((w, path)) = &mut self.out {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

impl Drop for RunLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
