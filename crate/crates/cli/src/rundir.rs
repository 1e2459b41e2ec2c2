use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};

/// `<root>/<stage>/<timestamp>`, with a numeric suffix if taken.
pub fn create(root: &Path, stage: &str, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
            let base = root.join(stage).join(&stamp);
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = root.join(stage).join(format!("{stamp}-{k}"));
                k += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Log sink shared between stderr and `<run>/run.log`.
#[derive(Clone, Default)]
pub struct LogSink(Arc<Mutex<Option<File>>>);

impl LogSink {
    pub fn attach(&self, dir: &Path) -> Result<()> {
        let f = File::create(dir.join("run.log"))?;
        *self.0.lock().unwrap() = Some(f);
        Ok(())
    }
}

impl Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = self.0.lock().unwrap().as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = self.0.lock().unwrap().as_mut() {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}
