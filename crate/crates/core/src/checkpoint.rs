//! JSON artifact helpers shared by every stage that persists weights.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Version written into every checkpoint sidecar. Loading rejects other values.
pub const FORMAT_VERSION: u32 = 1;

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Incompatible { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn check_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Incompatible {
            path: path.to_path_buf(),
            reason: format!("format version {found}, expected {FORMAT_VERSION}"),
        });
    }
    Ok(())
}

/// Appends one CSV row, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    writeln!(f, "{row}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
