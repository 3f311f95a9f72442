use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use afcyte::Error;
use sha2::{Digest, Sha256};

/// Error category, which fixes the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Runtime,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Runtime => 1,
            Self::Usage => 2,
            Self::Data => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::Data => "data",
            Self::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            category: Category::Usage,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            category: Category::Data,
            message: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            category: Category::Runtime,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.name(), self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Parameter(_) => Category::Usage,
            Error::Data(_) | Error::Format { .. } | Error::Threshold(_) | Error::Labeling(_) | Error::Registration(_) => Category::Data,
            Error::Io { .. } | Error::Tensor(_) | Error::Diverged { .. } => Category::Runtime,
        };
        Self {
            category,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::from(Error::io(path, e))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(".afcyte.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::runtime(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// `sha256sum`-style listing of the given files.
pub fn write_input_hashes(dir: &Path, files: &[PathBuf]) -> CliResult<()> {
    let mut s = String::new();
    for f in files {
        s.push_str(&format!("{}  {}\n", sha256_file(f)?, f.display()));
    }
    write(&dir.join("inputs.sha256"), s)
}

/// Writes `config.txt` (key=value) and `config.json` describing the
/// resolved configuration of a run.
pub fn write_config(dir: &Path, command: &str, args: &[(String, String, String)], resolved: &[(String, String)]) -> CliResult<()> {
    let mut txt = format!("[{command}]\n");
    for (k, v, src) in args {
        txt.push_str(&format!("{k}={v}  # {src}\n"));
    }
    if !resolved.is_empty() {
        txt.push_str("\n[resolved]\n");
        for (k, v) in resolved {
            txt.push_str(&format!("{k}={v}\n"));
        }
    }
    write(&dir.join("config.txt"), txt)?;
    let mut a = serde_json::Map::new();
    for (k, v, src) in args {
        a.insert(k.clone(), serde_json::json!({ "value": v, "source": src }));
    }
    let r: serde_json::Map<String, serde_json::Value> = resolved.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
    let json = serde_json::json!({ "command": command, "arguments": a, "resolved": r });
    let text = serde_json::to_string_pretty(&json).map_err(|e| CliError::runtime(e.to_string()))?;
    write(&dir.join("config.json"), text + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let l = RunLock::acquire(d.path()).unwrap();
        let e = RunLock::acquire(d.path()).err().unwrap();
        assert_eq!(e.category.exit_code(), 1);
        drop(l);
        assert!(RunLock::acquire(d.path()).is_ok());
    }

    #[test]
    fn error_categories() {
        assert_eq!(CliError::from(Error::Parameter("x".into())).category.exit_code(), 2);
        assert_eq!(CliError::from(Error::Data("x".into())).category.exit_code(), 3);
        assert_eq!(CliError::from(Error::Labeling("x".into())).category.exit_code(), 3);
        let io = Error::io("p", io::Error::other("x"));
        assert_eq!(CliError::from(io).category.exit_code(), 1);
    }

    #[test]
    fn hash_of_known_content() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
