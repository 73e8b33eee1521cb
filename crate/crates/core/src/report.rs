//! Output directory bookkeeping: every artifact written through a
//! [`Reporter`] is listed in `manifest.json` with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Error;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

#[derive(Debug)]
pub struct Reporter {
    dir: PathBuf,
    command: String,
    artifacts: Vec<Artifact>,
}

impl Reporter {
    pub fn new(dir: impl Into<PathBuf>, command: &str) -> Result<Self, Error> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `write` against `dir/name`, then hashes the result.
    pub fn add<F>(&mut self, name: &str, write: F) -> Result<PathBuf, Error>
    where
        F: FnOnce(&Path) -> Result<(), Error>,
    {
        let path = self.path(name);
        write(&path).map_err(|e| with_path(e, &path))?;
        let (sha256, bytes) = sha256_file(&path)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256,
            bytes,
        });
        Ok(path)
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, Error> {
        let text = serde_json::to_string_pretty(value)?;
        self.add(name, |p| fs::write(p, text).map_err(|e| Error::io(p, e)))
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn finish(self) -> Result<Manifest, Error> {
        self.write_manifest(Status::Ok, None)
    }

    /// Writes a manifest covering whatever was flushed before `err`.
    pub fn fail(self, err: &Error) -> Result<Manifest, Error> {
        self.write_manifest(Status::Failed, Some(err.to_string()))
    }

    fn write_manifest(mut self, status: Status, error: Option<String>) -> Result<Manifest, Error> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: self.command,
            status,
            error,
            artifacts: self.artifacts,
        };
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Csv(e) if e.is_io_error() => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::write_influence_csv;
    use crate::oracle::write_scatter_csv;

    #[test]
    fn empty_results_give_headers_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Reporter::new(dir.path().join("out"), "influence").unwrap();
        r.add("influence.csv", |p| write_influence_csv(p, &[])).unwrap();
        r.add("scatter.csv", |p| write_scatter_csv(p, &[])).unwrap();
        let m = r.finish().unwrap();
        assert_eq!(m.status, Status::Ok);
        assert_eq!(m.artifacts.len(), 2);
        let text = fs::read_to_string(dir.path().join("out/influence.csv")).unwrap();
        assert_eq!(text, "u,v,kind,metric,param_shift,msg_prop,total\n");
        assert_eq!(Manifest::load(&dir.path().join("out")).unwrap(), m);
    }

    #[test]
    fn hashes_are_stable_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let run = || {
            let mut r = Reporter::new(dir.path(), "x").unwrap();
            r.add_json("a.json", &vec![1.5, 2.0]).unwrap();
            r.add_json("a.json", &vec![1.5, 2.0]).unwrap();
            r.finish().unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.artifacts.len(), 1);
        assert_eq!(
            a.artifacts[0].sha256,
            hex::encode(Sha256::digest(fs::read(dir.path().join("a.json")).unwrap()))
        );
    }

    #[test]
    fn failure_manifest_and_path_context() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Reporter::new(dir.path(), "verify").unwrap();
        r.add_json("partial.json", &1).unwrap();
        let err = r.add("missing/x.csv", |p| write_scatter_csv(p, &[])).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
        let m = r.fail(&err).unwrap();
        assert_eq!(m.status, Status::Failed);
        assert_eq!(m.artifacts.len(), 1);
        assert!(m.error.is_some());
    }
}
