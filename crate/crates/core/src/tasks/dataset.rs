use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub task: String,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub params: BTreeMap<String, String>,
}

/// Token sequences over `vocab`, one string per line on disk with a
/// `key=value` sidecar at `<path>.meta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vec<String>,
    pub strings: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn render(&self, w: &[usize]) -> String {
        w.iter().map(|&t| self.vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|tok| {
                self.vocab
                    .iter()
                    .position(|v| v == tok)
                    .ok_or_else(|| Error::data(format!("unknown token `{tok}`")))
            })
            .collect()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Lines are the token text of each string; the sidecar carries the
    /// vocabulary and provenance.
    pub fn to_text(&self) -> (String, String) {
        let mut body = String::new();
        for w in &self.strings {
            body.push_str(&self.render(w));
            body.push('\n');
        }
        let p = &self.provenance;
        let mut meta = String::new();
        meta.push_str(&format!("task={}\n", p.task));
        meta.push_str(&format!("seed={}\n", p.seed));
        meta.push_str(&format!("min_len={}\n", p.min_len));
        meta.push_str(&format!("max_len={}\n", p.max_len));
        meta.push_str(&format!("size={}\n", p.size));
        meta.push_str(&format!("vocab={}\n", self.vocab.join(" ")));
        for (k, v) in &p.params {
            meta.push_str(&format!("param.{k}={v}\n"));
        }
        (body, meta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (body, meta) = self.to_text();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let meta = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_text(&body, &meta).map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_text(body: &str, meta: &str) -> Result<Dataset> {
        let mut kv = BTreeMap::new();
        for (n, line) in meta.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("metadata line {} is not key=value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::data(format!("metadata is missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(format!("metadata `{k}` is not a number")))
        };
        let vocab: Vec<String> = get("vocab")?.split_whitespace().map(String::from).collect();
        if vocab.is_empty() {
            return Err(Error::data("empty vocabulary"));
        }
        let params = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("param.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let provenance = Provenance {
            task: get("task")?.clone(),
            seed: num("seed")?,
            min_len: num("min_len")? as usize,
            max_len: num("max_len")? as usize,
            size: num("size")? as usize,
            params,
        };
        let mut ds = Dataset {
            vocab,
            strings: Vec::new(),
            provenance,
        };
        for (n, line) in body.lines().enumerate() {
            let w = ds
                .parse(line)
                .map_err(|e| Error::data(format!("line {}: {}", n + 1, strip_class(e))))?;
            ds.strings.push(w);
        }
        if ds.strings.len() != ds.provenance.size {
            return Err(Error::data(format!(
                "expected {} strings, found {}",
                ds.provenance.size,
                ds.strings.len()
            )));
        }
        Ok(ds)
    }
}

fn strip_class(e: Error) -> String {
    match e {
        Error::Data(m) | Error::Usage(m) | Error::Numerical(m) => m,
        other => other.to_string(),
    }
}
