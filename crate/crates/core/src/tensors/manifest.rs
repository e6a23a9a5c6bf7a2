//! Line-oriented image manifests.
//!
//! ```text
//! classes: name0,name1,...
//! image_id<TAB>label_or_-1<TAB>stream:layer=path[,stream:layer=path...][<TAB>train|test]
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths resolve
//! against the manifest's directory. The optional split column defaults to
//! `train` for labeled images and `test` for unlabeled ones. Files are not
//! touched at load time; a missing path surfaces when it is read.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Object,
    Scene,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Object, Stream::Scene];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Object => "object",
            Stream::Scene => "scene",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stream {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Stream::Object),
            "scene" => Ok(Stream::Scene),
            other => Err(Error::Validation(format!(
                "unknown stream `{other}` (expected object or scene)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One view file: the activation of `layer` in `stream` for one augmented view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewFile {
    pub stream: Stream,
    pub layer: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub label: Option<usize>,
    pub views: Vec<ViewFile>,
    pub split: Split,
}

impl ManifestEntry {
    /// View paths for one (stream, layer), in manifest order.
    pub fn files(&self, stream: Stream, layer: &str) -> Vec<&Path> {
        self.views
            .iter()
            .filter(|v| v.stream == stream && v.layer == layer)
            .map(|v| v.path.as_path())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    class_names: Vec<String>,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Validation("manifest declares no classes".into()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() || name.contains(',') || name.contains('\n') {
                return Err(Error::Validation(format!("bad class name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate class name `{name}`")));
            }
        }
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate image_id `{}`",
                    e.image_id
                )));
            }
            if let Some(l) = e.label {
                if l >= class_names.len() {
                    return Err(Error::Validation(format!(
                        "image `{}` has label {l} but only {} classes exist",
                        e.image_id,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Manifest {
            class_names,
            entries,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// A copy with every entry of `split` removed.
    pub fn without(&self, split: Split) -> Manifest {
        Manifest {
            class_names: self.class_names.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| e.split != split)
                .cloned()
                .collect(),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Validation("empty manifest".into()))?;
        let classes = first
            .strip_prefix("classes:")
            .ok_or_else(|| Error::Validation("first line must start with `classes:`".into()))?;
        let class_names: Vec<String> = classes
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            entries.push(parse_entry(line, base_dir).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {lineno}: {m}")),
                other => other,
            })?);
        }
        Manifest::new(class_names, entries)
    }

    /// Serializes with paths written relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let mut out = format!("classes: {}\n", self.class_names.join(","));
        for e in &self.entries {
            let label = e.label.map_or("-1".to_string(), |l| l.to_string());
            let views: Vec<String> = e
                .views
                .iter()
                .map(|v| {
                    let p = v.path.strip_prefix(base_dir).unwrap_or(&v.path);
                    format!("{}:{}={}", v.stream, v.layer, p.display())
                })
                .collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image_id,
                label,
                views.join(","),
                e.split.as_str()
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        write_atomic(path, self.to_text(base).as_bytes())
    }
}

fn parse_entry(line: &str, base_dir: &Path) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 && fields.len() != 4 {
        return Err(Error::Validation(format!(
            "expected 3 or 4 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let image_id = fields[0].trim().to_string();
    if image_id.is_empty() {
        return Err(Error::Validation("empty image_id".into()));
    }
    let label = match fields[1].trim() {
        "-1" => None,
        raw => Some(
            raw.parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad label `{raw}`")))?,
        ),
    };
    let mut views = Vec::new();
    for item in fields[2].split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, path) = item
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("view `{item}` lacks `=`")))?;
        let (stream, layer) = key
            .split_once(':')
            .ok_or_else(|| Error::Validation(format!("view key `{key}` lacks `stream:`")))?;
        if layer.is_empty() || path.is_empty() {
            return Err(Error::Validation(format!("incomplete view `{item}`")));
        }
        let path = PathBuf::from(path);
        views.push(ViewFile {
            stream: stream.parse()?,
            layer: layer.to_string(),
            path: if path.is_absolute() {
                path
            } else {
                base_dir.join(path)
            },
        });
    }
    let split = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => {
            if label.is_some() {
                Split::Train
            } else {
                Split::Test
            }
        }
        Some("train") => Split::Train,
        Some("test") => Split::Test,
        Some(other) => {
            return Err(Error::Validation(format!(
                "unknown split `{other}` (expected train or test)"
            )))
        }
    };
    if split == Split::Train && label.is_none() {
        return Err(Error::Validation(format!(
            "training image `{image_id}` has no label"
        )));
    }
    Ok(ManifestEntry {
        image_id,
        label,
        views,
        split,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Manifest::parse(&text, base)
}
