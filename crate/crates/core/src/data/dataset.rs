//! On-disk paired dataset: `root/<class>/prototype.png`,
//! `root/<class>/real_*.png` and `root/splits.txt`.
//!
//! Real images named `real_test_*.png` in a training class are held out of
//! training and serve as queries for the protocols that include seen classes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub const SPLITS_FILE: &str = "splits.txt";
pub const PROTOTYPE_FILE: &str = "prototype.png";
pub const HELD_OUT_PREFIX: &str = "real_test_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Synthetic,
    Loaded,
}

/// A real image and the prototype of its class.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub real: ImageTensor,
    pub prototype: ImageTensor,
    pub label: usize,
    pub source: SampleSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub path: PathBuf,
    /// Excluded from training even when the class trains.
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    /// Index in name order; the label used everywhere else.
    pub label: usize,
    pub seen: bool,
    pub split: Split,
    pub prototype: PathBuf,
    pub reals: Vec<RealImage>,
}

impl ClassEntry {
    pub fn is_training(&self) -> bool {
        self.seen && self.split == Split::Train
    }

    /// Reals the optimizer may see.
    pub fn training_reals(&self) -> impl Iterator<Item = &RealImage> {
        let training = self.is_training();
        self.reals.iter().filter(move |r| training && !r.held_out)
    }

    /// Reals never seen during training.
    pub fn query_reals(&self) -> impl Iterator<Item = &RealImage> {
        let training = self.is_training();
        self.reals.iter().filter(move |r| !training || r.held_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
}

impl DatasetManifest {
    pub fn num_reals(&self) -> usize {
        self.classes.iter().map(|c| c.reals.len()).sum()
    }

    pub fn seen(&self) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(|c| c.seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(|c| !c.seen)
    }

    pub fn class(&self, label: usize) -> Option<&ClassEntry> {
        self.classes.get(label)
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn splits_text(&self) -> String {
        self.classes
            .iter()
            .map(|c| {
                format!(
                    "{} {} {}\n",
                    c.name,
                    if c.seen { "seen" } else { "unseen" },
                    c.split.as_str()
                )
            })
            .collect()
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seen = self.seen().count();
        write!(
            f,
            "{} classes ({seen} seen, {} unseen), {} real images",
            self.classes.len(),
            self.classes.len() - seen,
            self.num_reals()
        )
    }
}

fn parse_splits(path: &Path) -> Result<BTreeMap<String, (bool, Split)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, kind, split] = fields[..] else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected `<class> <seen|unseen> <train|val|test>`",
                path.display(),
                i + 1
            )));
        };
        let seen = match kind {
            "seen" => true,
            "unseen" => false,
            other => {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected seen or unseen, got `{other}`",
                    path.display(),
                    i + 1
                )))
            }
        };
        if out.insert(name.to_string(), (seen, split.parse()?)).is_some() {
            return Err(Error::DuplicateClass(name.to_string()));
        }
    }
    Ok(out)
}

/// Reads the directory structure and split file without decoding images.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let splits = parse_splits(&root.join(SPLITS_FILE))?;
    let mut dirs: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();
    let mut folded: HashMap<String, &str> = HashMap::new();
    for d in &dirs {
        if let Some(prev) = folded.insert(d.to_lowercase(), d) {
            return Err(Error::DuplicateClass(format!("{prev} / {d}")));
        }
    }
    for name in splits.keys() {
        if !dirs.contains(name) {
            return Err(Error::Dataset(format!("class `{name}` listed in {SPLITS_FILE} has no directory")));
        }
    }
    let mut classes = Vec::with_capacity(dirs.len());
    for (label, name) in dirs.iter().enumerate() {
        let &(seen, split) = splits
            .get(name)
            .ok_or_else(|| Error::Dataset(format!("class directory `{name}` is missing from {SPLITS_FILE}")))?;
        let dir = root.join(name);
        let prototype = dir.join(PROTOTYPE_FILE);
        if !prototype.is_file() {
            return Err(Error::MissingPrototype(name.clone()));
        }
        let mut reals = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let file = entry.file_name().to_string_lossy().into_owned();
            if file.starts_with("real_") && file.to_ascii_lowercase().ends_with(".png") {
                reals.push(RealImage {
                    held_out: file.starts_with(HELD_OUT_PREFIX),
                    path: entry.path(),
                });
            }
        }
        reals.sort_by(|a, b| a.path.cmp(&b.path));
        classes.push(ClassEntry {
            name: name.clone(),
            label,
            seen,
            split,
            prototype,
            reals,
        });
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} contains no classes", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
    })
}

/// A manifest plus decoding rules; images are read on demand and letterboxed
/// to `input_size`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub input_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn open(root: &Path, input_size: usize, channels: usize) -> Result<Self> {
        Ok(Dataset {
            manifest: load_manifest(root)?,
            input_size,
            channels,
        })
    }

    pub fn load_image(&self, path: &Path) -> Result<ImageTensor> {
        ImageTensor::load_png(path, self.channels)?.letterbox(self.input_size)
    }

    pub fn prototype(&self, label: usize) -> Result<ImageTensor> {
        let class = self
            .manifest
            .class(label)
            .ok_or_else(|| Error::Dataset(format!("no class with label {label}")))?;
        self.load_image(&class.prototype)
    }

    pub fn prototypes(&self) -> Result<Vec<ImageTensor>> {
        (0..self.manifest.classes.len()).map(|l| self.prototype(l)).collect()
    }

    /// Every training real paired with its prototype.
    pub fn training_pairs(&self) -> Result<Vec<PairedSample>> {
        let mut out = Vec::new();
        for class in self.manifest.classes.iter().filter(|c| c.is_training()) {
            let prototype = self.load_image(&class.prototype)?;
            for real in class.training_reals() {
                out.push(PairedSample {
                    real: self.load_image(&real.path)?,
                    prototype: prototype.clone(),
                    label: class.label,
                    source: SampleSource::Loaded,
                });
            }
        }
        Ok(out)
    }
}
