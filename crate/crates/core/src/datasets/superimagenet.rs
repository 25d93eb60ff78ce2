//! Regrouping ImageNet classes into superclasses with a fixed per-class cap.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, Sample, Source, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuperVersion {
    S,
    M,
    L,
    /// Any number of superclasses with an explicit cap.
    #[serde(rename = "custom")]
    Custom,
}

impl SuperVersion {
    /// `(superclass count, samples per superclass)` of the fixed versions.
    pub fn table(self) -> Option<(usize, usize)> {
        match self {
            SuperVersion::S => Some((100, 2500)),
            SuperVersion::M => Some((75, 5000)),
            SuperVersion::L => Some((50, 7500)),
            SuperVersion::Custom => None,
        }
    }
}

impl std::str::FromStr for SuperVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(SuperVersion::S),
            "M" | "m" => Ok(SuperVersion::M),
            "L" | "l" => Ok(SuperVersion::L),
            "custom" => Ok(SuperVersion::Custom),
            other => Err(Error::Config(format!("unknown SuperImageNet version `{other}` (expected S, M, L or custom)"))),
        }
    }
}

impl std::fmt::Display for SuperVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SuperVersion::S => "S",
            SuperVersion::M => "M",
            SuperVersion::L => "L",
            SuperVersion::Custom => "custom",
        })
    }
}

/// Superclass name to original class names, read from a TOML file:
///
/// ```toml
/// version = "L"
///
/// [superclasses]
/// canine = ["n02085620", "n02085782"]
/// ```
///
/// `cap` is required for `version = "custom"` and must match the table
/// otherwise. Superclasses are labeled in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperClassMapping {
    pub version: SuperVersion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    pub superclasses: BTreeMap<String, Vec<String>>,
}

impl SuperClassMapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mapping: Self = toml::from_str(text).map_err(|e| Error::Config(format!("mapping file: {e}")))?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn per_class_cap(&self) -> usize {
        self.cap
            .or_else(|| self.version.table().map(|(_, cap)| cap))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.version.table(), self.cap) {
            (None, None) => return Err(Error::Config("a custom version needs an explicit cap".into())),
            (Some((_, cap)), Some(given)) if given != cap => {
                return Err(Error::Config(format!("version {} has cap {cap}, mapping says {given}", self.version)));
            }
            _ => {}
        }
        if self.per_class_cap() == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        if let Some((classes, _)) = self.version.table() {
            if self.superclasses.len() != classes {
                return Err(Error::Config(format!(
                    "version {} needs {classes} superclasses, mapping has {}",
                    self.version,
                    self.superclasses.len()
                )));
            }
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, members) in &self.superclasses {
            if members.is_empty() {
                return Err(Error::Config(format!("superclass `{name}` has no classes")));
            }
            for m in members {
                if let Some(prev) = owner.insert(m, name) {
                    return Err(Error::Config(format!("class `{m}` is in both `{prev}` and `{name}`")));
                }
            }
        }
        Ok(())
    }
}

/// Relabels `index` by superclass. Training splits keep exactly `cap`
/// samples per superclass, drawn with `seed`; test splits keep every sample
/// of the member classes.
pub fn build_superimagenet(index: &DatasetIndex, mapping: &SuperClassMapping, seed: u64) -> Result<DatasetIndex> {
    mapping.validate()?;
    let cap = mapping.per_class_cap();
    let mut samples = Vec::new();
    let mut shortfalls = Vec::new();
    for (label, (name, members)) in mapping.superclasses.iter().enumerate() {
        let ids: Vec<usize> = members
            .iter()
            .map(|m| {
                index
                    .classes
                    .iter()
                    .zip(&index.class_names)
                    .find(|(_, n)| *n == m)
                    .map(|(&c, _)| c)
                    .ok_or_else(|| Error::Config(format!("superclass `{name}`: class `{m}` not in {}", index.name)))
            })
            .collect::<Result<_>>()?;
        let mut pool: Vec<&Sample> = index.samples.iter().filter(|s| ids.contains(&s.label)).collect();
        if index.split == Split::Train {
            if pool.len() < cap {
                shortfalls.push(format!("{name}: {} of {cap} (short by {})", pool.len(), cap - pool.len()));
                continue;
            }
            pool.shuffle(&mut seed::rng(seed, &[label as u64]));
            pool.truncate(cap);
            pool.sort_by_key(|s| s.id);
        }
        samples.extend(pool.into_iter().map(|s| Sample {
            id: s.id,
            source: s.source.clone(),
            label,
        }));
    }
    if !shortfalls.is_empty() {
        return Err(Error::Invalid(format!(
            "superclasses with fewer samples than the cap: {}",
            shortfalls.join("; ")
        )));
    }
    let out = DatasetIndex {
        name: "superimagenet".into(),
        split: index.split,
        image_shape: index.image_shape,
        classes: (0..mapping.superclasses.len()).collect(),
        class_names: mapping.superclasses.keys().cloned().collect(),
        samples,
    };
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestHeader {
    pub version: SuperVersion,
    pub cap: usize,
    pub seed: u64,
}

/// Writes `# key: value` header lines, then one `id<TAB>path<TAB>label`
/// record per sample. Paths are relative to the manifest's directory when
/// possible.
pub fn write_manifest(path: &Path, index: &DatasetIndex, header: &ManifestHeader) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let [c, h, w] = index.image_shape;
    let mut out = String::new();
    let _ = writeln!(out, "# superimagenet manifest");
    let _ = writeln!(out, "# version: {}", header.version);
    let _ = writeln!(out, "# cap: {}", header.cap);
    let _ = writeln!(out, "# seed: {}", header.seed);
    let _ = writeln!(out, "# split: {}", index.split);
    let _ = writeln!(out, "# image_shape: {c}x{h}x{w}");
    let _ = writeln!(out, "# classes: {}", index.class_names.join(","));
    for s in &index.samples {
        let Source::Image(p) = &s.source else {
            return Err(Error::Invalid(format!("sample {} is not backed by an image file", s.id)));
        };
        let rel = p.strip_prefix(base).unwrap_or(p);
        let _ = writeln!(out, "{}\t{}\t{}", s.id, rel.display(), s.label);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, DatasetIndex)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let bad = |line: usize, what: &str| Error::Invalid(format!("{}:{line}: {what}", path.display()));
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                fields.insert(k.trim().to_owned(), v.trim().to_owned());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, rel, label] = cols[..] else {
            return Err(bad(n + 1, "expected three tab-separated columns"));
        };
        let rel = PathBuf::from(rel);
        samples.push(Sample {
            id: id.parse().map_err(|_| bad(n + 1, "bad sample id"))?,
            source: Source::Image(if rel.is_absolute() { rel } else { base.join(rel) }),
            label: label.parse().map_err(|_| bad(n + 1, "bad label"))?,
        });
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(0, &format!("missing header `{k}`")));
    let header = ManifestHeader {
        version: get("version")?.parse()?,
        cap: get("cap")?.parse().map_err(|_| bad(0, "bad cap"))?,
        seed: get("seed")?.parse().map_err(|_| bad(0, "bad seed"))?,
    };
    let class_names: Vec<String> = get("classes")?.split(',').map(str::to_owned).collect();
    let dims: Vec<usize> = get("image_shape")?
        .split('x')
        .map(|d| d.parse().map_err(|_| bad(0, "bad image_shape")))
        .collect::<Result<_>>()?;
    let [c, h, w] = dims[..] else {
        return Err(bad(0, "image_shape needs three dimensions"));
    };
    let index = DatasetIndex {
        name: "superimagenet".into(),
        split: get("split")?.parse()?,
        image_shape: [c, h, w],
        classes: (0..class_names.len()).collect(),
        class_names,
        samples,
    };
    index.validate()?;
    Ok((header, index))
}
