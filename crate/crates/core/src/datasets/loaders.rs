use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use mfcl_grad::Tensor;

use super::{read_manifest, DatasetIndex, Procedural, Sample, Source, Split, SYNTH10};
use crate::error::{Error, Result};

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Per-sample image shape of a named dataset.
pub fn dataset_image_shape(name: &str) -> Result<[usize; 3]> {
    match name {
        "cifar10" | "cifar100" => Ok([3, 32, 32]),
        "tinyimagenet" => Ok([3, 64, 64]),
        "imagenet" | "superimagenet" => Ok([3, 224, 224]),
        n if n == SYNTH10.name => Ok(SYNTH10.image_shape()),
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

/// Builds the sample index of `name` under `root` without decoding pixels.
///
/// Supported layouts:
/// - `cifar10`: `data_batch_{1..5}.bin` / `test_batch.bin`, directly under
///   `root` or in `root/cifar-10-batches-bin`.
/// - `cifar100`: `train.bin` / `test.bin`, directly under `root` or in
///   `root/cifar-100-binary`.
/// - `tinyimagenet`: the standard `train/<wnid>/images` and
///   `val/val_annotations.txt` tree.
/// - `imagenet`: `train/<class>/*` and `val/<class>/*` folders.
/// - `superimagenet`: a manifest written by `build_superimagenet`, at
///   `root/superimagenet-<split>.tsv`.
/// - `synth10`: procedural, `root` is ignored.
pub fn load_dataset(name: &str, root: &Path, split: Split) -> Result<DatasetIndex> {
    let index = match name {
        "cifar10" => cifar(root, split, false)?,
        "cifar100" => cifar(root, split, true)?,
        "tinyimagenet" => tiny_imagenet(root, split)?,
        "imagenet" => image_folders(name, &root.join(split_dir(split)), split)?,
        "superimagenet" => read_manifest(&root.join(format!("superimagenet-{split}.tsv")))?.1,
        n if n == SYNTH10.name => SYNTH10.index(split),
        other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
    };
    index.validate()?;
    Ok(index)
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "val",
    }
}

fn existing(candidates: &[PathBuf]) -> Result<PathBuf> {
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| Error::io(&candidates[0], std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
}

fn read_names(path: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(path).ok()?;
    Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn cifar(root: &Path, split: Split, hundred: bool) -> Result<DatasetIndex> {
    let (sub, files, label_bytes, name, names_file) = if hundred {
        let files = match split {
            Split::Train => vec!["train.bin"],
            Split::Test => vec!["test.bin"],
        };
        ("cifar-100-binary", files, 2usize, "cifar100", "fine_label_names.txt")
    } else {
        let files = match split {
            Split::Train => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => vec!["test_batch.bin"],
        };
        ("cifar-10-batches-bin", files, 1usize, "cifar10", "batches.meta.txt")
    };
    let num_classes = if hundred { 100 } else { 10 };
    let record = label_bytes + CIFAR_PIXELS;
    let mut samples = Vec::new();
    let mut base_dir = root.to_path_buf();
    for file in files {
        let path = existing(&[root.join(sub).join(file), root.join(file)])?;
        base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % record != 0 {
            return Err(Error::Invalid(format!(
                "{}: size {} is not a multiple of the {record}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for (k, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                return Err(Error::Invalid(format!("{}: record {k} has label {label}", path.display())));
            }
            samples.push(Sample {
                id: samples.len() as u64,
                source: Source::Record {
                    file: path.clone(),
                    offset: (k * record + label_bytes) as u64,
                },
                label,
            });
        }
    }
    let class_names = read_names(&base_dir.join(names_file))
        .filter(|n| n.len() == num_classes)
        .unwrap_or_else(|| (0..num_classes).map(|c| c.to_string()).collect());
    Ok(DatasetIndex {
        name: name.into(),
        split,
        image_shape: [3, 32, 32],
        classes: (0..num_classes).collect(),
        class_names,
        samples,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpeg" | "jpg" | "png")
    )
}

/// `dir/<class>/<image>` with classes in sorted order.
fn image_folders(name: &str, dir: &Path, split: Split) -> Result<DatasetIndex> {
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        class_names.push(class_dir.file_name().unwrap().to_string_lossy().into_owned());
        let images_dir = if class_dir.join("images").is_dir() {
            class_dir.join("images")
        } else {
            class_dir.clone()
        };
        for img in sorted_entries(&images_dir)?.into_iter().filter(|p| is_image(p)) {
            samples.push(Sample {
                id: samples.len() as u64,
                source: Source::Image(img),
                label,
            });
        }
    }
    Ok(DatasetIndex {
        name: name.into(),
        split,
        image_shape: dataset_image_shape(name).unwrap_or([3, 224, 224]),
        classes: (0..class_names.len()).collect(),
        class_names,
        samples,
    })
}

fn tiny_imagenet(root: &Path, split: Split) -> Result<DatasetIndex> {
    let train = image_folders("tinyimagenet", &root.join("train"), Split::Train)?;
    if split == Split::Train {
        return Ok(train);
    }
    let ann_path = root.join("val").join("val_annotations.txt");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut cols = line.split('\t');
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
            return Err(Error::Invalid(format!("{}:{}: expected <file>\\t<wnid>", ann_path.display(), n + 1)));
        };
        let label = train
            .class_names
            .iter()
            .position(|c| c == wnid)
            .ok_or_else(|| Error::Invalid(format!("{}:{}: unknown class {wnid}", ann_path.display(), n + 1)))?;
        samples.push(Sample {
            id: samples.len() as u64,
            source: Source::Image(root.join("val").join("images").join(file)),
            label,
        });
    }
    Ok(DatasetIndex {
        split,
        samples,
        ..train
    })
}

/// Decodes sample pixels into tensors, scaled to [-1, 1].
///
/// Binary record files are read once and kept in memory; image files are
/// decoded on each request; procedural samples are rendered on demand.
pub struct ImageBank {
    shape: [usize; 3],
    records: HashMap<PathBuf, Vec<u8>>,
    procedural: Procedural,
}

impl ImageBank {
    pub fn open(index: &DatasetIndex) -> Result<Self> {
        let mut records = HashMap::new();
        for s in &index.samples {
            if let Source::Record { file, .. } = &s.source {
                if !records.contains_key(file) {
                    let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
                    records.insert(file.clone(), bytes);
                }
            }
        }
        Ok(Self {
            shape: index.image_shape,
            records,
            procedural: SYNTH10,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn decode(&self, sample: &Sample, out: &mut [f64]) -> Result<()> {
        match &sample.source {
            Source::Record { file, offset } => {
                let bytes = self.records.get(file).ok_or_else(|| Error::Missing(format!("record file {}", file.display())))?;
                let start = *offset as usize;
                let raw = bytes
                    .get(start..start + out.len())
                    .ok_or_else(|| Error::Invalid(format!("{}: offset {offset} past end", file.display())))?;
                for (o, &b) in out.iter_mut().zip(raw) {
                    *o = b as f64 / 127.5 - 1.0;
                }
            }
            Source::Image(path) => self.decode_image(path, out)?,
            Source::Procedural { class, seed } => self.procedural.render(*class, *seed, out),
        }
        Ok(())
    }

    fn decode_image(&self, path: &Path, out: &mut [f64]) -> Result<()> {
        let [c, h, w] = self.shape;
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let img = if img.width() as usize != w || img.height() as usize != h {
            img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        if c == 1 {
            for (o, p) in out.iter_mut().zip(img.to_luma8().pixels()) {
                *o = p.0[0] as f64 / 127.5 - 1.0;
            }
        } else {
            let rgb = img.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    out[ch * h * w + i] = p.0[ch] as f64 / 127.5 - 1.0;
                }
            }
        }
        Ok(())
    }

    /// Stacks the given samples into a `[n, C, H, W]` tensor.
    pub fn batch<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
        let n = self.numel();
        let mut data = Vec::new();
        let mut count = 0;
        for s in samples {
            data.resize(data.len() + n, 0.0);
            let len = data.len();
            self.decode(s, &mut data[len - n..])?;
            count += 1;
        }
        let [c, h, w] = self.shape;
        Ok(Tensor::new(&[count, c, h, w], data))
    }
}

/// Decoded images and global labels held by one client.
#[derive(Clone, Debug)]
pub struct LocalData {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LocalData {
    /// Decodes `ids` from a relabeled index.
    pub fn gather(bank: &ImageBank, index: &DatasetIndex, ids: &[u64]) -> Result<Self> {
        let by_id: HashMap<u64, &Sample> = index.samples.iter().map(|s| (s.id, s)).collect();
        let samples: Vec<&Sample> = ids
            .iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| Error::Missing(format!("sample {id} in {}", index.name))))
            .collect::<Result<_>>()?;
        let images = bank.batch(samples.iter().copied())?;
        let labels = samples.iter().map(|s| s.label).collect();
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(parts: &[&LocalData]) -> Self {
        let images: Vec<&Tensor> = parts.iter().filter(|p| !p.is_empty()).map(|p| &p.images).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let images = if images.is_empty() {
            parts.first().map(|p| p.images.clone()).unwrap_or_else(|| Tensor::zeros(&[0]))
        } else {
            Tensor::concat_rows(&images)
        };
        Self { images, labels }
    }

    /// Rows `rows` as a batch.
    pub fn select(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather_rows(rows), rows.iter().map(|&r| self.labels[r]).collect())
    }
}
