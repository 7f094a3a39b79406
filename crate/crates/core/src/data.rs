//! Datasets: the on-disk layout, synthetic Gaussian tasks and a PGM importer.
//!
//! A dataset root looks like
//!
//! ```text
//! root/manifest.json
//! root/<split>/<class>/<sample_idx>.ten
//! ```
//!
//! where every `.ten` file is a tensor record file holding one sample, either
//! `[height, width, channels]` (images) or `[dim]` (vectors, with
//! `height = width = 1` and `channels = dim` in the manifest).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::rng_stream;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Validation, Split::Novel];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Validation => "validation",
            Split::Novel => "novel",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLists {
    #[serde(default)]
    pub base: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub novel: Vec<String>,
}

impl SplitLists {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Base => &self.base,
            Split::Validation => &self.validation,
            Split::Novel => &self.novel,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Base => &mut self.base,
            Split::Validation => &mut self.validation,
            Split::Novel => &mut self.novel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub splits: SplitLists,
    #[serde(default)]
    pub rotate4: bool,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: byte_offset(&text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Data("manifest geometry must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            for c in self.splits.get(split) {
                if !seen.insert(c.as_str()) {
                    return Err(Error::Data(format!(
                        "class `{c}` appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .lines()
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// One class and its samples, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    /// Position of the class in its dataset; unique and stable.
    pub id: usize,
    pub name: String,
    data: Vec<f64>,
    count: usize,
    /// Ground-truth standard deviation for synthetic classes.
    pub sigma: Option<f64>,
}

impl ClassRecord {
    pub fn new(
        id: usize,
        name: impl Into<String>,
        samples: Vec<Vec<f64>>,
        sigma: Option<f64>,
    ) -> Self {
        let count = samples.len();
        ClassRecord {
            id,
            name: name.into(),
            data: samples.concat(),
            count,
            sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.data.len() / self.count.max(1);
        &self.data[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub sample_shape: Vec<usize>,
    pub classes: Vec<ClassRecord>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks `(class index, sample index)` pairs into a `[B, ...sample]` batch.
    pub fn batch(&self, items: &[(usize, usize)]) -> Tensor {
        let mut data = Vec::with_capacity(items.len() * self.sample_len());
        for &(c, s) in items {
            data.extend_from_slice(self.classes[c].sample(s));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("samples share one shape")
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(ClassRecord::len).min().unwrap_or(0)
    }
}

/// Base, validation and novel splits of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub base: LabeledDataset,
    pub validation: LabeledDataset,
    pub novel: LabeledDataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Base => &self.base,
            Split::Validation => &self.validation,
            Split::Novel => &self.novel,
        }
    }
}

fn sample_index(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn list_samples(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ten") {
            files.push(path);
        }
    }
    files.sort_by(|a, b| sample_index(a).cmp(&sample_index(b)).then_with(|| a.cmp(b)));
    Ok(files)
}

fn read_sample(path: &Path, manifest: &DatasetManifest) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut records = read_checkpoint(path)?;
    if records.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("expected one tensor record, found {}", records.len()),
        });
    }
    let t = records.pop().expect("one record").1;
    let image = [manifest.height, manifest.width, manifest.channels];
    let vector_ok = manifest.height == 1 && manifest.width == 1 && t.shape() == [manifest.channels];
    if t.shape() != image && !vector_ok {
        return Err(Error::Data(format!(
            "{}: sample shape {:?} does not match manifest geometry {image:?}",
            path.display(),
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Data(format!(
            "{}: non-finite sample values",
            path.display()
        )));
    }
    Ok((t.shape().to_vec(), t.into_data()))
}

/// Rotates an `[n, n, c]` image by 90 degrees counter-clockwise.
fn rotate90(sample: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; sample.len()];
    for i in 0..n {
        for j in 0..n {
            // out[i][j] = in[j][n-1-i]
            let src = (j * n + (n - 1 - i)) * c;
            let dst = (i * n + j) * c;
            out[dst..dst + c].copy_from_slice(&sample[src..src + c]);
        }
    }
    out
}

/// Loads one split. With `rotate4` every class is followed by three sibling
/// classes rotated by 90, 180 and 270 degrees.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<LabeledDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    load_split_with(&manifest, root, split)
}

pub fn load_dataset(manifest_path: &Path) -> Result<DatasetSplits> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    Ok(DatasetSplits {
        base: load_split_with(&manifest, root, Split::Base)?,
        validation: load_split_with(&manifest, root, Split::Validation)?,
        novel: load_split_with(&manifest, root, Split::Novel)?,
    })
}

fn load_split_with(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<LabeledDataset> {
    let names = manifest.splits.get(split);
    let loaded: Vec<Result<(Vec<usize>, Vec<Vec<f64>>)>> = names
        .par_iter()
        .map(|name| {
            let dir = root.join(split.dir_name()).join(name);
            if !dir.is_dir() {
                return Err(Error::Data(format!(
                    "class directory {} does not exist",
                    dir.display()
                )));
            }
            let files = list_samples(&dir)?;
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "class directory {} is empty",
                    dir.display()
                )));
            }
            let mut shape = Vec::new();
            let mut samples = Vec::with_capacity(files.len());
            for f in &files {
                let (s, data) = read_sample(f, manifest)?;
                shape = s;
                samples.push(data);
            }
            Ok((shape, samples))
        })
        .collect();

    let mut sample_shape = vec![manifest.height, manifest.width, manifest.channels];
    let mut classes = Vec::new();
    for (name, res) in names.iter().zip(loaded) {
        let (shape, samples) = res?;
        sample_shape = shape;
        if manifest.rotate4 {
            if manifest.height != manifest.width {
                return Err(Error::Data(
                    "rotation augmentation needs square images".into(),
                ));
            }
            let (n, c) = (manifest.height, manifest.channels);
            let mut current = samples.clone();
            classes.push(ClassRecord::new(classes.len(), name.clone(), samples, None));
            for deg in [90, 180, 270] {
                current = current.iter().map(|s| rotate90(s, n, c)).collect();
                classes.push(ClassRecord::new(
                    classes.len(),
                    format!("{name}/rot{deg}"),
                    current.clone(),
                    None,
                ));
            }
        } else {
            classes.push(ClassRecord::new(classes.len(), name.clone(), samples, None));
        }
    }
    Ok(LabeledDataset {
        name: manifest.name.clone(),
        split,
        sample_shape,
        classes,
    })
}

/// Writes a dataset in the on-disk layout. Sample files are named by their
/// index within the class.
pub fn write_dataset(
    root: &Path,
    manifest: &DatasetManifest,
    splits: &[&LabeledDataset],
) -> Result<()> {
    manifest.validate()?;
    for ds in splits {
        for class in &ds.classes {
            let dir = root.join(ds.split.dir_name()).join(&class.name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..class.len() {
                let t = Tensor::new(ds.sample_shape.clone(), class.sample(i).to_vec())?;
                write_checkpoint(&dir.join(format!("{i:05}.ten")), [("x", &t)])?;
            }
        }
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// How per-class standard deviations are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Uniform in `[sigma_lo, sigma_hi]`, independent of the class mean.
    Random,
    /// Increases linearly with the first coordinate of the class mean, so the
    /// spread is a smooth function of where the class sits.
    #[default]
    Smooth,
}

/// Gaussian-cluster classification tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Class means are uniform in `[-box_half_width, box_half_width]^dim`.
    #[serde(default = "default_box")]
    pub box_half_width: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    /// Classes taken (after the base classes) for the validation split.
    #[serde(default)]
    pub n_validation: usize,
    /// Classes taken last for the novel split.
    #[serde(default)]
    pub n_novel: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_box() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SyntheticTaskSpec =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_lo > 0.0) || self.sigma_hi < self.sigma_lo {
            return Err(Error::config(format!(
                "synthetic spec needs 0 < sigma_lo <= sigma_hi, got [{}, {}]",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::config(
                "synthetic spec needs dim > 0 and samples_per_class > 0",
            ));
        }
        if self.n_validation + self.n_novel > self.n_classes {
            return Err(Error::config("more validation+novel classes than classes"));
        }
        if !(self.box_half_width > 0.0) {
            return Err(Error::config("box_half_width must be positive"));
        }
        Ok(())
    }

    pub fn n_base(&self) -> usize {
        self.n_classes - self.n_validation - self.n_novel
    }
}

/// Class `c` draws `mean_c + sigma_c * N(0, I)` from its own RNG stream.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let b = spec.box_half_width;
    let classes: Vec<(String, Vec<Vec<f64>>, f64)> = (0..spec.n_classes)
        .map(|c| {
            let mut rng = rng_stream(spec.seed, c as u64);
            let mean: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-b..b)).collect();
            let sigma = match spec.sigma_mode {
                SigmaMode::Random if spec.sigma_hi > spec.sigma_lo => {
                    rng.random_range(spec.sigma_lo..spec.sigma_hi)
                }
                SigmaMode::Random => spec.sigma_lo,
                SigmaMode::Smooth => {
                    spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * (mean[0] + b) / (2.0 * b)
                }
            };
            let samples = (0..spec.samples_per_class)
                .map(|_| {
                    mean.iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + sigma * z
                        })
                        .collect()
                })
                .collect();
            (format!("class_{c:04}"), samples, sigma)
        })
        .collect();

    let n_base = spec.n_base();
    let bounds = [
        (Split::Base, 0, n_base),
        (Split::Validation, n_base, n_base + spec.n_validation),
        (Split::Novel, n_base + spec.n_validation, spec.n_classes),
    ];
    let mut out = bounds.iter().map(|&(split, lo, hi)| LabeledDataset {
        name: "synthetic".into(),
        split,
        sample_shape: vec![spec.dim],
        classes: classes[lo..hi]
            .iter()
            .enumerate()
            .map(|(i, (name, s, sigma))| ClassRecord::new(i, name.clone(), s.clone(), Some(*sigma)))
            .collect(),
    });
    Ok(DatasetSplits {
        base: out.next().expect("base"),
        validation: out.next().expect("validation"),
        novel: out.next().expect("novel"),
    })
}

/// Manifest describing an in-memory split set.
pub fn manifest_for(name: &str, splits: &DatasetSplits, rotate4: bool) -> DatasetManifest {
    let (height, width, channels) = match splits.base.sample_shape[..] {
        [h, w, c] => (h, w, c),
        [d] => (1, 1, d),
        _ => (1, 1, splits.base.sample_len()),
    };
    let mut lists = SplitLists::default();
    for split in Split::ALL {
        *lists.get_mut(split) = splits
            .get(split)
            .classes
            .iter()
            .map(|c| c.name.clone())
            .collect();
    }
    DatasetManifest {
        name: name.to_string(),
        height,
        width,
        channels,
        splits: lists,
        rotate4,
    }
}

/// Generates a synthetic dataset and writes it under `out`, together with a
/// `synthetic.json` listing the ground-truth class deviations.
pub fn write_synthetic(spec: &SyntheticTaskSpec, out: &Path) -> Result<DatasetManifest> {
    let splits = gen_synthetic(spec)?;
    let manifest = manifest_for("synthetic", &splits, false);
    write_dataset(
        out,
        &manifest,
        &[&splits.base, &splits.validation, &splits.novel],
    )?;
    let sigmas: Vec<(String, f64)> = Split::ALL
        .iter()
        .flat_map(|s| splits.get(*s).classes.iter())
        .map(|c| (c.name.clone(), c.sigma.unwrap_or(f64::NAN)))
        .collect();
    let meta = serde_json::json!({ "spec": spec, "sigma": sigmas });
    let path = out.join("synthetic.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&meta).expect("json") + "\n",
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Decodes an 8-bit grayscale PGM (`P5` binary or `P2` ASCII, maxval 255)
/// into `(height, width, pixels / 255)`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let fail = |offset: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "unexpected end of header"));
        }
        Ok((
            start,
            String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
        ))
    };
    let (_, magic) = next_token(&mut pos)?;
    if magic != "P5" && magic != "P2" {
        return Err(fail(0, "not a P5/P2 PGM file"));
    }
    let mut header = [0usize; 3];
    for v in header.iter_mut() {
        let (at, tok) = next_token(&mut pos)?;
        *v = tok.parse().map_err(|_| fail(at, "bad header number"))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    let n = width * height;
    let pixels: Vec<f64> = if magic == "P5" {
        let start = pos + 1;
        if bytes.len() < start + n {
            return Err(fail(bytes.len(), "truncated pixel data"));
        }
        bytes[start..start + n]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect()
    } else {
        let mut px = Vec::with_capacity(n);
        for _ in 0..n {
            let (at, tok) = next_token(&mut pos)?;
            let v: u32 = tok.parse().map_err(|_| fail(at, "bad pixel value"))?;
            if v > 255 {
                return Err(fail(at, "pixel exceeds maxval"));
            }
            px.push(v as f64 / 255.0);
        }
        px
    };
    Ok((height, width, pixels))
}

/// Converts `src/<split>/<class>/*.pgm` into the dataset layout under `out`.
pub fn import_pgm_tree(
    src: &Path,
    out: &Path,
    name: &str,
    rotate4: bool,
) -> Result<DatasetManifest> {
    let mut lists = SplitLists::default();
    let mut geometry: Option<(usize, usize)> = None;
    for split in Split::ALL {
        let split_dir = src.join(split.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
            .map_err(|e| Error::io(&split_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for class_dir in class_dirs {
            let class = class_dir
                .file_name()
                .expect("dir name")
                .to_string_lossy()
                .into_owned();
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
                .map_err(|e| Error::io(&class_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "class directory {} has no PGM files",
                    class_dir.display()
                )));
            }
            let dst = out.join(split.dir_name()).join(&class);
            fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
            for (i, f) in files.iter().enumerate() {
                let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
                let (h, w, px) = parse_pgm(&bytes, f)?;
                match geometry {
                    None => geometry = Some((h, w)),
                    Some(g) if g != (h, w) => {
                        return Err(Error::Data(format!(
                            "{}: image is {h}x{w}, expected {}x{}",
                            f.display(),
                            g.0,
                            g.1
                        )))
                    }
                    _ => {}
                }
                let t = Tensor::new(vec![h, w, 1], px)?;
                write_checkpoint(&dst.join(format!("{i:05}.ten")), [("x", &t)])?;
            }
            lists.get_mut(split).push(class);
        }
    }
    let (height, width) =
        geometry.ok_or_else(|| Error::Data(format!("no PGM images under {}", src.display())))?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        height,
        width,
        channels: 1,
        splits: lists,
        rotate4,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
