//! Two-class image datasets: IDX and image-directory loaders, stratified
//! splitting, per-channel normalization and a synthetic generator.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-channel affine normalization `x' = (x − offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub kind: NormKind,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Standardize,
    MinMax,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardize" => Ok(NormKind::Standardize),
            "minmax" => Ok(NormKind::MinMax),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Standardize => "standardize",
            NormKind::MinMax => "minmax",
        })
    }
}

impl NormStats {
    /// Statistics over every pixel of every image in `ds`.
    pub fn fit(ds: &LabeledDataset, kind: NormKind) -> Result<Self> {
        let c = ds.image_shape()[2];
        let mut offset = vec![0.0; c];
        let mut scale = vec![0.0; c];
        match kind {
            NormKind::Standardize => {
                let mut count = 0usize;
                for img in &ds.images {
                    for px in img.data().chunks(c) {
                        for (m, v) in offset.iter_mut().zip(px) {
                            *m += v;
                        }
                    }
                    count += img.len() / c;
                }
                offset.iter_mut().for_each(|m| *m /= count as f64);
                for img in &ds.images {
                    for px in img.data().chunks(c) {
                        for ch in 0..c {
                            scale[ch] += (px[ch] - offset[ch]).powi(2);
                        }
                    }
                }
                scale.iter_mut().for_each(|s| *s = (*s / count as f64).sqrt());
            }
            NormKind::MinMax => {
                let mut lo = vec![f64::INFINITY; c];
                let mut hi = vec![f64::NEG_INFINITY; c];
                for img in &ds.images {
                    for px in img.data().chunks(c) {
                        for ch in 0..c {
                            lo[ch] = lo[ch].min(px[ch]);
                            hi[ch] = hi[ch].max(px[ch]);
                        }
                    }
                }
                for ch in 0..c {
                    offset[ch] = lo[ch];
                    scale[ch] = hi[ch] - lo[ch];
                }
            }
        }
        if let Some(ch) = scale.iter().position(|&s| !s.is_finite() || s <= 1e-12) {
            return Err(Error::Data(format!(
                "channel {ch} is constant over the training split"
            )));
        }
        Ok(Self {
            kind,
            offset,
            scale,
        })
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        self.map_channels(img, |v, o, s| (v - o) / s)
    }

    pub fn invert(&self, img: &Tensor) -> Tensor {
        self.map_channels(img, |v, o, s| v * s + o)
    }

    fn map_channels(&self, img: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.offset.len();
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = f(*v, self.offset[ch], self.scale[ch]);
        }
        out
    }
}

/// Images `[H, W, C]` with binary labels. Pixels are in [0, 1] until
/// [`LabeledDataset::normalized`] is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub class_names: [String; 2],
    pub norm_stats: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        ids: Vec<String>,
        class_names: [String; 2],
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::Data(format!(
                "{} images, {} labels, {} ids",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {l} outside {{0, 1}}")));
        }
        let shape = images[0].shape();
        if shape.len() != 3 {
            return Err(Error::Data(format!("images must be [H, W, C], got {shape:?}")));
        }
        if let Some(img) = images.iter().find(|i| i.shape() != shape) {
            return Err(Error::Data(format!(
                "mixed image shapes {shape:?} and {:?}",
                img.shape()
            )));
        }
        Ok(Self {
            images,
            labels,
            ids,
            class_names,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images[0].shape();
        [s[0], s[1], s[2]]
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks the selected images into `[n, H, W, C]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&refs)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            class_names: self.class_names.clone(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    /// Applies `stats` to every image and records them.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        if self.norm_stats.is_some() {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        if stats.offset.len() != self.image_shape()[2] {
            return Err(Error::Data(format!(
                "{} normalization channels for {}-channel images",
                stats.offset.len(),
                self.image_shape()[2]
            )));
        }
        Ok(Self {
            images: self.images.iter().map(|i| stats.apply(i)).collect(),
            norm_stats: Some(stats.clone()),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: Option<LabeledDataset>,
}

impl SplitDataset {
    /// Fits statistics on the training split and applies them to all splits.
    pub fn normalize(&self, kind: NormKind) -> Result<Self> {
        let stats = NormStats::fit(&self.train, kind)?;
        Ok(Self {
            train: self.train.normalized(&stats)?,
            val: self.val.normalized(&stats)?,
            test: self.test.as_ref().map(|t| t.normalized(&stats)).transpose()?,
        })
    }
}

/// Stratified split: per class, shuffle by `seed`, hold out
/// `round(n · test_fraction)` for testing, then split the rest 80:20 into
/// train and validation. Splits keep the original relative order.
pub fn split(ds: &LabeledDataset, test_fraction: f64, run_seed: u64) -> Result<SplitDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = seed::rng(run_seed, seed::stream::SPLIT);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..2 {
        let mut idx = ds.class_indices(class);
        if idx.len() < 5 {
            return Err(Error::Data(format!(
                "class {:?} has {} images, at least 5 are needed to split",
                ds.class_names[class],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let rest = idx.len() - n_test;
        let n_train = (rest as f64 * 0.8).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..n_test + n_train]);
        val.extend_from_slice(&idx[n_test + n_train..]);
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    Ok(SplitDataset {
        train: ds.subset(&train),
        val: ds.subset(&val),
        test: (!test.is_empty()).then(|| ds.subset(&test)),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, bytes.len(), format!("truncated header, missing {what}")))
}

/// Returns `(count, rows, cols, pixel bytes)`.
fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "row count")? as usize;
    let cols = be_u32(bytes, 12, path, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, 8, "zero image extent"));
    }
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated pixel data: {need} bytes declared, {} present", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated labels: {n} declared, {} present", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Loads the first `per_class_cap` images of each of two digit classes.
/// Labels are remapped to 0/1 by ascending digit.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    keep: [u8; 2],
    per_class_cap: usize,
) -> Result<LabeledDataset> {
    if keep[0] == keep[1] {
        return Err(Error::Config(format!("classes must differ, got {keep:?}")));
    }
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if labels.len() != n {
        return Err(parse_err(
            labels_path,
            4,
            format!("{} labels but {n} images in {}", labels.len(), images_path.display()),
        ));
    }
    let mut sorted = keep;
    sorted.sort_unstable();
    let mut images = Vec::new();
    let mut out_labels = Vec::new();
    let mut ids = Vec::new();
    let mut taken = [0usize; 2];
    let plane = rows * cols;
    for (i, &digit) in labels.iter().enumerate() {
        let Some(class) = sorted.iter().position(|&d| d == digit) else {
            continue;
        };
        if taken[class] == per_class_cap {
            continue;
        }
        taken[class] += 1;
        let px = &pixels[i * plane..(i + 1) * plane];
        images.push(Tensor::new(
            &[rows, cols, 1],
            px.iter().map(|&b| b as f64 / 255.0).collect(),
        )?);
        out_labels.push(class);
        ids.push(i.to_string());
        if taken == [per_class_cap; 2] {
            break;
        }
    }
    for class in 0..2 {
        if taken[class] < per_class_cap {
            return Err(Error::Data(format!(
                "digit {} has only {} images, {per_class_cap} requested",
                sorted[class], taken[class]
            )));
        }
    }
    LabeledDataset::new(
        images,
        out_labels,
        ids,
        [sorted[0].to_string(), sorted[1].to_string()],
    )
}

/// Decodes an image file into `[H, W, 3]` RGB in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    rgb_to_tensor(&img.to_rgb8())
}

fn rgb_to_tensor(img: &image::RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 3],
        img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Encodes `[H, W, C]` (C = 1 or 3) as PNG, clamping values to [0, 1].
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::shape(format!("cannot encode {s:?} as an image")));
    }
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if s[2] == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        s[1] as u32,
        s[0] as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Resizes `[H, W, 3]` with a triangle filter.
pub fn resize_rgb(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = img.shape();
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes)
        .ok_or_else(|| Error::shape(format!("cannot view {s:?} as RGB")))?;
    let out = image::imageops::resize(
        &buf,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    rgb_to_tensor(&out)
}

/// File stem used as an image id.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `<root>/<class>/<file>` images for two classes, at most
/// `per_class_cap` per class in lexicographic file order. Classes are
/// labelled 0/1 by ascending name. Images of differing size are an error
/// unless `resize` gives a common `(H, W)`.
pub fn load_image_dir(
    root: &Path,
    classes: [&str; 2],
    per_class_cap: usize,
    resize: Option<(usize, usize)>,
) -> Result<LabeledDataset> {
    if classes[0] == classes[1] {
        return Err(Error::Config(format!("classes must differ, got {classes:?}")));
    }
    let mut names = classes;
    names.sort_unstable();
    let (mut images, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (label, name) in names.iter().enumerate() {
        let dir = root.join(name);
        let files = list_files(&dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("{} contains no images", dir.display())));
        }
        for path in files.iter().take(per_class_cap) {
            let mut img = read_image(path)?;
            if let Some((h, w)) = resize {
                if img.shape()[..2] != [h, w] {
                    img = resize_rgb(&img, h, w)?;
                }
            } else if let Some(first) = images.first() {
                let first: &Tensor = first;
                if first.shape() != img.shape() {
                    return Err(Error::Data(format!(
                        "{} is {:?} but earlier images are {:?}; set a resize target",
                        path.display(),
                        img.shape(),
                        first.shape()
                    )));
                }
            }
            images.push(img);
            labels.push(label);
            ids.push(image_id(path));
        }
    }
    LabeledDataset::new(
        images,
        labels,
        ids,
        [names[0].to_string(), names[1].to_string()],
    )
}

/// Two-class RGB images separable by hue and stripe orientation: class 0
/// (`cool`) has bluish vertical stripes, class 1 (`warm`) reddish
/// horizontal ones.
/// Frequencies, phases, tints and pixel noise vary per image.
pub fn synthetic_two_class(per_class: usize, size: usize, run_seed: u64) -> Result<LabeledDataset> {
    let mut rng = seed::rng(run_seed, seed::stream::SAMPLES ^ 0x5157);
    let (mut images, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..2 * per_class {
        let class = i % 2;
        let freq = rng.random_range(2.0..6.0) * std::f64::consts::TAU / size as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
        let base = if class == 0 {
            [0.3, 0.4, 0.65]
        } else {
            [0.65, 0.4, 0.3]
        };
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let t = if class == 0 { x } else { y } as f64;
                let stripe = 0.2 * (freq * t + phase).sin();
                for ch in 0..3 {
                    let noise = rng.random_range(-0.1..0.1);
                    data.push((base[ch] + tint[ch] + stripe + noise).clamp(0.0, 1.0));
                }
            }
        }
        images.push(Tensor::new(&[size, size, 3], data)?);
        labels.push(class);
        ids.push(format!("synthetic_{i:05}"));
    }
    LabeledDataset::new(images, labels, ids, ["cool".into(), "warm".into()])
}

/// Writes a dataset to the `AUGD` container.
pub fn save_cache(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let refs: Vec<&Tensor> = ds.images.iter().collect();
    let mut entries = vec![
        ("images".to_string(), Tensor::stack(&refs)?),
        (
            "labels".to_string(),
            Tensor::new(&[ds.len()], ds.labels.iter().map(|&l| l as f64).collect())?,
        ),
    ];
    for (i, name) in ds.class_names.iter().enumerate() {
        entries.push((format!("class/{name}"), Tensor::scalar(i as f64)));
    }
    for (i, id) in ds.ids.iter().enumerate() {
        entries.push((format!("id/{id}"), Tensor::scalar(i as f64)));
    }
    checkpoint::save(path, checkpoint::DATASET_MAGIC, &entries)
}

pub fn load_cache(path: &Path) -> Result<LabeledDataset> {
    let entries = checkpoint::load(path, checkpoint::DATASET_MAGIC)?;
    let mut map: HashMap<&str, &Tensor> = HashMap::new();
    let mut class_names = [String::new(), String::new()];
    let mut ids: Vec<(usize, String)> = Vec::new();
    for (name, t) in &entries {
        if let Some(c) = name.strip_prefix("class/") {
            let i = t.item() as usize;
            if i > 1 {
                return Err(Error::Data(format!("{}: bad class index {i}", path.display())));
            }
            class_names[i] = c.to_string();
        } else if let Some(id) = name.strip_prefix("id/") {
            ids.push((t.item() as usize, id.to_string()));
        } else {
            map.insert(name, t);
        }
    }
    let missing = |k: &str| Error::Data(format!("{}: cache lacks {k}", path.display()));
    let images = map.get("images").ok_or_else(|| missing("images"))?;
    let labels = map.get("labels").ok_or_else(|| missing("labels"))?;
    ids.sort();
    let n = images.shape()[0];
    let images = (0..n).map(|i| images.index_first(i)).collect::<Result<Vec<_>>>()?;
    let labels = labels.data().iter().map(|&l| l as usize).collect();
    LabeledDataset::new(images, labels, ids.into_iter().map(|(_, s)| s).collect(), class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(per_class: usize, c: usize) -> LabeledDataset {
        let n = 2 * per_class;
        let images = (0..n)
            .map(|i| Tensor::from_fn(&[2, 2, c], |j| ((i * 7 + j * 3) % 11) as f64 / 10.0))
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        let ids = (0..n).map(|i| format!("img{i}")).collect();
        LabeledDataset::new(images, labels, ids, ["a".into(), "b".into()]).unwrap()
    }

    fn write_idx(dir: &Path, digits: &[u8]) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(digits.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for (i, _) in digits.iter().enumerate() {
            img.extend_from_slice(&[i as u8, 0, 255, 51]);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(digits.len() as u32).to_be_bytes());
        lab.extend_from_slice(digits);
        let (pi, pl) = (dir.join("images"), dir.join("labels"));
        fs::write(&pi, img).unwrap();
        fs::write(&pl, lab).unwrap();
        (pi, pl)
    }

    #[test]
    fn idx_loading_and_remap() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_idx(dir.path(), &[8, 3, 0, 8, 0, 8, 0]);
        let ds = load_idx(&pi, &pl, [8, 0], 2).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, vec![1, 0, 1, 0]);
        assert_eq!(ds.ids, vec!["0", "2", "3", "4"]);
        assert_eq!(ds.class_names, ["0".to_string(), "8".to_string()]);
        assert_eq!(ds.images[0].shape(), &[2, 2, 1]);
        assert_eq!(ds.images[0].data(), &[0.0, 0.0, 1.0, 0.2]);
        let err = load_idx(&pi, &pl, [0, 8], 4).unwrap_err().to_string();
        assert!(err.contains("only 3"), "{err}");
    }

    #[test]
    fn idx_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_idx(dir.path(), &[0, 8, 0, 8]);
        let mut bytes = fs::read(&pi).unwrap();
        bytes[3] = 0x04;
        let bad = dir.path().join("bad");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_idx(&bad, &pl, [0, 8], 1),
            Err(Error::Parse { offset: 0, .. })
        ));
        let good = fs::read(&pi).unwrap();
        fs::write(&bad, &good[..good.len() - 2]).unwrap();
        assert!(matches!(load_idx(&bad, &pl, [0, 8], 1), Err(Error::Parse { .. })));
        fs::write(&bad, &good[..10]).unwrap();
        assert!(matches!(load_idx(&bad, &pl, [0, 8], 1), Err(Error::Parse { offset: 10, .. })));
        let (_, pl3) = {
            let sub = dir.path().join("three");
            fs::create_dir(&sub).unwrap();
            write_idx(&sub, &[0, 8, 0])
        };
        assert!(matches!(load_idx(&pi, &pl3, [0, 8], 1), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = toy(500, 1);
        let s = split(&ds, 0.0, 3).unwrap();
        assert_eq!(s.train.class_counts(), [400, 400]);
        assert_eq!(s.val.class_counts(), [100, 100]);
        assert!(s.test.is_none());
        let ds = toy(1000, 1);
        let s = split(&ds, 0.0, 3).unwrap();
        assert_eq!(s.train.class_counts(), [800, 800]);
        assert_eq!(s.val.class_counts(), [200, 200]);

        let s = split(&toy(37, 1), 0.1, 9).unwrap();
        let test = s.test.as_ref().unwrap();
        let all: Vec<&String> = s.train.ids.iter().chain(&s.val.ids).chain(&test.ids).collect();
        let unique: HashSet<&&String> = all.iter().collect();
        assert_eq!(all.len(), 74);
        assert_eq!(unique.len(), 74);
        assert_eq!(s, split(&toy(37, 1), 0.1, 9).unwrap());
        assert_ne!(s.train.ids, split(&toy(37, 1), 0.1, 10).unwrap().train.ids);
        assert!(split(&toy(4, 1), 0.0, 1).is_err());
    }

    #[test]
    fn normalization_uses_training_statistics() {
        let s = split(&toy(20, 3), 0.0, 1).unwrap();
        let n = s.normalize(NormKind::Standardize).unwrap();
        let stats = n.train.norm_stats.clone().unwrap();
        let c = 3;
        for ch in 0..c {
            let vals: Vec<f64> = n
                .train
                .images
                .iter()
                .flat_map(|i| i.data().iter().skip(ch).step_by(c).copied().collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        // Validation pixels go through the same affine map.
        let raw = s.val.images[0].data()[4];
        let got = n.val.images[0].data()[4];
        assert!((got - (raw - stats.offset[1]) / stats.scale[1]).abs() < 1e-15);

        let mut perturbed = s.clone();
        perturbed.val.images[0] = Tensor::full(&[2, 2, 3], 0.9);
        assert_eq!(perturbed.normalize(NormKind::Standardize).unwrap().train.norm_stats, Some(stats));

        let m = s.normalize(NormKind::MinMax).unwrap();
        let lo = m.train.images.iter().flat_map(|i| i.data().to_vec()).fold(f64::INFINITY, f64::min);
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let ds = LabeledDataset::new(
            vec![Tensor::full(&[2, 2, 1], 0.5); 4],
            vec![0, 1, 0, 1],
            (0..4).map(|i| i.to_string()).collect(),
            ["a".into(), "b".into()],
        )
        .unwrap();
        assert!(NormStats::fit(&ds, NormKind::Standardize).is_err());
        assert!(NormStats::fit(&ds, NormKind::MinMax).is_err());
    }

    #[test]
    fn image_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["dogs", "cats"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for name in ["e", "a", "d", "b", "c"] {
                let v = if class == "cats" { 0.2 } else { 0.8 };
                write_png(
                    &dir.path().join(class).join(format!("{name}.png")),
                    &Tensor::full(&[4, 4, 3], v),
                )
                .unwrap();
            }
        }
        let ds = load_image_dir(dir.path(), ["dogs", "cats"], 3, None).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_names, ["cats".to_string(), "dogs".to_string()]);
        assert_eq!(ds.ids, vec!["a", "b", "c", "a", "b", "c"]);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert!((ds.images[0].data()[0] - 51.0 / 255.0).abs() < 1e-12);

        write_png(&dir.path().join("cats").join("f.png"), &Tensor::full(&[8, 4, 3], 0.1)).unwrap();
        assert!(load_image_dir(dir.path(), ["dogs", "cats"], 10, None).is_err());
        let ds = load_image_dir(dir.path(), ["dogs", "cats"], 10, Some((4, 4))).unwrap();
        assert_eq!(ds.len(), 11);

        fs::write(dir.path().join("cats").join("g.png"), b"not a png").unwrap();
        let err = load_image_dir(dir.path(), ["dogs", "cats"], 10, Some((4, 4))).unwrap_err();
        assert!(err.to_string().contains("g.png"));
        fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(load_image_dir(dir.path(), ["dogs", "empty"], 10, None).is_err());
    }

    #[test]
    fn synthetic_set_is_deterministic_and_balanced() {
        let a = synthetic_two_class(5, 16, 1).unwrap();
        assert_eq!(a, synthetic_two_class(5, 16, 1).unwrap());
        assert_eq!(a.class_counts(), [5, 5]);
        assert_eq!(a.image_shape(), [16, 16, 3]);
        assert!(a.images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        // Class 1 ("warm") is redder than blue on average.
        let warm = &a.images[a.class_indices(1)[0]];
        let (r, b): (f64, f64) = warm.data().chunks(3).fold((0.0, 0.0), |(r, b), p| (r + p[0], b + p[2]));
        assert!(r > b);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let ds = toy(3, 3);
        save_cache(&path, &ds).unwrap();
        assert_eq!(load_cache(&path).unwrap(), ds);
    }
}
