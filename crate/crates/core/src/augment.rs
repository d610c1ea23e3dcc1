//! Traditional affine augmentation, style-bank ingestion and the same-class
//! pair sampler that feeds the augmentation network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling ranges for [`sample_affine_spec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineRanges {
    /// Largest shift as a fraction of the image extent.
    pub shift: f64,
    pub zoom: (f64, f64),
    /// Degrees.
    pub rotate: f64,
    pub shear: f64,
    pub hue: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            shift: 0.1,
            zoom: (0.8, 1.2),
            rotate: 20.0,
            shear: 0.1,
            hue: 0.2,
        }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=0.5).contains(&self.shift)
            && self.zoom.0 > 0.0
            && self.zoom.0 <= self.zoom.1
            && (0.0..=180.0).contains(&self.rotate)
            && (0.0..1.0).contains(&self.shear)
            && (0.0..=1.0).contains(&self.hue);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

/// One affine warp about the image centre plus an optional hue tint.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSpec {
    /// Shift in pixels (columns, rows).
    pub shift: (f64, f64),
    pub zoom: f64,
    /// Degrees, counter-clockwise in image coordinates.
    pub rotate: f64,
    pub flip_h: bool,
    /// Shear factors along x and y.
    pub shear: (f64, f64),
    /// Per-channel additive tint; empty for no tint.
    pub hue: Vec<f64>,
}

impl AffineSpec {
    pub fn identity() -> Self {
        Self {
            shift: (0.0, 0.0),
            zoom: 1.0,
            rotate: 0.0,
            flip_h: false,
            shear: (0.0, 0.0),
            hue: Vec::new(),
        }
    }

    /// Checks the spec against `ranges` for an image of `[H, W, C]`.
    pub fn validate(&self, ranges: &AffineRanges, shape: [usize; 3]) -> Result<()> {
        let [h, w, c] = shape;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} out of range in {self:?}")));
        if self.shift.0.abs() > ranges.shift * w as f64 || self.shift.1.abs() > ranges.shift * h as f64 {
            return bad("shift");
        }
        if !(ranges.zoom.0..=ranges.zoom.1).contains(&self.zoom) {
            return bad("zoom");
        }
        if self.rotate.abs() > ranges.rotate {
            return bad("rotation");
        }
        if self.shear.0.abs() > ranges.shear || self.shear.1.abs() > ranges.shear {
            return bad("shear");
        }
        if !self.hue.is_empty() && (self.hue.len() != c || c != 3) {
            return bad("hue channel count");
        }
        if self.hue.iter().any(|v| v.abs() > ranges.hue) {
            return bad("hue");
        }
        Ok(())
    }

    /// Forward linear map as a row-major 2×2 matrix on (x, y).
    fn linear(&self) -> [f64; 4] {
        let (s, c) = self.rotate.to_radians().sin_cos();
        let f = if self.flip_h { -1.0 } else { 1.0 };
        // rotation · zoom · shear · flip
        let sh = [1.0, self.shear.0, self.shear.1, 1.0];
        let rz = [c * self.zoom, -s * self.zoom, s * self.zoom, c * self.zoom];
        let m = [
            rz[0] * sh[0] + rz[1] * sh[2],
            rz[0] * sh[1] + rz[1] * sh[3],
            rz[2] * sh[0] + rz[3] * sh[2],
            rz[2] * sh[1] + rz[3] * sh[3],
        ];
        [m[0] * f, m[1], m[2] * f, m[3]]
    }
}

fn bilinear(img: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f64]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    for ch in 0..c {
        let at = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        out[ch] = top * (1.0 - fy) + bottom * fy;
    }
}

/// Warps `img` (`[H, W, C]`) by inverse mapping each output pixel through
/// `spec`, sampling bilinearly with edge replication, then adds the hue
/// tint and clamps to [0, 1].
pub fn affine_apply(img: &Tensor, spec: &AffineSpec) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [H, W, C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if !spec.hue.is_empty() && spec.hue.len() != c {
        return Err(Error::InvalidArgument(format!(
            "{} hue values for {c} channels",
            spec.hue.len()
        )));
    }
    let [a, b, cc, d] = spec.linear();
    let det = a * d - b * cc;
    if det.abs() < 1e-12 {
        return Err(Error::InvalidArgument(format!("singular warp {spec:?}")));
    }
    let inv = [d / det, -b / det, -cc / det, a / det];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for oy in 0..h {
        for ox in 0..w {
            let u = ox as f64 - cx - spec.shift.0;
            let v = oy as f64 - cy - spec.shift.1;
            let x = inv[0] * u + inv[1] * v + cx;
            let y = inv[2] * u + inv[3] * v + cy;
            let at = (oy * w + ox) * c;
            bilinear(src, h, w, c, x, y, &mut out[at..at + c]);
        }
    }
    if !spec.hue.is_empty() {
        for (i, v) in out.iter_mut().enumerate() {
            *v = (*v + spec.hue[i % c]).clamp(0.0, 1.0);
        }
    }
    Tensor::new(s, out)
}

/// Draws every component uniformly from `ranges`; flips with probability
/// one half. The hue tint is only drawn for three-channel images.
pub fn sample_affine_spec(rng: &mut (impl Rng + ?Sized), ranges: &AffineRanges, shape: [usize; 3]) -> AffineSpec {
    let [h, w, c] = shape;
    let sym = |rng: &mut _, r: f64| if r > 0.0 { Rng::random_range(rng, -r..=r) } else { 0.0 };
    let shift = (sym(rng, ranges.shift * w as f64), sym(rng, ranges.shift * h as f64));
    let zoom = if ranges.zoom.0 < ranges.zoom.1 {
        rng.random_range(ranges.zoom.0..=ranges.zoom.1)
    } else {
        ranges.zoom.0
    };
    let rotate = sym(rng, ranges.rotate);
    let flip_h = rng.random_bool(0.5);
    let shear = (sym(rng, ranges.shear), sym(rng, ranges.shear));
    let hue = if c == 3 {
        (0..3).map(|_| sym(rng, ranges.hue)).collect()
    } else {
        Vec::new()
    };
    AffineSpec {
        shift,
        zoom,
        rotate,
        flip_h,
        shear,
        hue,
    }
}

/// Originals followed by one randomly warped duplicate of each.
pub fn augment_dataset_traditional(
    ds: &LabeledDataset,
    ranges: &AffineRanges,
    rng: &mut (impl Rng + ?Sized),
) -> Result<LabeledDataset> {
    ranges.validate()?;
    let shape = ds.image_shape();
    let mut out = ds.clone();
    for i in 0..ds.len() {
        let spec = sample_affine_spec(rng, ranges, shape);
        out.images.push(affine_apply(&ds.images[i], &spec)?);
        out.labels.push(ds.labels[i]);
        out.ids.push(format!("{}#affine", ds.ids[i]));
    }
    Ok(out)
}

/// Style-bank manifest: image id → `(style, relative path)` entries in
/// file order.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, Vec<(String, String)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: start,
                msg: "expected `<image_id>\\t<style>\\t<path>`".into(),
            });
        }
        let id = data::image_id(Path::new(fields[0]));
        map.entry(id)
            .or_default()
            .push((fields[1].to_string(), fields[2].to_string()));
    }
    Ok(map)
}

/// Originals followed by one styled variant per original, chosen uniformly
/// among that image's variants in `style_dir/manifest.tsv`.
pub fn load_style_bank(
    ds: &LabeledDataset,
    style_dir: &Path,
    rng: &mut (impl Rng + ?Sized),
) -> Result<LabeledDataset> {
    let manifest = read_manifest(&style_dir.join("manifest.tsv"))?;
    let missing: Vec<&str> = ds
        .ids
        .iter()
        .filter(|id| !manifest.contains_key(id.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "style bank lacks variants for {} images: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let shape = ds.image_shape();
    let mut out = ds.clone();
    for i in 0..ds.len() {
        let variants = &manifest[&ds.ids[i]];
        let (style, rel) = &variants[rng.random_range(0..variants.len())];
        let path = style_dir.join(rel);
        let mut img = data::read_image(&path)?;
        if shape[2] == 1 {
            img = to_gray(&img)?;
        }
        if img.shape() != shape {
            return Err(Error::Data(format!(
                "{} is {:?}, dataset images are {shape:?}",
                path.display(),
                img.shape()
            )));
        }
        out.images.push(img);
        out.labels.push(ds.labels[i]);
        out.ids.push(format!("{}@{style}", ds.ids[i]));
    }
    Ok(out)
}

fn to_gray(rgb: &Tensor) -> Result<Tensor> {
    let s = rgb.shape();
    let data = rgb
        .data()
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Tensor::new(&[s[0], s[1], 1], data)
}

/// Indices of two source images and a target, all of one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub target: usize,
    pub class: usize,
}

/// Draws same-class triples with replacement from a training split.
#[derive(Clone, Debug)]
pub struct PairSampler {
    by_class: [Vec<usize>; 2],
    /// Feeds the same image twice (`b = a`).
    pub control: bool,
}

impl PairSampler {
    pub fn new(ds: &LabeledDataset, control: bool) -> Self {
        Self {
            by_class: [ds.class_indices(0), ds.class_indices(1)],
            control,
        }
    }

    pub fn sample(&self, class: usize, rng: &mut (impl Rng + ?Sized)) -> Result<PairSample> {
        let pool = self
            .by_class
            .get(class)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Data(format!("class {class} has no training images")))?;
        let mut draw = || pool[rng.random_range(0..pool.len())];
        let a = draw();
        let b = if self.control { a } else { draw() };
        let target = draw();
        Ok(PairSample { a, b, target, class })
    }

    /// One sample per requested class.
    pub fn sample_batch(&self, classes: &[usize], rng: &mut (impl Rng + ?Sized)) -> Result<Vec<PairSample>> {
        classes.iter().map(|&c| self.sample(c, rng)).collect()
    }
}

/// Channel concatenation `[H, W, 2C]`, image `a` first.
pub fn concat_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("pair {:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::concat_last(a, b)
}

/// Stacked pair inputs `[n, H, W, 2C]` and targets `[n, H, W, C]`.
pub fn pair_batch(ds: &LabeledDataset, pairs: &[PairSample]) -> Result<(Tensor, Tensor)> {
    let inputs = pairs
        .iter()
        .map(|p| concat_pair(&ds.images[p.a], &ds.images[p.b]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let targets: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    Ok((Tensor::stack(&refs)?, ds.batch(&targets)?))
}
