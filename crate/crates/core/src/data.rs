//! Datasets: procedural face/non-face images with controllable group skew,
//! plus PNG directory import and export.
//!
//! Faces carry a [`GroupTag`] made of two binary axes: `shade` (light or dark
//! head intensity) and `attr2` (`B` wears a hat bar across the crown, `A`
//! does not). These stand in for demographic axes in bias evaluation.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   manifest.csv            filename,label,group
//!   faces/<group>/*.png     group in {light_A, light_B, dark_A, dark_B}
//!   nonfaces/*.png
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::IMAGE_SIZE;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shade {
    Light,
    Dark,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attr {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupTag {
    pub shade: Shade,
    pub attr2: Attr,
}

impl GroupTag {
    pub const ALL: [GroupTag; 4] = [
        GroupTag::new(Shade::Light, Attr::A),
        GroupTag::new(Shade::Light, Attr::B),
        GroupTag::new(Shade::Dark, Attr::A),
        GroupTag::new(Shade::Dark, Attr::B),
    ];

    pub const fn new(shade: Shade, attr2: Attr) -> Self {
        GroupTag { shade, attr2 }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shade = match self.shade {
            Shade::Light => "light",
            Shade::Dark => "dark",
        };
        let attr = match self.attr2 {
            Attr::A => "A",
            Attr::B => "B",
        };
        write!(f, "{shade}_{attr}")
    }
}

impl FromStr for GroupTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GroupTag::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown group `{s}`")))
    }
}

impl Serialize for GroupTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[C, 64, 64]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: bool,
    /// Present only for faces whose group is known.
    pub group: Option<GroupTag>,
}

impl Example {
    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

/// Face counts per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCounts {
    #[serde(rename = "light_A")]
    pub light_a: usize,
    #[serde(rename = "light_B")]
    pub light_b: usize,
    #[serde(rename = "dark_A")]
    pub dark_a: usize,
    #[serde(rename = "dark_B")]
    pub dark_b: usize,
}

impl GroupCounts {
    pub fn get(&self, g: GroupTag) -> usize {
        match (g.shade, g.attr2) {
            (Shade::Light, Attr::A) => self.light_a,
            (Shade::Light, Attr::B) => self.light_b,
            (Shade::Dark, Attr::A) => self.dark_a,
            (Shade::Dark, Attr::B) => self.dark_b,
        }
    }

    pub fn total(&self) -> usize {
        self.light_a + self.light_b + self.dark_a + self.dark_b
    }

    pub fn uniform(n: usize) -> Self {
        GroupCounts {
            light_a: n,
            light_b: n,
            dark_a: n,
            dark_b: n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub faces: GroupCounts,
    pub nonfaces: usize,
    pub channels: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.faces.total() < 1 {
            return Err(Error::InvalidArgument("dataset needs at least one face".into()));
        }
        if self.nonfaces < 1 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one non-face".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

pub const LIGHT_HEAD: f64 = 0.8;
pub const DARK_HEAD: f64 = 0.35;
const HAT_LEVEL: f64 = 0.1;
/// Per-channel multipliers applied to the head when rendering RGB.
const SKIN_TINT: [f64; 3] = [1.0, 0.88, 0.75];

/// Single-channel canvas used while drawing; expanded to `C` at the end.
struct Canvas {
    px: Vec<f64>,
    /// Head mask, used to tint RGB faces.
    skin: Vec<bool>,
}

impl Canvas {
    fn background(rng: &mut RngStream) -> Self {
        let base = rng.uniform_range(0.4, 0.6);
        let px = (0..IMAGE_SIZE * IMAGE_SIZE)
            .map(|_| base + 0.04 * rng.normal())
            .collect();
        Canvas {
            px,
            skin: vec![false; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    fn fill(&mut self, inside: impl Fn(f64, f64) -> bool, level: f64, skin: bool) {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = y * IMAGE_SIZE + x;
                    self.px[i] = level;
                    self.skin[i] = skin;
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, level: f64) {
        self.fill(|x, y| x >= x0 && x < x1 && y >= y0 && y < y1, level, false);
    }

    fn into_tensor(self, channels: usize, rng: &mut RngStream) -> Tensor {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::with_capacity(channels * hw);
        for c in 0..channels {
            let tint = if channels == 3 { SKIN_TINT[c] } else { 1.0 };
            for i in 0..hw {
                let v = if self.skin[i] { self.px[i] * tint } else { self.px[i] };
                data.push(v);
            }
        }
        // Sensor noise on top of the drawing.
        for v in &mut data {
            *v = (*v + 0.02 * rng.normal()).clamp(0.0, 1.0);
        }
        Tensor::new([channels, IMAGE_SIZE, IMAGE_SIZE], data).expect("canvas shape")
    }
}

/// Draws a face of `group`: an ellipse head with two eyes and a mouth, plus a
/// hat bar for `attr2 == B`. Position and scale are jittered by up to 10%.
pub fn generate_face(group: GroupTag, channels: usize, rng: &mut RngStream) -> Example {
    let mut canvas = Canvas::background(rng);
    let s = IMAGE_SIZE as f64;
    let scale = rng.uniform_range(0.9, 1.1);
    let cx = s / 2.0 + rng.uniform_range(-0.1, 0.1) * s / 2.0 * 0.6;
    let cy = s / 2.0 + 2.0 + rng.uniform_range(-0.1, 0.1) * s / 2.0 * 0.6;
    let (rx, ry) = (17.0 * scale, 21.0 * scale);
    let base = match group.shade {
        Shade::Light => LIGHT_HEAD,
        Shade::Dark => DARK_HEAD,
    };
    let head = base + rng.uniform_range(-0.05, 0.05);
    canvas.fill(
        |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
        head,
        true,
    );

    let eye_level = head * 0.2;
    let eye_r = 0.13 * rx;
    for side in [-1.0, 1.0] {
        let (ex, ey) = (cx + side * 0.4 * rx, cy - 0.2 * ry);
        canvas.fill(
            |x, y| (x - ex).powi(2) + (y - ey).powi(2) <= eye_r * eye_r,
            eye_level,
            false,
        );
    }
    let mouth_y = cy + 0.45 * ry;
    canvas.rect(
        cx - 0.4 * rx,
        mouth_y - 0.05 * ry,
        cx + 0.4 * rx,
        mouth_y + 0.05 * ry,
        head * 0.3,
    );

    if group.attr2 == Attr::B {
        canvas.rect(
            cx - 1.1 * rx,
            cy - 1.05 * ry,
            cx + 1.1 * rx,
            cy - 0.6 * ry,
            HAT_LEVEL,
        );
    }

    Example {
        image: canvas.into_tensor(channels, rng),
        label: true,
        group: Some(group),
    }
}

/// Draws a non-face: rectangles, thick lines or a blocky noise field on the
/// same background distribution as faces. Never draws an ellipse.
pub fn generate_nonface(channels: usize, rng: &mut RngStream) -> Example {
    let mut canvas = Canvas::background(rng);
    let s = IMAGE_SIZE as f64;
    let shapes = 2 + rng.below(4);
    for _ in 0..shapes {
        let level = rng.uniform_range(0.05, 0.95);
        match rng.below(3) {
            0 => {
                let (w, h) = (rng.uniform_range(8.0, 36.0), rng.uniform_range(8.0, 36.0));
                let (x0, y0) = (rng.uniform_range(0.0, s - w), rng.uniform_range(0.0, s - h));
                canvas.rect(x0, y0, x0 + w, y0 + h, level);
            }
            1 => {
                let (x0, y0) = (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s));
                let angle = rng.uniform_range(0.0, std::f64::consts::PI);
                let (dx, dy) = (angle.cos(), angle.sin());
                let half_width = rng.uniform_range(1.0, 4.0);
                canvas.fill(
                    |x, y| ((x - x0) * dy - (y - y0) * dx).abs() <= half_width,
                    level,
                    false,
                );
            }
            _ => {
                let block = 4 + rng.below(5);
                let cells = IMAGE_SIZE.div_ceil(block);
                let grid: Vec<f64> = (0..cells * cells)
                    .map(|_| rng.uniform_range(0.1, 0.9))
                    .collect();
                let (x0, y0) = (rng.below(IMAGE_SIZE / 2), rng.below(IMAGE_SIZE / 2));
                let (x1, y1) = (x0 + 16 + rng.below(16), y0 + 16 + rng.below(16));
                for y in y0..y1.min(IMAGE_SIZE) {
                    for x in x0..x1.min(IMAGE_SIZE) {
                        canvas.px[y * IMAGE_SIZE + x] = grid[(y / block) * cells + x / block];
                    }
                }
            }
        }
    }
    Example {
        image: canvas.into_tensor(channels, rng),
        label: false,
        group: None,
    }
}

/// Counts per group (and non-faces) in a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub faces: BTreeMap<GroupTag, usize>,
    pub ungrouped_faces: usize,
    pub nonfaces: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total_faces: usize = self.faces.values().sum::<usize>() + self.ungrouped_faces;
        for g in GroupTag::ALL {
            let n = self.faces.get(&g).copied().unwrap_or(0);
            let pct = if total_faces > 0 {
                100.0 * n as f64 / total_faces as f64
            } else {
                0.0
            };
            writeln!(f, "{g:>8}: {n:6} ({pct:5.1}% of faces)")?;
        }
        if self.ungrouped_faces > 0 {
            writeln!(f, "ungrouped: {:5}", self.ungrouped_faces)?;
        }
        write!(f, "nonfaces: {:6}", self.nonfaces)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.examples.first().map(|e| e.image.dim(0))
    }

    pub fn face_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].label).collect()
    }

    pub fn nonface_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.examples[i].label).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut s = DatasetSummary::default();
        for e in &self.examples {
            match (e.label, e.group) {
                (true, Some(g)) => *s.faces.entry(g).or_default() += 1,
                (true, None) => s.ungrouped_faces += 1,
                (false, _) => s.nonfaces += 1,
            }
        }
        s
    }

    /// Stacks the images at `indices` into `[n, C, 64, 64]`.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let c = self.channels().unwrap_or(1);
        let mut data = Vec::with_capacity(indices.len() * c * IMAGE_SIZE * IMAGE_SIZE);
        for &i in indices {
            data.extend_from_slice(self.examples[i].image.data());
        }
        Tensor::new([indices.len(), c, IMAGE_SIZE, IMAGE_SIZE], data).expect("uniform images")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.examples[i].label_f64()).collect()
    }

    /// Checks every image is `[C, 64, 64]` with a common `C` and values in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let Some(c) = self.channels() else {
            return Ok(());
        };
        for (i, e) in self.examples.iter().enumerate() {
            if e.image.shape() != [c, IMAGE_SIZE, IMAGE_SIZE] {
                return Err(Error::Dataset(format!(
                    "example {i} has shape {:?}, expected [{c},64,64]",
                    e.image.shape()
                )));
            }
            if e.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("example {i} has pixels outside [0,1]")));
            }
            if !e.label && e.group.is_some() {
                return Err(Error::Dataset(format!("non-face example {i} carries a group")));
            }
        }
        Ok(())
    }
}

/// Generates every example in `spec`, then shuffles deterministically.
///
/// Example `j` (before shuffling) draws from its own stream derived from the
/// dataset seed and `j`, so generation order does not affect content.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut examples = Vec::with_capacity(spec.faces.total() + spec.nonfaces);
    let mut j = 0u64;
    for g in GroupTag::ALL {
        for _ in 0..spec.faces.get(g) {
            examples.push(generate_face(g, spec.channels, &mut root.derive(j)));
            j += 1;
        }
    }
    for _ in 0..spec.nonfaces {
        examples.push(generate_nonface(spec.channels, &mut root.derive(j)));
        j += 1;
    }
    root.derive(u64::MAX).shuffle(&mut examples);
    Ok(Dataset { examples })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub label: u8,
    pub group: Option<GroupTag>,
}

fn to_png(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let hw = h * w;
    let result = if c == 1 {
        let buf: Vec<u8> = image.data().iter().map(|&v| q(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer size")
            .save(path)
    } else {
        let d = image.data();
        let buf: Vec<u8> = (0..hw)
            .flat_map(|i| [q(d[i]), q(d[hw + i]), q(d[2 * hw + i])])
            .collect();
        image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer size")
            .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `dataset` as PNGs plus `manifest.csv`. `header` (if any) becomes a
/// leading `#` comment line in the manifest.
pub fn export_dataset(dataset: &Dataset, root: &Path, header: Option<&str>) -> Result<()> {
    dataset.validate()?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&root.join("nonfaces"))?;
    for g in GroupTag::ALL {
        mkdir(&root.join("faces").join(g.to_string()))?;
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for (i, e) in dataset.examples.iter().enumerate() {
        let rel = match (e.label, e.group) {
            (true, Some(g)) => format!("faces/{g}/{i:06}.png"),
            (true, None) => format!("faces/{i:06}.png"),
            (false, _) => format!("nonfaces/{i:06}.png"),
        };
        to_png(&e.image, &root.join(&rel))?;
        rows.push(ManifestRow {
            filename: rel,
            label: e.label as u8,
            group: e.group,
        });
    }
    let path = root.join("manifest.csv");
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&format!("# {h}\n"));
    }
    out.push_str(&crate::report::to_csv(&rows)?);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes a PNG, converts it to `channels` planes in `[0, 1]` and resizes
/// bilinearly to 64x64. Images already 64x64 are not resampled.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let size = IMAGE_SIZE as u32;
    let img = if img.width() == size && img.height() == size {
        img
    } else {
        img.resize_exact(size, size, FilterType::Triangle)
    };
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let data = if channels == 1 {
        img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    } else {
        let rgb = img.to_rgb8().into_raw();
        let mut planes = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                planes[c * hw + i] = rgb[3 * i + c] as f64 / 255.0;
            }
        }
        planes
    };
    Tensor::new([channels, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Loads `faces/<group>/*.png` (and ungrouped `faces/*.png`) plus
/// `nonfaces/*.png`, in lexicographic order: faces by group directory name,
/// then non-faces.
pub fn load_image_dir(root: &Path, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let faces_dir = root.join("faces");
    let nonfaces_dir = root.join("nonfaces");
    for d in [&faces_dir, &nonfaces_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", d.display())));
        }
    }

    let mut face_files: Vec<(PathBuf, Option<GroupTag>)> = png_files(&faces_dir)?
        .into_iter()
        .map(|p| (p, None))
        .collect();
    let mut group_dirs: Vec<PathBuf> = fs::read_dir(&faces_dir)
        .map_err(|e| Error::io(&faces_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    group_dirs.sort();
    for dir in group_dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let group: GroupTag = name.parse().map_err(|_| {
            Error::Dataset(format!("unknown group directory {}", dir.display()))
        })?;
        face_files.extend(png_files(&dir)?.into_iter().map(|p| (p, Some(group))));
    }
    if face_files.is_empty() {
        return Err(Error::Dataset(format!("no face images under {}", faces_dir.display())));
    }
    let nonface_files = png_files(&nonfaces_dir)?;
    if nonface_files.is_empty() {
        return Err(Error::Dataset(format!(
            "no non-face images under {}",
            nonfaces_dir.display()
        )));
    }

    let mut examples = Vec::with_capacity(face_files.len() + nonface_files.len());
    for (path, group) in face_files {
        examples.push(Example {
            image: load_image(&path, channels)?,
            label: true,
            group,
        });
    }
    for path in nonface_files {
        examples.push(Example {
            image: load_image(&path, channels)?,
            label: false,
            group: None,
        });
    }
    Ok(Dataset { examples })
}
