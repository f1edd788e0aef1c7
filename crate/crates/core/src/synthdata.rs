//! Procedural fine-grained vehicle sprites and manifest-based datasets.
//!
//! Each identity index maps to a smooth parameter tuple, so neighbouring
//! identities differ only slightly. A sprite is composed of a side face and a
//! front face in object space; the five viewpoints place these faces with
//! fixed affine maps. Left views are right views reflected before the inverse
//! map, which makes the mirror relation exact at the pixel level.
//!
//! Manifests are CSV files `path,identity,viewpoint,split` with 1-indexed
//! labels and paths relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::tensor::{Real, Tensor};

pub const NUM_VIEWPOINTS: usize = 5;
pub const VIEWPOINT_NAMES: [&str; NUM_VIEWPOINTS] =
    ["frontal", "frontal-left", "frontal-right", "left", "right"];
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const MANIFEST_NAME: &str = "manifest.csv";

/// Share of identities placed in the auxiliary split.
const AUXILIARY_SHARE: f64 = 0.8;
const BACKGROUND: [f64; 3] = [0.72, 0.74, 0.76];

/// Triangle wave in [0, 1] with period 1.
fn tri(x: f64) -> f64 {
    let f = x.rem_euclid(1.0);
    1.0 - (2.0 * f - 1.0).abs()
}

/// Geometry and colour of one identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentitySpec {
    /// Body length over body height.
    pub aspect: f64,
    pub canopy: usize,
    pub wheel_radius: f64,
    /// Stripe centre as a fraction of body height.
    pub stripe_offset: f64,
    pub hue: f64,
}

impl IdentitySpec {
    /// Parameters of 0-based identity `index`.
    pub fn from_index(index: usize) -> Self {
        let i = index as f64;
        IdentitySpec {
            aspect: 3.0 + 1.2 * tri(i * 0.13),
            canopy: (index / 4) % 3,
            wheel_radius: 0.18 + 0.07 * tri(i * 0.17 + 0.3),
            stripe_offset: 0.3 + 0.4 * tri(i * 0.11 + 0.5),
            hue: (i * 0.061).rem_euclid(1.0),
        }
    }

    fn body_bottom(&self) -> f64 {
        0.8 * self.wheel_radius
    }

    fn body_height(&self) -> f64 {
        2.0 / self.aspect
    }

    fn half_width(&self) -> f64 {
        0.4 + 0.05 * (self.aspect - 3.0)
    }

    fn canopy_height(&self) -> f64 {
        0.34
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Palette {
    body: [f64; 3],
    stripe: [f64; 3],
}

const WINDOW: [f64; 3] = [0.16, 0.2, 0.3];
const TYRE: [f64; 3] = [0.06, 0.06, 0.06];
const HUB: [f64; 3] = [0.55, 0.55, 0.58];
const HEADLIGHT: [f64; 3] = [0.98, 0.95, 0.7];
const TAILLIGHT: [f64; 3] = [0.85, 0.1, 0.08];
const GRILLE: [f64; 3] = [0.12, 0.12, 0.14];

impl Palette {
    fn of(spec: &IdentitySpec) -> Self {
        Palette {
            body: hsv(spec.hue, 0.65, 0.85),
            stripe: hsv(spec.hue + 0.5, 0.8, 0.45),
        }
    }
}

/// Side face; `u ∈ [-1, 1]` along the body with the front at `+1`, `v` up from the ground.
fn side_face(spec: &IdentitySpec, pal: &Palette, u: f64, v: f64) -> Option<[f64; 3]> {
    let wr = spec.wheel_radius;
    for cu in [-0.6, 0.6] {
        let d2 = (u - cu).powi(2) + (v - wr).powi(2);
        if d2 <= wr * wr {
            return Some(if d2 <= (0.45 * wr).powi(2) { HUB } else { TYRE });
        }
    }
    let bottom = spec.body_bottom();
    let top = bottom + spec.body_height();
    if (-1.0..=1.0).contains(&u) && (bottom..=top).contains(&v) {
        let rel = (v - bottom) / spec.body_height();
        if u >= 0.93 && rel > 0.6 {
            return Some(HEADLIGHT);
        }
        if u <= -0.95 && rel > 0.6 {
            return Some(TAILLIGHT);
        }
        if (rel - spec.stripe_offset).abs() < 0.07 {
            return Some(pal.stripe);
        }
        return Some(pal.body);
    }
    let ch = spec.canopy_height();
    if v > top && v <= top + ch {
        let t = (v - top) / ch;
        let (lo, hi) = match spec.canopy {
            0 => (-0.6 + 0.15 * t, 0.35 - 0.3 * t),
            1 => (-0.7, 0.2),
            _ => {
                let half = 0.5 * (1.0 - t * t).max(0.0).sqrt();
                (-0.15 - half, -0.15 + half)
            }
        };
        if u >= lo && u <= hi {
            let inset = 0.06;
            let window = t < 0.85 && u > lo + inset && u < hi - inset && !(u > -0.14 && u < -0.1);
            return Some(if window { WINDOW } else { pal.body });
        }
    }
    None
}

/// Front face; `s ∈ [-w, w]` across the body, `v` up from the ground.
fn front_face(spec: &IdentitySpec, pal: &Palette, s: f64, v: f64) -> Option<[f64; 3]> {
    let w = spec.half_width();
    let wr = spec.wheel_radius;
    let bottom = spec.body_bottom();
    let top = bottom + spec.body_height();
    let a = s.abs();
    if v >= 0.0 && v < bottom + 0.01 && a >= w - 0.16 && a <= w - 0.03 && v <= 0.9 * wr + bottom {
        return Some(TYRE);
    }
    if a <= w && (bottom..=top).contains(&v) {
        let rel = (v - bottom) / spec.body_height();
        let lamp =
            ((a - (w - 0.12)).powi(2) + (rel - 0.65).powi(2) * spec.body_height().powi(2)).sqrt();
        if lamp < 0.06 {
            return Some(HEADLIGHT);
        }
        if a < 0.18 && (0.2..0.45).contains(&rel) {
            return Some(GRILLE);
        }
        if (rel - spec.stripe_offset).abs() < 0.07 {
            return Some(pal.stripe);
        }
        return Some(pal.body);
    }
    let ch = spec.canopy_height();
    if v > top && v <= top + ch {
        let t = (v - top) / ch;
        let shrink = match spec.canopy {
            0 => 0.8 - 0.3 * t,
            1 => 0.72,
            _ => 0.8 * (1.0 - t * t).max(0.0).sqrt(),
        };
        let half = w * shrink;
        if a <= half {
            let window = t < 0.85 && a < half - 0.06;
            return Some(if window { WINDOW } else { pal.body });
        }
    }
    None
}

/// View scale shared by all placements.
const K: f64 = 0.85;
/// Vertical centre of the sprite in object units.
const V_CENTER: f64 = 0.6;
/// Seam between the foreshortened side and front faces.
const SEAM: f64 = -0.05;

enum Base {
    Frontal,
    Oblique,
    Side,
}

fn base_of(viewpoint: usize) -> (Base, bool) {
    match viewpoint {
        0 => (Base::Frontal, false),
        1 => (Base::Oblique, true),
        2 => (Base::Oblique, false),
        3 => (Base::Side, true),
        _ => (Base::Side, false),
    }
}

/// Colour at view coordinates `(x, y)` (x right, y up) of an unmirrored base view.
fn shade(spec: &IdentitySpec, pal: &Palette, base: &Base, x: f64, y: f64) -> Option<[f64; 3]> {
    let v = y / K + V_CENTER;
    match base {
        Base::Side => side_face(spec, pal, x / K, v),
        Base::Frontal => front_face(spec, pal, x / 1.6, v),
        Base::Oblique => {
            if x < SEAM {
                side_face(spec, pal, 1.0 + (x - SEAM) / (0.45 * K), v)
            } else {
                let w = spec.half_width();
                front_face(spec, pal, (x - SEAM) / 0.6 - w, v)
            }
        }
    }
}

/// Seeded per-sample variation.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    dx: f64,
    dy: f64,
    brightness: f64,
}

impl Jitter {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Jitter {
            dx: rng.random_range(-0.06..=0.06),
            dy: rng.random_range(-0.06..=0.06),
            brightness: rng.random_range(0.9..=1.1),
        }
    }
}

/// Rasterizes identity `spec` at 0-based `viewpoint` into a `size`×`size` image.
pub fn render_sample(
    spec: &IdentitySpec,
    viewpoint: usize,
    jitter_seed: u64,
    size: usize,
) -> Result<RgbImage> {
    if viewpoint >= NUM_VIEWPOINTS {
        return Err(Error::Label(format!(
            "viewpoint {} outside 1..={NUM_VIEWPOINTS}",
            viewpoint + 1
        )));
    }
    let (base, mirrored) = base_of(viewpoint);
    let jitter = Jitter::from_seed(jitter_seed);
    let pal = Palette::of(spec);
    let step = 2.0 / size as f64;
    let sample = |px: f64, py: f64| -> [f64; 3] {
        let x = if mirrored { -px } else { px };
        shade(spec, &pal, &base, x - jitter.dx, py - jitter.dy).unwrap_or(BACKGROUND)
    };
    let mut img = RgbImage::new(size as u32, size as u32);
    for row in 0..size {
        let yc = 1.0 - (row as f64 + 0.5) * step;
        for col in 0..size {
            let xc = (col as f64 + 0.5) * step - 1.0;
            let q = 0.25 * step;
            // Mirroring swaps samples within each pair; addition is commutative.
            let (a, b) = (sample(xc - q, yc + q), sample(xc + q, yc + q));
            let (c, d) = (sample(xc - q, yc - q), sample(xc + q, yc - q));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let mean = ((a[ch] + b[ch]) + (c[ch] + d[ch])) * 0.25;
                px[ch] = (mean * jitter.brightness * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(col as u32, row as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Scales 8-bit RGB to `[-1, 1]`, channel-first.
pub fn image_to_pixels<T: Real>(img: &RgbImage) -> Vec<T> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![T::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = T::of(px[ch] as f64 / 127.5 - 1.0);
        }
    }
    out
}

/// Inverse of [`image_to_pixels`] for a `[3, H, W]` buffer, clamping to `[-1, 1]`.
pub fn pixels_to_image<T: Real>(pixels: &[T], height: usize, width: usize) -> RgbImage {
    let plane = height * width;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let v = |ch: usize| {
            let p = pixels[ch * plane + i]
                .to_f64()
                .unwrap_or(0.0)
                .clamp(-1.0, 1.0);
            ((p + 1.0) * 127.5).round() as u8
        };
        Rgb([v(0), v(1), v(2)])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Auxiliary,
    Standard,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Auxiliary => "auxiliary",
            Split::Standard => "standard",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auxiliary" => Ok(Split::Auxiliary),
            "standard" => Ok(Split::Standard),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row with 0-based labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub identity: usize,
    pub viewpoint: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn identities(&self, split: Split) -> BTreeSet<usize> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.identity)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(["path", "identity", "viewpoint", "split"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.path.clone(),
                (r.identity + 1).to_string(),
                (r.viewpoint + 1).to_string(),
                r.split.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().at(path)
    }

    /// Reads a manifest, validating 1-indexed labels (`viewpoint ≤ num_attrs`).
    pub fn read(path: &Path, num_attrs: usize) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "identity", "viewpoint", "split"] {
            return Err(file_error(path, format!("unexpected header {:?}", header)));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| file_error(path, format!("row {line}: {e}")))?;
            if rec.len() != 4 {
                return Err(file_error(
                    path,
                    format!("row {line}: expected 4 fields, got {}", rec.len()),
                ));
            }
            let label = |k: usize, what: &str| -> Result<usize> {
                rec[k].trim().parse::<usize>().map_err(|_| {
                    file_error(
                        path,
                        format!("row {line}: {what} '{}' is not an integer", &rec[k]),
                    )
                })
            };
            let identity = label(1, "identity")?;
            let viewpoint = label(2, "viewpoint")?;
            if identity == 0 {
                return Err(Error::Label(format!(
                    "{} row {line}: identity labels start at 1",
                    path.display()
                )));
            }
            if viewpoint == 0 || viewpoint > num_attrs {
                return Err(Error::Label(format!(
                    "{} row {line}: viewpoint {viewpoint} outside 1..={num_attrs}",
                    path.display()
                )));
            }
            let split = rec[3]
                .trim()
                .parse()
                .map_err(|e: Error| file_error(path, format!("row {line}: {e}")))?;
            rows.push(ManifestRow {
                path: rec[0].to_string(),
                identity: identity - 1,
                viewpoint: viewpoint - 1,
                split,
            });
        }
        Ok(Manifest { rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    file_error(path, e.to_string())
}

fn file_error(path: &Path, message: String) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message,
    }
}

/// Number of auxiliary identities among `n`; both splits are non-empty when `n ≥ 2`.
pub fn auxiliary_count(n: usize) -> usize {
    if n < 2 {
        return n;
    }
    ((n as f64 * AUXILIARY_SHARE).round() as usize).clamp(1, n - 1)
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Jitter seed of one rendered sample.
pub fn sample_seed(seed: u64, identity: usize, viewpoint: usize, sample: usize) -> u64 {
    mix(mix(mix(seed ^ identity as u64) ^ viewpoint as u64) ^ sample as u64)
}

/// Renders `n_identities × 5 × per_cell` PNGs under `out_dir/images` and writes
/// `out_dir/manifest.csv`, sorted by path.
pub fn build_dataset(
    n_identities: usize,
    per_cell: usize,
    out_dir: &Path,
    seed: u64,
    image_size: usize,
) -> Result<Manifest> {
    if n_identities == 0 || per_cell == 0 || image_size == 0 {
        return Err(Error::Config(
            "identities, samples per cell and image size must be positive".into(),
        ));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let n_aux = auxiliary_count(n_identities);
    let mut rows = Vec::new();
    for id in 0..n_identities {
        let spec = IdentitySpec::from_index(id);
        let split = if id < n_aux {
            Split::Auxiliary
        } else {
            Split::Standard
        };
        for vp in 0..NUM_VIEWPOINTS {
            for s in 0..per_cell {
                let name = format!("id{:04}_vp{}_s{:02}.png", id + 1, vp + 1, s + 1);
                let img = render_sample(&spec, vp, sample_seed(seed, id, vp, s), image_size)?;
                let path = images.join(&name);
                img.save(&path)
                    .map_err(|e| file_error(&path, e.to_string()))?;
                rows.push(ManifestRow {
                    path: format!("images/{name}"),
                    identity: id,
                    viewpoint: vp,
                    split,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { rows };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Decoded images with 0-based labels; pixels `[N, 3, S, S]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_attrs: usize,
    pixels: Vec<f32>,
    pub identities: Vec<usize>,
    pub viewpoints: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(image_size: usize, num_attrs: usize) -> Self {
        Dataset {
            image_size,
            num_attrs,
            pixels: Vec::new(),
            identities: Vec::new(),
            viewpoints: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        pixels: &[f32],
        identity: usize,
        viewpoint: usize,
        split: Split,
    ) -> Result<()> {
        if pixels.len() != self.image_len() {
            return Err(Error::dim(format!(
                "image of {} values, expected {}",
                pixels.len(),
                self.image_len()
            )));
        }
        if viewpoint >= self.num_attrs {
            return Err(Error::Label(format!(
                "viewpoint {} outside 1..={}",
                viewpoint + 1,
                self.num_attrs
            )));
        }
        self.pixels.extend_from_slice(pixels);
        self.identities.push(identity);
        self.viewpoints.push(viewpoint);
        self.splits.push(split);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.image_len()..][..self.image_len()]
    }

    /// Images at `indices` as a `[n, 3, S, S]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|v| T::of(*v as f64)));
        }
        Tensor::new(&[indices.len(), 3, s, s], data).expect("batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.image_size, self.num_attrs);
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.identities.push(self.identities[i]);
            out.viewpoints.push(self.viewpoints[i]);
            out.splits.push(self.splits[i]);
        }
        out
    }

    pub fn split(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|i| self.splits[*i] == split)
            .collect();
        self.subset(&idx)
    }

    /// Sorted distinct identity labels.
    pub fn identity_set(&self) -> Vec<usize> {
        self.identities
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Maps identity labels onto `0..k` in sorted order; returns the original labels.
    pub fn relabel(&mut self) -> Vec<usize> {
        let ids = self.identity_set();
        for y in &mut self.identities {
            *y = ids.binary_search(y).expect("present");
        }
        ids
    }
}

/// Loads every row of a manifest, resizing images to `image_size` if needed.
pub fn load_dataset(manifest_path: &Path, image_size: usize, num_attrs: usize) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path, num_attrs)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut data = Dataset::new(image_size, num_attrs);
    for (i, row) in manifest.rows.iter().enumerate() {
        let path: PathBuf = root.join(&row.path);
        let img = image::open(&path)
            .map_err(|e| file_error(&path, format!("manifest row {}: {e}", i + 2)))?
            .to_rgb8();
        let img = if img.dimensions() == (image_size as u32, image_size as u32) {
            img
        } else {
            imageops::resize(
                &img,
                image_size as u32,
                image_size as u32,
                FilterType::Triangle,
            )
        };
        data.push(
            &image_to_pixels::<f32>(&img),
            row.identity,
            row.viewpoint,
            row.split,
        )?;
    }
    Ok(data)
}

/// Renders a dataset directly in memory, bypassing files.
pub fn render_dataset(
    n_identities: usize,
    per_cell: usize,
    seed: u64,
    image_size: usize,
) -> Result<Dataset> {
    let n_aux = auxiliary_count(n_identities);
    let mut data = Dataset::new(image_size, NUM_VIEWPOINTS);
    for id in 0..n_identities {
        let spec = IdentitySpec::from_index(id);
        let split = if id < n_aux {
            Split::Auxiliary
        } else {
            Split::Standard
        };
        for vp in 0..NUM_VIEWPOINTS {
            for s in 0..per_cell {
                let img = render_sample(&spec, vp, sample_seed(seed, id, vp, s), image_size)?;
                data.push(&image_to_pixels::<f32>(&img), id, vp, split)?;
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &RgbImage, b: &RgbImage) -> f64 {
        a.as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn specs_are_distinct() {
        let specs: Vec<_> = (0..200).map(IdentitySpec::from_index).collect();
        for i in 0..specs.len() {
            for j in 0..i {
                assert_ne!(specs[i], specs[j], "{i} {j}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = IdentitySpec::from_index(7);
        for vp in 0..NUM_VIEWPOINTS {
            let a = render_sample(&spec, vp, 42, 32).unwrap();
            let b = render_sample(&spec, vp, 42, 32).unwrap();
            assert_eq!(a.as_raw(), b.as_raw());
        }
        assert!(render_sample(&spec, 5, 0, 8).is_err());
    }

    #[test]
    fn mirrored_viewpoints() {
        for id in [0, 5, 13] {
            let spec = IdentitySpec::from_index(id);
            for (a, b) in [(3, 4), (1, 2)] {
                let left = render_sample(&spec, a, 9, 64).unwrap();
                let right = render_sample(&spec, b, 9, 64).unwrap();
                assert_eq!(left.as_raw(), imageops::flip_horizontal(&right).as_raw());
                assert_ne!(left.as_raw(), right.as_raw());
            }
        }
    }

    #[test]
    fn adjacent_identities_are_close() {
        let mut adjacent = 0.0;
        let mut distant = 0.0;
        for i in 0..12 {
            let render = |id| render_sample(&IdentitySpec::from_index(id), 4, 3, 64).unwrap();
            adjacent += l2(&render(i), &render(i + 1));
            distant += l2(&render(i), &render(i + 7));
        }
        assert!(adjacent > 0.0);
        assert!(adjacent < distant, "{adjacent} vs {distant}");
    }

    #[test]
    fn pixel_conversion_round_trips() {
        let img = render_sample(&IdentitySpec::from_index(2), 0, 1, 16).unwrap();
        let px = image_to_pixels::<f32>(&img);
        assert!(px.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pixels_to_image(&px, 16, 16).as_raw(), img.as_raw());
    }

    #[test]
    fn build_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(10, 4, dir.path(), 3, 16).unwrap();
        assert_eq!(manifest.rows.len(), 200);
        assert_eq!(
            fs::read_dir(dir.path().join("images")).unwrap().count(),
            200
        );
        let aux = manifest.identities(Split::Auxiliary);
        let std = manifest.identities(Split::Standard);
        assert_eq!((aux.len(), std.len()), (8, 2));
        assert!(aux.is_disjoint(&std));
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.starts_with("path,identity,viewpoint,split\n"));
        assert!(!text.contains('\r'));

        let again = tempfile::tempdir().unwrap();
        build_dataset(10, 4, again.path(), 3, 16).unwrap();
        assert_eq!(
            text,
            fs::read_to_string(again.path().join(MANIFEST_NAME)).unwrap()
        );

        let data = load_dataset(&dir.path().join(MANIFEST_NAME), 16, 5).unwrap();
        assert_eq!(data.len(), 200);
        assert_eq!(data, render_dataset(10, 4, 3, 16).unwrap());
        let resized = load_dataset(&dir.path().join(MANIFEST_NAME), 8, 5).unwrap();
        assert_eq!(resized.image(0).len(), 3 * 64);
    }

    #[test]
    fn load_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(2, 1, dir.path(), 0, 8).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let row = lines[3].clone();
        let fields: Vec<&str> = row.split(',').collect();
        lines[3] = format!("{},{},9,{}", fields[0], fields[1], fields[3]);
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(&path, 8, 5).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        assert!(err.to_string().contains("row 4"), "{err}");

        lines[3] = "images/missing.png,1,1,auxiliary".into();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(&path, 8, 5).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");

        lines[3] = "images/x.png,one,1,auxiliary".into();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(&path, 8, 5).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");
    }

    #[test]
    fn relabel_and_split() {
        let data = render_dataset(5, 1, 0, 8).unwrap();
        let mut std = data.split(Split::Standard);
        assert_eq!(std.identity_set(), vec![4]);
        assert_eq!(std.relabel(), vec![4]);
        assert!(std.identities.iter().all(|y| *y == 0));
        assert_eq!(data.batch::<f64>(&[0, 3]).shape(), [2, 3, 8, 8]);
    }
}
