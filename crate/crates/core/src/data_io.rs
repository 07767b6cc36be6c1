//! Paired dataset indexing, image I/O, patch sampling and the per-channel
//! intensity histogram diagnostic.
//!
//! A paired dataset is two directories holding degraded and reference images
//! under identical file stems, e.g. `raw/0001.png` and `ref/0001.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::ImagePlane;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub degraded: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedIndex {
    pub degraded_root: PathBuf,
    pub reference_root: PathBuf,
    pub entries: Vec<PairEntry>,
    /// Files present in only one of the two directories.
    pub skipped: Vec<PathBuf>,
}

impl PairedIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Matches degraded and reference images by file stem, in lexicographic
/// order. Each matched pair must decode to images of equal size.
pub fn index_pairs(degraded_dir: &Path, reference_dir: &Path) -> Result<PairedIndex> {
    for d in [degraded_dir, reference_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", d.display())));
        }
    }
    let by_stem = |paths: Vec<PathBuf>| -> BTreeMap<String, PathBuf> { paths.into_iter().map(|p| (stem(&p), p)).collect() };
    let degraded = by_stem(list_images(degraded_dir)?);
    let mut reference = by_stem(list_images(reference_dir)?);
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, d) in degraded {
        match reference.remove(&id) {
            Some(r) => {
                let dd = image::image_dimensions(&d).map_err(|e| Error::Image { path: d.clone(), source: e })?;
                let rd = image::image_dimensions(&r).map_err(|e| Error::Image { path: r.clone(), source: e })?;
                if dd != rd {
                    return Err(Error::Data(format!(
                        "pair {id}: degraded is {}x{} but reference is {}x{}",
                        dd.0, dd.1, rd.0, rd.1
                    )));
                }
                entries.push(PairEntry { id, degraded: d, reference: r });
            }
            None => skipped.push(d),
        }
    }
    skipped.extend(reference.into_values());
    skipped.sort();
    for s in &skipped {
        log::warn!("skipping unpaired image {}", s.display());
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no matched pairs between {} and {}",
            degraded_dir.display(),
            reference_dir.display()
        )));
    }
    Ok(PairedIndex {
        degraded_root: degraded_dir.to_path_buf(),
        reference_root: reference_dir.to_path_buf(),
        entries,
        skipped,
    })
}

/// Decodes an 8-bit image as RGB with values in [0, 255].
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f32::from).collect();
    ImagePlane::new(h as usize, w as usize, 3, data)
}

/// Writes a [0, 255] RGB plane as an 8-bit image, rounding and clamping.
pub fn save_image(path: &Path, img: &ImagePlane) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("can only save RGB images, got {} channels", img.channels())));
    }
    let bytes: Vec<u8> = img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let out = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer matches dims");
    out.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// A decoded pair held in memory.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub degraded: ImagePlane,
    pub reference: ImagePlane,
}

pub fn load_pair(entry: &PairEntry) -> Result<LoadedPair> {
    let degraded = load_image(&entry.degraded)?;
    let reference = load_image(&entry.reference)?;
    if degraded.dims() != reference.dims() {
        return Err(Error::Data(format!("pair {} has mismatched sizes", entry.id)));
    }
    Ok(LoadedPair {
        id: entry.id.clone(),
        degraded,
        reference,
    })
}

/// Aligned training crop of a pair, normalized to [-1, 1].
#[derive(Debug, Clone)]
pub struct Patch {
    pub degraded: ImagePlane,
    pub reference: ImagePlane,
    pub source: String,
    /// `(top, left)` of the crop.
    pub offset: (usize, usize),
    pub flipped: bool,
}

/// Uniform random `patch_size` crop taken at the same place in both images,
/// horizontally flipped with probability 1/2. Images smaller than the patch
/// are edge-padded first; the result is padded to a multiple of `multiple`.
pub fn sample_patch<R: Rng + ?Sized>(pair: &LoadedPair, patch_size: usize, multiple: usize, rng: &mut R) -> Result<Patch> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let deg = pair.degraded.pad_replicate(1, patch_size, patch_size);
    let reference = pair.reference.pad_replicate(1, patch_size, patch_size);
    let top = rng.random_range(0..=deg.height() - patch_size);
    let left = rng.random_range(0..=deg.width() - patch_size);
    let flipped = rng.random_bool(0.5);
    let cut = |img: &ImagePlane| -> Result<ImagePlane> {
        let c = img.crop(top, left, patch_size, patch_size)?;
        let c = if flipped { c.flipped_horizontal() } else { c };
        Ok(c.normalized().pad_replicate(multiple, 0, 0))
    };
    Ok(Patch {
        degraded: cut(&deg)?,
        reference: cut(&reference)?,
        source: pair.id.clone(),
        offset: (top, left),
        flipped,
    })
}

/// Per-channel intensity histograms averaged over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub bins: usize,
    /// `counts[c][b]`: mean pixel count of channel `c` in bin `b`.
    pub counts: [Vec<f64>; 3],
    /// Mean intensity per channel, in [0, 255].
    pub means: [f64; 3],
    pub images: usize,
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 255.0) as f64 / 256.0 * bins as f64) as usize).min(bins - 1)
}

/// Histogram of in-memory [0, 255] RGB images.
pub fn channel_histogram_of(images: &[ImagePlane], bins: usize) -> Result<ChannelHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if images.is_empty() {
        return Err(Error::Data("no images for histogram".into()));
    }
    let mut counts: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut means = [0.0; 3];
    for img in images {
        if img.channels() != 3 {
            return Err(Error::Shape("histogram needs RGB images".into()));
        }
        for px in img.data().chunks_exact(3) {
            for c in 0..3 {
                counts[c][bin_of(px[c], bins)] += 1.0;
            }
        }
        for (m, v) in means.iter_mut().zip(img.channel_means()) {
            *m += v;
        }
    }
    let n = images.len() as f64;
    for c in 0..3 {
        counts[c].iter_mut().for_each(|v| *v /= n);
        means[c] /= n;
    }
    Ok(ChannelHistogram {
        bins,
        counts,
        means,
        images: images.len(),
    })
}

/// Histogram of image files.
pub fn channel_histogram_files(paths: &[PathBuf], bins: usize) -> Result<ChannelHistogram> {
    if paths.is_empty() {
        return Err(Error::Data("no images for histogram".into()));
    }
    let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    channel_histogram_of(&images, bins)
}

/// Histogram of the degraded images of a paired index.
pub fn channel_histogram(index: &PairedIndex, bins: usize) -> Result<ChannelHistogram> {
    let paths: Vec<PathBuf> = index.entries.iter().map(|e| e.degraded.clone()).collect();
    channel_histogram_files(&paths, bins)
}

impl ChannelHistogram {
    /// Comma-separated table: one row per bin, then one `mean` row.
    pub fn to_table(&self) -> String {
        let width = 256.0 / self.bins as f64;
        let mut out = String::from("bin,low,high,red,green,blue\n");
        for b in 0..self.bins {
            out.push_str(&format!(
                "{b},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
                b as f64 * width,
                (b + 1) as f64 * width,
                self.counts[0][b],
                self.counts[1][b],
                self.counts[2][b]
            ));
        }
        out.push_str(&format!(
            "mean,,,{:.3},{:.3},{:.3}\n",
            self.means[0], self.means[1], self.means[2]
        ));
        out
    }

    /// Line plot of the three normalized histograms on a white canvas.
    pub fn plot(&self, width: u32, height: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let peak = self
            .counts
            .iter()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b))
            .max(f64::MIN_POSITIVE);
        let colors = [Rgb([220, 40, 40]), Rgb([40, 160, 60]), Rgb([40, 70, 220])];
        let to_xy = |b: usize, v: f64| {
            let x = b as f64 / (self.bins - 1) as f64 * (width - 1) as f64;
            let y = (1.0 - v / peak) * (height - 1) as f64;
            (x, y)
        };
        for (c, color) in colors.iter().enumerate() {
            for b in 1..self.bins {
                let (x0, y0) = to_xy(b - 1, self.counts[c][b - 1]);
                let (x1, y1) = to_xy(b, self.counts[c][b]);
                let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
                for s in 0..=steps {
                    let f = s as f64 / steps as f64;
                    let x = (x0 + f * (x1 - x0)).round() as u32;
                    let y = (y0 + f * (y1 - y0)).round() as u32;
                    img.put_pixel(x.min(width - 1), y.min(height - 1), *color);
                }
            }
        }
        img
    }

    pub fn save_plot(&self, path: &Path) -> Result<()> {
        self.plot(640, 360)
            .save(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
    }
}
