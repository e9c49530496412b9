//! Binary masks from RGBA alpha: solidity against a rasterised convex hull,
//! solidity summaries, and the diagnostic image variants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;

/// A pixel is foreground iff its alpha is at least this value.
pub const ALPHA_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "{} mask cells for a {width} x {height} grid",
                data.len()
            )));
        }
        Ok(BinaryMask { width, height, data })
    }

    /// Mask with exactly the listed `(x, y)` pixels set.
    pub fn from_points(width: u32, height: u32, points: &[(u32, u32)]) -> Result<Self> {
        let mut data = vec![false; width as usize * height as usize];
        for &(x, y) in points {
            if x >= width || y >= height {
                return Err(Error::invalid(format!("pixel ({x}, {y}) outside {width} x {height}")));
            }
            data[(y * width + x) as usize] = true;
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn from_alpha(img: &RgbaImage) -> Self {
        BinaryMask {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[3] >= ALPHA_THRESHOLD).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn area(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    /// Foreground pixel centres as `(x, y)`.
    pub fn points(&self) -> Vec<(i64, i64)> {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i % w) as i64, (i / w) as i64))
            .collect()
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, collinear
/// points dropped. Degenerate inputs return one or two vertices.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut p = points.to_vec();
    p.sort_unstable();
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * p.len());
    for &pt in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0 {
            hull.pop();
        }
        hull.push(pt);
    }
    let lower_len = hull.len() + 1;
    for &pt in p.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0 {
            hull.pop();
        }
        hull.push(pt);
    }
    hull.pop();
    hull
}

fn div_floor(a: i128, b: i128) -> i128 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

fn div_ceil(a: i128, b: i128) -> i128 {
    -div_floor(-a, b)
}

/// Number of integer points inside or on the polygon `hull` (convex, any
/// orientation, possibly degenerate). Each row is intersected exactly with
/// rational arithmetic.
pub fn hull_pixel_count(hull: &[(i64, i64)]) -> u64 {
    match hull.len() {
        0 => return 0,
        1 => return 1,
        _ => {}
    }
    let ymin = hull.iter().map(|p| p.1).min().unwrap();
    let ymax = hull.iter().map(|p| p.1).max().unwrap();
    let mut count = 0u64;
    for y in ymin..=ymax {
        // x-extent as fractions num/den with den > 0.
        let mut lo: Option<(i128, i128)> = None;
        let mut hi: Option<(i128, i128)> = None;
        let mut push = |num: i128, den: i128| {
            let less = |a: (i128, i128), b: (i128, i128)| a.0 * b.1 < b.0 * a.1;
            if lo.is_none_or(|l| less((num, den), l)) {
                lo = Some((num, den));
            }
            if hi.is_none_or(|h| less(h, (num, den))) {
                hi = Some((num, den));
            }
        };
        for k in 0..hull.len() {
            let (x1, y1) = hull[k];
            let (x2, y2) = hull[(k + 1) % hull.len()];
            if y < y1.min(y2) || y > y1.max(y2) {
                continue;
            }
            if y1 == y2 {
                push(x1 as i128, 1);
                push(x2 as i128, 1);
            } else {
                let (dy, num) = (
                    (y2 - y1) as i128,
                    (x1 as i128) * ((y2 - y1) as i128) + ((y - y1) as i128) * ((x2 - x1) as i128),
                );
                if dy < 0 {
                    push(-num, -dy);
                } else {
                    push(num, dy);
                }
            }
        }
        if let (Some(l), Some(h)) = (lo, hi) {
            let first = div_ceil(l.0, l.1);
            let last = div_floor(h.0, h.1);
            if last >= first {
                count += (last - first + 1) as u64;
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub image_id: String,
    pub area: u64,
    pub hull_area: u64,
    pub solidity: f64,
    pub width: u32,
    pub height: u32,
}

/// Area over rasterised hull area; fails on an empty mask.
pub fn solidity(image_id: &str, mask: &BinaryMask) -> Result<MaskStats> {
    let points = mask.points();
    if points.is_empty() {
        return Err(Error::invalid(format!("empty mask for {image_id}")));
    }
    let area = points.len() as u64;
    let hull_area = hull_pixel_count(&convex_hull(&points));
    debug_assert!(hull_area >= area);
    Ok(MaskStats {
        image_id: image_id.to_string(),
        area,
        hull_area,
        solidity: area as f64 / hull_area as f64,
        width: mask.width,
        height: mask.height,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoliditySummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// `(threshold, fraction strictly below it)`
    pub frac_below: Vec<(f64, f64)>,
}

pub fn solidity_summary(values: &[f64], thresholds: &[f64]) -> Result<SoliditySummary> {
    if values.is_empty() {
        return Err(Error::invalid("no solidity values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Ok(SoliditySummary {
        n,
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        min: v[0],
        max: v[n - 1],
        frac_below: thresholds
            .iter()
            .map(|&t| (t, v.iter().filter(|&&x| x < t).count() as f64 / n as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variants {
    /// Original RGB inside the mask, zero outside; alpha untouched.
    pub foreground: RgbaImage,
    /// White foreground on black, opaque.
    pub silhouette: RgbaImage,
    /// Original RGB with the foreground blacked out, opaque.
    pub bg_silhouette: RgbaImage,
    /// Horizontal flip of `foreground`.
    pub mirror: RgbaImage,
}

pub fn variants(img: &RgbaImage) -> Result<Variants> {
    let mask = BinaryMask::from_alpha(img);
    if mask.area() == 0 {
        return Err(Error::invalid("empty foreground"));
    }
    let (w, h) = img.dimensions();
    let mut foreground = RgbaImage::new(w, h);
    let mut silhouette = RgbaImage::new(w, h);
    let mut bg_silhouette = RgbaImage::new(w, h);
    for (x, y, p) in img.enumerate_pixels() {
        let [r, g, b, a] = p.0;
        if mask.get(x, y) {
            foreground.put_pixel(x, y, Rgba([r, g, b, a]));
            silhouette.put_pixel(x, y, Rgba([255, 255, 255, 255]));
            bg_silhouette.put_pixel(x, y, Rgba([0, 0, 0, 255]));
        } else {
            foreground.put_pixel(x, y, Rgba([0, 0, 0, a]));
            silhouette.put_pixel(x, y, Rgba([0, 0, 0, 255]));
            bg_silhouette.put_pixel(x, y, Rgba([r, g, b, 255]));
        }
    }
    let mirror = image::imageops::flip_horizontal(&foreground);
    Ok(Variants {
        foreground,
        silhouette,
        bg_silhouette,
        mirror,
    })
}

/// Loads an 8-bit RGBA PNG; images without an alpha channel are rejected.
pub fn load_rgba_png(path: impl AsRef<Path>) -> Result<RgbaImage> {
    let path = path.as_ref();
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| img_err(e.to_string()))?;
    if !img.color().has_alpha() {
        return Err(img_err("missing alpha channel".into()));
    }
    Ok(img.to_rgba8())
}

pub fn save_png(img: &RgbaImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub const VARIANT_DIRS: [&str; 4] = ["foreground", "silhouette", "bg_silhouette", "mirror"];

/// Processes every `*.png` in `input`: writes the four variants under
/// `output/<variant>/<image_id>.png` and returns per-image mask statistics
/// sorted by image id.
pub fn process_directory(exec: Execution, input: &Path, output: &Path) -> Result<Vec<MaskStats>> {
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    for dir in VARIANT_DIRS {
        let d = output.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let results = exec.map(files.len(), |i| -> Result<MaskStats> {
        let path = &files[i];
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("unusable file name {}", path.display())))?;
        let img = load_rgba_png(path)?;
        let v = variants(&img).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        for (dir, im) in VARIANT_DIRS
            .iter()
            .zip([&v.foreground, &v.silhouette, &v.bg_silhouette, &v.mirror])
        {
            save_png(im, output.join(dir).join(format!("{id}.png")))?;
        }
        solidity(id, &BinaryMask::from_alpha(&img))
    });
    let mut stats: Vec<MaskStats> = results.into_iter().collect::<Result<_>>()?;
    stats.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(stats)
}

/// `image_id,area,hull_area,solidity`
pub fn write_stats_csv<W: Write>(stats: &[MaskStats], mut w: W) -> std::io::Result<()> {
    writeln!(w, "image_id,area,hull_area,solidity")?;
    for s in stats {
        writeln!(w, "{},{},{},{:.6}", s.image_id, s.area, s.hull_area, s.solidity)?;
    }
    Ok(())
}
