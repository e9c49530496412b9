#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use shortcut_audit::corpus::{Corpus, EmbeddingMatrix, Flank, ImageRecord, Split, Variant};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_shortcut-audit")
}

pub fn run(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("RAYON_NUM_THREADS", t.to_string());
    }
    cmd.output().expect("binary runs")
}

pub fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Identity sizes, `d`-dimensional clustered embeddings and every variant.
/// Images alternate left/right flanks within an identity.
pub struct Synthetic {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
}

impl Synthetic {
    pub fn new(sizes: Vec<usize>, d: usize, seed: u64) -> Self {
        Synthetic {
            sizes,
            d,
            seed,
            variants: Variant::ALL.to_vec(),
        }
    }

    pub fn only(mut self, variants: &[Variant]) -> Self {
        self.variants = variants.to_vec();
        self
    }

    pub fn build(&self, model: &str) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.d;
        let mut records = Vec::new();
        let mut ids = Vec::new();
        let mut fg: Vec<Vec<f64>> = Vec::new();
        for (k, &size) in self.sizes.iter().enumerate() {
            let centre = gauss(&mut rng, d);
            for j in 0..size {
                let id = format!("img_{k:03}_{j:03}");
                let flank = if j % 2 == 0 { Flank::Left } else { Flank::Right };
                records.push(ImageRecord::new(id.as_str(), format!("id{k:03}"), Split::Test).with_flank(flank));
                let noise = gauss(&mut rng, d);
                fg.push(centre.iter().zip(&noise).map(|(c, e)| c + 0.6 * e).collect());
                ids.push(id);
            }
        }
        let mut corpus = Corpus::new(records).unwrap();
        for &variant in &self.variants {
            let (signal, jitter) = match variant {
                Variant::Foreground => (1.0, 0.0),
                Variant::FullRgb => (1.0, 0.2),
                Variant::Mirror => (1.0, 0.3),
                Variant::Silhouette => (0.4, 1.0),
                Variant::BgSilhouette => (0.3, 1.0),
                Variant::Inpainted => (0.25, 1.0),
            };
            let mut data = Vec::with_capacity(ids.len() * d);
            for row in &fg {
                let noise = gauss(&mut rng, d);
                data.extend(row.iter().zip(&noise).map(|(x, e)| (signal * x + jitter * e) as f32));
            }
            let m = EmbeddingMatrix::new(model, variant, d, ids.clone(), data).unwrap();
            corpus.add_embedding(m).unwrap();
        }
        corpus
    }
}

/// Every file under `dir`, keyed by its path relative to `dir`.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Cut-out style PNGs: an opaque ellipse of noisy colour on a transparent
/// background.
pub fn write_cutouts(dir: &Path, n: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (w, h) = (rng.random_range(20..40u32), rng.random_range(16..30u32));
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (rx, ry) = (cx * rng.random_range(0.5..0.95), cy * rng.random_range(0.5..0.95));
        let mut img = RgbaImage::new(w, h);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let inside = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0;
            let notch = x as f64 > cx && (y as f64 - cy).abs() < ry * 0.2;
            let alpha = if inside && !notch { 255 } else { 0 };
            *p = Rgba([rng.random(), rng.random(), rng.random(), alpha]);
        }
        img.save(dir.join(format!("cut_{i:02}.png"))).unwrap();
    }
}
