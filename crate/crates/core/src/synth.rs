//! Synthetic desk-scale dataset: 12 procedurally distinct texture classes
//! with per-class tag sets and a seed synonym map.
//!
//! The real painting corpus cannot be bundled, so this generator is the
//! substrate for end-to-end runs and CI. Classes differ in both palette and
//! pattern statistics; raw tags are emitted as noisy surface forms so the
//! canonicalization path does real work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_manifest, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::preprocess::RasterImage;
use crate::tags::SynonymMap;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub per_class: usize,
    pub image_side: u32,
    pub seed: u64,
    /// Draw a clean uniform frame on roughly half the images (the trim
    /// heuristic's target).
    pub with_frames: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { per_class: 30, image_side: 224, seed: 0, with_frames: true }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub class_names: Vec<String>,
    pub images: usize,
    pub manifest_path: PathBuf,
    pub synonyms_path: PathBuf,
}

/// The 12 texture classes and their canonical tags.
const CLASSES: [(&str, &[&str]); 12] = [
    ("stripes_h", &["stripes", "horizontal_bands", "red", "gold"]),
    ("stripes_v", &["stripes", "vertical_bands", "blue", "white"]),
    ("checker", &["checkerboard", "grid", "green", "black"]),
    ("dots", &["dots", "circles", "ochre", "spotted_field"]),
    ("rings", &["rings", "circles", "teal", "concentric"]),
    ("diagonal", &["stripes", "diagonal_bands", "purple", "yellow"]),
    ("waves", &["waves", "curves", "blue", "green"]),
    ("grid_lines", &["grid", "lines", "white", "charcoal"]),
    ("noise_fine", &["speckle", "dense_texture", "magenta", "noise"]),
    ("blocks", &["blocks", "patches", "orange", "brown"]),
    ("gradient", &["gradient", "smooth", "pink", "cyan"]),
    ("triangles", &["triangles", "zigzag", "olive", "cream"]),
];

/// Surface forms the generator may emit instead of a canonical tag.
fn synonym_table() -> Vec<(&'static str, &'static str)> {
    vec![
        ("striped", "stripes"),
        ("banding", "stripes"),
        ("spots", "dots"),
        ("dotted", "dots"),
        ("chequered", "checkerboard"),
        ("crimson", "red"),
        ("scarlet", "red"),
        ("golden", "gold"),
        ("navy", "blue"),
        ("circle", "circles"),
        ("wavy", "waves"),
        ("gridlines", "grid"),
        ("speckled", "speckle"),
        ("blocky", "blocks"),
        ("smooth_fade", "gradient"),
        ("bordered", "framed"),
        ("triangular", "triangles"),
    ]
}

pub fn class_names() -> Vec<String> {
    CLASSES.iter().map(|(n, _)| n.to_string()).collect()
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i16) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let delta = rng.random_range(-amount..=amount);
        out[c] = (base[c] as i16 + delta).clamp(0, 255) as u8;
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn paint(class_idx: usize, rng: &mut ChaCha8Rng, side: u32) -> RasterImage {
    let s = side as i64;
    let mut pattern: Box<dyn FnMut(i64, i64) -> [u8; 3]> = match class_idx {
        0 => {
            let a = jitter(rng, [200, 40, 40], 25);
            let b = jitter(rng, [230, 180, 60], 25);
            let band = rng.random_range(s / 16..=s / 9).max(2);
            Box::new(move |_x, y| if (y / band) % 2 == 0 { a } else { b })
        }
        1 => {
            let a = jitter(rng, [40, 70, 200], 25);
            let b = jitter(rng, [235, 235, 235], 15);
            let band = rng.random_range(s / 16..=s / 9).max(2);
            Box::new(move |x, _y| if (x / band) % 2 == 0 { a } else { b })
        }
        2 => {
            let a = jitter(rng, [40, 150, 60], 25);
            let b = jitter(rng, [25, 25, 25], 15);
            let cell = rng.random_range(s / 12..=s / 7).max(2);
            Box::new(move |x, y| if (x / cell + y / cell) % 2 == 0 { a } else { b })
        }
        3 => {
            let bg = jitter(rng, [210, 160, 70], 20);
            let dot = jitter(rng, [70, 40, 20], 20);
            let spacing = rng.random_range(s / 12..=s / 8).max(4);
            let radius = spacing as f64 * rng.random_range(0.25..0.38);
            Box::new(move |x, y| {
                let dx = (x % spacing - spacing / 2) as f64;
                let dy = (y % spacing - spacing / 2) as f64;
                if (dx * dx + dy * dy).sqrt() < radius {
                    dot
                } else {
                    bg
                }
            })
        }
        4 => {
            let a = jitter(rng, [30, 140, 150], 25);
            let b = jitter(rng, [240, 235, 210], 15);
            let cx = s / 2 + rng.random_range(-s / 8..=s / 8);
            let cy = s / 2 + rng.random_range(-s / 8..=s / 8);
            let width = rng.random_range(s / 18..=s / 10).max(2) as f64;
            Box::new(move |x, y| {
                let d = (((x - cx).pow(2) + (y - cy).pow(2)) as f64).sqrt();
                if (d / width) as i64 % 2 == 0 {
                    a
                } else {
                    b
                }
            })
        }
        5 => {
            let a = jitter(rng, [120, 50, 160], 25);
            let b = jitter(rng, [230, 210, 60], 25);
            let band = rng.random_range(s / 14..=s / 8).max(2);
            Box::new(move |x, y| if ((x + y) / band) % 2 == 0 { a } else { b })
        }
        6 => {
            let a = jitter(rng, [40, 90, 190], 25);
            let b = jitter(rng, [60, 170, 90], 25);
            let band = rng.random_range(s / 14..=s / 9).max(2) as f64;
            let lambda = rng.random_range(s / 4..=s / 2) as f64;
            let amp = rng.random_range(s / 24..=s / 12) as f64;
            Box::new(move |x, y| {
                let shifted = y as f64 + amp * (x as f64 * std::f64::consts::TAU / lambda).sin();
                if (shifted / band) as i64 % 2 == 0 {
                    a
                } else {
                    b
                }
            })
        }
        7 => {
            let bg = jitter(rng, [235, 230, 220], 10);
            let line = jitter(rng, [45, 45, 55], 15);
            let gap = rng.random_range(s / 14..=s / 8).max(3);
            let thick = (gap / 6).max(1);
            Box::new(move |x, y| if x % gap < thick || y % gap < thick { line } else { bg })
        }
        8 => {
            let base = jitter(rng, [170, 60, 150], 20);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            Box::new(move |_x, _y| jitter(&mut noise_rng, base, 60))
        }
        9 => {
            let a = jitter(rng, [220, 120, 40], 20);
            let b = jitter(rng, [110, 70, 40], 20);
            let cell = rng.random_range(s / 8..=s / 5).max(4);
            let salt: u64 = rng.random();
            Box::new(move |x, y| {
                let h = splitmix64(salt ^ ((x / cell) as u64) << 32 ^ (y / cell) as u64);
                if h.is_multiple_of(2) {
                    a
                } else {
                    b
                }
            })
        }
        10 => {
            let a = jitter(rng, [230, 120, 170], 20);
            let b = jitter(rng, [70, 200, 220], 20);
            Box::new(move |x, _y| {
                let t = x as f64 / s as f64;
                [
                    (a[0] as f64 * (1.0 - t) + b[0] as f64 * t) as u8,
                    (a[1] as f64 * (1.0 - t) + b[1] as f64 * t) as u8,
                    (a[2] as f64 * (1.0 - t) + b[2] as f64 * t) as u8,
                ]
            })
        }
        _ => {
            let a = jitter(rng, [120, 130, 50], 20);
            let b = jitter(rng, [240, 235, 215], 10);
            let band = rng.random_range(s / 12..=s / 7).max(4);
            let phase = rng.random_range(0..band);
            Box::new(move |x, y| {
                let fy = (y % band) as f64 / band as f64;
                let tx = ((x + phase) % (2 * band) - band).abs() as f64 / band as f64;
                if fy < tx {
                    a
                } else {
                    b
                }
            })
        }
    };

    let mut data = Vec::with_capacity((side * side * 3) as usize);
    for y in 0..s {
        for x in 0..s {
            // Mild pixel noise keeps content rows above the trim
            // heuristic's uniformity tolerance.
            let px = jitter(rng, pattern(x, y), 6);
            data.extend_from_slice(&px);
        }
    }
    RasterImage::from_pixels(side, side, data).expect("valid dimensions")
}

fn draw_frame(img: &RasterImage, width: u32, color: [u8; 3]) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let in_frame = x < width || y < width || x >= w - width || y >= h - width;
            data.extend_from_slice(&if in_frame { color } else { img.pixel(x, y) });
        }
    }
    RasterImage::from_pixels(w, h, data).expect("same dimensions")
}

/// Emits a raw (pre-canonicalization) surface form for a canonical tag.
fn surface_form(rng: &mut ChaCha8Rng, canonical: &str, reverse: &BTreeMap<&str, Vec<&str>>) -> String {
    let mut tag = match reverse.get(canonical) {
        Some(surfaces) if rng.random_bool(0.4) => {
            surfaces[rng.random_range(0..surfaces.len())].to_string()
        }
        _ => canonical.to_string(),
    };
    if rng.random_bool(0.2) {
        tag = tag.replace('_', " ");
    }
    if rng.random_bool(0.1) {
        tag = tag.to_uppercase();
    } else if rng.random_bool(0.3) {
        let mut chars = tag.chars();
        if let Some(first) = chars.next() {
            tag = first.to_uppercase().collect::<String>() + chars.as_str();
        }
    }
    tag
}

/// Generates the dataset under `out_dir`: `images/<class>/*.png`,
/// `manifest.csv` (splits unassigned), and `synonyms.txt`. Deterministic for
/// a given config.
pub fn generate(out_dir: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    if config.per_class == 0 {
        return Err(Error::InvalidConfig("per_class must be >= 1".into()));
    }
    if config.image_side < 32 {
        return Err(Error::InvalidConfig("image_side must be >= 32".into()));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;

    let mut reverse: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (surface, canonical) in synonym_table() {
        reverse.entry(canonical).or_default().push(surface);
    }

    let mut records = Vec::new();
    for (class_idx, (class, tags)) in CLASSES.iter().enumerate() {
        let class_dir = images_dir.join(class);
        std::fs::create_dir_all(&class_dir)
            .map_err(|e| Error::io(format!("creating {}", class_dir.display()), e))?;
        for k in 0..config.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
                config.seed ^ splitmix64((class_idx * 100_000 + k) as u64),
            ));
            let mut img = paint(class_idx, &mut rng, config.image_side);
            let mut framed = false;
            if config.with_frames && rng.random_bool(0.5) {
                let width = rng.random_range(config.image_side / 32..=config.image_side / 16).max(2);
                let shade = if rng.random_bool(0.5) { [18, 16, 14] } else { [243, 240, 235] };
                img = draw_frame(&img, width, shade);
                framed = true;
            }

            let id = format!("{class}-{k:03}");
            let rel = PathBuf::from(format!("images/{class}/{id}.png"));
            img.save(&out_dir.join(&rel))?;

            let mut raw_tags: Vec<String> =
                tags.iter().map(|t| surface_form(&mut rng, t, &reverse)).collect();
            raw_tags.push(surface_form(&mut rng, "pattern", &reverse));
            if framed {
                raw_tags.push(surface_form(&mut rng, "framed", &reverse));
            }
            if rng.random_bool(0.3) {
                raw_tags.push(surface_form(&mut rng, "high_contrast", &reverse));
            }
            // An occasional duplicate surface form; canonicalization folds it.
            if rng.random_bool(0.25) {
                let pick = raw_tags[rng.random_range(0..raw_tags.len())].clone();
                raw_tags.push(pick);
            }

            records.push(ImageRecord {
                id,
                path: rel,
                class_label: class.to_string(),
                raw_tags,
                split: Split::Unassigned,
                crop: None,
            });
        }
    }

    let manifest = DatasetManifest::from_records(records)?;
    let manifest_path = out_dir.join("manifest.csv");
    save_manifest(&manifest, &manifest_path)?;

    let synonyms = SynonymMap::from_pairs(synonym_table())?;
    let synonyms_path = out_dir.join("synonyms.txt");
    synonyms.write_file(&synonyms_path)?;

    Ok(SynthSummary {
        class_names: class_names(),
        images: manifest.len(),
        manifest_path,
        synonyms_path,
    })
}
