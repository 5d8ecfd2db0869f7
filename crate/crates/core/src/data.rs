//! Datasets: the built-in synthetic generator, image directories with a
//! label CSV, and packed record files.
//!
//! Pixels are stored as bytes and exposed as `[0, 1]` floats in `(c, y, x)`
//! order. The model does no further normalization, so attack budgets are in
//! pixel units.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, DataSource, RunConfig, ValidConfig};
use crate::error::{MiaError, Result};

const PACK_MAGIC: &[u8; 8] = b"MIAPACK1";

/// In-memory samples with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    /// `(n, channels*size*size)` bytes.
    pub pixels: Array2<u8>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    /// Source file name of each sample, if any.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            channels: self.channels,
            size: self.size,
            num_classes: self.num_classes,
            pixels: self.pixels.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// `[0,1]` images, labels and ids of the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f32>, Vec<usize>, Vec<u64>) {
        let images = Array2::from_shape_fn((idx.len(), self.pixels.ncols()), |(r, c)| {
            f32::from(self.pixels[[idx[r], c]]) / 255.0
        });
        (
            images,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.ids[i]).collect(),
        )
    }

    pub fn all(&self) -> (Array2<f32>, Vec<usize>, Vec<u64>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Digest of pixels and labels, used in run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("dataset {} {} {}\0", self.len(), self.channels, self.size).as_bytes());
        for i in 0..self.len() {
            h.update(self.ids[i].to_le_bytes());
            h.update((self.labels[i] as u32).to_le_bytes());
            h.update(self.pixels.row(i).as_slice().expect("standard layout"));
        }
        hex::encode(h.finalize())
    }
}

/// Train/validation partition.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

fn split_key(seed: u64, id: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.to_le_bytes());
    h.finalize().into()
}

/// Orders samples by a seeded hash of their id and sends the first
/// `round(n * val_fraction)` to validation.
pub fn split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(MiaError::Data(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| (split_key(seed, data.ids[i]), data.ids[i]));
    let n_val = (data.len() as f64 * val_fraction).round() as usize;
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Splits {
        train: data.subset(&train),
        val: data.subset(&val),
    })
}

/// Two-tone palette of a class: a bright and a dark shade of its own hue.
fn palette(class: usize, classes: usize) -> [[f32; 3]; 2] {
    let hue = class as f32 / classes as f32;
    [hsv(hue, 0.85, 0.95), hsv(hue, 0.7, 0.5)]
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Stripe phase of pattern `k` at pixel `(y, x)` inside the object.
fn pattern(k: usize, y: usize, x: usize) -> bool {
    let period = 4;
    match k {
        0 => (y / (period / 2)) % 2 == 0,
        1 => (x / (period / 2)) % 2 == 0,
        2 => ((x + y) / (period / 2)) % 2 == 0,
        3 => ((x + period * 16 - y) / (period / 2)) % 2 == 0,
        _ => ((x / 3) + (y / 3)) % 2 == 0,
    }
}

/// One synthetic image: a noisy grey background with a textured square.
/// The class fixes the palette and one of 5 stripe patterns; size,
/// position, contrast and noise vary per sample.
fn synth_image(class: usize, classes: usize, channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let difficulty: f32 = rng.random();
    let side = rng.random_range((size / 4).max(4)..=(size * 5 / 8).max(5).min(size));
    let y0 = rng.random_range(0..=size - side);
    let x0 = rng.random_range(0..=size - side);
    let bg: f32 = rng.random_range(0.3..0.7);
    let contrast = 1.0 - 0.55 * difficulty;
    let noise = Normal::new(0.0f32, 0.02 + 0.1 * difficulty).unwrap();
    let pal = palette(class, classes);
    let mut out = vec![0u8; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
            for c in 0..channels {
                let mut v = bg;
                if inside {
                    let tone = pal[usize::from(pattern(class % 5, y - y0, x - x0))][c % 3];
                    v = bg + contrast * (tone - bg);
                }
                v += noise.sample(rng);
                out[(c * size + y) * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Class-balanced synthetic dataset; sample `i` has label `i % classes`.
pub fn synth_generate(classes: usize, n: usize, seed: u64, channels: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(MiaError::Data(format!("need n >= classes > 0, got n={n}, classes={classes}")));
    }
    if !(1..=10).contains(&classes) {
        return Err(MiaError::Data(format!("synthetic generator supports 1..=10 classes, got {classes}")));
    }
    let mut pixels = Array2::zeros((n, channels * size * size));
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let img = synth_image(i % classes, classes, channels, size, &mut rng);
        pixels.row_mut(i).assign(&ndarray::ArrayView1::from(&img));
    }
    Ok(Dataset {
        channels,
        size,
        num_classes: classes,
        pixels,
        labels: (0..n).map(|i| i % classes).collect(),
        ids: (0..n as u64).collect(),
        names: (0..n).map(|i| format!("img_{i:05}.png")).collect(),
    })
}

/// Writes PNGs plus `labels.csv` into `dir`, and `dir/data.pack`.
pub fn write_directory(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MiaError::io(dir, e))?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv")).map_err(|e| MiaError::Data(e.to_string()))?;
    labels
        .write_record(["filename", "label"])
        .map_err(|e| MiaError::Data(e.to_string()))?;
    let s = data.size;
    for i in 0..data.len() {
        let row = data.pixels.row(i);
        let mut img = image::RgbImage::new(s as u32, s as u32);
        for y in 0..s {
            for x in 0..s {
                let px = [0, 1, 2].map(|c| row[((c % data.channels) * s + y) * s + x]);
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(&data.names[i]);
        img.save(&path).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
        labels
            .write_record([data.names[i].as_str(), &data.labels[i].to_string()])
            .map_err(|e| MiaError::Data(e.to_string()))?;
    }
    labels.flush().map_err(|e| MiaError::io(dir, e))?;
    write_packed(data, &dir.join("data.pack"))
}

pub fn write_packed(data: &Dataset, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| MiaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| MiaError::io(path, e);
    w.write_all(PACK_MAGIC).map_err(io)?;
    for v in [data.len(), data.channels, data.size, data.num_classes] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for i in 0..data.len() {
        w.write_all(&data.ids[i].to_le_bytes()).map_err(io)?;
        w.write_all(&(data.labels[i] as u32).to_le_bytes()).map_err(io)?;
        w.write_all(data.pixels.row(i).as_slice().unwrap()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_packed(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MiaError::io(path, e))?;
    let bad = |what: &str| MiaError::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != PACK_MAGIC {
        return Err(bad("not a packed record file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, channels, size, classes) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let len = channels * size * size;
    let rec = 12 + len;
    if bytes.len() != 24 + n * rec {
        return Err(bad("truncated or oversized record section"));
    }
    let mut pixels = Array2::zeros((n, len));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let o = 24 + i * rec;
        let id = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let label = u32_at(o + 8);
        if label >= classes {
            return Err(bad(&format!("record {i} (id {id}): label {label} outside [0, {classes})")));
        }
        ids.push(id);
        labels.push(label);
        pixels
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&bytes[o + 12..o + rec]));
    }
    Ok(Dataset {
        channels,
        size,
        num_classes: classes,
        pixels,
        labels,
        ids: ids.clone(),
        names: ids.iter().map(|id| format!("record_{id}")).collect(),
    })
}

/// Reads `labels.csv` and the images it names, resizing to `size`.
pub fn read_directory(dir: &Path, channels: usize, size: usize, num_classes: usize) -> Result<Dataset> {
    let csv_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| MiaError::Data(format!("{}: {e}", csv_path.display())))?;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| MiaError::Data(format!("labels.csv row {row}: {e}")))?;
        if rec.len() != 2 {
            return Err(MiaError::Data(format!("labels.csv row {row}: expected filename,label")));
        }
        let name = rec[0].to_string();
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| MiaError::Data(format!("labels.csv row {row} ({name}): label {:?} is not an integer", &rec[1])))?;
        if label >= num_classes {
            return Err(MiaError::Data(format!(
                "labels.csv row {row} ({name}): label {label} outside [0, {num_classes})"
            )));
        }
        let path = dir.join(&name);
        let img = image::open(&path)
            .map_err(|e| MiaError::Data(format!("labels.csv row {row} ({name}): cannot decode image: {e}")))?
            .to_rgb8();
        let img = if img.dimensions() != (size as u32, size as u32) {
            image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let mut px = vec![0u8; channels * size * size];
        for y in 0..size {
            for x in 0..size {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..channels {
                    px[(c * size + y) * size + x] = p[c.min(2)];
                }
            }
        }
        names.push(name);
        labels.push(label);
        rows.push(px);
    }
    if rows.is_empty() {
        return Err(MiaError::Data(format!("{}: no samples", csv_path.display())));
    }
    let len = channels * size * size;
    let pixels = Array2::from_shape_fn((rows.len(), len), |(i, j)| rows[i][j]);
    Ok(Dataset {
        channels,
        size,
        num_classes,
        pixels,
        labels,
        ids: (0..names.len() as u64).collect(),
        names,
    })
}

/// The configured dataset and its train/validation split.
pub fn load_splits(run: &RunConfig) -> Result<(Dataset, Splits)> {
    let cfg = run.model.validate()?;
    let data = load_dataset(&run.data, &cfg)?;
    let splits = split(&data, run.data.val_fraction, run.data.split_seed)?;
    Ok((data, splits))
}

/// Loads the configured source and checks it against the model geometry.
pub fn load_dataset(spec: &DataConfig, cfg: &ValidConfig) -> Result<Dataset> {
    let data = match &spec.source {
        DataSource::Synthetic { samples, seed } => {
            synth_generate(cfg.num_classes, *samples, *seed, cfg.in_channels, cfg.image_size)?
        }
        DataSource::Directory { path } => {
            read_directory(Path::new(path), cfg.in_channels, cfg.image_size, cfg.num_classes)?
        }
        DataSource::Packed { path } => read_packed(Path::new(path))?,
    };
    if data.channels != cfg.in_channels || data.size != cfg.image_size {
        return Err(MiaError::Data(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.size, data.size, cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    if let Some((i, &l)) = data.labels.iter().enumerate().find(|(_, &l)| l >= cfg.num_classes) {
        return Err(MiaError::Data(format!("sample {} ({}): label {l} outside [0, {})", i, data.names[i], cfg.num_classes)));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seed_stable_and_balanced() {
        let a = synth_generate(10, 203, 7, 3, 32).unwrap();
        let b = synth_generate(10, 203, 7, 3, 32).unwrap();
        let c = synth_generate(10, 203, 8, 3, 32).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_ne!(a.pixels, c.pixels);
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(synth_generate(10, 5, 1, 3, 32).is_err());
    }

    #[test]
    fn split_sizes() {
        let d = synth_generate(10, 5000, 7, 3, 8).unwrap();
        let s = split(&d, 0.1, 3).unwrap();
        assert_eq!(s.val.len(), 500);
        assert_eq!(s.train.len(), 4500);
        let s2 = split(&d, 0.1, 3).unwrap();
        assert_eq!(s.val.ids, s2.val.ids);
        let mut all: Vec<u64> = s.train.ids.iter().chain(&s.val.ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, d.ids);
    }

    #[test]
    fn packed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(10, 30, 1, 3, 32).unwrap();
        let p = dir.path().join("x.pack");
        write_packed(&d, &p).unwrap();
        let r = read_packed(&p).unwrap();
        assert_eq!(r.pixels, d.pixels);
        assert_eq!(r.labels, d.labels);
        assert_eq!(r.ids, d.ids);
    }

    #[test]
    fn directory_round_trip_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(10, 12, 2, 3, 32).unwrap();
        write_directory(&d, dir.path()).unwrap();
        let r = read_directory(dir.path(), 3, 32, 10).unwrap();
        assert_eq!(r.pixels, d.pixels);
        assert_eq!(r.labels, d.labels);
        let text = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        let broken = text.replacen("img_00003.png,3", "img_00003.png,12", 1);
        fs::write(dir.path().join("labels.csv"), broken).unwrap();
        let err = read_directory(dir.path(), 3, 32, 10).unwrap_err().to_string();
        assert!(err.contains("row 5") && err.contains("img_00003.png"), "{err}");
    }
}
