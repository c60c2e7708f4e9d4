//! Image datasets: a procedural generator, binary PPM/PGM files, and
//! per-channel standardization.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[H, W, C]` images.
    pub images: Vec<Tensor<f32>>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extents(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| contract_err!("dataset has no labels"))
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.extents().map_or(1, |s| s[2]);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for img in &self.images {
            for px in img.data().chunks(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
            }
            count += img.numel() / c;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() < 1e-6 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn apply_stats(&mut self, stats: &ChannelStats) {
        let c = stats.mean.len();
        for img in &mut self.images {
            for px in img.data_mut().chunks_mut(c) {
                for (k, v) in px.iter_mut().enumerate() {
                    *v = ((*v as f64 - stats.mean[k]) / stats.std[k]) as f32;
                }
            }
        }
    }

    /// Standardizes with this dataset's own statistics and returns them.
    pub fn standardize(&mut self) -> ChannelStats {
        let stats = self.channel_stats();
        self.apply_stats(&stats);
        stats
    }

    /// Deterministic split; the first part holds `round(frac * len)` images.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = (frac * self.len() as f64).round() as usize;
        let pick = |idx: &[usize]| Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        };
        (pick(&order[..k]), pick(&order[k..]))
    }
}

/// Per-channel mean and (guarded) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub channels: usize,
    /// At most [`SYNTH_CLASSES`].
    pub classes: usize,
    pub count: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 16,
            channels: 3,
            classes: 5,
            count: 256,
            noise: 0.05,
        }
    }
}

/// Horizontal bars, vertical bars, checkerboard, ring, diagonal cross.
pub const SYNTH_CLASSES: usize = 5;

fn pattern<R: Rng + ?Sized>(class: usize, s: usize, rng: &mut R) -> Vec<bool> {
    let sf = s as f64;
    let mut mask = vec![false; s * s];
    match class {
        0 | 1 => {
            let period = [4usize, 6][rng.random_range(0..2)];
            let phase = rng.random_range(0..period);
            for y in 0..s {
                for x in 0..s {
                    let t = if class == 0 { y } else { x };
                    mask[y * s + x] = (t + phase) % period < period / 2;
                }
            }
        }
        2 => {
            let cell = [2usize, 4][rng.random_range(0..2)];
            let (py, px) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..s {
                for x in 0..s {
                    mask[y * s + x] = ((y + py) / cell + (x + px) / cell) % 2 == 0;
                }
            }
        }
        3 => {
            let cy = rng.random_range(0.3 * sf..0.7 * sf);
            let cx = rng.random_range(0.3 * sf..0.7 * sf);
            let r = rng.random_range(0.2 * sf..0.35 * sf);
            for y in 0..s {
                for x in 0..s {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    mask[y * s + x] = (d - r).abs() < 1.0;
                }
            }
        }
        _ => {
            let cy = rng.random_range(0.3 * sf..0.7 * sf);
            let cx = rng.random_range(0.3 * sf..0.7 * sf);
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    mask[y * s + x] = (dy - dx).abs() < 1.0 || (dy + dx).abs() < 1.0;
                }
            }
        }
    }
    mask
}

/// Procedural classes with random phase, placement, colours and noise;
/// labels cycle through the classes so counts stay balanced.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > SYNTH_CLASSES {
        return Err(config_err!("synthetic classes must be in 1..={SYNTH_CLASSES}, got {}", spec.classes));
    }
    if spec.size < 4 || spec.channels == 0 {
        return Err(config_err!("synthetic images need size >= 4 and at least one channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| config_err!("noise: {e}"))?;
    let (s, c) = (spec.size, spec.channels);
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        let mask = pattern(class, s, &mut rng);
        let (fg, bg) = loop {
            let fg: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let bg: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let contrast = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / c as f64;
            if contrast > 0.3 {
                break (fg, bg);
            }
        };
        let mut data = Vec::with_capacity(s * s * c);
        for &on in &mask {
            let colour = if on { &fg } else { &bg };
            for &v in colour {
                data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            }
        }
        images.push(Tensor::new(vec![s, s, c], data)?);
        labels.push(class);
    }
    Ok(Dataset {
        names: (0..spec.count).map(|i| format!("synth_{i:05}")).collect(),
        images,
        labels: Some(labels),
        num_classes: spec.classes,
    })
}

/// Binary PPM (3 channels) or PGM (1 channel), 8-bit.
pub fn write_pnm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let magic = match s.get(2) {
        Some(1) => "P5",
        Some(3) => "P6",
        _ => return Err(contract_err!("PNM needs an [H, W, 1] or [H, W, 3] image, got {s:?}")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM/PPM into `[H, W, C]` values scaled to [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::format(path, msg))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        fields[k] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("malformed header: bad {name}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header: missing separator before pixel data".into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("malformed header: {w}x{h} maxval {maxval}"));
    }
    let wide = maxval > 255;
    let n = w * h * channels;
    let need = n * if wide { 2 } else { 1 };
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(format!("pixel data truncated: {} of {need} bytes", body.len()));
    }
    let scale = maxval as f32;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
            .collect()
    } else {
        body[..need].iter().map(|&b| b as f32 / scale).collect()
    };
    Tensor::new(vec![h, w, channels], data).map_err(|e| e.to_string())
}

/// All `.pgm`/`.ppm` files in `dir` (sorted by name), with optional
/// `labels.csv` rows of `filename,class`.
pub fn load_images(dir: &Path, standardize: bool) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if matches!(p.extension().and_then(|x| x.to_str()), Some("pgm" | "ppm")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no .pgm or .ppm files"));
    }
    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut by_shape: BTreeMap<Vec<usize>, Vec<String>> = BTreeMap::new();
    for f in &files {
        let img = read_pnm(f)?;
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        by_shape.entry(img.shape().to_vec()).or_default().push(name.clone());
        images.push(img);
        names.push(name);
    }
    if by_shape.len() > 1 {
        let listing: Vec<String> = by_shape
            .iter()
            .map(|(s, n)| format!("{s:?}: {}", n.join(", ")))
            .collect();
        return Err(Error::format(dir, format!("mixed image extents:\n{}", listing.join("\n"))));
    }
    let labels_path = dir.join("labels.csv");
    let (labels, num_classes) = if labels_path.exists() {
        let (l, k) = read_labels(&labels_path, &names)?;
        (Some(l), k)
    } else {
        (None, 0)
    };
    let mut ds = Dataset {
        images,
        labels,
        num_classes,
        names,
    };
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn read_labels(path: &Path, names: &[String]) -> Result<(Vec<usize>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, class) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected filename,class", i + 1)))?;
        match class.trim().parse::<usize>() {
            Ok(c) => {
                map.insert(file.trim().to_string(), c);
            }
            Err(_) if i == 0 => {} // header
            Err(_) => return Err(Error::format(path, format!("line {}: bad class {class:?}", i + 1))),
        }
    }
    let mut labels = Vec::with_capacity(names.len());
    let mut missing = Vec::new();
    for n in names {
        match map.get(n) {
            Some(&c) => labels.push(c),
            None => missing.push(n.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::format(path, format!("no label for: {}", missing.join(", "))));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::format(path, format!("classes must cover 0..{k} densely; {gap} is unused")));
    }
    Ok((labels, k))
}
