//! Dataset loading, preprocessing, splitting, pair/triplet sampling, and a
//! synthetic dataset generator.
//!
//! On-disk layout: `root/<class_dir>/*.ppm`, with the sorted class directory
//! order defining class ids. Images are binary PPM (P6, maxval 255).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel normalization statistics, computed from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
}

impl Stats {
    pub fn identity() -> Self {
        Stats {
            mean: [0.0; 3],
            var: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub class: usize,
    pub split: Split,
    pub path: String,
}

/// Labeled image records plus split assignment, class table, and
/// normalization stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ManifestRecord>,
    pub stats: Stats,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_records(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Record indices of one split grouped by class id.
    pub fn split_by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes.len()];
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                by_class[r.class].push(i);
            }
        }
        by_class
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad manifest json: {e}")))
    }

    /// Drops every record of the named class and removes it from the class
    /// table, remapping the remaining class ids. Returns the dropped records.
    pub fn remove_class(&mut self, class_name: &str) -> Result<Vec<ManifestRecord>> {
        let idx = self
            .classes
            .iter()
            .position(|c| c == class_name)
            .ok_or_else(|| Error::Data(format!("unknown class {class_name:?}")))?;
        self.classes.remove(idx);
        let mut dropped = Vec::new();
        self.records.retain_mut(|r| {
            if r.class == idx {
                dropped.push(r.clone());
                false
            } else {
                if r.class > idx {
                    r.class -= 1;
                }
                true
            }
        });
        Ok(dropped)
    }
}

/// A same/different image pair; y = 0 when both members share a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub first: usize,
    pub second: usize,
    pub y: u8,
}

/// Anchor and positive share a class; the negative comes from another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

// ---------------------------------------------------------------------------
// PPM codec
// ---------------------------------------------------------------------------

/// Decodes a binary PPM (P6, maxval 255) into (width, height, rgb bytes).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P6" {
        return Err(Error::Data(format!("not a binary ppm (magic {magic:?})")));
    }
    let w: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad ppm width".into()))?;
    let h: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad ppm height".into()))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported ppm maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Data("empty ppm image".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!(
            "ppm payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Bilinear resize of interleaved-channel data, half-pixel-center convention.
pub fn resize_bilinear(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_w * dst_h * channels];
    let sx_scale = src_w as f64 / dst_w as f64;
    let sy_scale = src_h as f64 / dst_h as f64;
    for dy in 0..dst_h {
        let fy = ((dy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dst_w {
            let fx = ((dx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            for c in 0..channels {
                let p00 = src[(y0 * src_w + x0) * channels + c];
                let p01 = src[(y0 * src_w + x1) * channels + c];
                let p10 = src[(y1 * src_w + x0) * channels + c];
                let p11 = src[(y1 * src_w + x1) * channels + c];
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                out[(dy * dst_w + dx) * channels + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Resize to `target` x `target`, then normalize per channel with
/// (x - mean) / sqrt(var + eps). Raw bytes are mapped to [0, 1] first.
pub fn preprocess(rgb: &[u8], width: usize, height: usize, target: usize, stats: &Stats) -> Tensor {
    let unit: Vec<f64> = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
    let mut resized = if width == target && height == target {
        unit
    } else {
        resize_bilinear(&unit, width, height, 3, target, target)
    };
    for (i, v) in resized.iter_mut().enumerate() {
        let c = i % 3;
        *v = (*v - stats.mean[c]) / (stats.var[c] + VARIANCE_EPS).sqrt();
    }
    Tensor::new(vec![target, target, 3], resized).expect("resize preserves element count")
}

/// Decode + preprocess one manifest record.
pub fn load_image(
    root: &Path,
    record: &ManifestRecord,
    target: usize,
    stats: &Stats,
) -> Result<Tensor> {
    let (w, h, rgb) = read_ppm(&root.join(&record.path))?;
    Ok(preprocess(&rgb, w, h, target, stats))
}

/// Which records feed the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsScope {
    Train,
    All,
}

/// Per-channel mean/variance of the resized (but not yet normalized) images.
pub fn compute_stats(
    root: &Path,
    manifest: &DatasetManifest,
    scope: StatsScope,
    target: usize,
) -> Result<Stats> {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for record in &manifest.records {
        if scope == StatsScope::Train && record.split != Split::Train {
            continue;
        }
        let (w, h, rgb) = read_ppm(&root.join(&record.path))?;
        let unit: Vec<f64> = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        let resized = if w == target && h == target {
            unit
        } else {
            resize_bilinear(&unit, w, h, 3, target, target)
        };
        for (i, v) in resized.iter().enumerate() {
            let c = i % 3;
            sum[c] += v;
            sumsq[c] += v * v;
        }
        count += target * target;
    }
    if count == 0 {
        return Err(Error::Data("no records in stats scope".into()));
    }
    let mut mean = [0.0; 3];
    let mut var = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        var[c] = (sumsq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
    }
    Ok(Stats { mean, var })
}

// ---------------------------------------------------------------------------
// Loading and splitting
// ---------------------------------------------------------------------------

/// Scans `root/<class_dir>/*.ppm` into a manifest. Class ids follow sorted
/// directory order; record order is lexicographic by path. Every image is
/// decoded once to reject corrupt files up front.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut class_dirs: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            if entry.file_type().ok()?.is_dir() {
                Some(entry.file_name().to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut records = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let class_path = root.join(dir);
        let mut files: Vec<String> = fs::read_dir(&class_path)
            .map_err(|e| Error::io(class_path.display().to_string(), e))?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().to_string_lossy().into_owned();
                name.ends_with(".ppm").then_some(name)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {dir:?} has no images"
            )));
        }
        for file in files {
            let rel = format!("{dir}/{file}");
            read_ppm(&root.join(&rel))?;
            records.push(ManifestRecord {
                id: rel.clone(),
                class: class_id,
                split: Split::Train,
                path: rel,
            });
        }
    }
    Ok(DatasetManifest {
        classes: class_dirs,
        records,
        stats: Stats::identity(),
    })
}

/// Seeded per-class shuffle, then a largest-remainder partition so split
/// totals are exact per class. Classes with fewer than 3 images go entirely
/// to the training split.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<()> {
    let (rt, rv, rs) = ratios;
    if rt + rv + rs != 100 {
        return Err(Error::Data(format!(
            "split ratios {rt}:{rv}:{rs} do not sum to 100"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.class).or_default().push(i);
    }
    for (class, mut indices) in by_class {
        indices.shuffle(&mut rng);
        let n = indices.len();
        if n < 3 {
            log::warn!(
                "class {:?} has only {n} images; assigning all to the training split",
                manifest.classes[class]
            );
            for &i in &indices {
                manifest.records[i].split = Split::Train;
            }
            continue;
        }
        let shares = [rt, rv, rs].map(|r| n as f64 * f64::from(r) / 100.0);
        let mut counts = shares.map(|s| s.floor() as usize);
        let assigned: usize = counts.iter().sum();
        // Largest remainder; ties resolved in train/val/test order.
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - counts[a] as f64;
            let fb = shares[b] - counts[b] as f64;
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for k in 0..(n - assigned) {
            counts[order[k % 3]] += 1;
        }
        let mut cursor = 0usize;
        for (split, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
            for &i in &indices[cursor..cursor + count] {
                manifest.records[i].split = *split;
            }
            cursor += count;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pair and triplet sampling
// ---------------------------------------------------------------------------

/// Exactly `n` pairs, `round(n * positive_fraction)` of them same-class, with
/// uniform image choice under the constraint.
pub fn sample_pairs(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    positive_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Data("positive_fraction must lie in [0, 1]".into()));
    }
    let by_class = manifest.split_by_class(split);
    let all: Vec<usize> = by_class.iter().flatten().copied().collect();
    let pairable: Vec<usize> = by_class
        .iter()
        .filter(|c| c.len() >= 2)
        .flatten()
        .copied()
        .collect();
    let classes_present = by_class.iter().filter(|c| !c.is_empty()).count();
    let n_pos = (n as f64 * positive_fraction).round() as usize;
    let n_neg = n - n_pos;
    if n_pos > 0 && pairable.is_empty() {
        return Err(Error::Data(
            "positive pairs requested but no class has two images in this split".into(),
        ));
    }
    if n_neg > 0 && classes_present < 2 {
        return Err(Error::Data(
            "negative pairs requested but fewer than two classes in this split".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let first = pairable[rng.gen_range(0..pairable.len())];
        let class = manifest.records[first].class;
        let mates = &by_class[class];
        let second = loop {
            let cand = mates[rng.gen_range(0..mates.len())];
            if cand != first {
                break cand;
            }
        };
        out.push(PairSample {
            first,
            second,
            y: 0,
        });
    }
    for _ in 0..n_neg {
        let first = all[rng.gen_range(0..all.len())];
        let class = manifest.records[first].class;
        let second = loop {
            let cand = all[rng.gen_range(0..all.len())];
            if manifest.records[cand].class != class {
                break cand;
            }
        };
        out.push(PairSample {
            first,
            second,
            y: 1,
        });
    }
    Ok(out)
}

/// `n` triplets with class(anchor) == class(positive) != class(negative) and
/// anchor != positive as records.
pub fn sample_triplets(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TripletSample>> {
    let by_class = manifest.split_by_class(split);
    let all: Vec<usize> = by_class.iter().flatten().copied().collect();
    let anchorable: Vec<usize> = by_class
        .iter()
        .filter(|c| c.len() >= 2)
        .flatten()
        .copied()
        .collect();
    let classes_present = by_class.iter().filter(|c| !c.is_empty()).count();
    if anchorable.is_empty() || classes_present < 2 {
        return Err(Error::Data(
            "triplet sampling needs two classes and a class with two images".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let anchor = anchorable[rng.gen_range(0..anchorable.len())];
        let class = manifest.records[anchor].class;
        let mates = &by_class[class];
        let positive = loop {
            let cand = mates[rng.gen_range(0..mates.len())];
            if cand != anchor {
                break cand;
            }
        };
        let negative = loop {
            let cand = all[rng.gen_range(0..all.len())];
            if manifest.records[cand].class != class {
                break cand;
            }
        };
        out.push(TripletSample {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generator
// ---------------------------------------------------------------------------

const SYNTH_SIZE: usize = 64;
const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "bar"];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
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

fn shape_inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 1.0 && v.abs() <= 1.0,
        2 => v <= 0.5 && v >= 1.73 * u.abs() - 1.0,
        _ => u.abs() <= 1.0 && v.abs() <= 0.3,
    }
}

/// Renders one class image: a colored shape at a random position, scale, and
/// rotation over a noisy gray background.
fn render_synth_image(class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let size = SYNTH_SIZE;
    let shape = class % SHAPE_NAMES.len();
    let hue = class as f64 * 360.0 / num_classes as f64 + rng.gen_range(-14.0..14.0);
    let sat = rng.gen_range(0.6..0.95);
    let val = rng.gen_range(0.65..0.95);
    let color = hsv_to_rgb(hue, sat, val);
    let cx = rng.gen_range(0.3..0.7) * size as f64;
    let cy = rng.gen_range(0.3..0.7) * size as f64;
    let radius = rng.gen_range(0.18..0.32) * size as f64;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    let base = rng.gen_range(0.3..0.55);
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos_t + dy * sin_t) / radius;
            let v = (-dx * sin_t + dy * cos_t) / radius;
            let pixel: [f64; 3] = if shape_inside(shape, u, v) {
                color
            } else {
                let g = base + rng.gen_range(-0.08..0.08);
                [g, g, g]
            };
            for p in pixel {
                rgb.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    rgb
}

/// Writes `num_classes * per_class` PPM images under `out_dir`, one class per
/// directory, each class a distinct (shape, hue band) combination. Returns
/// the manifest of the generated tree (all records in the training split,
/// identity stats).
pub fn synth_generate(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if num_classes == 0 || num_classes > 8 {
        return Err(Error::Data(format!(
            "num_classes must lie in 1..=8, got {num_classes}"
        )));
    }
    if per_class < 4 {
        return Err(Error::Data(format!(
            "per_class must be at least 4, got {per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..num_classes {
        let dir = out_dir.join(format!(
            "c{class}_{}",
            SHAPE_NAMES[class % SHAPE_NAMES.len()]
        ));
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for i in 0..per_class {
            let rgb = render_synth_image(class, num_classes, &mut rng);
            let path = dir.join(format!("img_{i:04}.ppm"));
            fs::write(&path, encode_ppm(SYNTH_SIZE, SYNTH_SIZE, &rgb))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    load_dataset(out_dir)
}

/// Convenience for callers that want generated paths without re-listing.
pub fn synth_class_dir(class: usize) -> PathBuf {
    PathBuf::from(format!(
        "c{class}_{}",
        SHAPE_NAMES[class % SHAPE_NAMES.len()]
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synth_manifest(
        classes: usize,
        per_class: usize,
        seed: u64,
    ) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_generate(classes, per_class, seed, dir.path()).unwrap();
        (dir, manifest)
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        let encoded = encode_ppm(3, 2, &rgb);
        let (w, h, decoded) = decode_ppm(&encoded).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(decoded, rgb);
        assert!(decode_ppm(&encoded[..encoded.len() - 1]).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\nx").is_err());
        // Header comments are tolerated.
        let with_comment = b"P6\n# made by hand\n1 1\n255\n\xff\x00\x00";
        assert_eq!(decode_ppm(with_comment).unwrap().0, 1);
    }

    #[test]
    fn resize_identity_at_same_size() {
        let src: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 / 48.0).collect();
        let out = resize_bilinear(&src, 4, 4, 3, 4, 4);
        for (a, b) in out.iter().zip(&src) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_matches_independent_bilinear_oracle() {
        // 210x210 checkerboard downsampled to 105x105.
        let (sw, sh) = (210, 210);
        let src: Vec<f64> = (0..sw * sh * 3)
            .map(|i| {
                let pix = i / 3;
                let (y, x) = (pix / sw, pix % sw);
                (((x / 7) + (y / 7)) % 2) as f64
            })
            .collect();
        let out = resize_bilinear(&src, sw, sh, 3, 105, 105);
        // Oracle: direct per-sample interpolation, coded separately.
        let sample = |x: f64, y: f64, c: usize| -> f64 {
            let x = x.clamp(0.0, (sw - 1) as f64);
            let y = y.clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let at = |yy: usize, xx: usize| src[(yy * sw + xx) * 3 + c];
            at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x1) * fx * (1.0 - fy)
                + at(y1, x0) * (1.0 - fx) * fy
                + at(y1, x1) * fx * fy
        };
        for dy in 0..105 {
            for dx in 0..105 {
                for c in 0..3 {
                    let want = sample(
                        (dx as f64 + 0.5) * 2.0 - 0.5,
                        (dy as f64 + 0.5) * 2.0 - 0.5,
                        c,
                    );
                    let got = out[(dy * 105 + dx) * 3 + c];
                    assert!((got - want).abs() < 1e-9, "({dx},{dy},{c})");
                }
            }
        }
    }

    #[test]
    fn preprocess_constant_image_normalizes_to_zero() {
        let rgb = vec![100u8; 8 * 8 * 3];
        let v = 100.0 / 255.0;
        let stats = Stats {
            mean: [v; 3],
            var: [0.0; 3],
        };
        let t = preprocess(&rgb, 8, 8, 8, &stats);
        assert!(t.values().iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn synth_counts_and_determinism() {
        let (dir_a, ma) = synth_manifest(5, 6, 7);
        assert_eq!(ma.records.len(), 30);
        assert_eq!(ma.classes.len(), 5);
        for c in 0..5 {
            assert_eq!(ma.records.iter().filter(|r| r.class == c).count(), 6);
        }
        let (dir_b, mb) = synth_manifest(5, 6, 7);
        assert_eq!(ma.classes, mb.classes);
        for (ra, rb) in ma.records.iter().zip(&mb.records) {
            let ba = std::fs::read(dir_a.path().join(&ra.path)).unwrap();
            let bb = std::fs::read(dir_b.path().join(&rb.path)).unwrap();
            assert_eq!(ba, bb, "{}", ra.path);
        }
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(0, 10, 1, dir.path()).is_err());
        assert!(synth_generate(9, 10, 1, dir.path()).is_err());
        assert!(synth_generate(3, 2, 1, dir.path()).is_err());
    }

    #[test]
    fn load_dataset_flags_empty_class_and_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("empty_class")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty_class"));

        let dir = tempfile::tempdir().unwrap();
        synth_generate(2, 4, 3, dir.path()).unwrap();
        let victim = dir.path().join(synth_class_dir(0)).join("img_0001.ppm");
        std::fs::write(&victim, b"P6\n64 64\n255\nshort").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("img_0001.ppm"));
    }

    #[test]
    fn single_class_single_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("only");
        std::fs::create_dir(&class).unwrap();
        std::fs::write(class.join("one.ppm"), encode_ppm(2, 2, &[10u8; 12])).unwrap();
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.num_classes(), 1);
    }

    #[test]
    fn split_is_proportional_partition() {
        let dir = tempfile::tempdir().unwrap();
        // 2200-image class is impractical for a unit test; check the
        // largest-remainder arithmetic on the generator scale instead.
        let mut m = synth_generate(2, 40, 5, dir.path()).unwrap();
        split_dataset(&mut m, (80, 10, 10), 11).unwrap();
        for c in 0..2 {
            let counts = [Split::Train, Split::Val, Split::Test].map(|s| {
                m.records
                    .iter()
                    .filter(|r| r.class == c && r.split == s)
                    .count()
            });
            assert_eq!(counts, [32, 4, 4]);
        }
        // Determinism.
        let mut m2 = load_dataset(dir.path()).unwrap();
        split_dataset(&mut m2, (80, 10, 10), 11).unwrap();
        assert_eq!(m.records, m2.records);
    }

    #[test]
    fn split_largest_remainder_totals_are_exact() {
        // Per-class largest-remainder arithmetic at WaDaBa scale, computed on
        // synthetic index lists (no images needed).
        for (n, want) in [
            (2200usize, [1760usize, 220, 220]),
            (40, [32, 4, 4]),
            (7, [5, 1, 1]),
        ] {
            let shares = [80u32, 10, 10].map(|r| n as f64 * f64::from(r) / 100.0);
            let mut counts = shares.map(|s| s.floor() as usize);
            let assigned: usize = counts.iter().sum();
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| {
                let fa = shares[a] - counts[a] as f64;
                let fb = shares[b] - counts[b] as f64;
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for k in 0..(n - assigned) {
                counts[order[k % 3]] += 1;
            }
            assert_eq!(counts, want, "n = {n}");
        }
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("tiny");
        std::fs::create_dir(&class).unwrap();
        for i in 0..2 {
            std::fs::write(class.join(format!("{i}.ppm")), encode_ppm(2, 2, &[9u8; 12])).unwrap();
        }
        let big = dir.path().join("big");
        std::fs::create_dir(&big).unwrap();
        for i in 0..10 {
            std::fs::write(big.join(format!("{i}.ppm")), encode_ppm(2, 2, &[7u8; 12])).unwrap();
        }
        let mut m = load_dataset(dir.path()).unwrap();
        split_dataset(&mut m, (80, 10, 10), 3).unwrap();
        assert!(m
            .records
            .iter()
            .filter(|r| m.classes[r.class] == "tiny")
            .all(|r| r.split == Split::Train));
    }

    #[test]
    fn pair_sampling_contracts() {
        let (_dir, mut m) = synth_manifest(5, 8, 21);
        split_dataset(&mut m, (80, 10, 10), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = sample_pairs(&m, Split::Train, 4, 0.5, &mut rng).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.y == 0).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.y == 1).count(), 2);
        for p in &pairs {
            let same = m.records[p.first].class == m.records[p.second].class;
            assert_eq!(p.y == 0, same);
        }
        let all_pos = sample_pairs(&m, Split::Train, 10, 1.0, &mut rng).unwrap();
        assert!(all_pos.iter().all(|p| p.y == 0));
        // Same seed twice: identical lists.
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_pairs(&m, Split::Train, 50, 0.5, &mut r1).unwrap(),
            sample_pairs(&m, Split::Train, 50, 0.5, &mut r2).unwrap()
        );
    }

    #[test]
    fn pair_sampling_impossible_constraint_errors() {
        let (_dir, m) = synth_manifest(1, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_pairs(&m, Split::Train, 4, 0.5, &mut rng).is_err());
        // One class can still produce all-positive pairs.
        assert!(sample_pairs(&m, Split::Train, 4, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn pair_member_frequencies_are_uniform() {
        // 5 balanced classes: each class should appear as a pair member with
        // frequency 1/5 within 3 sigma binomial bounds.
        let (_dir, m) = synth_manifest(5, 10, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5000usize;
        let pairs = sample_pairs(&m, Split::Train, n, 0.5, &mut rng).unwrap();
        let mut counts = [0usize; 5];
        for p in &pairs {
            counts[m.records[p.first].class] += 1;
            counts[m.records[p.second].class] += 1;
        }
        let trials = 2 * n;
        let expect = trials as f64 / 5.0;
        let sigma = (trials as f64 * 0.2 * 0.8).sqrt();
        for (c, &got) in counts.iter().enumerate() {
            assert!(
                (got as f64 - expect).abs() < 3.0 * sigma,
                "class {c}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn triplet_sampling_contracts_and_support_coverage() {
        let (_dir, m) = synth_manifest(2, 4, 3);
        // Restrict to 2 images per class by building a sub-manifest.
        let mut small = m.clone();
        small.records = m
            .records
            .iter()
            .filter(|r| r.id.ends_with("0000.ppm") || r.id.ends_with("0001.ppm"))
            .cloned()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let triplets = sample_triplets(&small, Split::Train, 10_000, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in &triplets {
            let (a, p, n) = (
                small.records[t.anchor].class,
                small.records[t.positive].class,
                small.records[t.negative].class,
            );
            assert_eq!(a, p);
            assert_ne!(a, n);
            assert_ne!(t.anchor, t.positive);
            seen.insert((t.anchor, t.positive, t.negative));
        }
        // 2 classes x 2 images: exactly 8 distinct triplets, all reachable.
        assert_eq!(seen.len(), 8);
        // Determinism.
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            sample_triplets(&m, Split::Train, 100, &mut r1).unwrap(),
            sample_triplets(&m, Split::Train, 100, &mut r2).unwrap()
        );
    }

    #[test]
    fn normalized_training_set_has_unit_stats() {
        let (dir, mut m) = synth_manifest(3, 10, 13);
        split_dataset(&mut m, (80, 10, 10), 2).unwrap();
        let stats = compute_stats(dir.path(), &m, StatsScope::Train, 32).unwrap();
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut count = 0usize;
        for record in m.records.iter().filter(|r| r.split == Split::Train) {
            let t = load_image(dir.path(), record, 32, &stats).unwrap();
            for (i, v) in t.values().iter().enumerate() {
                sum[i % 3] += v;
                sumsq[i % 3] += v * v;
            }
            count += 32 * 32;
        }
        for c in 0..3 {
            let mean = sum[c] / count as f64;
            let var = sumsq[c] / count as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
        }
    }

    #[test]
    fn nearest_centroid_beats_chance_on_synth() {
        // Separability floor: raw downscaled pixels, nearest centroid.
        let (dir, mut m) = synth_manifest(5, 20, 7);
        split_dataset(&mut m, (80, 10, 10), 7).unwrap();
        let stats = Stats::identity();
        let embed = |idx: usize| -> Vec<f64> {
            load_image(dir.path(), &m.records[idx], 16, &stats)
                .unwrap()
                .values()
                .to_vec()
        };
        let by_class = m.split_by_class(Split::Train);
        let centroids: Vec<Vec<f64>> = by_class
            .iter()
            .map(|idxs| {
                let mut acc = vec![0.0; 16 * 16 * 3];
                for &i in idxs {
                    for (a, v) in acc.iter_mut().zip(embed(i)) {
                        *a += v;
                    }
                }
                acc.iter().map(|v| v / idxs.len() as f64).collect()
            })
            .collect();
        let test = m.split_records(Split::Test);
        let mut correct = 0usize;
        for &i in &test {
            let e = embed(i);
            let pred = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if pred == m.records[i].class {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.2, "nearest-centroid accuracy {acc}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn split_is_a_partition(seed in 0u64..50) {
            let dir = tempfile::tempdir().unwrap();
            let mut m = synth_generate(3, 10, seed, dir.path()).unwrap();
            split_dataset(&mut m, (80, 10, 10), seed).unwrap();
            for c in 0..3 {
                let counts = [Split::Train, Split::Val, Split::Test]
                    .map(|s| m.records.iter().filter(|r| r.class == c && r.split == s).count());
                prop_assert_eq!(counts.iter().sum::<usize>(), 10);
                prop_assert_eq!(counts, [8, 1, 1]);
            }
        }
    }
}
