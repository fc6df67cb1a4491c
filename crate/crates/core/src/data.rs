//! Deterministic synthetic light-guide-plate dataset.
//!
//! Each plate is a regular bright-dot lattice (randomized pitch and phase)
//! over a smooth brightness gradient plus Gaussian sensor noise. Defects are
//! composited on top from a low-amplitude band (8..24 gray levels) so the
//! contrast against the background stays low. The base texture and the
//! defects draw from independent RNG streams derived from the sample seed, so
//! rendering the same seed with no defects yields the exact defect-free twin
//! of a defective plate.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class 0 is non-defective, class 1 is defective, everywhere in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonDefective,
    Defective,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::NonDefective => 0,
            Label::Defective => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    BrightSpot,
    DarkSpot,
    Impurity,
}

pub const ALL_DEFECT_KINDS: [DefectKind; 4] =
    [DefectKind::Scratch, DefectKind::BrightSpot, DefectKind::DarkSpot, DefectKind::Impurity];

#[derive(Clone, Debug, PartialEq)]
pub struct PlateSample {
    /// Row-major grayscale pixels, `height * width` bytes.
    pub image: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub label: Label,
    pub seed: u64,
    pub defects: Vec<DefectKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub defect_fraction: f64,
    pub height: usize,
    pub width: usize,
    /// Dot lattice pitch range in pixels.
    pub dot_pitch: (f64, f64),
    /// Gray-level span of the linear brightness gradient.
    pub brightness_span: (f64, f64),
    /// Gaussian pixel noise sigma in gray levels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 822,
            defect_fraction: 422.0 / 822.0,
            height: 64,
            width: 64,
            dot_pitch: (5.0, 7.5),
            brightness_span: (8.0, 20.0),
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Config(format!("count must be >= 2, got {}", self.count)));
        }
        if !(0.0..=1.0).contains(&self.defect_fraction) {
            return Err(Error::Config(format!("defect_fraction must be in [0,1], got {}", self.defect_fraction)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("image size must be >= 8x8, got {}x{}", self.height, self.width)));
        }
        if self.dot_pitch.0 < 1.0 || self.dot_pitch.1 < self.dot_pitch.0 {
            return Err(Error::Config(format!("bad dot_pitch range {:?}", self.dot_pitch)));
        }
        if self.brightness_span.0 < 0.0 || self.brightness_span.1 < self.brightness_span.0 {
            return Err(Error::Config(format!("bad brightness_span range {:?}", self.brightness_span)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<PlateSample>,
}

/// Stamp `exp(-r^2 / 2 sigma^2)` into `mask` around (cx, cy), keeping the
/// pointwise maximum so overlapping stamps never exceed 1.
fn splat(mask: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, sigma: f64) {
    let reach = (3.0 * sigma).ceil() as isize;
    let (icx, icy) = (cx.round() as isize, cy.round() as isize);
    for y in (icy - reach).max(0)..=(icy + reach).min(h as isize - 1) {
        for x in (icx - reach).max(0)..=(icx + reach).min(w as isize - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let p = &mut mask[y as usize * w + x as usize];
            if g > *p {
                *p = g;
            }
        }
    }
}

/// Render one plate. Fully determined by `(seed, cfg, defects)`; the base
/// texture does not depend on `defects`.
pub fn render_plate(seed: u64, cfg: &GenConfig, defects: &[DefectKind]) -> PlateSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut base = seeded_rng(derive_seed(seed, "base"));

    let background = base.gen_range(110.0..135.0);
    let pitch = base.gen_range(cfg.dot_pitch.0..=cfg.dot_pitch.1);
    let (phase_x, phase_y) = (base.gen_range(0.0..pitch), base.gen_range(0.0..pitch));
    let dot_amp = base.gen_range(24.0..30.0);
    let dot_radius = base.gen_range(1.05..1.35);
    let grad_theta = base.gen_range(0.0..std::f64::consts::TAU);
    let grad_span = base.gen_range(cfg.brightness_span.0..=cfg.brightness_span.1);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("validated sigma");

    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            // Distance to the nearest lattice point.
            let u = (x as f64 - phase_x) / pitch;
            let v = (y as f64 - phase_y) / pitch;
            let du = (u - u.round()) * pitch;
            let dv = (v - v.round()) * pitch;
            let dot = dot_amp * (-(du * du + dv * dv) / (2.0 * dot_radius * dot_radius)).exp();

            let px = x as f64 / (w - 1) as f64 - 0.5;
            let py = y as f64 / (h - 1) as f64 - 0.5;
            let grad = grad_span * (px * grad_theta.cos() + py * grad_theta.sin());

            img[y * w + x] = background + dot + grad + noise.sample(&mut base);
        }
    }

    let mut defect_rng = seeded_rng(derive_seed(seed, "defects"));
    for kind in defects {
        let rng = &mut defect_rng;
        let amp = rng.gen_range(8.0..=24.0);
        let mut mask = vec![0.0f64; h * w];
        let signed_amp = match kind {
            DefectKind::Scratch => {
                let (mut cx, mut cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                let mut theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let total = rng.gen_range(0.65..0.95) * h.min(w) as f64;
                let segments = rng.gen_range(3..=6);
                let sigma = rng.gen_range(1.6..2.3);
                let step = total / segments as f64;
                for _ in 0..segments {
                    let (nx, ny) = (cx + step * theta.cos(), cy + step * theta.sin());
                    let n_steps = (step / 0.5).ceil() as usize;
                    for i in 0..=n_steps {
                        let t = i as f64 / n_steps as f64;
                        splat(&mut mask, h, w, cx + (nx - cx) * t, cy + (ny - cy) * t, sigma);
                    }
                    (cx, cy) = (nx, ny);
                    theta += rng.gen_range(-0.4..0.4);
                }
                if rng.gen_bool(0.5) {
                    amp
                } else {
                    -amp
                }
            }
            DefectKind::BrightSpot | DefectKind::DarkSpot => {
                // Low amplitude but broad: the footprint, not the contrast,
                // is what separates a spot from a lattice dot.
                let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                let sigma = rng.gen_range(5.5..8.5);
                splat(&mut mask, h, w, cx, cy, sigma);
                if matches!(kind, DefectKind::BrightSpot) {
                    amp
                } else {
                    -amp
                }
            }
            DefectKind::Impurity => {
                let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                let blobs = rng.gen_range(10..=16);
                for _ in 0..blobs {
                    let ox = rng.gen_range(-9.0..9.0);
                    let oy = rng.gen_range(-9.0..9.0);
                    let sigma = rng.gen_range(2.2..3.6);
                    splat(&mut mask, h, w, cx + ox, cy + oy, sigma);
                }
                -amp
            }
        };
        for (p, m) in img.iter_mut().zip(&mask) {
            *p += signed_amp * m;
        }
    }

    let image: Vec<u8> = img.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let label = if defects.is_empty() { Label::NonDefective } else { Label::Defective };
    PlateSample { image, height: h, width: w, label, seed, defects: defects.to_vec() }
}

/// Generate the full dataset: exactly `round(count * defect_fraction)`
/// defective plates, spread evenly through the sample order.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n_def = (cfg.count as f64 * cfg.defect_fraction).round() as usize;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        // Bresenham spread: sample i is defective when the cumulative
        // defective quota steps up at i.
        let defective = (i + 1) * n_def / cfg.count > i * n_def / cfg.count;
        let seed = derive_seed_indexed(cfg.seed, "sample", i as u64);
        let defects: Vec<DefectKind> = if defective {
            let mut rng = seeded_rng(derive_seed_indexed(cfg.seed, "kinds", i as u64));
            let n_kinds = if rng.gen_bool(0.5) { 2 } else { 1 };
            ALL_DEFECT_KINDS.choose_multiple(&mut rng, n_kinds).copied().collect()
        } else {
            Vec::new()
        };
        let sample = render_plate(seed, cfg, &defects);
        if defective {
            debug_assert!(
                {
                    let twin = render_plate(seed, cfg, &[]);
                    twin.image != sample.image
                },
                "defective plate {i} is identical to its defect-free twin"
            );
        }
        samples.push(sample);
    }
    Ok(Dataset { config: cfg.clone(), samples })
}

/// Stratified split: per class, the first `floor(class_count *
/// train_fraction)` samples (in dataset order) go to the train side.
pub fn split(samples: &[PlateSample], train_fraction: f64) -> Result<(Vec<PlateSample>, Vec<PlateSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0,1), got {train_fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::NonDefective, Label::Defective] {
        let class: Vec<&PlateSample> = samples.iter().filter(|s| s.label == label).collect();
        let n_train = (class.len() as f64 * train_fraction).floor() as usize;
        if class.is_empty() {
            continue;
        }
        if n_train == 0 || n_train == class.len() {
            return Err(Error::Config(format!(
                "split leaves a {label:?} side empty ({} samples at fraction {train_fraction})",
                class.len()
            )));
        }
        train.extend(class[..n_train].iter().map(|s| (*s).clone()));
        test.extend(class[n_train..].iter().map(|s| (*s).clone()));
    }
    Ok((train, test))
}

/// Stack samples into a `[N, 1, H, W]` tensor, standardized per image
/// (zero mean, unit variance) so plate-to-plate brightness offsets never
/// reach the network.
pub fn to_input<S: Scalar>(samples: &[&PlateSample]) -> Result<Tensor<S>> {
    let first = samples.first().ok_or_else(|| Error::Shape("cannot batch zero samples".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape(format!(
                "mixed image sizes in one batch: {}x{} vs {h}x{w}",
                s.height, s.width
            )));
        }
        let n = (h * w) as f64;
        let mean = s.image.iter().map(|&p| p as f64).sum::<f64>() / n;
        let var = s.image.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        data.extend(s.image.iter().map(|&p| S::fromf((p as f64 - mean) * inv)));
    }
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

pub fn labels(samples: &[&PlateSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label.class_index()).collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    file: String,
    label: Label,
    seed: u64,
    defects: Vec<DefectKind>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    gen_config: GenConfig,
    samples: Vec<ManifestSample>,
}

fn encode_pgm(s: &PlateSample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend_from_slice(&s.image);
    out
}

fn decode_pgm(bytes: &[u8], file: &str) -> Result<(Vec<u8>, usize, usize)> {
    let bad = |msg: &str| Error::Format(format!("`{file}`: {msg}"));
    let mut parts = bytes.splitn(4, |&b| b == b'\n');
    let magic = parts.next().ok_or_else(|| bad("empty file"))?;
    if magic != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let dims = parts.next().ok_or_else(|| bad("missing dimensions line"))?;
    let dims = std::str::from_utf8(dims).map_err(|_| bad("dimensions line is not UTF-8"))?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("cannot parse image width"))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("cannot parse image height"))?;
    if it.next().is_some() {
        return Err(bad("extra tokens on the dimensions line"));
    }
    let maxval = parts.next().ok_or_else(|| bad("missing maxval line"))?;
    if maxval != b"255" {
        return Err(bad("maxval must be 255"));
    }
    let data = parts.next().ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    Ok((data.to_vec(), h, w))
}

/// Write `ds` as one PGM per sample plus `manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("plate_{i:05}.pgm");
        fs::write(dir.join(&file), encode_pgm(s))?;
        entries.push(ManifestSample { file, label: s.label, seed: s.seed, defects: s.defects.clone() });
    }
    let manifest = Manifest { version: 1, gen_config: ds.config.clone(), samples: entries };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]; `read∘write` is the identity.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("cannot read `{}`: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("`{}`: {e}", manifest_path.display())))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let path = dir.join(&entry.file);
        let bytes =
            fs::read(&path).map_err(|e| Error::Format(format!("cannot read `{}`: {e}", path.display())))?;
        let (image, height, width) = decode_pgm(&bytes, &entry.file)?;
        let expect_defective = !entry.defects.is_empty();
        if (entry.label == Label::Defective) != expect_defective {
            return Err(Error::Format(format!(
                "`{}`: label {:?} conflicts with defect list {:?}",
                entry.file, entry.label, entry.defects
            )));
        }
        samples.push(PlateSample {
            image,
            height,
            width,
            label: entry.label,
            seed: entry.seed,
            defects: entry.defects,
        });
    }
    Ok(Dataset { config: manifest.gen_config, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig { count: 20, height: 32, width: 32, seed: 5, ..GenConfig::default() }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = small_cfg();
        let a = render_plate(7, &cfg, &[DefectKind::Scratch, DefectKind::Impurity]);
        let b = render_plate(7, &cfg, &[DefectKind::Scratch, DefectKind::Impurity]);
        assert_eq!(a, b);
        let c = render_plate(8, &cfg, &[DefectKind::Scratch, DefectKind::Impurity]);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn label_tracks_defect_list() {
        let cfg = small_cfg();
        assert_eq!(render_plate(1, &cfg, &[]).label, Label::NonDefective);
        assert_eq!(render_plate(1, &cfg, &[DefectKind::DarkSpot]).label, Label::Defective);
    }

    #[test]
    fn defective_twin_differs_but_stays_low_contrast() {
        let cfg = small_cfg();
        for seed in 0..20u64 {
            for kind in ALL_DEFECT_KINDS {
                let clean = render_plate(seed, &cfg, &[]);
                let bad = render_plate(seed, &cfg, &[kind]);
                let total: f64 = clean
                    .image
                    .iter()
                    .zip(&bad.image)
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .sum();
                let mean = total / clean.image.len() as f64;
                assert!(mean > 0.0, "seed {seed} {kind:?}: twin identical");
                assert!(mean < 25.5, "seed {seed} {kind:?}: contrast too high ({mean})");
            }
        }
    }

    #[test]
    fn dataset_hits_exact_class_counts() {
        let ds = generate_dataset(&GenConfig { seed: 3, ..GenConfig::default() }).unwrap();
        let defective = ds.samples.iter().filter(|s| s.label == Label::Defective).count();
        assert_eq!(ds.samples.len(), 822);
        assert_eq!(defective, 422);

        let tiny =
            generate_dataset(&GenConfig { count: 2, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        let defective = tiny.samples.iter().filter(|s| s.label == Label::Defective).count();
        assert_eq!(defective, 1);
    }

    #[test]
    fn dataset_is_a_pure_function_of_config() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_floor_rule_and_partition() {
        let ds = generate_dataset(&GenConfig { seed: 1, ..GenConfig::default() }).unwrap();
        let (train, test) = split(&ds.samples, 0.25).unwrap();
        assert_eq!(train.len(), 205);
        assert_eq!(test.len(), 617);
        let train_def = train.iter().filter(|s| s.label == Label::Defective).count();
        assert_eq!(train_def, 105, "floor(422 * 0.25)");
        assert_eq!(train.len() + test.len(), ds.samples.len());
        // Disjointness via unique per-sample seeds.
        let mut seeds: Vec<u64> = train.iter().chain(&test).map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), ds.samples.len());
    }

    #[test]
    fn split_balanced_four() {
        let ds = generate_dataset(&GenConfig { count: 4, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        let (train, test) = split(&ds.samples, 0.5).unwrap();
        for side in [&train, &test] {
            assert_eq!(side.len(), 2);
            assert_eq!(side.iter().filter(|s| s.label == Label::Defective).count(), 1);
        }
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = generate_dataset(&GenConfig { count: 4, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        assert!(matches!(split(&ds.samples, 0.1), Err(Error::Config(_))));
        assert!(matches!(split(&ds.samples, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn pgm_header_is_exact() {
        let cfg = GenConfig { height: 64, width: 64, ..small_cfg() };
        let bytes = encode_pgm(&render_plate(0, &cfg, &[]));
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(bytes.len(), 13 + 64 * 64);
    }

    #[test]
    fn directory_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&GenConfig { count: 6, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn missing_image_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&GenConfig { count: 4, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("plate_00002.pgm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("plate_00002.pgm"), "{err}");
    }

    #[test]
    fn corrupt_pgm_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&GenConfig { count: 4, defect_fraction: 0.5, ..small_cfg() }).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("plate_00001.pgm"), b"P5\n9 9\n255\nxx").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("plate_00001.pgm"), "{err}");
    }

    #[test]
    fn batch_tensor_shape_and_standardization() {
        let cfg = small_cfg();
        let s0 = render_plate(0, &cfg, &[]);
        let s1 = render_plate(1, &cfg, &[DefectKind::Scratch]);
        let refs = [&s0, &s1];
        let t: Tensor<f32> = to_input(&refs).unwrap();
        assert_eq!(t.shape(), &[2, 1, 32, 32]);
        for img in t.data().chunks(32 * 32) {
            let mean = img.iter().sum::<f32>() / img.len() as f32;
            let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / img.len() as f32;
            assert!(mean.abs() < 1e-3, "per-image mean should vanish, got {mean}");
            assert!((var - 1.0).abs() < 1e-2, "per-image variance should be 1, got {var}");
        }
        assert_eq!(labels(&refs), vec![0, 1]);
    }
}
