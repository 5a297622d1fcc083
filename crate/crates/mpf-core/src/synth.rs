//! Synthetic context-dependent segmentation task.
//!
//! Each scene is a square image with a colored border stripe (the context
//! cue) and four interior texture quadrants. A pixel's class is
//! `texture + textures * cue`: the same local texture maps to different
//! labels under different cues, so no classifier confined to small patches
//! can resolve the interior labels. Border pixels are void.
//!
//! Generation is pure per (config, seed): equal inputs give identical bytes.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::{LabelMap, Precision, Shape, Tensor, VOID_LABEL};

const HI: f64 = 0.75;
const LO: f64 = 0.25;
const MID: f64 = 0.5;

/// Cue colors for the border stripe, one per cue state.
const CUE_COLORS: [[f64; 3]; 2] = [[0.9, 0.1, 0.1], [0.1, 0.1, 0.9]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTaskConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Number of texture patterns; effective classes = 2x this.
    pub texture_classes: usize,
    /// Width of the border cue stripe.
    pub border: usize,
    /// Uniform noise amplitude added to every channel.
    pub noise: f64,
    /// Base seed; sample i of a generated set uses `seed + i`.
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig { image_size: 32, texture_classes: 4, border: 2, noise: 0.05, seed: 0 }
    }
}

impl SyntheticTaskConfig {
    pub fn num_classes(&self) -> usize {
        2 * self.texture_classes
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.texture_classes) {
            return Err(Error::InvalidArgument(format!(
                "texture_classes must be in 2..=8, got {}",
                self.texture_classes
            )));
        }
        if self.border == 0 {
            return Err(Error::InvalidArgument("border must be >= 1".into()));
        }
        if self.image_size < 2 * self.border + 8 {
            return Err(Error::InvalidArgument(format!(
                "image size {} too small for border {} plus textured interior",
                self.image_size, self.border
            )));
        }
        if !(0.0..0.25).contains(&self.noise) {
            return Err(Error::InvalidArgument(format!(
                "noise must be in [0, 0.25), got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Parses a `key = value` config file. Keys: size, textures, border,
    /// noise, seed; missing keys take defaults.
    pub fn parse(text: &str) -> Result<SyntheticTaskConfig> {
        let mut config = SyntheticTaskConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((head, _)) => head.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", i + 1))
            })?;
            let value = value.trim();
            let parse_usize = || {
                value.parse::<usize>().map_err(|_| {
                    Error::InvalidArgument(format!("config line {}: bad number '{value}'", i + 1))
                })
            };
            match key.trim() {
                "size" => config.image_size = parse_usize()?,
                "textures" => config.texture_classes = parse_usize()?,
                "border" => config.border = parse_usize()?,
                "noise" => {
                    config.noise = value.parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!(
                            "config line {}: bad noise '{value}'",
                            i + 1
                        ))
                    })?;
                }
                "seed" => {
                    config.seed = value.parse::<u64>().map_err(|_| {
                        Error::InvalidArgument(format!("config line {}: bad seed '{value}'", i + 1))
                    })?;
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config line {}: unknown key '{other}'",
                        i + 1
                    )));
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Texture intensity at absolute pixel coordinates; patterns are locked to
/// the pixel grid so they stay locally identifiable under cropping.
fn texture_value(texture: usize, r: usize, c: usize) -> f64 {
    let bit = |on: bool| if on { HI } else { LO };
    match texture {
        0 => bit(r % 2 == 0),
        1 => bit(c % 2 == 0),
        2 => bit((r + c) % 2 == 0),
        3 => MID,
        4 => bit((r / 2) % 2 == 0),
        5 => bit((c / 2) % 2 == 0),
        6 => bit(((r + c) / 2) % 2 == 0),
        7 => bit(r % 2 == 0 && c % 2 == 0),
        _ => unreachable!("texture indices are validated to 0..8"),
    }
}

/// Renders a scene from explicit quadrant textures and cue state, adding
/// noise from `seed`. The interior pixels do not depend on `cue` at all,
/// which is the property that makes the task context-dependent.
pub fn generate_fixed(
    config: &SyntheticTaskConfig,
    quadrant_textures: &[usize; 4],
    cue: usize,
    seed: u64,
) -> Result<Sample> {
    config.validate()?;
    if cue > 1 {
        return Err(Error::InvalidArgument(format!("cue must be 0 or 1, got {cue}")));
    }
    for &t in quadrant_textures {
        if t >= config.texture_classes {
            return Err(Error::InvalidArgument(format!(
                "texture {t} outside 0..{}",
                config.texture_classes
            )));
        }
    }
    let n = config.image_size;
    let b = config.border;
    let mid = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let shape = Shape::new(1, 3, n, n)?;
    let mut image = vec![0.0; shape.numel()];
    let mut labels = LabelMap::filled(n, n, VOID_LABEL);
    let plane = n * n;

    for r in 0..n {
        for c in 0..n {
            let in_border = r < b || r >= n - b || c < b || c >= n - b;
            let rgb = if in_border {
                CUE_COLORS[cue]
            } else {
                let quadrant = (if r >= mid { 2 } else { 0 }) + usize::from(c >= mid);
                let texture = quadrant_textures[quadrant];
                labels.set(r, c, (texture + config.texture_classes * cue) as u16);
                let v = texture_value(texture, r, c);
                [v, v, v]
            };
            for (ch, &v) in rgb.iter().enumerate() {
                let noisy = if config.noise > 0.0 {
                    (v + rng.gen_range(-config.noise..config.noise)).clamp(0.0, 1.0)
                } else {
                    v
                };
                image[ch * plane + r * n + c] = noisy;
            }
        }
    }
    Sample::new(Tensor::from_vec(shape, Precision::Double, image)?, labels)
}

/// Generates one scene: cue state and quadrant textures drawn from `seed`.
pub fn generate_scene(config: &SyntheticTaskConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cue = rng.gen_range(0..2usize);
    let mut textures = [0usize; 4];
    for t in &mut textures {
        *t = rng.gen_range(0..config.texture_classes);
    }
    // Noise comes from a distinct stream so forcing cue/textures in
    // generate_fixed reproduces the same pixels.
    let noise_seed = rng.gen::<u64>();
    generate_fixed(config, &textures, cue, noise_seed)
}

/// Generates `count` scenes with per-sample seeds `base_seed + i`.
pub fn generate_samples(config: &SyntheticTaskConfig, count: usize, base_seed: u64) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_scene(config, base_seed.wrapping_add(i as u64))).collect()
}

/// Writes `count` scenes plus a manifest into `dir`; returns the manifest
/// path. A zero count produces an empty manifest.
pub fn write_dataset(
    dir: &Path,
    config: &SyntheticTaskConfig,
    count: usize,
    base_seed: u64,
) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let sample = generate_scene(config, base_seed.wrapping_add(i as u64))?;
        let img_name = format!("img_{i:05}.ppm");
        let lbl_name = format!("lbl_{i:05}.pgm");
        pnm::write_image(&dir.join(&img_name), &sample.image)?;
        pnm::write_labels(&dir.join(&lbl_name), &sample.labels)?;
        manifest.push_str(&format!("{img_name}\t{lbl_name}\n"));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
