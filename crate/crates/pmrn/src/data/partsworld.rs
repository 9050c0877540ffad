//! Synthetic parts-compositional dataset.
//!
//! Every class is a fixed triple of parts drawn from a shared library of
//! shape×color combinations; splits use disjoint triples but share the
//! library, so classes never repeat while their building blocks do. Each
//! sample renders the triple at jittered canonical positions over a noisy
//! background, which makes part discovery both necessary and verifiable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fsds::{FsdsContents, Manifest};
use crate::error::{Error, Result};
use crate::params::rng_for;

pub const SHAPES: usize = 8;
pub const COLORS: usize = 4;

const PALETTE: [[u8; 3]; COLORS] = [
    [230, 60, 50],  // red
    [60, 200, 70],  // green
    [60, 110, 230], // blue
    [235, 215, 60], // yellow
];

const BACKGROUND: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct PartsWorldConfig {
    pub canvas: usize,
    pub parts_per_class: usize,
    pub classes_train: usize,
    pub classes_val: usize,
    pub classes_novel: usize,
    pub images_per_class: usize,
    /// Per-axis positional jitter in pixels.
    pub jitter: usize,
    /// Uniform per-channel pixel noise amplitude.
    pub noise_amp: u8,
    /// Part footprint in pixels.
    pub part_size: usize,
    pub seed: u64,
}

impl Default for PartsWorldConfig {
    fn default() -> Self {
        PartsWorldConfig {
            canvas: 96,
            parts_per_class: 3,
            classes_train: 30,
            classes_val: 10,
            classes_novel: 10,
            images_per_class: 30,
            jitter: 10,
            noise_amp: 22,
            part_size: 18,
            seed: 0,
        }
    }
}

impl PartsWorldConfig {
    pub fn total_classes(&self) -> usize {
        self.classes_train + self.classes_val + self.classes_novel
    }

    fn validate(&self) -> Result<()> {
        if self.canvas < 12 || self.part_size < 4 || self.images_per_class == 0 {
            return Err(Error::InvalidConfig("canvas/part geometry too small".into()));
        }
        let margin = self.part_size / 2 + 1;
        if 2 * margin >= self.canvas {
            return Err(Error::InvalidConfig(format!(
                "canvas {} cannot hold parts of size {}",
                self.canvas, self.part_size
            )));
        }
        let library = SHAPES * COLORS;
        if self.parts_per_class == 0 || self.parts_per_class > library {
            return Err(Error::InvalidConfig(format!(
                "{} parts per class with a library of {library}",
                self.parts_per_class
            )));
        }
        let combos = n_choose_k(library, self.parts_per_class);
        if (self.total_classes() as u128) > combos {
            return Err(Error::InvalidConfig(format!(
                "part-combination space {combos} too small for {} classes",
                self.total_classes()
            )));
        }
        Ok(())
    }
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// One part of a class: library index plus its canonical center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PartPlacement {
    pub part: usize,
    pub cy: usize,
    pub cx: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ClassSpec {
    pub parts: Vec<PartPlacement>,
}

/// Offsets covered by a shape of a given footprint, centered at the origin.
pub(crate) fn shape_offsets(shape: usize, size: usize) -> Vec<(i32, i32)> {
    let r = (size / 2) as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let inside = match shape {
                0 => dy * dy + dx * dx <= r * r,                     // disc
                1 => dy.abs() <= r - 1 && dx.abs() <= r - 1,         // square
                2 => dy >= -r && dx.abs() <= (dy + r) / 2,           // triangle
                3 => dy.abs() + dx.abs() <= r,                       // diamond
                4 => {
                    let d = dy * dy + dx * dx;
                    d <= r * r && d >= (r - 3).max(1) * (r - 3).max(1) // ring
                }
                5 => dy.abs() <= r / 3 || dx.abs() <= r / 3,         // plus
                6 => dy.abs() <= r / 3,                              // horizontal bar
                _ => dx.abs() <= r / 3,                              // vertical bar
            };
            if inside {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Draws class specs: disjoint part triples over one shuffled combination
/// stream, and canonical positions with pairwise separation.
pub(crate) fn build_class_specs(cfg: &PartsWorldConfig, rng: &mut ChaCha8Rng) -> Vec<ClassSpec> {
    let library = SHAPES * COLORS;
    let mut seen = std::collections::BTreeSet::new();
    let mut specs = Vec::with_capacity(cfg.total_classes());
    let margin = cfg.part_size / 2 + 1;
    let span = cfg.canvas - 2 * margin;
    while specs.len() < cfg.total_classes() {
        let mut combo: Vec<usize> = Vec::with_capacity(cfg.parts_per_class);
        while combo.len() < cfg.parts_per_class {
            let p = rng.random_range(0..library);
            if !combo.contains(&p) {
                combo.push(p);
            }
        }
        let mut key = combo.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            continue;
        }
        // Spread canonical centers; give up on separation after a bounded
        // number of tries so tiny canvases still terminate.
        let mut placements: Vec<PartPlacement> = Vec::with_capacity(combo.len());
        for &part in &combo {
            let mut attempt = 0;
            let (cy, cx) = loop {
                let cy = margin + rng.random_range(0..=span);
                let cx = margin + rng.random_range(0..=span);
                let min_sep = (cfg.part_size + 2) as i64;
                let clear = placements.iter().all(|p| {
                    let dy = p.cy as i64 - cy as i64;
                    let dx = p.cx as i64 - cx as i64;
                    dy * dy + dx * dx >= min_sep * min_sep
                });
                attempt += 1;
                if clear || attempt > 50 {
                    break (cy, cx);
                }
            };
            placements.push(PartPlacement { part, cy, cx });
        }
        specs.push(ClassSpec { parts: placements });
    }
    specs
}

/// Renders one sample of a class: jittered parts over noise.
pub(crate) fn render_sample(cfg: &PartsWorldConfig, spec: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = cfg.canvas;
    let mut img = vec![BACKGROUND; s * s * 3];
    let lo = (cfg.part_size / 2 + 1) as i32;
    let hi = (cfg.canvas - 1) as i32 - lo;
    for placement in &spec.parts {
        let (shape, color) = (placement.part / COLORS, placement.part % COLORS);
        let jy = rng.random_range(-(cfg.jitter as i32)..=cfg.jitter as i32);
        let jx = rng.random_range(-(cfg.jitter as i32)..=cfg.jitter as i32);
        // Jittered centers clamp to the canvas so parts stay whole even
        // under jitter spanning the full image.
        let cy = (placement.cy as i32 + jy).clamp(lo, hi);
        let cx = (placement.cx as i32 + jx).clamp(lo, hi);
        for (dy, dx) in shape_offsets(shape, cfg.part_size) {
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || x < 0 || y >= s as i32 || x >= s as i32 {
                continue;
            }
            let at = (y as usize * s + x as usize) * 3;
            img[at..at + 3].copy_from_slice(&PALETTE[color]);
        }
    }
    if cfg.noise_amp > 0 {
        let amp = cfg.noise_amp as i32;
        for v in &mut img {
            let d = rng.random_range(-amp..=amp);
            *v = (*v as i32 + d).clamp(0, 255) as u8;
        }
    }
    img
}

/// Generates the dataset in memory. Deterministic per config seed.
pub fn generate(cfg: &PartsWorldConfig) -> Result<(FsdsContents, Manifest)> {
    cfg.validate()?;
    let mut spec_rng = rng_for(cfg.seed, 10);
    let specs = build_class_specs(cfg, &mut spec_rng);
    let mut render_rng = rng_for(cfg.seed, 11);
    let mut images = Vec::with_capacity(cfg.total_classes() * cfg.images_per_class);
    for (class_id, spec) in specs.iter().enumerate() {
        for _ in 0..cfg.images_per_class {
            images.push((class_id as u32, render_sample(cfg, spec, &mut render_rng)));
        }
    }
    let ids = |from: usize, count: usize| (from..from + count).map(|i| i as u32).collect();
    let manifest = Manifest {
        train: ids(0, cfg.classes_train),
        val: ids(cfg.classes_train, cfg.classes_val),
        novel: ids(cfg.classes_train + cfg.classes_val, cfg.classes_novel),
    };
    Ok((
        FsdsContents {
            side: cfg.canvas,
            channels: 3,
            images,
        },
        manifest,
    ))
}
