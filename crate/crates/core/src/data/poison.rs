use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Batch, Dataset, ImageShape};
use crate::error::{config_err, Result};
use crate::rng::StreamRng;

/// Number of sub-patterns a distributed trigger is split into.
pub const DBA_PARTS: usize = 4;

/// Rectangular pixel trigger. `x` is the column and `y` the row of the
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub value: f64,
}

impl Default for Trigger {
    fn default() -> Self {
        Self {
            x: 0,
            y: 0,
            w: 3,
            h: 3,
            value: 1.0,
        }
    }
}

impl Trigger {
    pub fn check(&self, img: ImageShape) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(config_err("trigger must cover at least one pixel"));
        }
        if self.x + self.w > img.width || self.y + self.h > img.height {
            return Err(config_err(format!(
                "trigger {}x{} at ({},{}) exceeds {}x{} image",
                self.w, self.h, self.x, self.y, img.width, img.height
            )));
        }
        if !self.value.is_finite() {
            return Err(config_err("trigger value must be finite"));
        }
        Ok(())
    }

    /// All `(row, col)` pixels of the full trigger.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut px = Vec::with_capacity(self.w * self.h);
        for r in self.y..self.y + self.h {
            for c in self.x..self.x + self.w {
                px.push((r, c));
            }
        }
        px
    }

    /// Quadrant `part` (0..4: top-left, top-right, bottom-left, bottom-right)
    /// of the trigger. Quadrants are disjoint and together cover it.
    pub fn dba_part(&self, part: usize) -> Vec<(usize, usize)> {
        let (hr, hc) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let part = part % DBA_PARTS;
        self.pixels()
            .into_iter()
            .filter(|&(r, c)| {
                let bottom = r - self.y >= hr;
                let right = c - self.x >= hc;
                usize::from(bottom) * 2 + usize::from(right) == part
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelFlipMode {
    Random,
    Inverse,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PoisonKind {
    LabelFlip(LabelFlipMode),
    PixelTrigger,
    DistributedTrigger { part: usize },
    EdgeCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub kind: PoisonKind,
    pub trigger: Trigger,
    pub source: usize,
    pub target: usize,
    pub ratio: f64,
}

impl Default for PoisonSpec {
    fn default() -> Self {
        Self {
            kind: PoisonKind::PixelTrigger,
            trigger: Trigger::default(),
            source: 7,
            target: 1,
            ratio: 20.0 / 64.0,
        }
    }
}

impl PoisonSpec {
    pub fn validate(&self, classes: usize, image: Option<ImageShape>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(config_err(format!("poison ratio {} outside [0,1]", self.ratio)));
        }
        if self.source >= classes || self.target >= classes {
            return Err(config_err(format!(
                "poison labels {}->{} outside {classes} classes",
                self.source, self.target
            )));
        }
        let targeted = matches!(
            self.kind,
            PoisonKind::LabelFlip(LabelFlipMode::Target) | PoisonKind::EdgeCase
        );
        if targeted && self.source == self.target {
            return Err(config_err("targeted poisoning needs source != target"));
        }
        if matches!(
            self.kind,
            PoisonKind::PixelTrigger | PoisonKind::DistributedTrigger { .. }
        ) {
            let img = image.ok_or_else(|| config_err("pixel triggers need image data"))?;
            self.trigger.check(img)?;
        }
        Ok(())
    }

    /// Pixels this spec stamps during training.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        match self.kind {
            PoisonKind::DistributedTrigger { part } => self.trigger.dba_part(part),
            _ => self.trigger.pixels(),
        }
    }
}

/// `ratio * batch` rounded to the nearest integer, halves up. Both 20/64 and
/// 0.32 give 20 on a batch of 64.
pub fn poison_count(ratio: f64, batch: usize) -> usize {
    let x = ratio * batch as f64;
    let n = (x + 0.5 + 1e-9).floor().max(0.0) as usize;
    n.min(batch)
}

pub fn stamp_pixels(sample: &mut [f64], width: usize, pixels: &[(usize, usize)], value: f64) {
    for &(r, c) in pixels {
        sample[r * width + c] = value;
    }
}

/// Stamps the spec's pattern onto `poison_count` randomly chosen samples and
/// relabels them to the target class.
pub fn embed_trigger(batch: &Batch, spec: &PoisonSpec, rng: &mut StreamRng) -> Result<Batch> {
    let img = batch
        .image
        .ok_or_else(|| config_err("pixel triggers need image data"))?;
    spec.trigger.check(img)?;
    let mut out = batch.clone();
    let k = poison_count(spec.ratio, batch.len());
    if k == 0 {
        return Ok(out);
    }
    let pattern = spec.pattern();
    let mut chosen = sample_indices(rng, batch.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        stamp_pixels(out.sample_mut(i), img.width, &pattern, spec.trigger.value);
        out.labels[i] = spec.target;
    }
    Ok(out)
}

pub fn flip_labels(
    batch: &Batch,
    mode: LabelFlipMode,
    spec: &PoisonSpec,
    classes: usize,
    rng: &mut StreamRng,
) -> Batch {
    let mut out = batch.clone();
    for l in &mut out.labels {
        *l = match mode {
            LabelFlipMode::Inverse => classes - *l - 1,
            LabelFlipMode::Target if *l == spec.source => spec.target,
            LabelFlipMode::Target => *l,
            LabelFlipMode::Random if classes > 1 => (*l + 1 + rng.random_range(0..classes - 1)) % classes,
            LabelFlipMode::Random => *l,
        };
    }
    out
}

/// Transformation turning source-class samples into tail samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCaseParams {
    pub rotation_deg: f64,
    pub contrast: f64,
    pub shift: f64,
    pub noise: f64,
    pub min_samples: usize,
}

impl Default for EdgeCaseParams {
    fn default() -> Self {
        Self {
            rotation_deg: 35.0,
            contrast: 0.6,
            shift: 0.25,
            noise: 0.15,
            min_samples: 4,
        }
    }
}

fn rotate(src: &[f64], img: ImageShape, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; src.len()];
    for r in 0..img.height {
        for col in 0..img.width {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            // inverse rotation, nearest neighbour
            let sy = (c * dy + s * dx + cy).round();
            let sx = (-s * dy + c * dx + cx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < img.height && (sx as usize) < img.width {
                out[r * img.width + col] = src[sy as usize * img.width + sx as usize];
            }
        }
    }
    out
}

/// Builds a tail pool from the source-class samples of `ds`, relabelled to
/// the target class. Callers pass samples disjoint from the clean splits.
pub fn make_edge_case(
    ds: &Dataset,
    spec: &PoisonSpec,
    params: &EdgeCaseParams,
    rng: &mut StreamRng,
) -> Result<Dataset> {
    let img = ds
        .image
        .ok_or_else(|| config_err("edge-case pool needs image data"))?;
    if spec.source >= ds.classes || spec.target >= ds.classes || spec.source == spec.target {
        return Err(config_err("edge-case pool needs distinct in-range source and target"));
    }
    let noise = Normal::new(0.0, params.noise).map_err(|e| config_err(e.to_string()))?;
    let sources: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == spec.source).collect();
    if sources.len() < params.min_samples {
        return Err(config_err(format!(
            "only {} samples of class {} for the edge-case pool (need {})",
            sources.len(),
            spec.source,
            params.min_samples
        )));
    }
    let mut features = Vec::with_capacity(sources.len() * ds.dim);
    for &i in &sources {
        let rotated = rotate(ds.sample(i), img, params.rotation_deg);
        features.extend(rotated.into_iter().map(|x| {
            (params.contrast * x + params.shift + noise.sample(rng)).clamp(0.0, 1.0)
        }));
    }
    Dataset::new(features, vec![spec.target; sources.len()], ds.dim, ds.classes, ds.image)
}
