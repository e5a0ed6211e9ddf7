//! Seeded generator of separable scenes with class-conditional features.
//!
//! The image is a 4×4 grid of cells and every entity fills one cell. Path
//! relevant entities sit in the lower two cell rows, their relative side is
//! the cell column, the RGB content channels carry a per-mechanism mean and
//! the disparity channels a per-severity mean. The semantic class usually
//! names a mechanism-specific class, so the bridge embedding is a second,
//! independent mechanism cue.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sample::round_f32;
use super::{
    Entity, EntityLabels, FeatureMap, Mask, RelationLabel, Result, SceneError, SceneSample, CITYSCAPES_CLASSES,
    MECHANISMS, SEVERITIES,
};

/// Class index most often carried by each mechanism's entities.
pub const MECHANISM_CLASS: [usize; 8] = [13, 11, 5, 14, 6, 15, 17, 18];

const GRID: usize = 4;
const POSITIONAL: usize = 2;
const PIXEL_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Semantic classes drawn for entities that do not carry their
    /// mechanism's class (the first `classes` Cityscapes classes).
    pub classes: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub relevant_rate: f64,
    /// Probability that a relevant entity carries its mechanism's class.
    pub class_fidelity: f64,
    /// Per-entity standard deviation around the class-conditional means.
    pub noise: f64,
    pub height: usize,
    pub width: usize,
    pub rgb_channels: usize,
    pub disp_channels: usize,
    pub embed_dim: usize,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 200,
            val: 50,
            test: 50,
            classes: CITYSCAPES_CLASSES.len(),
            min_entities: 4,
            max_entities: 8,
            relevant_rate: 0.5,
            class_fidelity: 0.95,
            noise: 0.6,
            height: 16,
            width: 16,
            rgb_channels: 8,
            disp_channels: 4,
            embed_dim: 16,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Config(m.into()));
        if self.classes == 0 || self.classes > CITYSCAPES_CLASSES.len() {
            return bad("classes must lie in 1..=19");
        }
        if self.min_entities > self.max_entities || self.max_entities > GRID * GRID {
            return bad("entity counts must satisfy min <= max <= 16");
        }
        if !(0.0..=1.0).contains(&self.relevant_rate) || !(0.0..=1.0).contains(&self.class_fidelity) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if self.height < 2 * GRID || self.width < 2 * GRID || self.height % GRID != 0 || self.width % GRID != 0 {
            return bad("height and width must be multiples of 4 and at least 8");
        }
        if self.rgb_channels <= POSITIONAL || self.disp_channels == 0 || self.embed_dim == 0 {
            return bad("need more than 2 RGB channels and positive disparity/embedding widths");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthScenes {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

struct Means {
    mechanism: Vec<Vec<f64>>,
    severity: Vec<Vec<f64>>,
    relevance: Vec<f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| scale * gauss(rng)).collect()).collect()
}

pub fn generate(cfg: &SynthSceneConfig) -> Result<SynthScenes> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let content = cfg.rgb_channels - POSITIONAL;
    let mut relevance: Vec<f64> = (0..cfg.embed_dim).map(|_| gauss(&mut rng)).collect();
    let norm = relevance.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    relevance.iter_mut().for_each(|x| *x /= norm);
    let means = Means {
        mechanism: normal_rows(&mut rng, MECHANISMS.len(), content, 1.0),
        severity: normal_rows(&mut rng, SEVERITIES.len(), cfg.disp_channels, 1.5),
        relevance,
    };
    let mut split = |name: &str, n: usize| -> Vec<SceneSample> {
        (0..n)
            .map(|i| scene(cfg, &means, &mut rng, format!("{name}_{i:04}")))
            .collect()
    };
    Ok(SynthScenes {
        train: split("train", cfg.train),
        val: split("val", cfg.val),
        test: split("test", cfg.test),
    })
}

fn scene(cfg: &SynthSceneConfig, means: &Means, rng: &mut ChaCha8Rng, id: String) -> SceneSample {
    let (h, w) = (cfg.height, cfg.width);
    let (ch, cw) = (h / GRID, w / GRID);
    let pixel = Normal::new(0.0, PIXEL_NOISE).expect("pixel noise");
    let entity_noise = Normal::new(0.0, cfg.noise).expect("entity noise");

    let mut rgb = FeatureMap::zeros(cfg.rgb_channels, h, w);
    let mut disp = FeatureMap::zeros(cfg.disp_channels, h, w);
    for y in 0..h {
        for x in 0..w {
            *rgb.get_mut(0, y, x) = x as f64 / (w - 1) as f64;
            *rgb.get_mut(1, y, x) = y as f64 / (h - 1) as f64;
            for c in POSITIONAL..cfg.rgb_channels {
                *rgb.get_mut(c, y, x) = pixel.sample(rng);
            }
            for c in 0..cfg.disp_channels {
                *disp.get_mut(c, y, x) = pixel.sample(rng);
            }
        }
    }
    let path = Mask::from_fn(h, w, |y, x| y >= h / 2 && x >= w / 4 && x < 3 * w / 4);
    let vehicle = Mask::from_fn(h, w, |y, x| y == h - 1 && x >= w / 4 && x < 3 * w / 4);

    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let half = GRID * GRID / 2;
    let mut n_rel = (0..n).filter(|_| rng.random_bool(cfg.relevant_rate)).count();
    n_rel = n_rel.clamp(n.saturating_sub(half), half.min(n));
    let mut lower: Vec<usize> = (half..GRID * GRID).collect();
    let mut upper: Vec<usize> = (0..half).collect();
    lower.shuffle(rng);
    upper.shuffle(rng);
    let cells: Vec<(usize, bool)> = lower[..n_rel]
        .iter()
        .map(|&c| (c, true))
        .chain(upper[..n - n_rel].iter().map(|&c| (c, false)))
        .collect();

    let mut entities = Vec::with_capacity(n);
    for (cell, relevant) in cells {
        let (gy, gx) = (cell / GRID, cell % GRID);
        let (oy, ox) = (gy * ch + rng.random_range(0..=1), gx * cw + rng.random_range(0..=1));
        let mask = Mask::from_fn(h, w, |y, x| y >= oy && y < oy + ch - 1 && x >= ox && x < ox + cw - 1);
        let mechanism = rng.random_range(0..MECHANISMS.len());
        let severity = rng.random_range(0..SEVERITIES.len());
        let side = match gx {
            0 => 0,
            g if g == GRID - 1 => 2,
            _ => 1,
        };
        let content_mean: Vec<f64> = if relevant {
            means.mechanism[mechanism]
                .iter()
                .map(|m| m + entity_noise.sample(rng))
                .collect()
        } else {
            (0..cfg.rgb_channels - POSITIONAL)
                .map(|_| entity_noise.sample(rng))
                .collect()
        };
        let disp_mean: Vec<f64> = if relevant {
            means.severity[severity]
                .iter()
                .map(|m| m + 0.5 * entity_noise.sample(rng))
                .collect()
        } else {
            (0..cfg.disp_channels).map(|_| 0.5 * entity_noise.sample(rng)).collect()
        };
        for (y, x) in mask.pixels().collect::<Vec<_>>() {
            for (k, m) in content_mean.iter().enumerate() {
                *rgb.get_mut(POSITIONAL + k, y, x) = m + pixel.sample(rng);
            }
            for (k, m) in disp_mean.iter().enumerate() {
                *disp.get_mut(k, y, x) = m + pixel.sample(rng);
            }
        }
        let sign = if relevant { 1.5 } else { -1.5 };
        let mut embedding: Vec<f64> = means.relevance.iter().map(|u| sign * u + 0.5 * gauss(rng)).collect();
        round_f32(&mut embedding);
        let class = if relevant && rng.random_bool(cfg.class_fidelity) {
            MECHANISM_CLASS[mechanism]
        } else {
            rng.random_range(0..cfg.classes)
        };
        entities.push(Entity {
            mask,
            embedding,
            class,
            labels: Some(EntityLabels {
                relevant,
                relation: relevant.then_some(RelationLabel {
                    mechanism,
                    side,
                    severity,
                }),
            }),
        });
    }
    // entity order must not leak relevance
    entities.shuffle(rng);
    round_f32(&mut rgb.data);
    round_f32(&mut disp.data);
    SceneSample {
        id,
        rgb,
        disp,
        path,
        vehicle,
        entities,
    }
}
