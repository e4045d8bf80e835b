//! Run configuration: one JSON document that fixes every seed and knob of a
//! pipeline run. Unknown keys are rejected and omitted keys take defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use invariance::blackbox::toy::{ToyClassifierConfig, ToyDomain, ToyRenderConfig, ToySplitSizes};
use invariance::{AugmentationConfig, DetectorConfig, ErrorLabelRule, TransformId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the toy task images.
    pub seed: u64,
    pub classes: usize,
    pub sizes: ToySplitSizes,
    pub render: ToyRenderConfig,
    pub classifier: ToyClassifierConfig,
    pub transform_set: Vec<TransformId>,
    /// Defaults to a value derived from the class count.
    pub k_prime: Option<usize>,
    pub detector: DetectorConfig,
    pub rule: ErrorLabelRule,
    /// Test-time augmentation applied before the fixed transforms.
    pub augmentation: Option<AugmentationConfig>,
    pub copies: usize,
    /// Share of the detector split held out for early stopping.
    pub validation_fraction: f64,
    pub output_dir: Option<PathBuf>,
    pub ood: OodRunConfig,
    pub class_novelty: ClassNoveltyRunConfig,
    /// Wall-clock limit for `reproduce`.
    pub runtime_budget_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodRunConfig {
    pub cross_domain: ToyDomain,
    pub novel_domain: ToyDomain,
    pub images_per_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassNoveltyRunConfig {
    /// Number of random novel-class draws.
    pub draws: usize,
    /// Classes per draw.
    pub novel_size: usize,
    /// Explicit draws; overrides `draws` and `novel_size` when set.
    pub novel_classes: Option<Vec<Vec<i64>>>,
    /// Detector-split and evaluation images per class.
    pub images_per_class: usize,
    pub draw_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            classes: 10,
            sizes: ToySplitSizes { train: 200, detector: 500, eval: 500 },
            render: ToyRenderConfig::default(),
            classifier: ToyClassifierConfig::default(),
            transform_set: TransformId::ALL.to_vec(),
            k_prime: None,
            detector: DetectorConfig::default(),
            rule: ErrorLabelRule::default(),
            augmentation: None,
            copies: 1,
            validation_fraction: 0.2,
            output_dir: None,
            ood: OodRunConfig::default(),
            class_novelty: ClassNoveltyRunConfig::default(),
            runtime_budget_secs: 2700,
        }
    }
}

impl Default for OodRunConfig {
    fn default() -> Self {
        Self { cross_domain: ToyDomain::Stripes, novel_domain: ToyDomain::Blobs, images_per_domain: 1000 }
    }
}

impl Default for ClassNoveltyRunConfig {
    fn default() -> Self {
        Self { draws: 3, novel_size: 2, novel_classes: None, images_per_class: 200, draw_seed: 11 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.classes < 2 {
            bail!("classes must be at least 2");
        }
        if self.transform_set.first() != Some(&TransformId::Identity) {
            bail!("transform_set must start with identity");
        }
        let mut seen = self.transform_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.transform_set.len() {
            bail!("transform_set has duplicates");
        }
        if let Some(kp) = self.k_prime {
            if kp == 0 || kp > self.classes {
                bail!("k_prime must lie in 1..={}", self.classes);
            }
        }
        if self.copies == 0 {
            bail!("copies must be at least 1");
        }
        if let Some(aug) = &self.augmentation {
            aug.validate()?;
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!("validation_fraction must lie in (0, 1)");
        }
        if self.sizes.train == 0 || self.sizes.detector == 0 || self.sizes.eval == 0 {
            bail!("every split needs at least one image per class");
        }
        for d in [self.ood.cross_domain, self.ood.novel_domain] {
            if d == ToyDomain::Shapes {
                bail!("the shapes domain is the familiar one and cannot be novel");
            }
        }
        if self.ood.cross_domain == self.ood.novel_domain {
            bail!("ood.cross_domain and ood.novel_domain must differ");
        }
        let cn = &self.class_novelty;
        match &cn.novel_classes {
            Some(draws) => {
                if draws.is_empty() {
                    bail!("class_novelty.novel_classes is empty");
                }
                for d in draws {
                    if d.is_empty() || d.iter().any(|&c| c < 0 || c >= self.classes as i64) {
                        bail!("novel class draw {d:?} must name classes in 0..{}", self.classes);
                    }
                }
            }
            None => {
                if cn.draws == 0 {
                    bail!("class_novelty.draws must be positive");
                }
                if cn.novel_size == 0 || 2 * cn.novel_size >= self.classes {
                    bail!("class_novelty.novel_size must be positive and below classes - novel_size");
                }
            }
        }
        if cn.images_per_class == 0 {
            bail!("class_novelty.images_per_class must be positive");
        }
        if self.runtime_budget_secs == 0 {
            bail!("runtime_budget_secs must be positive");
        }
        Ok(())
    }

    pub fn k_prime_for(&self, k: usize) -> usize {
        self.k_prime.unwrap_or_else(|| invariance::representation::default_k_prime(k)).min(k)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("configs always serialize");
        text.push('\n');
        text
    }
}
