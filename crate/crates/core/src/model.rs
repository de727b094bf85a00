//! The full network: detector plus the two domain discriminators, sharing
//! one parameter store.

use serde::{Deserialize, Serialize};

use crate::align::{FeatureDiscriminator, InstanceDiscriminator};
use crate::detector::{Detector, DetectorConfig};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::rng::stream;

/// Prefix shared by all discriminator parameter names.
pub const ALIGN_PREFIX: &str = "align.";
pub const DETECTOR_PREFIX: &str = "detector.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub feature_disc_hidden: usize,
    pub instance_disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { detector: DetectorConfig::default(), feature_disc_hidden: 64, instance_disc_hidden: 512 }
    }
}

#[derive(Clone, Debug)]
pub struct AfanModel {
    pub config: ModelConfig,
    pub detector: Detector,
    pub feature_disc: FeatureDiscriminator,
    pub instance_disc: InstanceDiscriminator,
}

impl AfanModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let detector = Detector::new(config.detector.clone())?;
        if config.feature_disc_hidden == 0 || config.instance_disc_hidden == 0 {
            return Err(crate::Error::validation("discriminator widths must be positive"));
        }
        let feature_disc = FeatureDiscriminator::new(config.detector.pyramid_channels, config.feature_disc_hidden);
        let instance_disc = InstanceDiscriminator::new(config.detector.region_dim, config.instance_disc_hidden);
        Ok(Self { config, detector, feature_disc, instance_disc })
    }

    pub fn num_classes(&self) -> usize {
        self.config.detector.num_classes
    }

    /// Fresh f32 weights drawn from the `init` stream of `seed`.
    pub fn init_store(&self, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::default();
        let mut rng = stream(seed, "init/detector");
        self.detector.init(&mut store, &mut rng);
        let mut rng = stream(seed, "init/align");
        self.feature_disc.init(&mut store, &mut rng);
        self.instance_disc.init(&mut store, &mut rng);
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let m = AfanModel::new(ModelConfig::default()).unwrap();
        let a = m.init_store(1);
        assert_eq!(a.digest(), m.init_store(1).digest());
        assert_ne!(a.digest(), m.init_store(2).digest());
        // detector weights do not depend on discriminator widths
        let wide = AfanModel::new(ModelConfig { feature_disc_hidden: 32, ..Default::default() }).unwrap();
        assert_eq!(a.digest_matching(DETECTOR_PREFIX), wide.init_store(1).digest_matching(DETECTOR_PREFIX));
    }
}
