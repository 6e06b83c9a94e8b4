use rand::Rng;

use super::{PipelineError, TrainConfig};
use crate::aabb::Aabb;
use crate::ad::ParamStore;
use crate::hexplane::HexPlane;
use crate::se3field::Se3Field;

/// Radiance field and transformation field sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub radiance: HexPlane,
    pub se3: Se3Field,
}

impl Model {
    pub fn new<R: Rng>(
        config: &TrainConfig,
        aabb: Aabb,
        rng: &mut R,
    ) -> Result<Self, PipelineError> {
        let mut store = ParamStore::new();
        let radiance = HexPlane::new(&mut store, config.hexplane.clone(), aabb, rng)?;
        let se3 = Se3Field::new(&mut store, config.se3_config(), aabb, rng)?
            .with_ablation(config.ablation);
        Ok(Self {
            store,
            radiance,
            se3,
        })
    }

    /// Attaches the network structure described by `config` to an existing
    /// parameter store.
    pub fn bind(
        store: ParamStore,
        config: &TrainConfig,
        aabb: Aabb,
    ) -> Result<Self, PipelineError> {
        let radiance = HexPlane::bind(&store, config.hexplane.clone(), aabb)?;
        let se3 = Se3Field::bind(&store, config.se3_config(), aabb)?.with_ablation(config.ablation);
        Ok(Self {
            store,
            radiance,
            se3,
        })
    }
}
