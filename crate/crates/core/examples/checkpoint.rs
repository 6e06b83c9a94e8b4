//! Save, load and inspect a checkpoint.
use lieflow::aabb::Aabb;
use lieflow::ad::AdamState;
use lieflow::pipeline::{
    load_checkpoint, save_checkpoint, Checkpoint, Model, RngState, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::new(&config, Aabb::cube(1.0), &mut rng).unwrap();
    let ck = Checkpoint {
        adam: AdamState::new(&model.store),
        config,
        aabb: Aabb::cube(1.0),
        iteration: 0,
        rng: RngState::capture(&rng),
        model,
    };
    let path = std::env::temp_dir().join("lieflow_example.lfck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    println!(
        "{} bytes, {} tensors, {} scalars",
        std::fs::metadata(&path).unwrap().len(),
        back.model.store.len(),
        back.model.store.num_scalars()
    );
}
