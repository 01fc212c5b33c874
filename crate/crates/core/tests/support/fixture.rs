//! A small trained teacher shared by the integration tests.

use vitq::data::{ToyDataSpec, ToySplit};
use vitq::optim::TrainSchedule;
use vitq::teacher::pretrain;
use vitq::vit::{QuantMode, TinyViT, ViTConfig};

pub fn spec() -> ToyDataSpec {
    ToyDataSpec {
        classes: 4,
        per_class: 64,
        image_size: 8,
        ..ToyDataSpec::default()
    }
}

pub fn config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 4,
        seed: 11,
    }
}

pub fn teacher() -> (TinyViT, ToySplit) {
    let spec = spec();
    let mut m = TinyViT::new(config(), QuantMode::default()).unwrap();
    let s = TrainSchedule {
        total_iters: 150,
        warmup_iters: 15,
        base_lr: 3e-3,
        ..TrainSchedule::default()
    };
    pretrain(&mut m, &spec.teacher_set(), &s).unwrap();
    (m, spec.generate())
}
