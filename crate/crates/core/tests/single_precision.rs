//! The numeric core instantiated at `f32`.

use psnet::data::LabeledData;
use psnet::losses::LossKind;
use psnet::models::{build_model, BackboneConfig, BackboneKind, ModelConfig};
use psnet::psn::{psn_forward, PsnMode};
use psnet::tensor::{Fill, Tensor};
use psnet::training::{train, TrainConfig};
use psnet::PsnParams32;

#[test]
fn psn_bounds_in_f32() {
    let p = PsnParams32::new(1.0, 20.0, 1.0).unwrap();
    let x = Tensor::<f32>::from_vec(&[5], vec![-1e6, -1.75, 1.0, 2.75, 1e6]).unwrap();
    let y = psn_forward(&x, &p);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(y.data()[2], 0.5);
}

#[test]
fn f32_model_trains() {
    let x = Tensor::<f32>::new(
        &[64, 4],
        Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed: 2,
        },
    )
    .unwrap();
    let labels: Vec<usize> = x.data().chunks(4).map(|r| usize::from(r[0] > 0.0)).collect();
    let data = LabeledData::new(x, labels, 2).unwrap();
    let cfg = ModelConfig::new(
        BackboneConfig {
            kind: BackboneKind::Mlp { hidden: vec![8] },
            embedding_dim: 4,
            input_shape: vec![4],
        },
        PsnMode::TrainBG,
        LossKind::CrossEntropy,
        2,
    );
    let mut m = build_model::<f32>(&cfg, 3).unwrap();
    let h = train(
        &mut m,
        &data,
        &TrainConfig {
            epochs: 3,
            drop_epochs: vec![],
            batch_size: 16,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(h.len(), 3);
    assert!(h.iter().all(|r| r.train_loss.is_finite() && r.alpha == Some(1.0)));
}
