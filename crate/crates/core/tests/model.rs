use pvtv2::autograd::relative_error;
use pvtv2::backbone::EncoderBlock;
use pvtv2::io::{load_weights, save_weights, WeightStore};
use pvtv2::nn::{Initializer, Module};
use pvtv2::{config_for, Error, GradTape, ModelConfig, PvtModel, Tensor, Variant};

#[test]
fn b0_pyramid_at_224() {
    let model: PvtModel<f32> = PvtModel::new(&config_for(Variant::B0), 0).unwrap();
    let image = Tensor::<f32>::rand_uniform(&[1, 3, 224, 224], 1, -1.0, 1.0).unwrap();
    let p = model.forward_features(&image).unwrap();
    assert_eq!(
        p.shapes(),
        [
            vec![1, 32, 56, 56],
            vec![1, 64, 28, 28],
            vec![1, 160, 14, 14],
            vec![1, 256, 7, 7]
        ]
    );
    let logits = model.classify_features(&p).unwrap();
    assert_eq!(logits.shape(), [1, 1000]);
}

#[test]
fn batch_items_are_independent() {
    let model: PvtModel<f64> = PvtModel::new(&ModelConfig::micro(), 2).unwrap();
    let a = Tensor::<f64>::rand_uniform(&[1, 3, 32, 32], 1, -1.0, 1.0).unwrap();
    let b = Tensor::<f64>::rand_uniform(&[1, 3, 32, 32], 2, -1.0, 1.0).unwrap();
    let both = model
        .classify(&Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap())
        .unwrap();
    for (i, single) in [a, b].iter().enumerate() {
        let alone = model.classify(single).unwrap();
        assert!(both.batch_item(i).unwrap().max_abs_diff(&alone).unwrap() < 1e-6);
    }
}

#[test]
fn constant_image_gives_finite_logits() {
    let model: PvtModel<f32> = PvtModel::new(&ModelConfig::micro(), 0).unwrap();
    let image = Tensor::<f32>::full(&[1, 3, 32, 32], 0.7).unwrap();
    let logits = model.classify(&image).unwrap();
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = ModelConfig::micro();
    let stage = cfg.stages[0];
    let mut block: EncoderBlock<f64> =
        EncoderBlock::new("b", &stage, &cfg, &mut Initializer::with_std(9, 0.3)).unwrap();
    let x = Tensor::<f64>::rand_uniform(&[1, 16, stage.channels], 4, -1.0, 1.0).unwrap();
    let loss = |b: &EncoderBlock<f64>| b.forward(&x, 4, 4).unwrap().sum();

    let tape = GradTape::<f64>::new();
    let mut tracked = block.clone();
    let mut handles = Vec::new();
    tracked.visit_mut(&mut |name, t| {
        *t = tape.watch(t);
        handles.push((name.to_string(), t.clone()));
    });
    let grads = tape.backward(&loss(&tracked)).unwrap();
    let eps = 1e-5;
    for (name, h) in &handles {
        let g = grads.get_or_zero(h);
        let base = h.detach();
        for i in 0..base.len() {
            let v = base.data()[i];
            let mut at = |value: f64| {
                block.visit_mut(&mut |n, t| {
                    if n == name {
                        *t = base.with_element(i, value);
                    }
                });
                loss(&block).item().unwrap()
            };
            let fd = (at(v + eps) - at(v - eps)) / (2.0 * eps);
            at(v);
            let err = relative_error(g.data()[i], fd);
            assert!(err < 1e-4, "{name}[{i}]: {} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn weights_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("micro.pvt2");
    let model: PvtModel<f32> = PvtModel::new(&ModelConfig::micro(), 11).unwrap();
    let store = WeightStore::from_module(&model).unwrap();
    let bytes = save_weights(&store, &path).unwrap();
    assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());

    let mut fresh: PvtModel<f32> = PvtModel::new(&ModelConfig::micro(), 12).unwrap();
    load_weights(&path).unwrap().load_into(&mut fresh).unwrap();
    let image = Tensor::<f32>::rand_uniform(&[1, 3, 32, 32], 0, -1.0, 1.0).unwrap();
    let a = model.classify(&image).unwrap();
    let b = fresh.classify(&image).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loading_reports_every_mismatch() {
    let micro = ModelConfig::micro();
    let mut wider = micro.clone();
    wider.num_classes = 7;
    wider.stages[1].expansion = 3;
    let store = WeightStore::from_module(&PvtModel::<f32>::new(&wider, 0).unwrap()).unwrap();
    let mut model: PvtModel<f32> = PvtModel::new(&micro, 0).unwrap();
    let before = WeightStore::from_module(&model).unwrap();
    match store.load_into(&mut model) {
        Err(Error::WeightMismatch(list)) => {
            // fc1 weight+bias, dwconv weight+bias, fc2 weight, head weight+bias
            assert_eq!(list.len(), 7, "{list:#?}");
            assert!(list.iter().any(|m| m.starts_with("head.weight")));
            assert!(list.iter().any(|m| m.starts_with("stage2.block0.ffn.fc2.weight")));
        }
        other => panic!("expected mismatch, got {:?}", other.err()),
    }
    assert_eq!(WeightStore::from_module(&model).unwrap(), before);
}

#[test]
fn dtype_mismatch_is_reported() {
    let store = WeightStore::from_module(&PvtModel::<f64>::new(&ModelConfig::micro(), 0).unwrap()).unwrap();
    let mut model: PvtModel<f32> = PvtModel::new(&ModelConfig::micro(), 0).unwrap();
    assert!(matches!(store.load_into(&mut model), Err(Error::WeightMismatch(_))));
}

#[test]
fn missing_file_has_path_context() {
    let err = load_weights("/nonexistent/dir/w.pvt2").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/dir/w.pvt2"));
}
