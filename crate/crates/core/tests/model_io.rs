use wes_core::error::Error;
use wes_core::model::{
    load_model, save_model, Activation, BnParams, LayerKind, LayerSpec, ModelGraph, Padding,
};
use wes_core::tensor::{Layout, Tensor};

fn small_conv() -> ModelGraph {
    let weights: Vec<f32> = (0..18).map(|i| (i as f32 - 8.5) * 0.0625).collect();
    ModelGraph {
        name: "tiny".into(),
        input_shape: [4, 4, 1],
        layers: vec![LayerSpec {
            kind: LayerKind::Conv2d,
            weights: Tensor::new(vec![3, 3, 1, 2], weights, Layout::Hwio).unwrap(),
            bias: vec![0.25, -0.5],
            stride: 1,
            padding: Padding::uniform(1),
            activation: Activation::Relu6,
            bn: Some(BnParams {
                gamma: vec![1.5, 0.75],
                beta: vec![0.1, -0.1],
                mean: vec![0.0, 0.2],
                var: vec![1.0, 0.5],
                eps: 1e-3,
            }),
        }],
    }
}

#[test]
fn save_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_conv();
    save_model(&model, dir.path()).unwrap();
    let loaded = load_model(dir.path()).unwrap();
    assert_eq!(loaded.layers[0].weights.len(), 18);
    let bits = |m: &ModelGraph| -> Vec<u32> {
        m.layers[0].weights.data().iter().map(|x| x.to_bits()).collect()
    };
    assert_eq!(bits(&loaded), bits(&model));
    assert_eq!(loaded.layers[0].bias, model.layers[0].bias);
    assert_eq!(loaded.layers[0].bn, model.layers[0].bn);
    assert_eq!(loaded.layers[0].padding, model.layers[0].padding);
    assert_eq!(loaded.layers[0].activation, Activation::Relu6);
    assert_eq!(loaded.input_shape, [4, 4, 1]);
}

#[test]
fn manifest_file_path_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&small_conv(), dir.path()).unwrap();
    let loaded = load_model(dir.path().join("model.json")).unwrap();
    assert_eq!(loaded.layers.len(), 1);
}

#[test]
fn missing_blob_is_reported_with_layer_index() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&small_conv(), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("l0.weights.bin")).unwrap();
    match load_model(dir.path()) {
        Err(Error::Layer { index: 0, source }) => {
            assert!(matches!(*source, Error::MissingBlob(_)), "{source}")
        }
        other => panic!("expected a missing blob error, got {other:?}"),
    }
}

#[test]
fn truncated_blob_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&small_conv(), dir.path()).unwrap();
    std::fs::write(dir.path().join("l0.weights.bin"), [0u8; 17 * 4]).unwrap();
    assert!(load_model(dir.path()).is_err());
}

#[test]
fn handwritten_manifest_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| i as f32).collect(), Layout::Flat).unwrap();
    std::fs::write(dir.path().join("fc.bin"), w.to_le_bytes()).unwrap();
    std::fs::write(
        dir.path().join("model.json"),
        r#"{"input_shape": [1, 1, 4],
            "layers": [{"kind": "fully_connected", "weights": {"file": "fc.bin", "shape": [4, 3]}}]}"#,
    )
    .unwrap();
    let m = load_model(dir.path()).unwrap();
    assert_eq!(m.layers[0].weights.shape(), &[1, 1, 4, 3]);
    assert_eq!(m.layers[0].bias, vec![0.0; 3]);
    assert_eq!(m.layers[0].activation, Activation::None);
    assert_eq!(m.output_shape().unwrap(), [1, 1, 3]);
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.json"), "{ not json").unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
}
