//! Float model -> quantized model -> integer inference, per scheme.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wes_core::fixedpoint::{check_model, run_model, CONFORMANCE_STEPS};
use wes_core::metrics::model_size;
use wes_core::qformat::{decode, encode};
use wes_core::quantizer::{quantize_model, QuantizeOptions, Scheme};
use wes_core::reference::model_forward;
use wes_core::synth::{mobilenet_like, random_inputs};

fn setup() -> (wes_core::ModelGraph, Vec<wes_core::Tensor<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = mobilenet_like(&mut rng);
    let rep = random_inputs(&mut rng, model.input_shape, 24);
    (model, rep)
}

#[test]
fn every_scheme_runs_and_conforms_layer_by_layer() {
    let (model, rep) = setup();
    for scheme in Scheme::ALL {
        let q = quantize_model(&model, &QuantizeOptions::with_scheme(scheme), &rep).unwrap();
        q.model.check_param_spec().unwrap();
        let x = q.model.quantize_input(&rep[0]).unwrap();
        for (i, dev) in check_model(&q.model, &x).unwrap().into_iter().enumerate() {
            assert!(dev <= CONFORMANCE_STEPS, "{scheme} layer {i}: {dev}");
        }
        let outs = run_model(&q.model, &x).unwrap();
        assert_eq!(outs.last().unwrap().shape(), &[1, 1, 10]);
    }
}

#[test]
fn integer_logits_track_the_float_model() {
    let (model, rep) = setup();
    let q = quantize_model(&model, &QuantizeOptions::with_scheme(Scheme::Wes), &rep).unwrap();
    let out_params = q.model.layers.last().unwrap().output;
    let mut agree = 0;
    for x in &rep {
        let float_logits = model_forward(&q.float_model, x).unwrap().pop().unwrap();
        let qx = q.model.quantize_input(x).unwrap();
        let int_logits = run_model(&q.model, &qx).unwrap().pop().unwrap();
        let deq: Vec<f32> = int_logits.data().iter().map(|&v| out_params.dequantize(v)).collect();
        let argmax = |v: &[f32]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        agree += usize::from(argmax(&deq) == argmax(float_logits.data()));
    }
    assert!(agree * 4 >= rep.len() * 3, "top-1 agreement {agree}/{}", rep.len());
}

#[test]
fn records_describe_the_search() {
    let (model, rep) = setup();
    let q = quantize_model(&model, &QuantizeOptions::with_scheme(Scheme::Wes), &rep).unwrap();
    assert_eq!(q.records.len(), model.layers.len());
    for r in &q.records {
        let (cost, init) = (r.cost.unwrap(), r.initial_cost.unwrap());
        assert!(cost <= init);
        assert_eq!(r.shift_histogram.unwrap().iter().sum::<usize>(), q.model.layers[r.index].out_channels());
    }
}

#[test]
fn pruned_model_serializes_sparse_and_smaller() {
    let (model, rep) = setup();
    let dense = quantize_model(&model, &QuantizeOptions::with_scheme(Scheme::Lwq), &rep).unwrap();
    let opts = QuantizeOptions {
        prune_threshold: Some(0.05),
        ..QuantizeOptions::with_scheme(Scheme::Lwq)
    };
    let sparse = quantize_model(&model, &opts, &rep).unwrap();
    assert!(sparse.model.layers.iter().any(|l| l.sparse));
    let bytes = encode(&sparse.model).unwrap();
    assert_eq!(decode(&bytes).unwrap(), sparse.model);
    let (d, s) = (model_size(&dense.model).unwrap(), model_size(&sparse.model).unwrap());
    assert!(s.on_disk_bytes().unwrap() < d.on_disk_bytes().unwrap());
}

#[test]
fn empty_calibration_set_is_an_error() {
    let (model, _) = setup();
    assert!(quantize_model(&model, &QuantizeOptions::default(), &[]).is_err());
}

#[test]
fn integer_outputs_depend_on_the_input() {
    let (model, rep) = setup();
    let q = quantize_model(&model, &QuantizeOptions::with_scheme(Scheme::Wes), &rep).unwrap();
    let mut seen = std::collections::HashSet::new();
    for x in &rep {
        let qx = q.model.quantize_input(x).unwrap();
        seen.insert(run_model(&q.model, &qx).unwrap().pop().unwrap().into_data());
    }
    assert!(seen.len() > rep.len() / 2, "only {} distinct outputs", seen.len());
}
