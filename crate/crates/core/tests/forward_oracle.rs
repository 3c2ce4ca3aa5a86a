//! Forward pass against a numpy reference (tests/data/gen_hand_forward.py).

use kdbench_core::transformer::{EncoderInput, ModelConfig, TransformerModel};
use kdbench_core::{Graph, Tensor};
use serde::Deserialize;

#[derive(Deserialize)]
struct Param {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct Vector {
    config: ModelConfig,
    parameters: Vec<Param>,
    tokens: Vec<usize>,
    batch: usize,
    seq_len: usize,
    mask: Vec<bool>,
    hidden_states: Vec<Vec<f64>>,
    attention: Vec<Vec<Vec<f64>>>,
    logits: Vec<f64>,
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_numpy_reference() {
    let v: Vector = serde_json::from_str(include_str!("data/hand_forward.json")).unwrap();
    let names = TransformerModel::names_for(&v.config);
    assert_eq!(names, v.parameters.iter().map(|p| p.name.clone()).collect::<Vec<_>>());
    let params = v.parameters.into_iter().map(|p| Tensor::new(p.shape, p.data).unwrap()).collect();
    let model = TransformerModel::from_parameters(&v.config, params).unwrap();
    let input = EncoderInput::new(v.tokens, v.batch, v.seq_len, Some(v.mask)).unwrap();

    let g = Graph::new();
    let trace = model.bind_frozen(&g).forward(&input).unwrap();
    for (i, want) in v.hidden_states.iter().enumerate() {
        let d = max_diff(trace.hidden(i).unwrap().value().data(), want);
        assert!(d < 1e-10, "H_{i} differs by {d}");
    }
    for (l, heads) in v.attention.iter().enumerate() {
        let layer = trace.layer(l + 1).unwrap();
        for (a, want) in heads.iter().enumerate() {
            let d = max_diff(layer.heads[a].attention.value().data(), want);
            assert!(d < 1e-10, "layer {} head {a} attention differs by {d}", l + 1);
        }
    }
    let d = max_diff(trace.logits().unwrap().value().data(), &v.logits);
    assert!(d < 1e-10, "logits differ by {d}");
}
