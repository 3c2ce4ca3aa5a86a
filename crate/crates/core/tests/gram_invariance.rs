//! Relation matrices and the Gram loss only see `A Aᵀ`, so orthogonal
//! right-multiplication of `A` leaves them unchanged.

use kdbench_core::objectives::{gram_mse_loss, relation_matrix};
use kdbench_core::transformer::{EncoderInput, ModelConfig, TransformerModel};
use kdbench_core::{Graph, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

/// Q factor of a random Gaussian-ish matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

/// `[b, s, d] · W` for one `[d, d]` matrix.
fn right_multiply(a: &Tensor, w: &DMatrix<f64>) -> Tensor {
    let d = w.nrows();
    let rows = a.len() / d;
    let m = DMatrix::from_row_slice(rows, d, a.data()) * w;
    let data: Vec<f64> = (0..rows).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

#[test]
fn relation_matrix_ignores_orthogonal_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let (b, s, d) = (rng.random_range(1..4), rng.random_range(2..10), rng.random_range(1..9));
        let data = (0..b * s * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = Tensor::new(vec![b, s, d], data).unwrap();
        let w = orthogonal(d, &mut rng);
        let g = Graph::new();
        let r = relation_matrix(g.constant(&a)).unwrap().value();
        let rw = relation_matrix(g.constant(&right_multiply(&a, &w))).unwrap().value();
        assert!(r.max_abs_diff(&rw) < TOL, "trial {trial}: {}", r.max_abs_diff(&rw));
    }
}

/// Rotates the column block of every relation head in layer `l`'s Q, K and V
/// projections; the layer input is untouched, so `A_{α,l,a}` becomes `A W_{α,a}`.
fn rotate_relation_heads(model: &mut TransformerModel, l: usize, a_r: usize, rng: &mut ChaCha8Rng) {
    let d = model.config().hidden_size;
    let w = d / a_r;
    for qkv in ["query", "key", "value"] {
        let blocks: Vec<DMatrix<f64>> = (0..a_r).map(|_| orthogonal(w, rng)).collect();
        for part in ["weight", "bias"] {
            let name = format!("layers.{l}.attn.{qkv}.{part}");
            let idx = model.names().iter().position(|n| *n == name).unwrap();
            let t = &mut model.parameters_mut()[idx];
            let rows = t.len() / d;
            let mut m = DMatrix::from_row_slice(rows, d, t.data());
            for (k, rot) in blocks.iter().enumerate() {
                let rotated = m.columns(k * w, w) * rot;
                m.columns_mut(k * w, w).copy_from(&rotated);
            }
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = m[(i / d, i % d)]);
        }
    }
}

#[test]
fn gram_loss_ignores_orthogonal_maps_of_student_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = TransformerModel::init(&ModelConfig::new(2, 2, 16, 32, 11, 8).unwrap(), 1).unwrap();
    let input = EncoderInput::padded(&[vec![2, 5, 6, 3, 9], vec![2, 7, 3]], 0).unwrap();
    for trial in 0..100 {
        let heads = [1, 2][trial % 2];
        let a_r = [1, 2, 4][trial % 3];
        let scfg = ModelConfig::new(1 + trial % 2, heads, 8, 16, 11, 8).unwrap();
        let student = TransformerModel::init(&scfg, trial as u64).unwrap();
        let i = scfg.num_layers;
        let mut rotated = student.clone();
        rotate_relation_heads(&mut rotated, i, a_r, &mut rng);
        assert!(!rotated.bit_eq(&student));
        let loss = |s: &TransformerModel| {
            let g = Graph::new();
            let t = teacher.bind_frozen(&g).forward_hidden(&input).unwrap();
            let st = s.bind_frozen(&g).forward_hidden(&input).unwrap();
            gram_mse_loss(&st, &t, i, 1 + trial % 2, a_r).unwrap().item()
        };
        let (before, after) = (loss(&student), loss(&rotated));
        assert!(before > 0.0);
        assert!((before - after).abs() < TOL, "trial {trial}: {before} vs {after}");
    }
}
