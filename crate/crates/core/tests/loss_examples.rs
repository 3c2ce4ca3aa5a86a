//! Small worked cases for each loss, checked against plain scalar loops.

use std::collections::BTreeSet;

use kdbench_core::objectives::{
    concat_resplit, cosine_hs_loss, direct_minilm_loss, gram_mse_loss, hs_loss, minilmv2_loss, od_loss, projected_mse,
    relation_matrix, BoundProjections, LayerMapping, ProjectionKey,
};
use kdbench_core::tensor::cosine_similarity_rows;
use kdbench_core::transformer::{EncoderInput, ForwardTrace, ModelConfig, Qkv, TransformerModel};
use kdbench_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn student() -> TransformerModel {
    TransformerModel::init(&ModelConfig::new(2, 2, 8, 16, 11, 6).unwrap(), 1).unwrap()
}

fn teacher() -> TransformerModel {
    TransformerModel::init(&ModelConfig::new(3, 2, 16, 32, 11, 6).unwrap(), 2).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Rows of the concatenated heads of `α` at `layer`, split into `a_r` slices; batch 1 only.
fn slices(trace: &ForwardTrace<'_>, layer: usize, qkv: Qkv, a_r: usize) -> Vec<Vec<Vec<f64>>> {
    let heads: Vec<Tensor> = trace.layer(layer).unwrap().heads_of(qkv).iter().map(|h| h.value()).collect();
    let seq = heads[0].shape()[1];
    let dk = heads[0].shape()[2];
    let rows: Vec<Vec<f64>> =
        (0..seq).map(|r| heads.iter().flat_map(|h| h.data()[r * dk..(r + 1) * dk].to_vec()).collect()).collect();
    let w = rows[0].len() / a_r;
    (0..a_r).map(|a| rows.iter().map(|row| row[a * w..(a + 1) * w].to_vec()).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scaled_gram(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = (a[0].len() as f64).sqrt();
    a.iter().map(|x| a.iter().map(|y| dot(x, y) / s).collect()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn od_worked_cases() {
    let g = Graph::new();
    let zeros = g.leaf(&Tensor::zeros(&[1, 4]));
    let v = od_loss(g.constant(&Tensor::zeros(&[1, 4])), zeros, 1.0, &[0]).unwrap();
    assert!((v.item() - 4f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random(&mut rng, &[3, 5]);
    let g = Graph::new();
    let s = g.leaf(&z.clone().with_grad());
    let loss = od_loss(g.constant(&z), s, 1.0, &[0, 1, 2]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.data(s).unwrap().iter().all(|x| x.abs() < 1e-10));

    let (zt, zs) = (random(&mut rng, &[3, 5]), random(&mut rng, &[3, 5]));
    let temp = 2.0;
    let mut want = 0.0;
    for r in 0..3 {
        let row = |t: &Tensor| t.data()[r * 5..(r + 1) * 5].iter().map(|x| x / temp).collect::<Vec<_>>();
        let (p, q) = (softmax(&row(&zt)), softmax(&row(&zs)));
        want -= p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
    }
    want *= temp * temp / 3.0;
    let g = Graph::new();
    let got = od_loss(g.constant(&zt), g.leaf(&zs), temp, &[0, 1, 2]).unwrap().item();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn hs_worked_cases() {
    let g = Graph::new();
    let got = projected_mse(
        g.leaf(&Tensor::zeros(&[3, 4])),
        g.leaf(&Tensor::zeros(&[4, 6])),
        g.constant(&Tensor::new(vec![3, 6], vec![1.0; 18]).unwrap()),
    )
    .unwrap();
    assert_eq!(got.item(), 1.0);

    let (s, t) = (student(), teacher());
    let input = EncoderInput::padded(&[vec![2, 5, 6, 7, 3], vec![2, 8, 3]], 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let (st, tt) = (s.bind(&g).forward_hidden(&input).unwrap(), t.bind_frozen(&g).forward_hidden(&input).unwrap());
    let keys = [(1, 2), (2, 3)];
    let bank = BoundProjections::from_vars(
        keys.map(|(i, j)| (ProjectionKey::Hidden { student: i, teacher: j }, g.leaf(&random(&mut rng, &[8, 16])))),
    );
    let set = |j: usize| BTreeSet::from([j]);
    let both = LayerMapping::new(3, vec![set(2), set(3)]).unwrap();
    let first = LayerMapping::new(3, vec![set(2), BTreeSet::new()]).unwrap();
    let second = LayerMapping::new(3, vec![BTreeSet::new(), set(3)]).unwrap();
    let sum = hs_loss(&st, &tt, &first, &bank).unwrap().item() + hs_loss(&st, &tt, &second, &bank).unwrap().item();
    let got = hs_loss(&st, &tt, &both, &bank).unwrap().item();
    assert!((got - sum).abs() < 1e-12, "{got} vs {sum}");
    assert!(got > 0.0);
}

#[test]
fn cosine_worked_cases() {
    let g = Graph::new();
    let t = Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.1]]).unwrap();
    let neg = t.data().iter().map(|x| -x).collect::<Vec<_>>();
    let neg = g.constant(&Tensor::new(vec![2, 3], neg).unwrap());
    let tv = g.constant(&t);
    for c in cosine_similarity_rows(neg, tv).unwrap().value().data() {
        assert!((1.0 - c - 2.0).abs() < 1e-12);
    }
    let s = g.constant(&Tensor::from_rows(&[&[1.0, 2.0, -0.5], &[0.2, 0.1, 0.9]]).unwrap());
    let s5 = s.scale(5.0);
    let (a, b) = (cosine_similarity_rows(s, tv).unwrap().value(), cosine_similarity_rows(s5, tv).unwrap().value());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    let m = teacher();
    let g = Graph::new();
    let tr = m.bind(&g).forward_hidden(&EncoderInput::single(&[2, 4, 9, 3]).unwrap()).unwrap();
    let mapping = LayerMapping::uniform_cons(3, 3).unwrap();
    assert!(cosine_hs_loss(&tr, &tr, &mapping).unwrap().item().abs() < 1e-12);
}

#[test]
fn concat_resplit_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let heads: Vec<_> = (0..12).map(|_| g.constant(&random(&mut rng, &[1, 3, 64]))).collect();
    let same = concat_resplit(&heads, 12).unwrap();
    for (a, b) in heads.iter().zip(&same) {
        assert_eq!(a.value(), b.value());
    }
    let parts = concat_resplit(&heads, 48).unwrap();
    assert_eq!(parts.len(), 48);
    assert!(parts.iter().all(|p| p.shape() == vec![1, 3, 16]));
    for r in 0..3 {
        let before: Vec<f64> = heads.iter().flat_map(|h| h.value().data()[r * 64..(r + 1) * 64].to_vec()).collect();
        let after: Vec<f64> = parts.iter().flat_map(|p| p.value().data()[r * 16..(r + 1) * 16].to_vec()).collect();
        assert_eq!(before, after);
    }
}

#[test]
fn single_token_cases() {
    let g = Graph::new();
    let r = relation_matrix(g.constant(&Tensor::new(vec![1, 1, 3], vec![0.4, -2.0, 7.0]).unwrap())).unwrap();
    assert_eq!(r.value().data(), &[1.0]);

    let (s, t) = (student(), teacher());
    let input = EncoderInput::single(&[7]).unwrap();
    let g = Graph::new();
    let (st, tt) = (s.bind(&g).forward_hidden(&input).unwrap(), t.bind_frozen(&g).forward_hidden(&input).unwrap());
    assert!(minilmv2_loss(&st, &tt, 2, 3, 2).unwrap().item().abs() < 1e-12);

    let mut want = 0.0;
    for qkv in Qkv::ALL {
        for (a, b) in slices(&st, 2, qkv, 2).iter().zip(slices(&tt, 3, qkv, 2)) {
            want += (dot(&a[0], &a[0]) - dot(&b[0], &b[0])).powi(2);
        }
    }
    let got = gram_mse_loss(&st, &tt, 2, 3, 2).unwrap().item();
    assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn minilmv2_two_tokens_match_scalar_loops() {
    let (s, t) = (student(), teacher());
    let input = EncoderInput::single(&[4, 9]).unwrap();
    let g = Graph::new();
    let (st, tt) = (s.bind(&g).forward_hidden(&input).unwrap(), t.bind_frozen(&g).forward_hidden(&input).unwrap());
    let mut want = 0.0;
    for qkv in Qkv::ALL {
        for (a, b) in slices(&st, 2, qkv, 2).iter().zip(slices(&tt, 3, qkv, 2)) {
            let (gs, gt) = (scaled_gram(a), scaled_gram(&b));
            for (zs, zt) in gs.iter().zip(&gt) {
                let (p, q) = (softmax(zt), softmax(zs));
                want -= p.iter().zip(&q).map(|(x, y)| x * y.ln()).sum::<f64>() / 2.0;
            }
        }
    }
    let got = minilmv2_loss(&st, &tt, 2, 3, 2).unwrap().item();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!(got > 0.0);
}

#[test]
fn direct_minilm_is_a_sum_of_per_slice_terms() {
    let (s, t) = (student(), teacher());
    let input = EncoderInput::single(&[2, 6, 8, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Graph::new();
    let (st, tt) = (s.bind(&g).forward_hidden(&input).unwrap(), t.bind_frozen(&g).forward_hidden(&input).unwrap());
    let mut ws = Vec::new();
    for qkv in Qkv::ALL {
        for head in 1..=2 {
            ws.push((ProjectionKey::Relation { qkv, head }, random(&mut rng, &[4, 8])));
        }
    }
    let bank = BoundProjections::from_vars(ws.iter().map(|(k, w)| (*k, g.leaf(w))));
    let mut want = 0.0;
    for qkv in Qkv::ALL {
        for (a, (xs, ys)) in slices(&st, 2, qkv, 2).iter().zip(slices(&tt, 3, qkv, 2)).enumerate() {
            let w = &ws.iter().find(|(k, _)| *k == ProjectionKey::Relation { qkv, head: a + 1 }).unwrap().1;
            let mut term = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                for (c, yc) in y.iter().enumerate() {
                    let p: f64 = x.iter().enumerate().map(|(r, xr)| xr * w.data()[r * 8 + c]).sum();
                    term += (p - yc).powi(2);
                }
            }
            want += term / (xs.len() * 8) as f64;
        }
    }
    let got = direct_minilm_loss(&st, &tt, 2, 3, 2, &bank).unwrap().item();
    assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
    let partial = BoundProjections::from_vars(ws[..5].iter().map(|(k, w)| (*k, g.leaf(w))));
    assert!(direct_minilm_loss(&st, &tt, 2, 3, 2, &partial).is_err());
}
