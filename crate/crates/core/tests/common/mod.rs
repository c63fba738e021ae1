#![allow(dead_code)]

use mgslab::{Graph, GraphBuilder, ParamVector, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), normal_vec(rng, r * c, 1.0)).unwrap()
}

pub fn random_params(g: &Graph, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    ParamVector::new(normal_vec(rng, g.num_params(), scale), g.layout().to_vec()).unwrap()
}

pub fn random_batch(g: &Graph, rng: &mut ChaCha8Rng, m: usize) -> Tensor {
    let mut shape = vec![m];
    shape.extend_from_slice(g.input_shape());
    Tensor::new(shape, normal_vec(rng, m * g.input_width(), 1.0)).unwrap()
}

/// Linear map `f(x) = θ·x` without bias.
pub fn linear(inputs: usize) -> Graph {
    GraphBuilder::new(&[inputs])
        .unwrap()
        .dense_with_bias("out", 1, false)
        .unwrap()
        .build()
        .unwrap()
}

pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, dropout: f64) -> Graph {
    let mut b = GraphBuilder::new(&[inputs]).unwrap();
    for (i, &w) in hidden.iter().enumerate() {
        b = b
            .dense(&format!("h{i}"), w)
            .unwrap()
            .relu(&format!("h{i}.relu"))
            .unwrap();
        if dropout > 0.0 {
            b = b.dropout(&format!("h{i}.drop"), dropout).unwrap();
        }
    }
    b.dense("out", outputs).unwrap().build().unwrap()
}

/// conv(2, 3x3) -> relu -> pool -> conv(2, 2x2) -> relu -> dense(3) -> relu -> dense(q)
pub fn small_cnn(outputs: usize, dropout: f64) -> Graph {
    let mut b = GraphBuilder::new(&[8, 8, 2])
        .unwrap()
        .conv("c1", 2, 3)
        .unwrap()
        .relu("c1.relu")
        .unwrap()
        .avg_pool("p1")
        .unwrap()
        .conv("c2", 2, 2)
        .unwrap()
        .relu("c2.relu")
        .unwrap()
        .dense("fc", 3)
        .unwrap()
        .relu("fc.relu")
        .unwrap();
    if dropout > 0.0 {
        b = b.dropout("fc.drop", dropout).unwrap();
    }
    b.dense("out", outputs).unwrap().build().unwrap()
}

/// Central differences of `f` at `params`.
pub fn fd_gradient(params: &ParamVector, h: f64, mut f: impl FnMut(&ParamVector) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        p.values_mut()[i] = x + h;
        let up = f(&p);
        p.values_mut()[i] = x - h;
        let down = f(&p);
        p.values_mut()[i] = x;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(floor)
}
