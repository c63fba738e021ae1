//! Fixtures shared by the benchmarks.

use mgslab::{build, init, ArchSpec, Graph, InitSpec, ParamVector, Tensor};

/// He-initialised FCN on `inputs` features with a deterministic batch of `m` rows.
pub fn fcn_fixture(
    inputs: usize,
    layers: usize,
    width: usize,
    outputs: usize,
    m: usize,
) -> (Graph, ParamVector, Tensor) {
    let g = build(&ArchSpec::fcn(layers, width), &[inputs], outputs).expect("valid fcn");
    let p = init(&g, InitSpec { seed: 0 }).expect("init");
    (g, p, batch(&[inputs], m))
}

/// LeNet on 28x28 images.
pub fn lenet_fixture(m: usize) -> (Graph, ParamVector, Tensor) {
    let g = build(&ArchSpec::lenet(), &[28, 28, 1], 10).expect("valid lenet");
    let p = init(&g, InitSpec { seed: 0 }).expect("init");
    (g, p, batch(&[28, 28, 1], m))
}

fn batch(input_shape: &[usize], m: usize) -> Tensor {
    let width: usize = input_shape.iter().product();
    let data = (0..m * width)
        .map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    let mut shape = vec![m];
    shape.extend_from_slice(input_shape);
    Tensor::new(shape, data).expect("batch shape")
}
