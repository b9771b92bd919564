#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use voltvar::controller::{ControllerBundle, Partition, ReactiveBox};
use voltvar::icnn::{IcnnModel, Layer};

const BETA: f64 = 1e-3;

/// `g(x) ≈ (a/2)‖x − 1‖²` on the operating region. With a small softplus
/// temperature, `(4a/β)·softplus_β(u) − (2a/β)u` has gradient
/// `a·u + O(β²u³)`.
pub fn quadratic_model(d: usize, a: f64) -> IcnnModel {
    let layers = vec![
        Layer { w_z: None, w_x: Some(DMatrix::identity(d, d)), b: DVector::zeros(d) },
        Layer {
            w_z: Some(DMatrix::from_element(1, d, 4.0 * a / BETA)),
            w_x: Some(DMatrix::from_element(1, d, -2.0 * a / BETA)),
            b: DVector::zeros(1),
        },
    ];
    IcnnModel::from_layers(d, layers, BETA, 1.0, 1.0).unwrap()
}

/// Single-subgraph bundle with `φ_raw(v) = −a(v − 1)`.
pub fn quadratic_bundle(controllable: &[usize], a: f64, bx: ReactiveBox, epsilon: f64) -> ControllerBundle {
    let d = controllable.len();
    ControllerBundle::new(
        "quad",
        controllable.to_vec(),
        Partition::full(controllable),
        vec![quadratic_model(d, a)],
        bx,
        epsilon,
    )
    .unwrap()
}

pub fn wide_box(d: usize, lim: f64) -> ReactiveBox {
    ReactiveBox::symmetric(DVector::from_element(d, lim)).unwrap()
}
