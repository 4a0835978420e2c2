//! The canonical three-state example plant and the values printed for it.

use crate::matrix::Mat;
use crate::ss::{DynamicController, UncertainPlant};

fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

pub fn ex1_plant() -> UncertainPlant {
    UncertainPlant::new(
        m(3, 3, &[-1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 1.0, -1.0]),
        m(3, 1, &[1.0, 2.0, 1.0]),
        m(3, 1, &[1.0, 1.0, 1.0]),
        m(1, 3, &[1.0, 0.0, 0.0]),
        m(1, 3, &[1.0, 2.0, 0.0]),
        m(1, 1, &[1.0]),
    )
    .expect("example plant is well formed")
}

/// The published compensator.
pub fn ex1_controller() -> DynamicController {
    DynamicController::new(
        m(3, 3, &[-1.0, -2.0, 0.0, -1.0, -5.0, 1.0, 1.0, -1.0, -1.0]),
        m(3, 1, &[1.0, 2.0, 1.0]),
        m(1, 3, &[1.0, 0.0, 0.0]),
    )
    .expect("example controller is well formed")
}

pub fn ex1_f() -> Mat {
    m(1, 3, &[1.0, 0.0, 0.0])
}

pub fn ex1_l() -> Mat {
    m(3, 1, &[-1.0, -2.0, -1.0])
}

pub fn ex1_printed_a_cl() -> Mat {
    m(
        6,
        6,
        &[
            0.0, 0.0, 0.0, -1.0, 0.0, 0.0, //
            1.0, -1.0, 1.0, -1.0, 0.0, 0.0, //
            2.0, 1.0, -1.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, -2.0, -2.0, 0.0, //
            0.0, 0.0, 0.0, -2.0, -5.0, 1.0, //
            0.0, 0.0, 0.0, 0.0, -1.0, -1.0,
        ],
    )
}

pub fn ex1_printed_b_cl() -> Mat {
    m(6, 1, &[1.0, 2.0, 1.0, 0.0, 0.0, 0.0])
}

pub fn ex1_printed_c_cl() -> Mat {
    m(1, 6, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
}

/// Lower-right block of the printed Σ (three decimals).
pub fn ex1_printed_v() -> Mat {
    m(
        3,
        3,
        &[
            0.178, -0.053, -0.024, //
            -0.053, 0.019, 0.010, //
            -0.024, 0.010, 0.010,
        ],
    )
}

pub fn ex1_printed_sigma() -> Mat {
    crate::matrix::block_diag(&Mat::zeros(3, 3), &ex1_printed_v())
}
