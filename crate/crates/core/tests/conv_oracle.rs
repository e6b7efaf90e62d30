mod common;

use calcseg::layers::conv3d_forward;
use calcseg::tensor_core::Tensor;
use common::{conv_case_error, conv_cases, naive_conv};

#[test]
fn matches_direct_loops_on_random_cases() {
    let cases = conv_cases(24, 11);
    for (i, c) in cases.iter().enumerate() {
        let err = conv_case_error(c);
        assert!(
            err < 1e-5,
            "case {i} x{:?} w{:?} s{:?}: {err}",
            c.x.shape(),
            c.w.shape(),
            c.stride
        );
    }
}

#[test]
fn named_case_shape() {
    let c = &conv_cases(1, 3)[0];
    let y = conv3d_forward(&c.x, &c.w, None, c.stride).unwrap();
    assert_eq!(y.shape(), &[3, 6, 4, 4]);
}

#[test]
fn oracle_agrees_on_trivial_kernels() {
    let x = Tensor::<f32>::ones(&[1, 3, 3, 3]);
    let w = Tensor::<f32>::ones(&[1, 1, 3, 3, 3]);
    assert_eq!(naive_conv(&x, &w, [1, 1, 1]), vec![27.0]);
    assert_eq!(
        conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap().data(),
        &[27.0]
    );
}
