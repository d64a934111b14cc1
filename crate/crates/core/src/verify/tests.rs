use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kernels::softmax_rows;
use crate::network::sanet_attend;
use crate::tensor::Tensor;

#[test]
fn finite_difference_of_square() {
    let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[3.0f64], &[0], H_F64).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-8);
    let g = finite_diff_grad(|_: &[f64]| 1.5, &[3.0f64, 2.0], &[0, 1], H_F64).unwrap();
    assert_eq!(g, vec![0.0, 0.0]);
}

#[test]
fn finite_difference_rejects_bad_input() {
    let err = finite_diff_grad(
        |x: &[f64]| if x[0] > 3.0 { f64::NAN } else { 0.0 },
        &[3.0f64],
        &[0],
        H_F64,
    );
    assert!(matches!(err, Err(VerifyError::NonFiniteLoss { coord: 0 })));
    assert!(matches!(
        finite_diff_grad(|_: &[f64]| 0.0, &[1.0f64], &[0], 0.0),
        Err(VerifyError::BadStep(_))
    ));
}

#[test]
fn sampled_coords_are_distinct_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = sample_coords(1000, MAX_COORDS, &mut rng);
    assert_eq!(c.len(), MAX_COORDS);
    assert!(c.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(sample_coords(5, MAX_COORDS, &mut rng), vec![0, 1, 2, 3, 4]);
}

proptest! {
    #[test]
    fn oracle_weights_ignore_constant_shift(row in prop::collection::vec(-5.0f64..5.0, 1..12), c in -5.0f64..5.0) {
        let moved: Vec<f64> = row.iter().map(|v| v + c).collect();
        for (a, b) in eq5_weights(&row).iter().zip(eq5_weights(&moved)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bruteforce_matches_fast_path(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 16, 16);
        let fast = sanet_attend(&inst.params, &inst.content, &inst.style).unwrap();
        let slow = attention_bruteforce(&inst.params, &inst.content, &inst.style).unwrap();
        prop_assert!(fast.tensor.cast::<f64>().max_abs_diff(&slow.tensor).unwrap() <= ATTENTION_TOL);
    }
}

#[test]
fn single_style_position_broadcasts_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inst = random_instance(&mut rng, 8, 16);
    while inst.style.tensor.shape().plane() != 1 {
        inst = random_instance(&mut rng, 8, 16);
    }
    let out = attention_bruteforce(&inst.params, &inst.content, &inst.style).unwrap();
    let s = out.tensor.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = out.tensor.plane(n, c);
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }
}

fn broken_softmax(t: &Tensor<f32>) -> Tensor<f32> {
    softmax_rows(t).map(|v| v * 1.01)
}

#[test]
fn corrupted_softmax_is_caught() {
    assert!(row_normalization_check(3, 10, softmax_rows::<f32>).pass);
    assert!(!row_normalization_check(3, 10, broken_softmax).pass);
    let reports = run_property_suite_with(
        3,
        &SuiteHooks {
            softmax: broken_softmax,
        },
    );
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    assert!(failed.contains(&"softmax_row_sums"));
    assert!(failed.contains(&"attention_row_sums"));
}

#[test]
fn property_suite_passes() {
    let reports = run_property_suite(11);
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, CHECK_NAMES);
    for r in &reports {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn primitive_gradients_agree() {
    for r in check_primitives(5).unwrap() {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn reports_serialize_as_csv() {
    let mut buf = Vec::new();
    write_reports_csv(&[OracleReport::flag("x", true)], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "name,max_abs,max_rel,tol,pass\nx,0.0,0.0,0.0,true\n"
    );
}
