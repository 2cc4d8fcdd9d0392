use proptest::prelude::*;

use super::counters;
use super::*;
use crate::gradcheck::{self, Probe};
use crate::rng::Rng;

fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_f64(data, shape).unwrap()
}

fn naive_bmm(a: &[f64], b: &[f64], batch: usize, p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * p * r];
    for n in 0..batch {
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += a[n * p * q + i * q + k] * b[n * q * r + k * r + j];
                }
                out[n * p * r + i * r + j] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_leaves_operand_unchanged() {
    let mut rng = Rng::new(1);
    let b: Tensor<f64> = rng.normal_tensor(&[1, 3, 3], 1.0);
    let out = Tensor::eye_batched(1, 3).matmul_batched(&b).unwrap();
    assert!(out.bit_eq(&b));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(2);
    let a: Tensor<f64> = rng.normal_tensor(&[2, 3, 4], 1.0);
    let b: Tensor<f64> = rng.normal_tensor(&[2, 4, 2], 1.0);
    let out = a.matmul_batched(&b).unwrap();
    assert_eq!(out.shape(), &[2, 3, 2]);
    assert!(max_diff(out.data(), &naive_bmm(a.data(), b.data(), 2, 3, 4, 2)) <= 1e-12);
}

#[test]
fn matmul_of_zeros_is_zero() {
    let mut rng = Rng::new(3);
    let b: Tensor<f64> = rng.normal_tensor(&[2, 4, 5], 1.0);
    let out = Tensor::zeros(&[2, 3, 4]).matmul_batched(&b).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_broadcasts_batch_of_one() {
    let mut rng = Rng::new(4);
    let a: Tensor<f64> = rng.normal_tensor(&[3, 2, 4], 1.0);
    let b: Tensor<f64> = rng.normal_tensor(&[1, 4, 3], 1.0);
    let out = a.matmul_batched(&b).unwrap();
    let tiled: Vec<f64> = (0..3).flat_map(|_| b.data().to_vec()).collect();
    assert!(max_diff(out.data(), &naive_bmm(a.data(), &tiled, 3, 2, 4, 3)) <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3, 4]);
    let b = Tensor::<f64>::zeros(&[2, 5, 2]);
    let msg = a.matmul_batched(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3, 4]") && msg.contains("[2, 5, 2]"), "{msg}");
    assert!(Tensor::<f64>::zeros(&[2, 3, 4]).matmul_batched(&Tensor::zeros(&[3, 4, 2])).is_err());
}

#[test]
fn grouped_matmul_picks_expert_slices() {
    let mut rng = Rng::new(5);
    let x: Tensor<f64> = rng.normal_tensor(&[3, 2, 4], 1.0);
    let w: Tensor<f64> = rng.normal_tensor(&[2, 4, 3], 1.0);
    let groups = [1, 0, 1];
    let out = x.matmul_grouped(&w, &groups).unwrap();
    let picked: Vec<f64> = groups
        .iter()
        .flat_map(|&g| w.data()[g * 12..(g + 1) * 12].to_vec())
        .collect();
    assert!(max_diff(out.data(), &naive_bmm(x.data(), &picked, 3, 2, 4, 3)) <= 1e-12);
    assert!(x.matmul_grouped(&w, &[0, 2, 1]).is_err());
}

#[test]
fn segmented_matmul_matches_per_row_oracle() {
    let mut rng = Rng::new(14);
    let a: Tensor<f64> = rng.normal_tensor(&[6, 3], 1.0);
    let w: Tensor<f64> = rng.normal_tensor(&[3, 3, 2], 1.0);
    let segs = [(2, 2), (0, 3), (2, 0), (1, 1)];
    let row_group = [2, 2, 0, 0, 0, 1];
    let out = a.matmul_segmented(&w, &segs).unwrap();
    for (row, &g) in row_group.iter().enumerate() {
        for j in 0..2 {
            let expect: f64 = (0..3).map(|k| a.data()[row * 3 + k] * w.data()[g * 6 + k * 2 + j]).sum();
            assert!((out.data()[row * 2 + j] - expect).abs() <= 1e-12);
        }
    }
    let bias: Tensor<f64> = rng.normal_tensor(&[6, 2], 1.0);
    let fused = Tensor::fused_multiply_accumulate_segmented(&bias, &a, &w, &segs).unwrap();
    assert!(fused.bit_eq(&out.add(&bias).unwrap()));
    assert!(a.matmul_segmented(&w, &[(0, 5)]).is_err());
    assert!(a.matmul_segmented(&w, &[(3, 6)]).is_err());
}

#[test]
fn fused_multiply_accumulate_cases() {
    let mut rng = Rng::new(6);
    let a: Tensor<f64> = rng.normal_tensor(&[2, 4, 4], 1.0);
    let b: Tensor<f64> = rng.normal_tensor(&[2, 4, 4], 1.0);
    let bias: Tensor<f64> = rng.normal_tensor(&[2, 4, 4], 1.0);

    let zero = Tensor::zeros(&[2, 4, 4]);
    let fused_zero = Tensor::fused_multiply_accumulate(&zero, &a, &b).unwrap();
    assert!(fused_zero.bit_eq(&a.matmul_batched(&b).unwrap()));

    let fused = Tensor::fused_multiply_accumulate(&bias, &a, &b).unwrap();
    let two_step = a.matmul_batched(&b).unwrap().add(&bias).unwrap();
    assert!(fused.bit_eq(&two_step));

    let fused_a0 = Tensor::fused_multiply_accumulate(&bias, &Tensor::zeros(&[2, 4, 4]), &b).unwrap();
    assert!(fused_a0.bit_eq(&bias));

    assert!(Tensor::fused_multiply_accumulate(&Tensor::zeros(&[2, 4, 3]), &a, &b).is_err());
}

#[test]
fn softmax_closed_forms() {
    let u = t64(&[2.5; 4], &[4]).softmax(0).unwrap();
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let s = t64(&[0.0, 3f64.ln()], &[2]).softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);

    let big = t64(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
    assert!(big.all_finite());
    assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);
}

#[test]
fn softmax_slices_sum_to_one_along_any_axis() {
    let mut rng = Rng::new(7);
    let x: Tensor<f64> = rng.normal_tensor(&[3, 4, 5], 3.0);
    for axis in 0..3 {
        let y = x.softmax(axis).unwrap();
        let sums = y.sum_axis(axis).unwrap();
        assert!(sums.data().iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }
    assert!(x.softmax(3).is_err());
}

#[test]
fn masked_softmax_zeroes_masked_and_empty_rows() {
    counters::reset_fully_masked_rows();
    let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let keep = [true, false, true, false, false, false];
    let y = x.softmax_masked(1, &keep).unwrap();
    let e = (1.0f64 - 3.0).exp();
    assert!((y.data()[0] - e / (1.0 + e)).abs() < 1e-15);
    assert_eq!(y.data()[1], 0.0);
    assert!(y.data()[3..].iter().all(|&v| v == 0.0));
    assert_eq!(counters::fully_masked_rows(), 1);
}

#[test]
fn silu_values() {
    let y = t64(&[0.0, 1.0, 40.0], &[3]).silu();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((y.data()[1] - 0.731059).abs() < 1e-6);
    assert!((y.data()[2] - 40.0).abs() < 1e-12);
}

#[test]
fn index_select_cases() {
    let x = t64(&[0.0, 1.0, 10.0, 11.0, 20.0, 21.0], &[3, 2]);
    assert!(x.index_select(0, &[0, 1, 2]).unwrap().bit_eq(&x));
    assert_eq!(x.index_select(0, &[2, 0]).unwrap().data(), &[20.0, 21.0, 0.0, 1.0]);
    assert_eq!(x.index_select(0, &[1, 1]).unwrap().data(), &[10.0, 11.0, 10.0, 11.0]);
    assert_eq!(x.index_select(1, &[1]).unwrap().data(), &[1.0, 11.0, 21.0]);
    let err = x.index_select(0, &[0, 3]).unwrap_err().to_string();
    assert!(err.contains("index 3"), "{err}");
}

#[test]
fn index_add_cases() {
    let values = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
    let out = Tensor::zeros(&[3, 2]).index_add(0, &[2, 0, 1], &values).unwrap();
    assert_eq!(out.data(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);

    let vw = t64(&[1.0, 2.0, 30.0, 40.0], &[2, 2]);
    let acc = Tensor::zeros(&[3, 2]).index_add(0, &[1, 1], &vw).unwrap();
    assert_eq!(acc.data(), &[0.0, 0.0, 31.0, 42.0, 0.0, 0.0]);

    assert!(Tensor::zeros(&[3, 2]).index_add(0, &[3], &t64(&[1.0, 1.0], &[1, 2])).is_err());
    assert!(Tensor::zeros(&[3, 2]).index_add(0, &[0, 1], &t64(&[1.0, 1.0], &[1, 2])).is_err());
}

#[test]
fn index_add_realizes_residual_form() {
    let mut rng = Rng::new(8);
    let x: Tensor<f64> = rng.normal_tensor(&[5, 3], 1.0);
    let w: Tensor<f64> = rng.normal_tensor(&[3, 3], 1.0);
    let block = x.matmul(&w).unwrap().silu();
    let scattered = x.index_add(0, &[0, 1, 2, 3, 4], &block).unwrap();
    let explicit = x.add(&block).unwrap();
    assert!(scattered.bit_eq(&explicit));
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::zeros(&[2, 3]).requires_grad_();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_softmax_sum_vanishes() {
    let mut rng = Rng::new(9);
    let x = rng.normal_tensor::<f64>(&[2, 4], 1.0).requires_grad_();
    x.softmax(1).unwrap().sum().backward().unwrap();
    assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn backward_rejects_non_scalar_and_constant_losses() {
    let x = Tensor::<f64>::zeros(&[2]).requires_grad_();
    assert!(x.scale(2.0).backward().is_err());
    assert!(Tensor::<f64>::zeros(&[]).sum().backward().is_err());
}

#[test]
fn unreached_leaves_report_zero_gradient() {
    let x = Tensor::<f64>::ones(&[2]).requires_grad_();
    let unused = Tensor::<f64>::ones(&[3]).requires_grad_();
    x.sum().backward().unwrap();
    assert!(unused.grad().is_none());
    assert_eq!(unused.grad_or_zeros(), vec![0.0; 3]);
}

#[test]
fn gradients_accumulate_across_reuse() {
    let x = t64(&[1.0, 2.0], &[2]).requires_grad_();
    x.mul(&x).unwrap().add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 5.0]);
}

/// Weighted sum so every output element receives a distinct upstream gradient.
fn probe(y: &Tensor<f64>, rng: &mut Rng) -> Tensor<f64> {
    let w: Tensor<f64> = rng.normal_tensor(y.shape(), 1.0);
    y.mul(&w).unwrap().sum()
}

type Build = fn(&[Tensor<f64>]) -> Tensor<f64>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |p| p[0].matmul_batched(&p[1]).unwrap()),
        ("matmul_broadcast", vec![vec![1, 3, 4], vec![3, 4, 2]], |p| p[0].matmul_batched(&p[1]).unwrap()),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |p| p[0].matmul(&p[1]).unwrap()),
        ("matmul_grouped", vec![vec![3, 2, 4], vec![2, 4, 3]], |p| {
            p[0].matmul_grouped(&p[1], &[1, 0, 1]).unwrap()
        }),
        ("matmul_segmented", vec![vec![6, 3], vec![3, 3, 2]], |p| {
            p[0].matmul_segmented(&p[1], &[(2, 2), (0, 3), (2, 0), (1, 1)]).unwrap()
        }),
        ("fma_segmented", vec![vec![5, 2], vec![5, 3], vec![2, 3, 2]], |p| {
            Tensor::fused_multiply_accumulate_segmented(&p[0], &p[1], &p[2], &[(1, 3), (0, 2)]).unwrap()
        }),
        ("fma", vec![vec![2, 3, 2], vec![2, 3, 4], vec![2, 4, 2]], |p| {
            Tensor::fused_multiply_accumulate(&p[0], &p[1], &p[2]).unwrap()
        }),
        ("fma_grouped", vec![vec![3, 2, 3], vec![3, 2, 4], vec![2, 4, 3]], |p| {
            Tensor::fused_multiply_accumulate_grouped(&p[0], &p[1], &p[2], &[0, 0, 1]).unwrap()
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |p| p[0].add(&p[1]).unwrap()),
        ("sub", vec![vec![2, 3], vec![2, 3]], |p| p[0].sub(&p[1]).unwrap()),
        ("mul", vec![vec![2, 3], vec![2, 3]], |p| p[0].mul(&p[1]).unwrap()),
        ("scale", vec![vec![2, 3]], |p| p[0].scale(-1.7)),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |p| p[0].add_bias(&p[1]).unwrap()),
        ("scale_rows", vec![vec![3, 4], vec![3]], |p| p[0].scale_rows(&p[1]).unwrap()),
        ("softmax_last", vec![vec![2, 5]], |p| p[0].softmax(1).unwrap()),
        ("softmax_first", vec![vec![4, 3]], |p| p[0].softmax(0).unwrap()),
        ("softmax_masked", vec![vec![3, 3]], |p| {
            p[0].softmax_masked(1, &[true, false, false, true, true, false, true, true, true])
                .unwrap()
        }),
        ("silu", vec![vec![2, 4]], |p| p[0].silu()),
        ("index_select", vec![vec![4, 3]], |p| p[0].index_select(0, &[3, 1, 1, 0]).unwrap()),
        ("index_select_inner", vec![vec![2, 4, 2]], |p| p[0].index_select(1, &[2, 2, 0]).unwrap()),
        ("index_add", vec![vec![4, 3], vec![3, 3]], |p| p[0].index_add(0, &[2, 0, 2], &p[1]).unwrap()),
        ("reshape", vec![vec![2, 6]], |p| p[0].reshape(&[3, 4]).unwrap().silu()),
        ("permute", vec![vec![2, 3, 4]], |p| p[0].permute(&[2, 0, 1]).unwrap()),
        ("transpose_last2", vec![vec![2, 3, 4]], |p| p[0].transpose_last2().unwrap()),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |p| {
            p[0].layer_norm(&p[1], &p[2], 1e-5).unwrap()
        }),
        ("rope", vec![vec![3, 6]], |p| p[0].rope(&[0, 5, 2], 2, 10000.0).unwrap()),
        ("cross_entropy", vec![vec![3, 5]], |p| p[0].cross_entropy(&[4, 0, 2]).unwrap()),
        ("sum", vec![vec![2, 3]], |p| p[0].sum()),
        ("sum_axis", vec![vec![2, 3, 4]], |p| p[0].sum_axis(1).unwrap()),
        ("mean_axis", vec![vec![2, 3, 4]], |p| p[0].mean_axis(2).unwrap()),
        ("concat", vec![vec![2, 3], vec![1, 3]], |p| Tensor::concat(&[p[0].clone(), p[1].clone()]).unwrap()),
    ]
}

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    for (name, shapes, build) in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = Rng::new(seed).fork(name);
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
            let weight_seed = rng.next_u64();
            let report = gradcheck::check(&params, 1e-4, None, &mut rng, |p| {
                Ok(Probe::smooth(probe(&build(p), &mut Rng::new(weight_seed))))
            })
            .unwrap();
            assert_eq!(report.skipped, 0);
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst <= 1e-4, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn random_composite_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[2, 3, 3], 0.5);
        let report = gradcheck::check(&[x, w], 1e-4, None, &mut rng, |p| {
            let g = p[0].index_select(0, &[0, 2, 3, 1, 2, 0]).unwrap().reshape(&[2, 3, 3]).unwrap();
            let h = g.matmul_grouped(&p[1], &[1, 0]).unwrap().silu().softmax(2).unwrap();
            let back = p[0].index_add(0, &[3, 3, 0, 1, 2, 0], &h.reshape(&[6, 3]).unwrap()).unwrap();
            Ok(Probe::smooth(back.mul(&back).unwrap().sum()))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {:e}", report.max_rel_error);
    }
}

#[test]
fn f32_and_f64_paths_agree() {
    for (name, shapes, build) in op_cases() {
        let mut rng = Rng::new(11).fork(name);
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.uniform_tensor(s, -1.0, 1.0)).collect();
        let y64 = build(&params);
        let p32: Vec<Tensor<f32>> = params.iter().map(Tensor::cast).collect();
        let y32 = replay_f32(name, &p32);
        for (a, b) in y64.data().iter().zip(y32.data()) {
            let rel = (a - *b as f64).abs() / a.abs().max(1.0);
            assert!(rel <= 1e-4, "{name}: {a} vs {b}");
        }
    }
}

fn replay_f32(name: &str, p: &[Tensor<f32>]) -> Tensor<f32> {
    match name {
        "matmul_batched" | "matmul_broadcast" => p[0].matmul_batched(&p[1]).unwrap(),
        "matmul" => p[0].matmul(&p[1]).unwrap(),
        "matmul_grouped" => p[0].matmul_grouped(&p[1], &[1, 0, 1]).unwrap(),
        "matmul_segmented" => p[0].matmul_segmented(&p[1], &[(2, 2), (0, 3), (2, 0), (1, 1)]).unwrap(),
        "fma_segmented" => {
            Tensor::fused_multiply_accumulate_segmented(&p[0], &p[1], &p[2], &[(1, 3), (0, 2)]).unwrap()
        }
        "fma" => Tensor::fused_multiply_accumulate(&p[0], &p[1], &p[2]).unwrap(),
        "fma_grouped" => Tensor::fused_multiply_accumulate_grouped(&p[0], &p[1], &p[2], &[0, 0, 1]).unwrap(),
        "add" => p[0].add(&p[1]).unwrap(),
        "sub" => p[0].sub(&p[1]).unwrap(),
        "mul" => p[0].mul(&p[1]).unwrap(),
        "scale" => p[0].scale(-1.7),
        "add_bias" => p[0].add_bias(&p[1]).unwrap(),
        "scale_rows" => p[0].scale_rows(&p[1]).unwrap(),
        "softmax_last" => p[0].softmax(1).unwrap(),
        "softmax_first" => p[0].softmax(0).unwrap(),
        "softmax_masked" => p[0]
            .softmax_masked(1, &[true, false, false, true, true, false, true, true, true])
            .unwrap(),
        "silu" => p[0].silu(),
        "index_select" => p[0].index_select(0, &[3, 1, 1, 0]).unwrap(),
        "index_select_inner" => p[0].index_select(1, &[2, 2, 0]).unwrap(),
        "index_add" => p[0].index_add(0, &[2, 0, 2], &p[1]).unwrap(),
        "reshape" => p[0].reshape(&[3, 4]).unwrap().silu(),
        "permute" => p[0].permute(&[2, 0, 1]).unwrap(),
        "transpose_last2" => p[0].transpose_last2().unwrap(),
        "layer_norm" => p[0].layer_norm(&p[1], &p[2], 1e-5).unwrap(),
        "rope" => p[0].rope(&[0, 5, 2], 2, 10000.0).unwrap(),
        "cross_entropy" => p[0].cross_entropy(&[4, 0, 2]).unwrap(),
        "sum" => p[0].sum(),
        "sum_axis" => p[0].sum_axis(1).unwrap(),
        "mean_axis" => p[0].mean_axis(2).unwrap(),
        "concat" => Tensor::concat(&[p[0].clone(), p[1].clone()]).unwrap(),
        other => panic!("no f32 replay for {other}"),
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs_and_gradients() {
    let run = || {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor::<f64>(&[3, 4], 1.0).requires_grad_();
        let w = rng.normal_tensor::<f64>(&[4, 4], 1.0).requires_grad_();
        let y = x.matmul(&w).unwrap().softmax(1).unwrap().silu();
        probe(&y, &mut rng).backward().unwrap();
        (y, x.grad().unwrap(), w.grad().unwrap())
    };
    let (y1, gx1, gw1) = run();
    let (y2, gx2, gw2) = run();
    assert!(y1.bit_eq(&y2));
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn flop_counter_follows_declared_convention() {
    counters::reset_flops();
    let a = Tensor::<f64>::zeros(&[2, 3, 4]);
    let b = Tensor::<f64>::zeros(&[2, 4, 5]);
    a.matmul_batched(&b).unwrap();
    assert_eq!(counters::flops(), 2 * 2 * 3 * 4 * 5);
    counters::reset_flops();
    Tensor::<f64>::zeros(&[3, 4]).softmax(1).unwrap();
    assert_eq!(counters::flops(), 5 * 12);
    counters::reset_flops();
    Tensor::<f64>::zeros(&[4, 2]).index_add(0, &[1, 1], &Tensor::zeros(&[2, 2])).unwrap();
    assert_eq!(counters::flops(), 4);
    counters::reset_flops();
    Tensor::<f64>::zeros(&[4, 2]).silu();
    assert_eq!(counters::flops(), 0);
}

#[test]
fn rope_at_position_zero_is_identity_and_preserves_norm() {
    let mut rng = Rng::new(13);
    let x: Tensor<f64> = rng.normal_tensor(&[3, 8], 1.0);
    let y = x.rope(&[0, 0, 0], 4, 10000.0).unwrap();
    assert!(y.bit_eq(&x));
    let z = x.rope(&[1, 7, 100], 0, 10000.0).unwrap();
    for (a, b) in x.data().chunks(2).zip(z.data().chunks(2)) {
        assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
    }
    assert!(x.rope(&[0, 1, 2], 3, 10000.0).is_err());
}

#[test]
fn checkpoint_scalar_helpers_round_trip() {
    let mut buf = Vec::new();
    1.25f32.write_le(&mut buf);
    (-3.5f64).write_le(&mut buf);
    assert_eq!(f32::read_le(&buf[..4]), 1.25);
    assert_eq!(f64::read_le(&buf[4..]), -3.5);
    assert_eq!(DType::from_code(DType::F64.code()), Some(DType::F64));
    assert_eq!(DType::from_code(7), None);
}

proptest! {
    #[test]
    fn index_select_and_index_add_are_adjoint(
        rows in 1usize..7,
        width in 1usize..4,
        idx in proptest::collection::vec(0usize..64, 0..10),
        seed in any::<u64>(),
    ) {
        let idx: Vec<usize> = idx.into_iter().map(|i| i % rows).collect();
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = rng.uniform_tensor(&[rows, width], -1.0, 1.0);
        let y: Tensor<f64> = rng.uniform_tensor(&[idx.len(), width], -1.0, 1.0);
        let gathered = x.index_select(0, &idx).unwrap();
        let scattered = Tensor::zeros(&[rows, width]).index_add(0, &idx, &y).unwrap();
        let lhs: f64 = gathered.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(scattered.data()).map(|(a, b)| a * b).sum();
        // Same products, different summation order: equal up to rounding of the sums.
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn adjoint_pair_is_exact_on_dyadic_values(
        rows in 1usize..7,
        idx in proptest::collection::vec(0usize..64, 0..10),
        seed in any::<u64>(),
    ) {
        // Small dyadic rationals make every product and partial sum exact,
        // so both sides agree exactly.
        let idx: Vec<usize> = idx.into_iter().map(|i| i % rows).collect();
        let mut rng = Rng::new(seed);
        let dyadic = |rng: &mut Rng| (rng.below(17) as f64 - 8.0) / 4.0;
        let x = Tensor::<f64>::from_fn(&[rows, 2], |_| dyadic(&mut rng));
        let y = Tensor::<f64>::from_fn(&[idx.len(), 2], |_| dyadic(&mut rng));
        let gathered = x.index_select(0, &idx).unwrap();
        let scattered = Tensor::zeros(&[rows, 2]).index_add(0, &idx, &y).unwrap();
        let lhs: f64 = gathered.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(scattered.data()).map(|(a, b)| a * b).sum();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 4], 1.0);
        let back = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        prop_assert!(back.bit_eq(&x));
    }
}
