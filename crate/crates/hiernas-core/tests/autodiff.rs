//! Forward-value oracles (naive direct loops, written independently of the
//! im2col path) and finite-difference spot checks for the autodiff engine.

use hiernas_core::gradcheck::{run_case, standard_cases};
use hiernas_core::graph::Graph;
use hiernas_core::tensor::Tensor;
use hiernas_core::PoolKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nested loops straight from the definition of cross-correlation.
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
    groups: usize,
) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (f, cg, k, _) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(cg, c / groups);
    let span = dilation * (k - 1) + 1;
    let ho = (h + 2 * pad - span) / stride + 1;
    let wo = (wd + 2 * pad - span) / stride + 1;
    let fg = f / groups;
    let mut out = Tensor::zeros(vec![n, f, ho, wo]);
    for ni in 0..n {
        for fi in 0..f {
            let g = fi / fg;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * stride + ki * dilation) as isize - pad as isize;
                                let iw = (ow * stride + kj * dilation) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ic) * h + ih as usize) * wd + iw as usize;
                                let wi = ((fi * cg + ci) * k + ki) * k + kj;
                                acc += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    out.data[((ni * f + fi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

fn naive_avg_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f32;
                    for ki in 0..k {
                        for kj in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            acc += x.data[((ni * c + ci) * h + ih as usize) * w + iw as usize];
                        }
                    }
                    out.data[((ni * c + ci) * ho + oh) * wo + ow] = acc / (k * k) as f32;
                }
            }
        }
    }
    out
}

fn max_abs_rel(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y).abs() as f64) / (x.abs().max(y.abs()).max(1.0) as f64))
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::rand_uniform(vec![1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let expect = naive_conv2d(&x, &w, 1, 1, 1, 1);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let wv = g.leaf(w);
    let y = g.conv2d(xv, wv, 1, 1, 1, 1).unwrap();
    assert_eq!(g.shape(y), &expect.shape[..]);
    assert!(max_abs_rel(&g.value(y).data, &expect.data) < 1e-5);
}

#[test]
fn conv2d_oracle_across_regimes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // (c, f, k, stride, pad, dilation, groups)
    let regimes = [
        (4, 4, 3, 2, 1, 1, 1),
        (4, 6, 5, 1, 2, 1, 2),
        (4, 4, 3, 1, 2, 2, 4),
        (6, 6, 1, 1, 0, 1, 1),
        (2, 4, 5, 2, 4, 2, 1),
    ];
    for (c, f, k, stride, pad, dil, groups) in regimes {
        let x = Tensor::rand_uniform(vec![2, c, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(vec![f, c / groups, k, k], -1.0, 1.0, &mut rng);
        let expect = naive_conv2d(&x, &w, stride, pad, dil, groups);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let wv = g.leaf(w);
        let y = g.conv2d(xv, wv, stride, pad, dil, groups).unwrap();
        assert_eq!(g.shape(y), &expect.shape[..], "shape for regime {:?}", (c, f, k));
        assert!(
            max_abs_rel(&g.value(y).data, &expect.data) < 1e-5,
            "values for regime {:?}",
            (c, f, k, stride, pad, dil, groups)
        );
    }
}

#[test]
fn avg_pool_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::rand_uniform(vec![1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let expect = naive_avg_pool(&x, 3, 1, 1);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let y = g.pool2d(xv, PoolKind::Avg, 3, 1, 1).unwrap();
    assert!(max_abs_rel(&g.value(y).data, &expect.data) < 1e-6);
}

#[test]
fn depthwise_equals_per_channel_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = 5;
    let x = Tensor::rand_uniform(vec![1, c, 6, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(vec![c, 1, 3, 3], -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let grouped = g.conv2d(xv, wv, 1, 1, 1, c).unwrap();
    let grouped_data = g.value(grouped).data.clone();

    // Channel-by-channel with groups=1.
    for ci in 0..c {
        let xc = Tensor::new(
            vec![1, 1, 6, 6],
            x.data[ci * 36..(ci + 1) * 36].to_vec(),
        )
        .unwrap();
        let wc = Tensor::new(vec![1, 1, 3, 3], w.data[ci * 9..(ci + 1) * 9].to_vec()).unwrap();
        let mut gc = Graph::new();
        let xcv = gc.leaf(xc);
        let wcv = gc.leaf(wc);
        let yc = gc.conv2d(xcv, wcv, 1, 1, 1, 1).unwrap();
        assert_eq!(gc.value(yc).data, grouped_data[ci * 36..(ci + 1) * 36].to_vec());
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let logits = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    // f64 oracle straight from the definition.
    let mut expect = 0.0f64;
    for n in 0..4 {
        let row: Vec<f64> = logits.data[n * 3..(n + 1) * 3].iter().map(|&v| v as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        expect += lse - row[labels[n]];
    }
    expect /= 4.0;

    let mut g = Graph::new();
    let lv = g.leaf(logits);
    let loss = g.cross_entropy(lv, &labels).unwrap();
    assert!((g.scalar_value(loss) as f64 - expect).abs() < 1e-6);
}

#[test]
fn finite_difference_spot_checks() {
    // Smaller sweep here; the acceptance suite runs the full 50-case one.
    for case in standard_cases() {
        let report = run_case(&case, 10, 0xBEEF);
        assert!(
            report.passed(),
            "{}: max rel err {:.3e} over {} coords (tol {:.0e})",
            report.name,
            report.max_rel_err,
            report.coords_checked,
            report.tol
        );
    }
}
