//! Central finite-difference gradient checking.
//!
//! The checker only uses the forward pass: it rebuilds the graph at
//! perturbed inputs and compares the difference quotient against the
//! analytic gradient from `backward`. It is the verification oracle for
//! every differentiable op and must stay independent of the backward
//! implementations it checks.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BnStats, Graph, Mode, Var};
use crate::kernels::PoolKind;
use crate::tensor::Tensor;

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (input idx, coord, analytic, fd)
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check `d loss / d inputs` for a scalar-valued builder.
///
/// `build` must construct the same computation for any input values. Up to
/// `coords_per_input` coordinates per input are probed with central
/// differences at `eps`.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    eps: f64,
    coords_per_input: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        assert_eq!(g.value(loss).numel(), 1, "gradcheck loss must be scalar");
        g.scalar_value(loss) as f64
    };

    // Analytic gradients at the base point.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("gradcheck backward");
    let analytic: Vec<Option<Vec<f32>>> =
        vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let grads = analytic[ii].as_ref().expect("requires_grad input got no gradient");
        let numel = input.numel();
        let n_probe = coords_per_input.min(numel);
        let mut coords: Vec<usize> = (0..numel).collect();
        // Partial Fisher-Yates: first n_probe entries become the sample.
        for i in 0..n_probe {
            let j = rng.random_range(i..numel);
            coords.swap(i, j);
        }
        for &ci in coords.iter().take(n_probe) {
            let orig = work[ii].data[ci];
            work[ii].data[ci] = orig + eps as f32;
            let lp = eval(&work);
            work[ii].data[ci] = orig - eps as f32;
            let lm = eval(&work);
            work[ii].data[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads[ci] as f64;
            let err = rel_err(an, fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ii, ci, an, fd));
            }
        }
    }
    report
}

// ── Standard per-op case catalog ──────────────────────────────────────────

type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct CaseInstance {
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
}

/// One differentiable op with a randomized instance generator.
pub struct OpGradCase {
    pub name: &'static str,
    pub tol: f64,
    gen: Box<dyn Fn(&mut ChaCha8Rng) -> CaseInstance>,
}

#[derive(Debug, Clone)]
pub struct CaseRunReport {
    pub name: &'static str,
    pub tol: f64,
    pub cases: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl CaseRunReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Run `n_cases` randomized instances of one op case.
pub fn run_case(case: &OpGradCase, n_cases: usize, seed: u64) -> CaseRunReport {
    let mut report = CaseRunReport {
        name: case.name,
        tol: case.tol,
        cases: n_cases,
        coords_checked: 0,
        max_rel_err: 0.0,
    };
    for i in 0..n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let inst = (case.gen)(&mut rng);
        let r = check_gradients(|g, vars| (inst.build)(g, vars), &inst.inputs, 1e-3, 6, &mut rng);
        report.coords_checked += r.checked;
        if r.max_rel_err > report.max_rel_err {
            report.max_rel_err = r.max_rel_err;
        }
    }
    report
}

fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Random tensor whose elements are a permutation of levels spaced `step`
/// apart and bounded away from zero. Keeps max-pool argmaxes and relu signs
/// stable under +-1e-3 probes.
fn kink_safe(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let step = 0.011f32;
    let mut levels: Vec<f32> = (0..numel)
        .map(|i| {
            let v = (i as f32 - numel as f32 / 2.0) * step;
            if v >= 0.0 {
                v + 0.006
            } else {
                v - 0.006
            }
        })
        .collect();
    for i in (1..levels.len()).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    let mut t = Tensor::new(shape, levels).unwrap();
    t.requires_grad = true;
    t
}

/// Reduce an arbitrary op output to a scalar via a fixed random weighting,
/// so every output element influences the loss.
fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w).expect("weighted_sum shapes");
    g.sum_all(prod)
}

/// The catalog of differentiable ops under finite-difference verification.
pub fn standard_cases() -> Vec<OpGradCase> {
    let mut cases: Vec<OpGradCase> = Vec::new();

    // conv2d in its four used regimes.
    struct ConvSpec {
        name: &'static str,
        n: usize,
        c: usize,
        h: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
        groups: usize,
    }
    let conv_specs = [
        ConvSpec { name: "conv2d_3x3", n: 1, c: 2, h: 5, f: 3, k: 3, stride: 1, pad: 1, dil: 1, groups: 1 },
        ConvSpec { name: "conv2d_strided", n: 2, c: 2, h: 6, f: 2, k: 3, stride: 2, pad: 1, dil: 1, groups: 1 },
        ConvSpec { name: "conv2d_dilated", n: 1, c: 2, h: 7, f: 2, k: 3, stride: 1, pad: 2, dil: 2, groups: 1 },
        ConvSpec { name: "conv2d_depthwise", n: 1, c: 4, h: 5, f: 4, k: 3, stride: 1, pad: 1, dil: 1, groups: 4 },
    ];
    for spec in conv_specs {
        cases.push(OpGradCase {
            name: spec.name,
            tol: 1e-3,
            gen: Box::new(move |rng| {
                let x = uniform(vec![spec.n, spec.c, spec.h, spec.h], rng).requires_grad(true);
                let w =
                    uniform(vec![spec.f, spec.c / spec.groups, spec.k, spec.k], rng).requires_grad(true);
                let cfg = (spec.stride, spec.pad, spec.dil, spec.groups);
                let ho = (spec.h + 2 * spec.pad - spec.dil * (spec.k - 1) - 1) / spec.stride + 1;
                let wsum = uniform(vec![spec.n, spec.f, ho, ho], rng);
                CaseInstance {
                    inputs: vec![x, w],
                    build: Box::new(move |g, vars| {
                        let y = g.conv2d(vars[0], vars[1], cfg.0, cfg.1, cfg.2, cfg.3).unwrap();
                        weighted_sum(g, y, &wsum)
                    }),
                }
            }),
        });
    }

    cases.push(OpGradCase {
        name: "maxpool2d",
        tol: 1e-2,
        gen: Box::new(|rng| {
            let x = kink_safe(vec![1, 2, 6, 6], rng);
            let wsum = uniform(vec![1, 2, 6, 6], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.pool2d(vars[0], PoolKind::Max, 3, 1, 1).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "avgpool2d",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![1, 3, 8, 8], rng).requires_grad(true);
            let wsum = uniform(vec![1, 3, 8, 8], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.pool2d(vars[0], PoolKind::Avg, 3, 1, 1).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "relu",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = kink_safe(vec![2, 3, 4], rng);
            let wsum = uniform(vec![2, 3, 4], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.relu(vars[0]);
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "batch_norm_train",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![2, 3, 4, 4], rng).requires_grad(true);
            let gamma = Tensor::rand_uniform(vec![3], 0.5, 1.5, rng).requires_grad(true);
            let beta = uniform(vec![3], rng).requires_grad(true);
            let wsum = uniform(vec![2, 3, 4, 4], rng);
            CaseInstance {
                inputs: vec![x, gamma, beta],
                build: Box::new(move |g, vars| {
                    let stats = Rc::new(RefCell::new(BnStats::new(3)));
                    let y = g
                        .batch_norm(vars[0], Some((vars[1], vars[2])), &stats, Mode::Train)
                        .unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "batch_norm_eval",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![2, 3, 4, 4], rng).requires_grad(true);
            let gamma = Tensor::rand_uniform(vec![3], 0.5, 1.5, rng).requires_grad(true);
            let beta = uniform(vec![3], rng).requires_grad(true);
            let mut stats = BnStats::new(3);
            for c in 0..3 {
                stats.running_mean[c] = rng.random_range(-0.5..0.5);
                stats.running_var[c] = rng.random_range(0.5..1.5);
            }
            let handle = Rc::new(RefCell::new(stats));
            let wsum = uniform(vec![2, 3, 4, 4], rng);
            CaseInstance {
                inputs: vec![x, gamma, beta],
                build: Box::new(move |g, vars| {
                    let y = g
                        .batch_norm(vars[0], Some((vars[1], vars[2])), &handle, Mode::Eval)
                        .unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "linear",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![3, 5], rng).requires_grad(true);
            let w = uniform(vec![4, 5], rng).requires_grad(true);
            let b = uniform(vec![4], rng).requires_grad(true);
            let wsum = uniform(vec![3, 4], rng);
            CaseInstance {
                inputs: vec![x, w, b],
                build: Box::new(move |g, vars| {
                    let y = g.linear(vars[0], vars[1], vars[2]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "global_avg_pool",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![2, 3, 5, 5], rng).requires_grad(true);
            let wsum = uniform(vec![2, 3], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.global_avg_pool(vars[0]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "add",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let a = uniform(vec![2, 3, 4], rng).requires_grad(true);
            let b = uniform(vec![2, 3, 4], rng).requires_grad(true);
            let wsum = uniform(vec![2, 3, 4], rng);
            CaseInstance {
                inputs: vec![a, b],
                build: Box::new(move |g, vars| {
                    let y = g.add(vars[0], vars[1]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "mul",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let a = uniform(vec![2, 3, 4], rng).requires_grad(true);
            let b = uniform(vec![2, 3, 4], rng).requires_grad(true);
            let wsum = uniform(vec![2, 3, 4], rng);
            CaseInstance {
                inputs: vec![a, b],
                build: Box::new(move |g, vars| {
                    let y = g.mul(vars[0], vars[1]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "mul_scalar_var",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![2, 4, 3], rng).requires_grad(true);
            let s = uniform(vec![1], rng).requires_grad(true);
            let wsum = uniform(vec![2, 4, 3], rng);
            CaseInstance {
                inputs: vec![x, s],
                build: Box::new(move |g, vars| {
                    let y = g.mul_scalar_var(vars[0], vars[1]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "concat_channels",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let a = uniform(vec![2, 2, 3, 3], rng).requires_grad(true);
            let b = uniform(vec![2, 3, 3, 3], rng).requires_grad(true);
            let wsum = uniform(vec![2, 5, 3, 3], rng);
            CaseInstance {
                inputs: vec![a, b],
                build: Box::new(move |g, vars| {
                    let y = g.concat_channels(&[vars[0], vars[1]]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "softmax_vec",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![6], rng).requires_grad(true);
            let wsum = uniform(vec![6], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.softmax_vec(vars[0]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "cross_entropy",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![4, 3], rng).requires_grad(true);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| g.cross_entropy(vars[0], &labels).unwrap()),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "row_index",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![3, 5], rng).requires_grad(true);
            let i = rng.random_range(0..3);
            let j = rng.random_range(0..5);
            let wsum = uniform(vec![5], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let r = g.row(vars[0], i).unwrap();
                    let e = g.index(r, j).unwrap();
                    let rsum = weighted_sum(g, r, &wsum);
                    g.add(rsum, e).unwrap()
                }),
            }
        }),
    });

    cases.push(OpGradCase {
        name: "shift2d",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![1, 2, 5, 5], rng).requires_grad(true);
            let wsum = uniform(vec![1, 2, 4, 4], rng);
            CaseInstance {
                inputs: vec![x],
                build: Box::new(move |g, vars| {
                    let y = g.shift2d(vars[0]).unwrap();
                    weighted_sum(g, y, &wsum)
                }),
            }
        }),
    });

    // A composite chain covering the interactions: conv -> bn -> relu ->
    // avgpool -> gap -> linear -> cross-entropy.
    cases.push(OpGradCase {
        name: "composite_chain",
        tol: 1e-3,
        gen: Box::new(|rng| {
            let x = uniform(vec![2, 2, 6, 6], rng).requires_grad(true);
            let wc = uniform(vec![3, 2, 3, 3], rng).requires_grad(true);
            let gamma = Tensor::rand_uniform(vec![3], 0.5, 1.5, rng).requires_grad(true);
            let beta = uniform(vec![3], rng).requires_grad(true);
            let wl = uniform(vec![2, 3], rng).requires_grad(true);
            let bl = uniform(vec![2], rng).requires_grad(true);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..2)).collect();
            CaseInstance {
                inputs: vec![x, wc, gamma, beta, wl, bl],
                build: Box::new(move |g, vars| {
                    let stats = Rc::new(RefCell::new(BnStats::new(3)));
                    let c = g.conv2d(vars[0], vars[1], 1, 1, 1, 1).unwrap();
                    let n = g.batch_norm(c, Some((vars[2], vars[3])), &stats, Mode::Train).unwrap();
                    let r = g.relu(n);
                    let p = g.pool2d(r, PoolKind::Avg, 3, 1, 1).unwrap();
                    let v = g.global_avg_pool(p).unwrap();
                    let o = g.linear(v, vars[4], vars[5]).unwrap();
                    g.cross_entropy(o, &labels).unwrap()
                }),
            }
        }),
    });

    cases
}
