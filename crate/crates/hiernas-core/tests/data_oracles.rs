//! Independent oracles for the synthetic stripe task: a hand-coded oriented
//! 3x3 edge filter must separate the classes perfectly at zero noise, while
//! a permutation-invariant readout (global mean pixel) stays at chance.

use hiernas_core::data::synth_texture;

/// Classify by comparing horizontal vs vertical 3x3 edge-filter energy.
fn edge_filter_predict(img: &[f32], hw: usize) -> usize {
    // Oriented kernels over the first channel only.
    let gx = [[-1.0f32, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut ex = 0.0f64;
    let mut ey = 0.0f64;
    for y in 1..hw - 1 {
        for x in 1..hw - 1 {
            let mut rx = 0.0f32;
            let mut ry = 0.0f32;
            for (dy, row) in gx.iter().enumerate() {
                for (dx, &w) in row.iter().enumerate() {
                    let v = img[(y + dy - 1) * hw + (x + dx - 1)];
                    rx += w * v; // responds to variation along x
                    // transpose of gx responds to variation along y
                    let wt = gx[dx][dy];
                    ry += wt * v;
                }
            }
            ex += (rx as f64).abs();
            ey += (ry as f64).abs();
        }
    }
    // Vertical stripes vary along x.
    if ex > ey {
        0
    } else {
        1
    }
}

#[test]
fn edge_filter_oracle_is_perfect_at_zero_noise() {
    let hw = 16;
    let ds = synth_texture(200, hw, 0.0, 42).unwrap();
    let plane = hw * hw;
    for i in 0..ds.len() {
        let img = &ds.images.data[i * 3 * plane..i * 3 * plane + plane];
        assert_eq!(edge_filter_predict(img, hw), ds.labels[i], "image {i}");
    }
}

#[test]
fn global_mean_pixel_is_uninformative() {
    let hw = 16;
    let ds = synth_texture(2000, hw, 0.1, 7).unwrap();
    let plane = 3 * hw * hw;
    let means: Vec<f64> = (0..ds.len())
        .map(|i| {
            ds.images.data[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / plane as f64
        })
        .collect();
    // Best threshold classifier over the observed means (either polarity).
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap());
    let total_ones: usize = ds.labels.iter().sum();
    let mut ones_below = 0usize;
    let mut best = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if ds.labels[i] == 1 {
            ones_below += 1;
        }
        let below = rank + 1;
        // predict 1 below threshold
        let acc_a = ones_below + (ds.len() - below) - (total_ones - ones_below);
        // predict 0 below threshold
        let acc_b = (below - ones_below) + (total_ones - ones_below);
        best = best.max(acc_a).max(acc_b);
    }
    let acc = best as f64 / ds.len() as f64;
    assert!(
        acc < 0.58,
        "mean-pixel classifier should sit near chance, got {acc}"
    );
}
