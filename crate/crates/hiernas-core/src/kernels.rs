//! Raw numeric routines on flat `f32` slices: matmul variants, im2col /
//! col2im, and pooling loops. The autodiff graph calls these for forward and
//! backward; they hold no graph state.

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += av * bv;
                }
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products of contiguous rows).
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let c_row = &mut out[i * n..(i + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += av * bv;
                }
            }
        }
    }
}

/// Geometry of one convolution / pooling application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dCfg {
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Unfold one `[c, h, w]` channel block into `col[c*k*k, ho*wo]`.
/// Out-of-bounds taps read zero. `col` must be pre-zeroed.
pub fn im2col(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    cfg: &Conv2dCfg,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(col.len(), c * cfg.kernel * cfg.kernel * ho * wo);
    let k = cfg.kernel;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (ho * wo);
                for oh in 0..ho {
                    let ih = (oh * cfg.stride + ki * cfg.dilation) as isize - cfg.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_row = ih as usize * w;
                    let out_row = row + oh * wo;
                    for ow in 0..wo {
                        let iw =
                            (ow * cfg.stride + kj * cfg.dilation) as isize - cfg.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            col[out_row + ow] = plane[in_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col` gradients back onto the input block (accumulating).
pub fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    cfg: &Conv2dCfg,
    ho: usize,
    wo: usize,
    input_grad: &mut [f32],
) {
    debug_assert_eq!(input_grad.len(), c * h * w);
    let k = cfg.kernel;
    for ci in 0..c {
        let plane = &mut input_grad[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * (ho * wo);
                for oh in 0..ho {
                    let ih = (oh * cfg.stride + ki * cfg.dilation) as isize - cfg.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_row = ih as usize * w;
                    let out_row = row + oh * wo;
                    for ow in 0..wo {
                        let iw =
                            (ow * cfg.stride + kj * cfg.dilation) as isize - cfg.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            plane[in_row + iw as usize] += col[out_row + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution over a batch. input `[n,c,h,w]`, weight `[f, c/groups, k, k]`,
/// output `[n,f,ho,wo]` (pre-zeroed by caller).
pub fn conv2d_forward(
    input: &[f32],
    weight: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    cfg: &Conv2dCfg,
    ho: usize,
    wo: usize,
    out: &mut [f32],
    col_buf: &mut Vec<f32>,
) {
    let cg = c / cfg.groups;
    let fg = f / cfg.groups;
    let k2 = cfg.kernel * cfg.kernel;
    let pointwise = cfg.kernel == 1
        && cfg.stride == 1
        && cfg.padding == 0
        && cfg.dilation == 1;
    col_buf.clear();
    col_buf.resize(cg * k2 * ho * wo, 0.0);
    for ni in 0..n {
        let in_s = &input[ni * c * h * w..(ni + 1) * c * h * w];
        let out_s = &mut out[ni * f * ho * wo..(ni + 1) * f * ho * wo];
        for g in 0..cfg.groups {
            let in_g = &in_s[g * cg * h * w..(g + 1) * cg * h * w];
            let w_g = &weight[g * fg * cg * k2..(g + 1) * fg * cg * k2];
            let out_g = &mut out_s[g * fg * ho * wo..(g + 1) * fg * ho * wo];
            if pointwise {
                // col would equal the input block; multiply directly.
                matmul_nn(w_g, in_g, fg, cg, ho * wo, out_g);
            } else {
                col_buf.iter_mut().for_each(|v| *v = 0.0);
                im2col(in_g, cg, h, w, cfg, ho, wo, col_buf);
                matmul_nn(w_g, col_buf, fg, cg * k2, ho * wo, out_g);
            }
        }
    }
}

/// Gradients for `conv2d_forward`. Accumulates into `d_input` and `d_weight`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    d_out: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    cfg: &Conv2dCfg,
    ho: usize,
    wo: usize,
    d_input: &mut [f32],
    d_weight: &mut [f32],
) {
    let cg = c / cfg.groups;
    let fg = f / cfg.groups;
    let k2 = cfg.kernel * cfg.kernel;
    let pointwise = cfg.kernel == 1
        && cfg.stride == 1
        && cfg.padding == 0
        && cfg.dilation == 1;
    let mut col = vec![0.0f32; cg * k2 * ho * wo];
    let mut d_col = vec![0.0f32; cg * k2 * ho * wo];
    for ni in 0..n {
        let in_s = &input[ni * c * h * w..(ni + 1) * c * h * w];
        let dout_s = &d_out[ni * f * ho * wo..(ni + 1) * f * ho * wo];
        let din_s = &mut d_input[ni * c * h * w..(ni + 1) * c * h * w];
        for g in 0..cfg.groups {
            let in_g = &in_s[g * cg * h * w..(g + 1) * cg * h * w];
            let w_g = &weight[g * fg * cg * k2..(g + 1) * fg * cg * k2];
            let dw_g = &mut d_weight[g * fg * cg * k2..(g + 1) * fg * cg * k2];
            let dout_g = &dout_s[g * fg * ho * wo..(g + 1) * fg * ho * wo];
            let din_g = &mut din_s[g * cg * h * w..(g + 1) * cg * h * w];
            if pointwise {
                // dW = dOut * in^T ; dIn = W^T * dOut
                matmul_nt(dout_g, in_g, fg, ho * wo, cg, dw_g);
                matmul_tn(w_g, dout_g, cg, fg, ho * wo, din_g);
                continue;
            }
            col.iter_mut().for_each(|v| *v = 0.0);
            im2col(in_g, cg, h, w, cfg, ho, wo, &mut col);
            // dW = dOut * col^T
            matmul_nt(dout_g, &col, fg, ho * wo, cg * k2, dw_g);
            // dCol = W^T * dOut
            d_col.iter_mut().for_each(|v| *v = 0.0);
            matmul_tn(w_g, dout_g, cg * k2, fg, ho * wo, &mut d_col);
            col2im(&d_col, cg, h, w, cfg, ho, wo, din_g);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling forward. For max, `argmax[e]` records the flat `h*w` index inside
/// the input plane that won element `e` (first occurrence in row-major scan).
/// Padding taps are ignored for max and count as zeros over `k*k` for avg.
pub fn pool2d_forward(
    input: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
    argmax: &mut Vec<u32>,
) {
    let inv_k2 = 1.0 / (k * k) as f32;
    if matches!(kind, PoolKind::Max) {
        argmax.resize(n * c * ho * wo, 0);
    }
    for ni in 0..n {
        for ci in 0..c {
            let plane = &input[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let base = (ni * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let h0 = (oh * stride) as isize - padding as isize;
                    let w0 = (ow * stride) as isize - padding as isize;
                    match kind {
                        PoolKind::Max => {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0u32;
                            for ki in 0..k {
                                let ih = h0 + ki as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let iw = w0 + kj as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let idx = ih as usize * w + iw as usize;
                                    if plane[idx] > best {
                                        best = plane[idx];
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                            out[base + oh * wo + ow] = best;
                            argmax[base + oh * wo + ow] = best_idx;
                        }
                        PoolKind::Avg => {
                            let mut acc = 0.0f32;
                            for ki in 0..k {
                                let ih = h0 + ki as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let iw = w0 + kj as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += plane[ih as usize * w + iw as usize];
                                }
                            }
                            out[base + oh * wo + ow] = acc * inv_k2;
                        }
                    }
                }
            }
        }
    }
}

/// Pooling backward, accumulating into `d_input`.
pub fn pool2d_backward(
    d_out: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    argmax: &[u32],
    d_input: &mut [f32],
) {
    let inv_k2 = 1.0 / (k * k) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let d_plane = &mut d_input[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let base = (ni * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = d_out[base + oh * wo + ow];
                    match kind {
                        PoolKind::Max => {
                            d_plane[argmax[base + oh * wo + ow] as usize] += g;
                        }
                        PoolKind::Avg => {
                            let h0 = (oh * stride) as isize - padding as isize;
                            let w0 = (ow * stride) as isize - padding as isize;
                            let gk = g * inv_k2;
                            for ki in 0..k {
                                let ih = h0 + ki as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let iw = w0 + kj as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    d_plane[ih as usize * w + iw as usize] += gk;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // A[2,3] * B[3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c_nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut c_nn);
        assert_eq!(c_nn, [58.0, 64.0, 139.0, 154.0]);

        // same product with B stored transposed
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut c_nt);
        assert_eq!(c_nt, c_nn);

        // and with A stored transposed
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = [0.0; 4];
        matmul_tn(&at, &b, 2, 3, 2, &mut c_tn);
        assert_eq!(c_tn, c_nn);
    }

    #[test]
    fn out_dim_matches_formula() {
        let cfg = Conv2dCfg { kernel: 3, stride: 2, padding: 1, dilation: 1, groups: 1 };
        assert_eq!(cfg.out_dim(16), Some(8));
        let dil = Conv2dCfg { kernel: 3, stride: 1, padding: 2, dilation: 2, groups: 1 };
        assert_eq!(dil.out_dim(16), Some(16));
        let too_small = Conv2dCfg { kernel: 5, stride: 1, padding: 0, dilation: 1, groups: 1 };
        assert_eq!(too_small.out_dim(3), None);
    }

    #[test]
    fn im2col_col2im_roundtrip_sums() {
        // col2im(im2col(x)) multiplies each element by its tap count; with a
        // 1x1 kernel that count is 1 and the roundtrip is the identity.
        let cfg = Conv2dCfg { kernel: 1, stride: 1, padding: 0, dilation: 1, groups: 1 };
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut col = vec![0.0; 12];
        im2col(&x, 3, 2, 2, &cfg, 2, 2, &mut col);
        assert_eq!(col, x);
        let mut back = vec![0.0; 12];
        col2im(&col, 3, 2, 2, &cfg, 2, 2, &mut back);
        assert_eq!(back, x);
    }
}
