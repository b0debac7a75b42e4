//! Softmax-relaxed supernet: cell DAGs whose edges hold every candidate
//! operator at once, weighted by per-edge architecture parameters.
//!
//! Every edge output is `sum_o alpha_o * op_o(x)` with `alpha = softmax(beta)`.
//! Each internal node sums its incoming edges and the cell output is the
//! channel-concatenation of all internal nodes. Normal cells share one beta
//! table, reduction cells another.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::ht1;
use crate::numeric;
use crate::ops::{
    build, ConvLayer, BnLayer, FactorizedReduce, OperatorInstance, OperatorKind, ReluConvBn,
};
use crate::tensor::{Param, Tensor};

// ── Cell topology ─────────────────────────────────────────────────────────

/// One directed edge of the cell DAG: state `from` feeds internal node `to`.
/// States 0..n_inputs are the preprocessed cell inputs; state `n_inputs + j`
/// is internal node `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeId {
    pub to: usize,
    pub from: usize,
}

/// Cell shape: `n_nodes` internal nodes fed by `n_inputs` preprocessed
/// inputs, fully connected left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub n_nodes: usize,
    pub n_inputs: usize,
    pub reduction: bool,
}

impl CellSpec {
    pub fn new(n_nodes: usize, reduction: bool) -> Self {
        CellSpec { n_nodes, n_inputs: 2, reduction }
    }

    /// All edges in canonical order: nodes left to right, sources in state
    /// order within a node.
    pub fn edges(&self) -> Vec<EdgeId> {
        let mut out = Vec::with_capacity(self.n_edges());
        for j in 0..self.n_nodes {
            for i in 0..self.n_inputs + j {
                out.push(EdgeId { to: j, from: i });
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        (0..self.n_nodes).map(|j| self.n_inputs + j).sum()
    }

    /// Stride-2 edges are those reading the cell inputs of a reduction cell.
    pub fn edge_stride(&self, e: EdgeId) -> usize {
        if self.reduction && e.from < self.n_inputs {
            2
        } else {
            1
        }
    }
}

// ── Architecture parameters ───────────────────────────────────────────────

/// Which hierarchy level the logits score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Scores operator groups via their representatives.
    Group,
    /// Scores members within the activated group.
    Member,
}

/// One edge row: its candidate list and trainable logits.
#[derive(Debug, Clone)]
pub struct EdgeArch {
    pub kinds: Vec<OperatorKind>,
    pub beta: Param,
}

/// Per-cell-type architecture parameters: one logits row per edge, shared by
/// every cell of that type.
#[derive(Debug, Clone)]
pub struct ArchParams {
    pub stage: Stage,
    pub rows: Vec<EdgeArch>,
}

impl ArchParams {
    /// Fresh zero logits (uniform alpha) for the given per-edge candidates.
    pub fn new(stage: Stage, per_edge_kinds: Vec<Vec<OperatorKind>>) -> Self {
        let rows = per_edge_kinds
            .into_iter()
            .map(|kinds| {
                let beta = Param::new(Tensor::zeros(vec![kinds.len()]));
                EdgeArch { kinds, beta }
            })
            .collect();
        ArchParams { stage, rows }
    }

    pub fn uniform(stage: Stage, kinds: &[OperatorKind], n_edges: usize) -> Self {
        ArchParams::new(stage, vec![kinds.to_vec(); n_edges])
    }

    /// Softmax of each row's logits, computed in f64.
    pub fn alpha_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let beta: Vec<f64> =
                    r.beta.0.borrow().data.iter().map(|&v| v as f64).collect();
                numeric::softmax64(&beta).expect("non-empty beta row")
            })
            .collect()
    }

    pub fn params(&self) -> Vec<Param> {
        self.rows.iter().map(|r| r.beta.clone()).collect()
    }
}

// ── Mixed edges and cells ─────────────────────────────────────────────────

/// Weighted sum over candidate operators: `sum_o alpha[o] * op_o(x)`.
/// Zero candidates contribute nothing directly; their weight still shapes
/// the softmax that scales every other candidate.
pub fn mixed_edge_forward(
    g: &mut Graph,
    x: Var,
    ops: &[OperatorInstance],
    alpha_row: Var,
    mode: Mode,
) -> Result<Var> {
    if g.shape(alpha_row) != [ops.len()] {
        return Err(Error::shape(
            "mixed_edge",
            format!("{} ops vs alpha row {:?}", ops.len(), g.shape(alpha_row)),
        ));
    }
    if ops.is_empty() {
        return Err(Error::InvalidArg("mixed edge with no candidates".into()));
    }
    let mut acc: Option<Var> = None;
    for (i, op) in ops.iter().enumerate() {
        if op.kind.is_zero() {
            continue;
        }
        let y = op.forward(g, x, mode)?;
        let a = g.index(alpha_row, i)?;
        let term = g.mul_scalar_var(y, a)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => {
            // Every candidate was Zero: the edge emits zeros of the strided shape.
            let shape = g.shape(x);
            let stride = ops[0].stride;
            Ok(g.zeros(vec![
                shape[0],
                shape[1],
                shape[2].div_ceil(stride),
                shape[3].div_ceil(stride),
            ]))
        }
    }
}

/// Convenience wrapper taking literal alpha values (non-differentiable).
pub fn mixed_edge_forward_const(
    g: &mut Graph,
    x: Var,
    ops: &[OperatorInstance],
    alpha: &[f32],
    mode: Mode,
) -> Result<Var> {
    let row = g.constant(Tensor::new(vec![alpha.len()], alpha.to_vec())?);
    mixed_edge_forward(g, x, ops, row, mode)
}

enum Preprocess {
    Std(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Preprocess::Std(p) => p.forward(g, x, mode),
            Preprocess::Reduce(p) => p.forward(g, x, mode),
        }
    }

    fn params(&self) -> Vec<Param> {
        match self {
            Preprocess::Std(p) => p.params(),
            Preprocess::Reduce(p) => p.params(),
        }
    }
}

/// One relaxed cell instance: preprocessing plus a mixed edge per DAG edge.
/// Candidate lists mirror the owning `ArchParams` rows.
pub struct Cell {
    pub spec: CellSpec,
    pre0: Preprocess,
    pre1: Preprocess,
    edge_ops: Vec<Vec<OperatorInstance>>,
}

impl Cell {
    /// `c_pp`/`c_p` are the raw channel counts of the two feeding states,
    /// `c` the cell's working width. `prev_reduced` marks a spatial mismatch
    /// between them that preprocessing must close.
    pub fn new(
        spec: CellSpec,
        c_pp: usize,
        c_p: usize,
        c: usize,
        prev_reduced: bool,
        affine: bool,
        per_edge_kinds: &[Vec<OperatorKind>],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if per_edge_kinds.len() != spec.n_edges() {
            return Err(Error::InvalidArg(format!(
                "{} candidate rows for {} edges",
                per_edge_kinds.len(),
                spec.n_edges()
            )));
        }
        let pre0 = if prev_reduced {
            Preprocess::Reduce(FactorizedReduce::new(c, c_pp, affine, rng))
        } else {
            Preprocess::Std(ReluConvBn::new(c, c_pp, affine, rng))
        };
        let pre1 = Preprocess::Std(ReluConvBn::new(c, c_p, affine, rng));
        let mut edge_ops = Vec::with_capacity(spec.n_edges());
        for (edge, kinds) in spec.edges().into_iter().zip(per_edge_kinds) {
            let stride = spec.edge_stride(edge);
            let ops = kinds
                .iter()
                .map(|&k| build(k, c, stride, affine, rng))
                .collect::<Result<Vec<_>>>()?;
            edge_ops.push(ops);
        }
        Ok(Cell { spec, pre0, pre1, edge_ops })
    }

    /// Run the cell. `alpha_rows[e]` is the softmaxed weight vector var for
    /// edge `e`. Captured ops (if requested) are returned as raw values.
    pub fn forward(
        &self,
        g: &mut Graph,
        s0: Var,
        s1: Var,
        alpha_rows: &[Var],
        mode: Mode,
        capture_edge: Option<usize>,
    ) -> Result<(Var, Vec<(OperatorKind, Tensor)>)> {
        let x0 = self.pre0.forward(g, s0, mode)?;
        let x1 = self.pre1.forward(g, s1, mode)?;
        let mut states = vec![x0, x1];
        let mut captured = Vec::new();
        let mut node_vals = Vec::with_capacity(self.spec.n_nodes);
        for (e, edge) in self.spec.edges().into_iter().enumerate() {
            let x = states[edge.from];
            if capture_edge == Some(e) {
                for op in &self.edge_ops[e] {
                    if op.kind.is_zero() || op.kind.is_skip() {
                        continue;
                    }
                    let y = op.forward(g, x, mode)?;
                    captured.push((op.kind, g.value(y).clone()));
                }
            }
            let mixed = mixed_edge_forward(g, x, &self.edge_ops[e], alpha_rows[e], mode)?;
            let node_idx = self.spec.n_inputs + edge.to;
            if node_idx == states.len() {
                states.push(mixed);
                node_vals.push(mixed);
            } else {
                let prev = states[node_idx];
                let summed = g.add(prev, mixed)?;
                states[node_idx] = summed;
                node_vals[edge.to] = summed;
            }
        }
        let out = g.concat_channels(&node_vals)?;
        Ok((out, captured))
    }

    pub fn weight_params(&self) -> Vec<Param> {
        let mut out = self.pre0.params();
        out.extend(self.pre1.params());
        for ops in &self.edge_ops {
            for op in ops {
                out.extend(op.params());
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edge_ops.len()
    }
}

// ── Whole network ─────────────────────────────────────────────────────────

/// Indices of the two reduction cells: one and two thirds of the stack.
pub fn reduction_indices(n_cells: usize) -> (usize, usize) {
    (n_cells / 3, 2 * n_cells / 3)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetCfg {
    pub n_cells: usize,
    pub channels: usize,
    pub n_nodes: usize,
    pub n_classes: usize,
    /// Stem kernel width. A 1x1 stem keeps the stem purely pointwise so
    /// spatial evidence can only be picked up by cell operators.
    pub stem_kernel: usize,
    pub stem_multiplier: usize,
    /// Batch-norm affine weights inside cells (off during search).
    pub affine: bool,
}

impl Default for SupernetCfg {
    fn default() -> Self {
        SupernetCfg {
            n_cells: 8,
            channels: 16,
            n_nodes: 4,
            n_classes: 10,
            stem_kernel: 3,
            stem_multiplier: 3,
            affine: false,
        }
    }
}

/// Selects the mixed edge whose candidate outputs are dumped during capture.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub cell: usize,
    pub edge: usize,
}

pub struct Supernet {
    pub cfg: SupernetCfg,
    pub cells: Vec<Cell>,
    pub normal_arch: ArchParams,
    pub reduce_arch: ArchParams,
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    classifier_w: Param,
    classifier_b: Param,
}

impl Supernet {
    /// Build with per-edge candidate lists for each cell type.
    pub fn new(
        cfg: SupernetCfg,
        stage: Stage,
        normal_rows: Vec<Vec<OperatorKind>>,
        reduce_rows: Vec<Vec<OperatorKind>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec_normal = CellSpec::new(cfg.n_nodes, false);
        if normal_rows.len() != spec_normal.n_edges() || reduce_rows.len() != spec_normal.n_edges()
        {
            return Err(Error::InvalidArg(format!(
                "need {} candidate rows per cell type, got {}/{}",
                spec_normal.n_edges(),
                normal_rows.len(),
                reduce_rows.len()
            )));
        }
        let normal_arch = ArchParams::new(stage, normal_rows.clone());
        let reduce_arch = ArchParams::new(stage, reduce_rows.clone());

        let c_stem = cfg.stem_multiplier * cfg.channels;
        let stem_conv = ConvLayer::new(
            c_stem,
            3,
            cfg.stem_kernel,
            1,
            (cfg.stem_kernel - 1) / 2,
            1,
            1,
            rng,
        );
        let stem_bn = BnLayer::new(c_stem, true);

        let (r1, r2) = reduction_indices(cfg.n_cells);
        let mut cells = Vec::with_capacity(cfg.n_cells);
        let mut c_pp = c_stem;
        let mut c_p = c_stem;
        let mut c_cur = cfg.channels;
        let mut prev_reduced = false;
        for i in 0..cfg.n_cells {
            let reduction = i == r1 || i == r2;
            if reduction {
                c_cur *= 2;
            }
            let rows = if reduction { &reduce_rows } else { &normal_rows };
            let cell = Cell::new(
                CellSpec::new(cfg.n_nodes, reduction),
                c_pp,
                c_p,
                c_cur,
                prev_reduced,
                cfg.affine,
                rows,
                rng,
            )?;
            c_pp = c_p;
            c_p = cfg.n_nodes * c_cur;
            prev_reduced = reduction;
            cells.push(cell);
        }

        let classifier_w = Param::new(Tensor::kaiming(vec![cfg.n_classes, c_p], c_p, rng));
        let classifier_b = Param::new(Tensor::zeros(vec![cfg.n_classes]));
        Ok(Supernet {
            cfg,
            cells,
            normal_arch,
            reduce_arch,
            stem_conv,
            stem_bn,
            classifier_w,
            classifier_b,
        })
    }

    /// Same candidate list on every edge of both cell types.
    pub fn uniform(
        cfg: SupernetCfg,
        stage: Stage,
        kinds: &[OperatorKind],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n_edges = CellSpec::new(cfg.n_nodes, false).n_edges();
        Supernet::new(
            cfg,
            stage,
            vec![kinds.to_vec(); n_edges],
            vec![kinds.to_vec(); n_edges],
            rng,
        )
    }

    pub fn n_reductions(&self) -> usize {
        self.cells.iter().filter(|c| c.spec.reduction).count()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_ext(g, x, mode, None)?.0)
    }

    /// Forward with optional feature capture on one mixed edge.
    pub fn forward_ext(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        capture: Option<&CaptureSpec>,
    ) -> Result<(Var, Vec<(OperatorKind, Tensor)>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("network", format!("expected [N,3,H,W], got {:?}", shape)));
        }
        let min_side = 1usize << (self.n_reductions() + 2);
        if shape[2] < min_side || shape[3] < min_side {
            return Err(Error::shape(
                "network",
                format!("spatial dims {:?} below minimum {min_side}", &shape[2..]),
            ));
        }
        if let Some(cap) = capture {
            if cap.cell >= self.cells.len() || cap.edge >= self.cells[cap.cell].n_edges() {
                return Err(Error::InvalidArg(format!(
                    "capture target cell {} edge {} out of range",
                    cap.cell, cap.edge
                )));
            }
        }

        // Register each beta row once per episode; all cells of a type share
        // the resulting softmax vars.
        let normal_alpha: Vec<Var> = self
            .normal_arch
            .rows
            .iter()
            .map(|r| {
                let b = g.param(&r.beta);
                g.softmax_vec(b)
            })
            .collect::<Result<_>>()?;
        let reduce_alpha: Vec<Var> = self
            .reduce_arch
            .rows
            .iter()
            .map(|r| {
                let b = g.param(&r.beta);
                g.softmax_vec(b)
            })
            .collect::<Result<_>>()?;

        let stem = self.stem_conv.forward(g, x)?;
        let stem = self.stem_bn.forward(g, stem, mode)?;
        let mut s0 = stem;
        let mut s1 = stem;
        let mut captured = Vec::new();
        for (i, cell) in self.cells.iter().enumerate() {
            let alpha = if cell.spec.reduction { &reduce_alpha } else { &normal_alpha };
            let cap_edge = capture.and_then(|c| (c.cell == i).then_some(c.edge));
            let (out, cap) = cell.forward(g, s0, s1, alpha, mode, cap_edge)?;
            if !cap.is_empty() {
                captured = cap;
            }
            s0 = s1;
            s1 = out;
        }
        let pooled = g.global_avg_pool(s1)?;
        let w = g.param(&self.classifier_w);
        let b = g.param(&self.classifier_b);
        let logits = g.linear(pooled, w, b)?;
        Ok((logits, captured))
    }

    /// All trainable network weights (excluding architecture logits).
    pub fn weight_params(&self) -> Vec<Param> {
        let mut out = vec![self.stem_conv.weight.clone()];
        if let Some(gm) = &self.stem_bn.gamma {
            out.push(gm.clone());
        }
        if let Some(bt) = &self.stem_bn.beta {
            out.push(bt.clone());
        }
        for cell in &self.cells {
            out.extend(cell.weight_params());
        }
        out.push(self.classifier_w.clone());
        out.push(self.classifier_b.clone());
        out
    }

    pub fn arch_params(&self) -> Vec<Param> {
        let mut out = self.normal_arch.params();
        out.extend(self.reduce_arch.params());
        out
    }

    pub fn total_param_count(&self) -> usize {
        self.weight_params().iter().map(|p| p.numel()).sum::<usize>()
            + self.arch_params().iter().map(|p| p.numel()).sum::<usize>()
    }
}

/// Run `dataset` through a trained supernet in eval mode and dump each
/// captured candidate's flattened outputs as one rank-2 HT1 stream
/// (`[n_images, c*h*w]`) per operator. Returns the dump paths.
pub fn capture_feature_maps(
    net: &Supernet,
    cap: &CaptureSpec,
    dataset: &Dataset,
    batch: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<(OperatorKind, PathBuf)>> {
    use std::fs::File;
    use std::io::BufWriter;

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let n = dataset.len();
    let batch = batch.min(n);
    let mut writers: Option<Vec<(OperatorKind, ht1::StreamWriter<BufWriter<File>>, PathBuf)>> =
        None;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (images, _) = dataset.gather(&idx);
        let mut g = Graph::new();
        let x = g.constant(images);
        let (_, captured) = net.forward_ext(&mut g, x, Mode::Eval, Some(cap))?;
        if writers.is_none() {
            let mut ws = Vec::new();
            for (kind, t) in &captured {
                let row_len = t.numel() / t.shape[0];
                let path = out_dir.join(format!("{}.ht1", kind.name()));
                let file = BufWriter::new(File::create(&path)?);
                ws.push((*kind, ht1::StreamWriter::new(file, n, row_len)?, path));
            }
            writers = Some(ws);
        }
        let ws = writers.as_mut().unwrap();
        if ws.len() != captured.len() {
            return Err(Error::Numeric("capture stream set changed between batches".into()));
        }
        for ((kind, writer, _), (ckind, t)) in ws.iter_mut().zip(&captured) {
            if kind != ckind {
                return Err(Error::Numeric("capture stream order changed".into()));
            }
            let rows = t.shape[0];
            let row_len = t.numel() / rows;
            for r in 0..rows {
                writer.push(&t.data[r * row_len..(r + 1) * row_len])?;
            }
        }
        start += batch;
    }
    let ws = writers.ok_or_else(|| Error::InvalidArg("empty dataset for capture".into()))?;
    let mut out = Vec::new();
    for (kind, writer, path) in ws {
        writer.finish()?;
        out.push((kind, path));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::space;
    use crate::SpaceId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edge_count_formula() {
        assert_eq!(CellSpec::new(4, false).n_edges(), 14);
        assert_eq!(CellSpec::new(2, false).n_edges(), 5);
        assert_eq!(CellSpec::new(1, false).n_edges(), 2);
    }

    #[test]
    fn reduction_positions() {
        assert_eq!(reduction_indices(8), (2, 5));
        assert_eq!(reduction_indices(20), (6, 13));
        assert_eq!(reduction_indices(3), (1, 2));
    }

    #[test]
    fn alpha_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = ArchParams::uniform(Stage::Group, &space(SpaceId::S1).kinds, 5);
        // Randomize the logits, then check normalization.
        for row in &arch.rows {
            let mut t = row.beta.0.borrow_mut();
            for v in t.data.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        for alpha in arch.alpha_rows() {
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn mixed_edge_half_zero_half_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ops = vec![
            build(OperatorKind::Zero, 8, 1, false, &mut rng).unwrap(),
            build(OperatorKind::SkipConnect, 8, 1, false, &mut rng).unwrap(),
        ];
        let x = Tensor::rand_uniform(vec![1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = mixed_edge_forward_const(&mut g, xv, &ops, &[0.5, 0.5], Mode::Train).unwrap();
        for (o, i) in g.value(y).data.iter().zip(&x.data) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_edge_one_hot_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ops = vec![
            build(OperatorKind::Zero, 8, 1, false, &mut rng).unwrap(),
            build(OperatorKind::SkipConnect, 8, 1, false, &mut rng).unwrap(),
            build(OperatorKind::SepConv3, 8, 1, false, &mut rng).unwrap(),
        ];
        let x = Tensor::rand_uniform(vec![1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = mixed_edge_forward_const(&mut g, xv, &ops, &[0.0, 1.0, 0.0], Mode::Train).unwrap();
        assert_eq!(g.value(y).data, x.data);
    }

    #[test]
    fn mixed_edge_matches_manual_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ops = vec![
            build(OperatorKind::SepConv3, 8, 1, false, &mut rng).unwrap(),
            build(OperatorKind::MaxPool3, 8, 1, false, &mut rng).unwrap(),
            build(OperatorKind::DilConv3, 8, 1, false, &mut rng).unwrap(),
        ];
        let alpha = [0.2f32, 0.5, 0.3];
        let x = Tensor::rand_uniform(vec![2, 8, 6, 6], -1.0, 1.0, &mut rng);

        // Manual oracle: evaluate each op separately in eval mode and sum.
        let mut expect = vec![0.0f32; 2 * 8 * 6 * 6];
        for (op, &a) in ops.iter().zip(&alpha) {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let y = op.forward(&mut g, xv, Mode::Eval).unwrap();
            for (e, &v) in expect.iter_mut().zip(&g.value(y).data) {
                *e += a * v;
            }
        }

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = mixed_edge_forward_const(&mut g, xv, &ops, &alpha, Mode::Eval).unwrap();
        for (o, e) in g.value(y).data.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-6, "{o} vs {e}");
        }
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SupernetCfg {
            n_cells: 3,
            channels: 8,
            n_nodes: 2,
            n_classes: 2,
            stem_kernel: 1,
            stem_multiplier: 3,
            affine: false,
        };
        let net = Supernet::uniform(cfg, Stage::Group, &space(SpaceId::S5).kinds, &mut rng).unwrap();
        let x = Tensor::rand_uniform(vec![2, 3, 16, 16], -1.0, 1.0, &mut rng);

        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let logits = net.forward(&mut g, xv, Mode::Eval).unwrap();
            g.value(logits).clone()
        };
        let a = run(&x);
        assert_eq!(a.shape, vec![2, 2]);
        let b = run(&x);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn too_small_input_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SupernetCfg {
            n_cells: 3,
            channels: 8,
            n_nodes: 2,
            n_classes: 2,
            stem_kernel: 1,
            stem_multiplier: 3,
            affine: false,
        };
        let net = Supernet::uniform(cfg, Stage::Group, &space(SpaceId::S5).kinds, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(net.forward(&mut g, x, Mode::Eval).is_err());
    }

    #[test]
    fn capture_unknown_edge_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SupernetCfg {
            n_cells: 3,
            channels: 8,
            n_nodes: 2,
            n_classes: 2,
            stem_kernel: 1,
            stem_multiplier: 3,
            affine: false,
        };
        let net = Supernet::uniform(cfg, Stage::Group, &space(SpaceId::S5).kinds, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 16, 16]));
        let bad = CaptureSpec { cell: 0, edge: 99 };
        assert!(net.forward_ext(&mut g, x, Mode::Eval, Some(&bad)).is_err());
    }
}
