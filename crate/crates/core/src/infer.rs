//! Coarse-level marginal inference (mean field plus exact enumeration
//! oracles) and the prediction-refinement stage.

use crate::error::{CtxError, Result};
use crate::graph::CrfGraph;
use crate::labels::LabelMap;
use crate::ops;
use crate::potentials::{energy, PotentialNets, PotentialTables};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MEAN_FIELD_DEFAULT_ITERS: usize = 3;

/// Per-node distributions over K classes (the mean-field Q).
#[derive(Clone, Debug)]
pub struct Marginals<T> {
    /// [N_nodes, K]
    pub q: Tensor<T>,
}

impl<T: Scalar> Marginals<T> {
    pub fn num_nodes(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let k = self.k();
        for p in 0..self.num_nodes() {
            let row = &self.q.data()[p * k..(p + 1) * k];
            let s: f64 = row.iter().map(|v| v.to_f64_val()).sum();
            if (s - 1.0).abs() > tol {
                return Err(CtxError::InvalidArgument(format!(
                    "marginal row {p} sums to {s}, not 1"
                )));
            }
            if row.iter().any(|v| v.to_f64_val() < 0.0 || v.to_f64_val() > 1.0) {
                return Err(CtxError::InvalidArgument(format!("marginal row {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn argmax(&self) -> Vec<usize> {
        let k = self.k();
        (0..self.num_nodes())
            .map(|p| {
                let row = &self.q.data()[p * k..(p + 1) * k];
                let mut best = 0;
                for i in 1..k {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Incidence of a node in one edge: which relation, edge index, the neighbor,
/// and whether the node is the first (oriented "above") endpoint.
struct Incidence {
    rel: usize,
    edge: usize,
    neighbor: usize,
    first: bool,
}

fn incidence_lists(graph: &CrfGraph) -> Vec<Vec<Incidence>> {
    let mut inc: Vec<Vec<Incidence>> = (0..graph.num_nodes()).map(|_| Vec::new()).collect();
    for (ri, es) in graph.relations().iter().enumerate() {
        for (ei, &(p, q)) in es.edges.iter().enumerate() {
            inc[p].push(Incidence { rel: ri, edge: ei, neighbor: q, first: true });
            inc[q].push(Incidence { rel: ri, edge: ei, neighbor: p, first: false });
        }
    }
    inc
}

fn check_tables_match<T: Scalar>(graph: &CrfGraph, tables: &PotentialTables<T>) -> Result<()> {
    let n = graph.num_nodes();
    if tables.unary.shape()[0] != n {
        return Err(CtxError::ShapeMismatch(format!(
            "unary table rows {} != graph nodes {n}",
            tables.unary.shape()[0]
        )));
    }
    for es in graph.relations() {
        let t = tables.relation(&es.spec.name)?;
        if !es.edges.is_empty() && t.shape()[0] != es.edges.len() {
            return Err(CtxError::ShapeMismatch(format!(
                "pairwise table {} rows {} != edge count {}",
                es.spec.name,
                t.shape()[0],
                es.edges.len()
            )));
        }
    }
    Ok(())
}

/// Mean-field marginal inference with sequential (coordinate-descent) node
/// updates in index order. Q is initialized from the unary softmax; each
/// sweep recomputes log Q_p from the unary term plus neighbor expectations
/// under the current Q. Asymmetric tables are consumed in stored orientation:
/// entry (y_p, y_q) with p the first endpoint.
pub fn mean_field<T: Scalar>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    iterations: usize,
) -> Result<Marginals<T>> {
    check_tables_match(graph, tables)?;
    let n = graph.num_nodes();
    let k = tables.k;
    let mut q = tables.unary.clone();
    for p in 0..n {
        softmax_row(&mut q.data_mut()[p * k..(p + 1) * k]);
    }
    let inc = incidence_lists(graph);
    let rel_tables: Vec<&Tensor<T>> = graph
        .relations()
        .iter()
        .map(|es| tables.relation(&es.spec.name))
        .collect::<Result<_>>()?;
    let mut logq = vec![T::zero(); k];
    for _ in 0..iterations {
        for p in 0..n {
            for (y, lq) in logq.iter_mut().enumerate() {
                *lq = tables.unary.at2(p, y);
            }
            for i in &inc[p] {
                let table = rel_tables[i.rel];
                let base = i.edge * k * k;
                let qn = &q.data()[i.neighbor * k..(i.neighbor + 1) * k];
                if i.first {
                    // V(y_p=y, y_q=y') at (y, y'); -V = +z
                    for (y, lq) in logq.iter_mut().enumerate() {
                        let row = &table.data()[base + y * k..base + (y + 1) * k];
                        let mut acc = T::zero();
                        for (z, qv) in row.iter().zip(qn) {
                            acc += *z * *qv;
                        }
                        *lq += acc;
                    }
                } else {
                    // p is the second endpoint: transposed slice
                    for (y, lq) in logq.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for (yp, qv) in qn.iter().enumerate() {
                            acc += table.data()[base + yp * k + y] * *qv;
                        }
                        *lq += acc;
                    }
                }
            }
            let row = &mut q.data_mut()[p * k..(p + 1) * k];
            row.copy_from_slice(&logq);
            softmax_row(row);
        }
    }
    Ok(Marginals { q })
}

fn check_enumerable(graph: &CrfGraph, k: usize) -> Result<u64> {
    let n = graph.num_nodes() as u32;
    let total = (k as u64).checked_pow(n).filter(|&t| t <= 10_000_000);
    total.ok_or_else(|| {
        CtxError::TooLarge(format!(
            "exact inference needs K^N <= 1e7, got {k}^{n}"
        ))
    })
}

fn for_each_labeling<T: Scalar, F: FnMut(&[usize], T)>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    mut f: F,
) -> Result<()> {
    let n = graph.num_nodes();
    let k = tables.k;
    let mut labeling = vec![0usize; n];
    loop {
        let e = energy(graph, tables, &labeling)?;
        f(&labeling, e);
        // odometer increment
        let mut i = 0;
        while i < n {
            labeling[i] += 1;
            if labeling[i] < k {
                break;
            }
            labeling[i] = 0;
            i += 1;
        }
        if i == n {
            return Ok(());
        }
    }
}

/// log Z by two-pass enumeration (max shift then sum).
fn log_partition<T: Scalar>(graph: &CrfGraph, tables: &PotentialTables<T>) -> Result<f64> {
    let mut max_neg_e = f64::NEG_INFINITY;
    for_each_labeling(graph, tables, |_, e| {
        max_neg_e = max_neg_e.max(-e.to_f64_val());
    })?;
    let mut sum = 0.0f64;
    for_each_labeling(graph, tables, |_, e| {
        sum += (-e.to_f64_val() - max_neg_e).exp();
    })?;
    Ok(max_neg_e + sum.ln())
}

/// Exact node marginals by brute-force summation over all labelings.
pub fn exact_marginals<T: Scalar>(graph: &CrfGraph, tables: &PotentialTables<T>) -> Result<Marginals<T>> {
    check_tables_match(graph, tables)?;
    check_enumerable(graph, tables.k)?;
    let n = graph.num_nodes();
    let k = tables.k;
    let logz = log_partition(graph, tables)?;
    let mut q = vec![0.0f64; n * k];
    for_each_labeling(graph, tables, |labeling, e| {
        let p = (-e.to_f64_val() - logz).exp();
        for (i, &y) in labeling.iter().enumerate() {
            q[i * k + y] += p;
        }
    })?;
    let q = Tensor::new(vec![n, k], q.into_iter().map(T::from_f64).collect())?;
    Ok(Marginals { q })
}

/// KL(Q || P) by exact enumeration; test oracle for mean-field descent.
pub fn kl_qp<T: Scalar>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    marginals: &Marginals<T>,
) -> Result<f64> {
    check_tables_match(graph, tables)?;
    check_enumerable(graph, tables.k)?;
    let logz = log_partition(graph, tables)?;
    let mut kl = logz;
    for_each_labeling(graph, tables, |labeling, e| {
        let mut qy = 1.0f64;
        for (i, &y) in labeling.iter().enumerate() {
            qy *= marginals.q.at2(i, y).to_f64_val();
        }
        if qy > 0.0 {
            kl += qy * (qy.ln() + e.to_f64_val());
        }
    })?;
    Ok(kl)
}

/// Reshape per-node marginals to a [K, h, w] score map.
pub fn coarse_scores<T: Scalar>(marginals: &Marginals<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, k) = (marginals.num_nodes(), marginals.k());
    if n != h * w {
        return Err(CtxError::ShapeMismatch(format!("{n} marginals != {h}x{w} grid")));
    }
    let mut scores = Tensor::zeros(vec![k, h, w]);
    for p in 0..n {
        for y in 0..k {
            scores.data_mut()[y * n + p] = marginals.q.at2(p, y);
        }
    }
    Ok(scores)
}

/// Per-channel bilinear upsampling of a score map; interpolation weights are
/// shared across channels, so per-pixel channel sums are preserved.
pub fn upsample_scores<T: Scalar>(scores: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    ops::bilinear_forward(scores, h, w)
}

#[derive(Clone, Debug)]
pub struct RefineParams {
    pub potts_weight: f64,
    pub appearance_weight: f64,
    /// Smoothness-kernel sigma in pixels; the appearance kernel's spatial
    /// part uses 20x this value.
    pub spatial_sigma: f64,
    /// Color sigma on the 0-255 intensity scale.
    pub color_sigma: f64,
    pub iterations: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            potts_weight: 3.0,
            appearance_weight: 10.0,
            spatial_sigma: 3.0,
            color_sigma: 20.0,
            iterations: 5,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if self.potts_weight < 0.0 || self.appearance_weight < 0.0 {
            return Err(CtxError::InvalidConfig("refine weights must be >= 0".into()));
        }
        if self.spatial_sigma <= 0.0 || self.color_sigma <= 0.0 {
            return Err(CtxError::InvalidConfig("refine sigmas must be > 0".into()));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        RefineParams { iterations: 0, ..Default::default() }
    }
}

const REFINE_MAX_PIXELS: usize = 16384;

/// Mean field on a fully connected Potts CRF over pixels, with Gaussian
/// appearance and smoothness kernels evaluated exactly (no lattice
/// approximation). Parallel updates; output is the per-pixel argmax.
pub fn dense_crf_refine<T: Scalar>(
    scores: &Tensor<T>,
    image: &Tensor<T>,
    params: &RefineParams,
) -> Result<LabelMap> {
    params.validate()?;
    let (k, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    if image.shape()[1] != h || image.shape()[2] != w {
        return Err(CtxError::ShapeMismatch(format!(
            "image {:?} vs scores {:?}",
            image.shape(),
            scores.shape()
        )));
    }
    let n = h * w;
    if n > REFINE_MAX_PIXELS {
        return Err(CtxError::TooLarge(format!(
            "dense_crf_refine: {n} pixels exceeds the {REFINE_MAX_PIXELS} limit of naive message passing"
        )));
    }
    let argmax_of = |q: &[f64]| -> LabelMap {
        let mut out = LabelMap::filled(h, w, 0);
        for p in 0..n {
            let mut best = 0;
            for y in 1..k {
                if q[p * k + y] > q[p * k + best] {
                    best = y;
                }
            }
            out.data[p] = best as u8;
        }
        out
    };

    let mut q: Vec<f64> = (0..n * k)
        .map(|i| {
            let p = i / k;
            let y = i % k;
            scores.data()[y * n + p].to_f64_val()
        })
        .collect();
    if params.iterations == 0 || (params.potts_weight == 0.0 && params.appearance_weight == 0.0) {
        return Ok(argmax_of(&q));
    }

    // Unary energies from clamped scores.
    let unary: Vec<f64> = q.iter().map(|&s| -(s.clamp(1e-8, 1.0)).ln()).collect();

    let nc = image.shape()[0];
    let colors: Vec<f64> = image.data().iter().map(|v| v.to_f64_val() * 255.0).collect();
    let inv2_col = 1.0 / (2.0 * params.color_sigma * params.color_sigma);
    let sigma_app = 20.0 * params.spatial_sigma;
    let inv2_app = 1.0 / (2.0 * sigma_app * sigma_app);
    let inv2_smooth = 1.0 / (2.0 * params.spatial_sigma * params.spatial_sigma);

    let kernel_at = |i: usize, j: usize| -> f64 {
        let (ri, ci) = ((i / w) as f64, (i % w) as f64);
        let (rj, cj) = ((j / w) as f64, (j % w) as f64);
        let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
        let mut col2 = 0.0;
        for c in 0..nc {
            let d = colors[c * n + i] - colors[c * n + j];
            col2 += d * d;
        }
        params.appearance_weight * (-d2 * inv2_app - col2 * inv2_col).exp()
            + params.potts_weight * (-d2 * inv2_smooth).exp()
    };

    // Cache the pair kernel when it fits; it is iteration-invariant.
    let cache: Option<Vec<f32>> = if n <= 8192 {
        let mut m = vec![0.0f32; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = kernel_at(i, j) as f32;
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        Some(m)
    } else {
        None
    };

    let mut logq = vec![0.0f64; n * k];
    for _ in 0..params.iterations {
        for i in 0..n {
            // message m(y) = sum_j kern(i,j) Q_j(y); Potts energy is
            // S_i - m(y), and the constant S_i drops in the softmax.
            let row = &mut logq[i * k..(i + 1) * k];
            for (y, lv) in row.iter_mut().enumerate() {
                *lv = -unary[i * k + y];
            }
            match &cache {
                Some(m) => {
                    let krow = &m[i * n..(i + 1) * n];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let kv = krow[j] as f64;
                        if kv == 0.0 {
                            continue;
                        }
                        let qj = &q[j * k..(j + 1) * k];
                        for (y, lv) in row.iter_mut().enumerate() {
                            *lv += kv * qj[y];
                        }
                    }
                }
                None => {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let kv = kernel_at(i, j);
                        let qj = &q[j * k..(j + 1) * k];
                        for (y, lv) in row.iter_mut().enumerate() {
                            *lv += kv * qj[y];
                        }
                    }
                }
            }
        }
        // parallel update from logq
        for i in 0..n {
            let row = &mut logq[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for (y, v) in row.iter().enumerate() {
                q[i * k + y] = v / z;
            }
        }
    }
    Ok(argmax_of(&q))
}

/// Full prediction output: coarse labels at feature-map resolution and the
/// refined full-resolution labels, plus the score maps between the stages.
pub struct Prediction<T> {
    pub coarse: LabelMap,
    pub final_map: LabelMap,
    pub coarse_scores: Tensor<T>,
    pub upsampled_scores: Tensor<T>,
}

/// FeatMap forward (x3 potential types) -> tables -> mean field -> score map
/// -> bilinear upsampling -> dense-CRF refinement.
pub fn predict<T: Scalar>(
    nets: &PotentialNets<T>,
    image: &Tensor<T>,
    refine: &RefineParams,
    mean_field_iters: usize,
) -> Result<Prediction<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let graph = nets.graph_for(h, w)?;
    let tables = nets.tables_for(image, &graph)?;
    tables.assert_finite()?;
    let marginals = mean_field(&graph, &tables, mean_field_iters)?;
    let scores = coarse_scores(&marginals, graph.height, graph.width)?;
    let coarse = {
        let am = marginals.argmax();
        LabelMap::new(graph.height, graph.width, am.into_iter().map(|y| y as u8).collect())
    };
    let up = upsample_scores(&scores, h, w)?;
    let final_map = dense_crf_refine(&up, image, refine)?;
    Ok(Prediction { coarse, final_map, coarse_scores: scores, upsampled_scores: up })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, RelationSpec};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tables(graph: &CrfGraph, k: usize, seed: u64, scale: f64) -> PotentialTables<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = graph.num_nodes();
        let unary = Tensor::new(
            vec![n, k],
            (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut pairwise = Vec::new();
        for es in graph.relations() {
            let e = es.edges.len().max(1);
            pairwise.push((
                es.spec.name.clone(),
                Tensor::new(
                    vec![e, k, k],
                    (0..e * k * k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            ));
        }
        PotentialTables { k, unary, pairwise }
    }

    #[test]
    fn mean_field_exact_on_edge_free_graph() {
        let graph = build_graph(2, 3, &[]).unwrap();
        let tables = rand_tables(&graph, 3, 1, 1.0);
        let mf = mean_field(&graph, &tables, 7).unwrap();
        let ex = exact_marginals(&graph, &tables).unwrap();
        for (a, b) in mf.q.data().iter().zip(ex.q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_field_uniform_on_zero_tables() {
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let tables: PotentialTables<f64> = PotentialTables {
            k: 4,
            unary: Tensor::zeros(vec![4, 4]),
            pairwise: vec![("surround".into(), Tensor::zeros(vec![5, 4, 4]))],
        };
        let mf = mean_field(&graph, &tables, 3).unwrap();
        assert!(mf.q.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn mean_field_rows_normalized_every_iteration() {
        let graph = build_graph(3, 3, &[RelationSpec::surround(), RelationSpec::above_below()]).unwrap();
        let tables = rand_tables(&graph, 3, 2, 1.0);
        for iters in 0..5 {
            let mf = mean_field(&graph, &tables, iters).unwrap();
            mf.check_normalized(1e-9).unwrap();
        }
    }

    #[test]
    fn exact_marginals_normalized_and_uniform() {
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let tables = rand_tables(&graph, 2, 3, 1.0);
        let ex = exact_marginals(&graph, &tables).unwrap();
        ex.check_normalized(1e-12).unwrap();
        let zero: PotentialTables<f64> = PotentialTables {
            k: 2,
            unary: Tensor::zeros(vec![4, 2]),
            pairwise: vec![("surround".into(), Tensor::zeros(vec![5, 2, 2]))],
        };
        let ex = exact_marginals(&graph, &zero).unwrap();
        assert!(ex.q.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn exact_single_node_is_softmax() {
        let graph = build_graph(1, 1, &[]).unwrap();
        let tables = PotentialTables {
            k: 3,
            unary: Tensor::new(vec![1, 3], vec![0.2, 1.1, -0.4]).unwrap(),
            pairwise: vec![],
        };
        let ex = exact_marginals(&graph, &tables).unwrap();
        let mut row: [f64; 3] = [0.2, 1.1, -0.4];
        softmax_row(&mut row);
        for (a, b) in ex.q.data().iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_bound_enforced() {
        let graph = build_graph(5, 5, &[]).unwrap();
        let tables: PotentialTables<f64> = PotentialTables {
            k: 5,
            unary: Tensor::zeros(vec![25, 5]),
            pairwise: vec![],
        };
        let e = exact_marginals(&graph, &tables).unwrap_err().to_string();
        assert!(e.contains("1e7"), "{e}");
    }

    #[test]
    fn kl_zero_at_exact_and_nonnegative() {
        let graph = build_graph(1, 1, &[]).unwrap();
        let tables = PotentialTables {
            k: 2,
            unary: Tensor::new(vec![1, 2], vec![0.3, -0.6]).unwrap(),
            pairwise: vec![],
        };
        let mf = mean_field(&graph, &tables, 1).unwrap();
        let kl = kl_qp(&graph, &tables, &mf).unwrap();
        assert!(kl.abs() < 1e-12);
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let tables = rand_tables(&graph, 2, 9, 1.0);
        let mf = mean_field(&graph, &tables, 1).unwrap();
        assert!(kl_qp(&graph, &tables, &mf).unwrap() >= -1e-12);
    }

    #[test]
    fn kl_nonincreasing_per_sweep() {
        for seed in 0..10 {
            let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
            let tables = rand_tables(&graph, 2, seed, 1.0);
            let mut prev = f64::INFINITY;
            for iters in 1..6 {
                let mf = mean_field(&graph, &tables, iters).unwrap();
                let kl = kl_qp(&graph, &tables, &mf).unwrap();
                assert!(kl <= prev + 1e-9, "seed {seed} iter {iters}: {kl} > {prev}");
                prev = kl;
            }
        }
    }

    #[test]
    fn weak_coupling_convergence() {
        let graph = build_graph(3, 3, &[RelationSpec::surround()]).unwrap();
        let mut errs = Vec::new();
        for &scale in &[1.0, 0.5, 0.1, 0.01] {
            let tables = rand_tables(&graph, 3, 4, 0.1 * scale);
            let mf = mean_field(&graph, &tables, 10).unwrap();
            let ex = exact_marginals(&graph, &tables).unwrap();
            let err = mf
                .q
                .data()
                .iter()
                .zip(ex.q.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            errs.push(err);
        }
        assert!(errs[0] < 0.01, "weak-coupling error too large: {errs:?}");
        for wnd in errs.windows(2) {
            assert!(wnd[1] <= wnd[0] + 1e-12, "not monotone: {errs:?}");
        }
    }

    #[test]
    fn asymmetric_message_orientation() {
        // Edge (0,1) above/below with a table that strongly couples
        // y_0 = 0 with y_1 = 1; the below node must receive the transposed
        // slice, favoring class 1 when node 0 is pinned to class 0.
        let graph = build_graph(2, 1, &[RelationSpec::above_below()]).unwrap();
        let mut unary = Tensor::<f64>::zeros(vec![2, 2]);
        unary.data_mut()[0] = 50.0; // pin node 0 to class 0
        let mut table = Tensor::zeros(vec![1, 2, 2]);
        table.data_mut()[1] = 5.0; // z(y0=0, y1=1) = 5
        let tables = PotentialTables {
            k: 2,
            unary,
            pairwise: vec![("above_below".into(), table)],
        };
        let mf = mean_field(&graph, &tables, 3).unwrap();
        assert!(mf.q.at2(1, 1) > 0.99, "below node should prefer class 1: {:?}", mf.q);
        let ex = exact_marginals(&graph, &tables).unwrap();
        assert!((mf.q.at2(1, 1) - ex.q.at2(1, 1)).abs() < 1e-6);
    }

    #[test]
    fn coarse_scores_roundtrip() {
        let graph = build_graph(2, 3, &[]).unwrap();
        let tables = rand_tables(&graph, 4, 8, 1.0);
        let mf = mean_field(&graph, &tables, 1).unwrap();
        let scores = coarse_scores(&mf, 2, 3).unwrap();
        for p in 0..6 {
            for y in 0..4 {
                assert_eq!(scores.data()[y * 6 + p], mf.q.at2(p, y));
            }
        }
        let am = mf.argmax();
        for p in 0..6 {
            let mut best = 0;
            for y in 1..4 {
                if scores.data()[y * 6 + p] > scores.data()[best * 6 + p] {
                    best = y;
                }
            }
            assert_eq!(best, am[p]);
        }
    }

    #[test]
    fn upsample_preserves_normalization() {
        let graph = build_graph(3, 3, &[]).unwrap();
        let tables = rand_tables(&graph, 3, 6, 1.0);
        let mf = mean_field(&graph, &tables, 1).unwrap();
        let scores = coarse_scores(&mf, 3, 3).unwrap();
        let up = upsample_scores(&scores, 17, 11).unwrap();
        for p in 0..17 * 11 {
            let s: f64 = (0..3).map(|y| up.data()[y * 17 * 11 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // identity when dims match
        let same = upsample_scores(&scores, 3, 3).unwrap();
        assert_eq!(same.data(), scores.data());
        // constant input stays constant
        let c = Tensor::full(vec![2, 3, 3], 0.5f64);
        let up = upsample_scores(&c, 7, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn refine_disabled_is_argmax() {
        let mut scores = Tensor::zeros(vec![2, 2, 2]);
        // class 0 wins at pixels 0,3; class 1 at 1,2
        scores.data_mut()[..4].copy_from_slice(&[0.9, 0.2, 0.1, 0.8]);
        scores.data_mut()[4..].copy_from_slice(&[0.1, 0.8, 0.9, 0.2]);
        let image = Tensor::zeros(vec![3, 2, 2]);
        let out = dense_crf_refine(&scores, &image, &RefineParams::disabled()).unwrap();
        assert_eq!(out.data, vec![0, 1, 1, 0]);
        let mut zero_w = RefineParams::default();
        zero_w.potts_weight = 0.0;
        zero_w.appearance_weight = 0.0;
        let out = dense_crf_refine(&scores, &image, &zero_w).unwrap();
        assert_eq!(out.data, vec![0, 1, 1, 0]);
    }

    #[test]
    fn refine_flips_lone_outlier() {
        // 5x5 uniform-color image; every pixel confidently class 0 except the
        // center, which slightly prefers class 1. High Potts weight flips it.
        let (h, w, k) = (5, 5, 2);
        let mut scores = Tensor::zeros(vec![k, h, w]);
        for p in 0..h * w {
            let (a, b) = if p == 12 { (0.45, 0.55) } else { (0.95, 0.05) };
            scores.data_mut()[p] = a;
            scores.data_mut()[h * w + p] = b;
        }
        let image = Tensor::full(vec![3, h, w], 0.5f64);
        let params = RefineParams { potts_weight: 5.0, ..Default::default() };
        let out = dense_crf_refine(&scores, &image, &params).unwrap();
        assert!(out.data.iter().all(|&v| v == 0), "{:?}", out.data);
    }

    #[test]
    fn refine_labels_in_range_and_dim_check() {
        let scores = Tensor::full(vec![3, 4, 4], 1.0 / 3.0f64);
        let image = Tensor::zeros(vec![3, 4, 4]);
        let out = dense_crf_refine(&scores, &image, &RefineParams::default()).unwrap();
        assert!(out.data.iter().all(|&v| v < 3));
        let bad = Tensor::zeros(vec![3, 5, 4]);
        assert!(dense_crf_refine(&scores, &bad, &RefineParams::default()).is_err());
    }
}
