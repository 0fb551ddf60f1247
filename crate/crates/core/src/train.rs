//! Piecewise-likelihood training of the potential networks, plus an exact
//! maximum-likelihood oracle on enumeration-feasible graphs.
//!
//! The piecewise objective is a sum of independent per-potential softmax
//! likelihoods: each unary node term normalizes over K classes, each pairwise
//! edge term over K*K label pairs. No CRF inference runs anywhere in this
//! module.

use crate::error::{CtxError, Result};
use crate::graph::CrfGraph;
use crate::labels::{LabelMap, IGNORE};
use crate::ops::{self, Reduction};
use crate::optim::ParamStore;
use crate::potentials::{energy, PotentialNets, PotentialTables};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub scale_range: (f64, f64),
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 8,
            batch_size: 8,
            seed: 0,
            augment: true,
            scale_range: (0.7, 1.2),
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(CtxError::InvalidConfig("lr must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CtxError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.scale_range.0 >= self.scale_range.1 {
            return Err(CtxError::InvalidConfig(format!(
                "scale_range: low {} must be < high {}",
                self.scale_range.0, self.scale_range.1
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CtxError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub image: Tensor<T>,
    pub mask: LabelMap,
}

impl<T: Scalar> TrainSample<T> {
    pub fn validate(&self, k: usize) -> Result<()> {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        if (self.mask.h, self.mask.w) != (h, w) {
            return Err(CtxError::ShapeMismatch(format!(
                "mask {}x{} != image {h}x{w}",
                self.mask.h, self.mask.w
            )));
        }
        if let Some(&l) = self.mask.data.iter().find(|&&l| l != IGNORE && l as usize >= k) {
            return Err(CtxError::InvalidArgument(format!("mask label {l} >= K = {k}")));
        }
        Ok(())
    }
}

/// Node labels at feature-map resolution: majority vote over each node's cell
/// of the regular h x w partition of the mask. Ties go to the lowest class
/// index; cells that are entirely ignore-valued stay ignored.
pub fn downsample_mask(mask: &LabelMap, h: usize, w: usize, k: usize) -> Vec<u8> {
    let mut labels = vec![IGNORE; h * w];
    for r in 0..h {
        let (r0, r1) = (r * mask.h / h, ((r + 1) * mask.h / h).max(r * mask.h / h + 1));
        for c in 0..w {
            let (c0, c1) = (c * mask.w / w, ((c + 1) * mask.w / w).max(c * mask.w / w + 1));
            let mut counts = vec![0usize; k];
            for mr in r0..r1.min(mask.h) {
                for mc in c0..c1.min(mask.w) {
                    let l = mask.at(mr, mc);
                    if l != IGNORE {
                        counts[l as usize] += 1;
                    }
                }
            }
            // first maximum wins: lowest class index on ties
            let (mut best, mut best_n) = (IGNORE, 0usize);
            for (cls, &n) in counts.iter().enumerate() {
                if n > best_n {
                    best = cls as u8;
                    best_n = n;
                }
            }
            labels[r * w + c] = best;
        }
    }
    labels
}

/// Valid edges of a relation: both endpoints carry a real label.
pub fn valid_edges(edges: &[(usize, usize)], node_labels: &[u8]) -> Vec<(usize, usize)> {
    edges
        .iter()
        .copied()
        .filter(|&(p, q)| node_labels[p] != IGNORE && node_labels[q] != IGNORE)
        .collect()
}

/// Piecewise negative log-likelihood evaluated directly on potential tables,
/// with analytic gradients w.r.t. every table entry. Returns
/// (loss, gradient tables, all_ignored warning).
pub fn piecewise_nll<T: Scalar>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    node_labels: &[u8],
) -> Result<(T, PotentialTables<T>, bool)> {
    let k = tables.k;
    let n = graph.num_nodes();
    if node_labels.len() != n {
        return Err(CtxError::ShapeMismatch(format!(
            "piecewise_nll: {} labels for {n} nodes",
            node_labels.len()
        )));
    }
    if let Some(&l) = node_labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return Err(CtxError::InvalidArgument(format!("node label {l} >= K = {k}")));
    }
    let mut loss = T::zero();
    let mut grad_unary = Tensor::zeros(vec![n, k]);
    let mut any = false;
    for p in 0..n {
        if node_labels[p] == IGNORE {
            continue;
        }
        any = true;
        let row = &tables.unary.data()[p * k..(p + 1) * k];
        let (l, probs) = softmax_nll_row(row, node_labels[p] as usize);
        loss += l;
        for (y, g) in probs.iter().enumerate() {
            grad_unary.data_mut()[p * k + y] =
                *g - if y == node_labels[p] as usize { T::one() } else { T::zero() };
        }
    }
    let mut grad_pairwise = Vec::new();
    for es in graph.relations() {
        let table = tables.relation(&es.spec.name)?;
        let mut grad = Tensor::zeros(table.shape().to_vec());
        for (ei, &(p, q)) in es.edges.iter().enumerate() {
            if node_labels[p] == IGNORE || node_labels[q] == IGNORE {
                continue;
            }
            any = true;
            let row = &table.data()[ei * k * k..(ei + 1) * k * k];
            let target = node_labels[p] as usize * k + node_labels[q] as usize;
            let (l, probs) = softmax_nll_row(row, target);
            loss += l;
            for (j, g) in probs.iter().enumerate() {
                grad.data_mut()[ei * k * k + j] = *g - if j == target { T::one() } else { T::zero() };
            }
        }
        grad_pairwise.push((es.spec.name.clone(), grad));
    }
    Ok((loss, PotentialTables { k, unary: grad_unary, pairwise: grad_pairwise }, !any))
}

fn softmax_nll_row<T: Scalar>(row: &[T], target: usize) -> (T, Vec<T>) {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    let mut probs: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    for &p in &probs {
        z += p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    let logz = m + z.ln();
    (logz - row[target], probs)
}

/// Exact negative log-likelihood E(y) + log Z with gradients w.r.t. table
/// entries, computed by exhaustive enumeration. Test oracle; the gradient of
/// each entry is (model marginal) - (observed indicator) under the U = -z
/// sign convention... negated, since tables hold z: d/dz = indicator - marginal
/// for -z entries flips to marginal - indicator.
pub fn exact_nll<T: Scalar>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    node_labels: &[usize],
) -> Result<(f64, PotentialTables<f64>)> {
    let k = tables.k;
    let n = graph.num_nodes();
    if node_labels.len() != n || node_labels.iter().any(|&y| y >= k) {
        return Err(CtxError::InvalidArgument("exact_nll: bad labeling".into()));
    }
    let total = (k as u64).checked_pow(n as u32).filter(|&t| t <= 10_000_000);
    if total.is_none() {
        return Err(CtxError::TooLarge(format!("exact_nll needs K^N <= 1e7, got {k}^{n}")));
    }
    let tables64: PotentialTables<f64> = PotentialTables {
        k,
        unary: tables.unary.cast(),
        pairwise: tables.pairwise.iter().map(|(nm, t)| (nm.clone(), t.cast())).collect(),
    };
    // pass 1: max of -E; pass 2: partition sum and marginal accumulation
    let mut max_neg = f64::NEG_INFINITY;
    for_each(&tables64, graph, |_, e| max_neg = max_neg.max(-e))?;
    let mut zsum = 0.0f64;
    let mut unary_marg = Tensor::<f64>::zeros(vec![n, k]);
    let mut pair_marg: Vec<(String, Tensor<f64>)> = graph
        .relations()
        .iter()
        .map(|es| (es.spec.name.clone(), Tensor::zeros(vec![es.edges.len().max(1), k, k])))
        .collect();
    for_each(&tables64, graph, |labeling, e| {
        let wgt = (-e - max_neg).exp();
        zsum += wgt;
        for (p, &y) in labeling.iter().enumerate() {
            unary_marg.data_mut()[p * k + y] += wgt;
        }
        for (ri, es) in graph.relations().iter().enumerate() {
            let t = &mut pair_marg[ri].1;
            for (ei, &(p, q)) in es.edges.iter().enumerate() {
                t.data_mut()[(ei * k + labeling[p]) * k + labeling[q]] += wgt;
            }
        }
    })?;
    let logz = max_neg + zsum.ln();
    unary_marg.scale_assign(1.0 / zsum);
    for (_, t) in pair_marg.iter_mut() {
        t.scale_assign(1.0 / zsum);
    }
    let e_obs = energy(graph, &tables64, node_labels)?;
    let loss = e_obs + logz;
    // d loss / d z_u[p,y] = marginal - indicator
    for (p, &y) in node_labels.iter().enumerate() {
        unary_marg.data_mut()[p * k + y] -= 1.0;
    }
    for (ri, es) in graph.relations().iter().enumerate() {
        let t = &mut pair_marg[ri].1;
        for (ei, &(p, q)) in es.edges.iter().enumerate() {
            t.data_mut()[(ei * k + node_labels[p]) * k + node_labels[q]] -= 1.0;
        }
    }
    Ok((loss, PotentialTables { k, unary: unary_marg, pairwise: pair_marg }))
}

fn for_each<F: FnMut(&[usize], f64)>(
    tables: &PotentialTables<f64>,
    graph: &CrfGraph,
    mut f: F,
) -> Result<()> {
    let n = graph.num_nodes();
    let k = tables.k;
    let mut labeling = vec![0usize; n];
    loop {
        let e = energy(graph, tables, &labeling)?;
        f(&labeling, e);
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

/// Random scaling and horizontal flipping. The image is resized bilinearly,
/// the mask by nearest neighbor.
pub fn augment<T: Scalar>(
    sample: &TrainSample<T>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample<T>> {
    let s = rng.gen_range(config.scale_range.0..=config.scale_range.1);
    let flip = config.flip && rng.gen_bool(0.5);
    augment_with(sample, config, s, flip)
}

/// Deterministic augmentation core; rejects scales outside the configured
/// range.
pub fn augment_with<T: Scalar>(
    sample: &TrainSample<T>,
    config: &TrainConfig,
    scale: f64,
    flip: bool,
) -> Result<TrainSample<T>> {
    if scale < config.scale_range.0 || scale > config.scale_range.1 {
        return Err(CtxError::InvalidConfig(format!(
            "augment scale {scale} outside configured range [{}, {}]",
            config.scale_range.0, config.scale_range.1
        )));
    }
    let (h, w) = (sample.mask.h, sample.mask.w);
    let (h2, w2) = (
        ((scale * h as f64).round() as usize).max(1),
        ((scale * w as f64).round() as usize).max(1),
    );
    let mut image = if (h2, w2) == (h, w) {
        sample.image.clone()
    } else {
        ops::bilinear_forward(&sample.image, h2, w2)?
    };
    let mut mask = LabelMap::filled(h2, w2, IGNORE);
    for r in 0..h2 {
        let sr = nearest_src(r, h2, h);
        for c in 0..w2 {
            mask.set(r, c, sample.mask.at(sr, nearest_src(c, w2, w)));
        }
    }
    if flip {
        for r in 0..h2 {
            mask.data[r * w2..(r + 1) * w2].reverse();
        }
        for ch in 0..image.shape()[0] {
            for r in 0..h2 {
                let off = (ch * h2 + r) * w2;
                image.data_mut()[off..off + w2].reverse();
            }
        }
    }
    Ok(TrainSample { image, mask })
}

fn nearest_src(i: usize, dst: usize, src: usize) -> usize {
    if dst == 1 || src == 1 {
        return 0;
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    (pos.round() as usize).min(src - 1)
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub unary_loss: f64,
    /// per relation, in graph order
    pub pairwise_losses: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let rels: Vec<&str> = self
            .epochs
            .first()
            .map(|e| e.pairwise_losses.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default();
        write!(w, "epoch,unary_loss")?;
        for r in &rels {
            write!(w, ",{r}_loss")?;
        }
        writeln!(w, ",total")?;
        for e in &self.epochs {
            write!(w, "{},{:.6}", e.epoch, e.unary_loss)?;
            for (_, l) in &e.pairwise_losses {
                write!(w, ",{l:.6}")?;
            }
            writeln!(w, ",{:.6}", e.total)?;
        }
        Ok(())
    }
}

/// Which potential types a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    UnaryOnly,
    PairwiseOnly,
    All,
}

/// Piecewise SGD training. Per-sample losses are sums over valid nodes/edges;
/// minibatch gradients are means over samples in a fixed order. Fully
/// deterministic given the seed.
pub fn train<T: Scalar>(
    dataset: &[TrainSample<T>],
    nets: &mut PotentialNets<T>,
    config: &TrainConfig,
    scope: TrainScope,
) -> Result<TrainLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CtxError::InvalidArgument("train: empty dataset".into()));
    }
    for s in dataset {
        s.validate(nets.config.k)?;
    }
    let k = nets.config.k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut graph_cache: HashMap<(usize, usize), CrfGraph> = HashMap::new();
    let lr = T::from_f64(config.lr);
    let wd = T::from_f64(config.weight_decay);
    let mom = T::from_f64(config.momentum);
    let relation_names: Vec<String> =
        nets.pairwise_stores.iter().map(|(n, _)| n.clone()).collect();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut unary_loss_sum = 0.0f64;
        let mut pair_loss_sums = vec![0.0f64; relation_names.len()];
        for batch in order.chunks(config.batch_size) {
            nets.unary_store.zero_grads();
            for (_, s) in nets.pairwise_stores.iter_mut() {
                s.zero_grads();
            }
            for &si in batch {
                let sample;
                let sample_ref = if config.augment {
                    sample = augment(&dataset[si], config, &mut rng)?;
                    &sample
                } else {
                    &dataset[si]
                };
                let (h, w) = (sample_ref.mask.h, sample_ref.mask.w);
                let (mh, mw) = nets.config.featmap.map_dims(h, w);
                let graph = graph_cache
                    .entry((mh, mw))
                    .or_insert_with(|| {
                        crate::graph::build_graph(mh, mw, &nets.config.relations).unwrap()
                    })
                    .clone();
                let node_labels = downsample_mask(&sample_ref.mask, mh, mw, k);
                let valid_nodes: Vec<usize> =
                    (0..node_labels.len()).filter(|&p| node_labels[p] != IGNORE).collect();

                if scope != TrainScope::PairwiseOnly && !valid_nodes.is_empty() {
                    let mut tape = Tape::new();
                    let img = tape.input(sample_ref.image.clone());
                    let table = nets.unary_table(&mut tape, img)?;
                    let rows = tape.gather_rows(table, &valid_nodes)?;
                    let targets: Vec<usize> =
                        valid_nodes.iter().map(|&p| node_labels[p] as usize).collect();
                    let loss = tape.softmax_xent(rows, &targets, Reduction::Sum)?;
                    let lv = tape.value(loss).item().to_f64_val();
                    if !lv.is_finite() {
                        return Err(CtxError::Diverged { epoch, detail: format!("unary loss {lv}") });
                    }
                    unary_loss_sum += lv;
                    tape.backward(loss, T::one(), &mut [&mut nets.unary_store])?;
                }
                if scope != TrainScope::UnaryOnly {
                    for ri in 0..relation_names.len() {
                        let edges = valid_edges(
                            graph.edge_feature_indices(&relation_names[ri])?,
                            &node_labels,
                        );
                        if edges.is_empty() {
                            continue;
                        }
                        let mut tape = Tape::new();
                        let img = tape.input(sample_ref.image.clone());
                        let table = nets.pairwise_table(&mut tape, img, ri, &edges)?;
                        let targets: Vec<usize> = edges
                            .iter()
                            .map(|&(p, q)| node_labels[p] as usize * k + node_labels[q] as usize)
                            .collect();
                        let loss = tape.softmax_xent(table, &targets, Reduction::Sum)?;
                        let lv = tape.value(loss).item().to_f64_val();
                        if !lv.is_finite() {
                            return Err(CtxError::Diverged {
                                epoch,
                                detail: format!("{} loss {lv}", relation_names[ri]),
                            });
                        }
                        pair_loss_sums[ri] += lv;
                        let share = nets.config.share_trunk;
                        let (_, store) = &mut nets.pairwise_stores[ri];
                        if share {
                            // trunk grads land in the unary store
                            let mut stores: Vec<&mut ParamStore<T>> = vec![store];
                            stores.push(&mut nets.unary_store);
                            tape.backward(loss, T::one(), &mut stores)?;
                        } else {
                            tape.backward(loss, T::one(), &mut [store])?;
                        }
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            // a shared trunk still learns from pairwise terms
            if scope != TrainScope::PairwiseOnly || nets.config.share_trunk {
                nets.unary_store.scale_grads(inv);
                nets.unary_store.sgd_step(lr, wd, mom);
            }
            if scope != TrainScope::UnaryOnly {
                for (_, s) in nets.pairwise_stores.iter_mut() {
                    s.scale_grads(inv);
                    s.sgd_step(lr, wd, mom);
                }
            }
        }
        let n = dataset.len() as f64;
        let unary_loss = unary_loss_sum / n;
        let pairwise_losses: Vec<(String, f64)> = relation_names
            .iter()
            .cloned()
            .zip(pair_loss_sums.iter().map(|&s| s / n))
            .collect();
        let total = unary_loss + pairwise_losses.iter().map(|(_, l)| l).sum::<f64>();
        if !total.is_finite() {
            return Err(CtxError::Diverged { epoch, detail: format!("epoch loss {total}") });
        }
        log.epochs.push(EpochRecord { epoch, unary_loss, pairwise_losses, total });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, RelationSpec};

    fn rand_tables(graph: &CrfGraph, k: usize, seed: u64) -> PotentialTables<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = graph.num_nodes();
        let unary =
            Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pairwise = graph
            .relations()
            .iter()
            .map(|es| {
                let e = es.edges.len().max(1);
                (
                    es.spec.name.clone(),
                    Tensor::new(
                        vec![e, k, k],
                        (0..e * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                )
            })
            .collect();
        PotentialTables { k, unary, pairwise }
    }

    #[test]
    fn downsample_constant_and_tie() {
        let mask = LabelMap::filled(4, 4, 2);
        assert!(downsample_mask(&mask, 2, 2, 3).iter().all(|&l| l == 2));
        let mask = LabelMap::new(2, 2, vec![0, 0, 1, 1]);
        assert_eq!(downsample_mask(&mask, 1, 1, 2), vec![0]);
    }

    #[test]
    fn downsample_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mh, mw, h, w, k) = (20, 24, 5, 6, 4);
        let data: Vec<u8> = (0..mh * mw)
            .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..k as u8) })
            .collect();
        let mask = LabelMap::new(mh, mw, data);
        let got = downsample_mask(&mask, h, w, k);
        // independent per-cell counting oracle
        for r in 0..h {
            for c in 0..w {
                let mut counts = vec![0usize; k];
                for mr in r * mh / h..(r + 1) * mh / h {
                    for mc in c * mw / w..(c + 1) * mw / w {
                        let l = mask.at(mr, mc);
                        if l != IGNORE {
                            counts[l as usize] += 1;
                        }
                    }
                }
                let expect = if counts.iter().all(|&n| n == 0) {
                    IGNORE
                } else {
                    let max = *counts.iter().max().unwrap();
                    counts.iter().position(|&n| n == max).unwrap() as u8
                };
                assert_eq!(got[r * w + c], expect, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn downsample_all_ignore_cell() {
        let mask = LabelMap::filled(2, 2, IGNORE);
        assert_eq!(downsample_mask(&mask, 1, 1, 3), vec![IGNORE]);
    }

    #[test]
    fn piecewise_uniform_loss() {
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let k = 3;
        let m = graph.relations()[0].edges.len();
        let tables: PotentialTables<f64> = PotentialTables {
            k,
            unary: Tensor::zeros(vec![4, k]),
            pairwise: vec![("surround".into(), Tensor::zeros(vec![m, k, k]))],
        };
        let labels = vec![0u8, 1, 2, 0];
        let (loss, _, warned) = piecewise_nll(&graph, &tables, &labels).unwrap();
        let expect = 4.0 * (k as f64).ln() + m as f64 * ((k * k) as f64).ln();
        assert!((loss - expect).abs() < 1e-10);
        assert!(!warned);
    }

    #[test]
    fn piecewise_all_ignored_warns() {
        let graph = build_graph(1, 2, &[]).unwrap();
        let tables: PotentialTables<f64> =
            PotentialTables { k: 2, unary: Tensor::zeros(vec![2, 2]), pairwise: vec![] };
        let (loss, _, warned) = piecewise_nll(&graph, &tables, &[IGNORE, IGNORE]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(warned);
    }

    #[test]
    fn piecewise_decomposes() {
        // unary-only pass + pairwise-only pass == joint pass
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let tables = rand_tables(&graph, 2, 5);
        let labels = vec![0u8, 1, 1, 0];
        let (joint, _, _) = piecewise_nll(&graph, &tables, &labels).unwrap();
        let unary_only =
            PotentialTables { k: 2, unary: tables.unary.clone(), pairwise: vec![] };
        let g0 = build_graph(2, 2, &[]).unwrap();
        let (lu, _, _) = piecewise_nll(&g0, &unary_only, &labels).unwrap();
        let masked = PotentialTables {
            k: 2,
            unary: Tensor::full(vec![4, 2], 0.0),
            pairwise: tables.pairwise.clone(),
        };
        let (lp_and_uniform, _, _) = piecewise_nll(&graph, &masked, &labels).unwrap();
        let lp = lp_and_uniform - 4.0 * 2.0f64.ln();
        assert!((joint - (lu + lp)).abs() < 1e-10);
    }

    #[test]
    fn piecewise_gradient_matches_fd() {
        use crate::gradcheck::{fd_grad_tensor, max_rel_err};
        let graph = build_graph(2, 2, &[RelationSpec::surround(), RelationSpec::above_below()]).unwrap();
        let tables = rand_tables(&graph, 2, 7);
        let labels = vec![0u8, 1, IGNORE, 0];
        let (_, grads, _) = piecewise_nll(&graph, &tables, &labels).unwrap();
        let g = graph.clone();
        let pw = tables.pairwise.clone();
        let labels2 = labels.clone();
        let mut unary = tables.unary.clone();
        let fd = fd_grad_tensor(&mut unary, 1e-6, |u| {
            let t = PotentialTables { k: 2, unary: u.clone(), pairwise: pw.clone() };
            piecewise_nll(&g, &t, &labels2).unwrap().0
        });
        assert!(max_rel_err(grads.unary.data(), fd.data(), 1e-8) < 1e-6);
        let u = tables.unary.clone();
        let mut surround = tables.relation("surround").unwrap().clone();
        let other = tables.pairwise[1].clone();
        let fd = fd_grad_tensor(&mut surround, 1e-6, |s| {
            let t = PotentialTables {
                k: 2,
                unary: u.clone(),
                pairwise: vec![("surround".into(), s.clone()), other.clone()],
            };
            piecewise_nll(&g, &t, &labels2).unwrap().0
        });
        assert!(max_rel_err(grads.relation("surround").unwrap().data(), fd.data(), 1e-8) < 1e-6);
    }

    #[test]
    fn exact_nll_single_node_is_xent() {
        let graph = build_graph(1, 1, &[]).unwrap();
        let tables = PotentialTables {
            k: 3,
            unary: Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap(),
            pairwise: vec![],
        };
        let (loss, _) = exact_nll(&graph, &tables, &[2]).unwrap();
        let (xent, _) = softmax_nll_row(&[0.3, -0.2, 0.9], 2);
        assert!((loss - xent).abs() < 1e-12);
        // and piecewise coincides exactly on a single node
        let (pw, _, _) = piecewise_nll(&graph, &tables, &[2]).unwrap();
        assert!((loss - pw).abs() < 1e-12);
    }

    #[test]
    fn exact_nll_zero_tables() {
        let graph = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        let m = graph.relations()[0].edges.len();
        let tables: PotentialTables<f64> = PotentialTables {
            k: 2,
            unary: Tensor::zeros(vec![4, 2]),
            pairwise: vec![("surround".into(), Tensor::zeros(vec![m, 2, 2]))],
        };
        let (loss, _) = exact_nll(&graph, &tables, &[0, 1, 0, 1]).unwrap();
        assert!((loss - 4.0 * 2.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn exact_nll_gradient_matches_fd() {
        use crate::gradcheck::{fd_grad_tensor, max_rel_err};
        let graph = build_graph(3, 3, &[RelationSpec::surround()]).unwrap();
        let tables = rand_tables(&graph, 2, 11);
        let labels: Vec<usize> = (0..9).map(|i| i % 2).collect();
        let (_, grads) = exact_nll(&graph, &tables, &labels).unwrap();
        let g = graph.clone();
        let pw = tables.pairwise.clone();
        let l2 = labels.clone();
        let mut unary = tables.unary.clone();
        let fd = fd_grad_tensor(&mut unary, 1e-6, |u| {
            let t = PotentialTables { k: 2, unary: u.clone(), pairwise: pw.clone() };
            exact_nll(&g, &t, &l2).unwrap().0
        });
        assert!(max_rel_err(grads.unary.data(), fd.data(), 1e-8) < 1e-6);
    }

    #[test]
    fn exact_nll_too_large_rejected() {
        let graph = build_graph(5, 5, &[]).unwrap();
        let tables: PotentialTables<f64> =
            PotentialTables { k: 5, unary: Tensor::zeros(vec![25, 5]), pairwise: vec![] };
        assert!(exact_nll(&graph, &tables, &vec![0; 25]).is_err());
    }

    #[test]
    fn augment_identity_and_involution() {
        let cfg = TrainConfig { scale_range: (0.7, 1.2), ..Default::default() };
        let img = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, IGNORE]);
        let s = TrainSample { image: img, mask };
        let same = augment_with(&s, &cfg, 1.0, false).unwrap();
        assert_eq!(same.image.data(), s.image.data());
        assert_eq!(same.mask, s.mask);
        let flipped = augment_with(&s, &cfg, 1.0, true).unwrap();
        let twice = augment_with(&flipped, &cfg, 1.0, true).unwrap();
        assert_eq!(twice.image.data(), s.image.data());
        assert_eq!(twice.mask, s.mask);
        assert!(augment_with(&s, &cfg, 0.5, false).is_err());
    }
}
