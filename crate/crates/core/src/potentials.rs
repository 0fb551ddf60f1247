//! Unary-Net and Pairwise-Net heads over FeatMap-Net features, potential
//! tables, and energy evaluation.
//!
//! Sign convention: a net outputs confidence values z; the potentials are
//! U = -z and V = -z, so raising z for a label lowers the energy of every
//! labeling using it.

use crate::error::{CtxError, Result};
use crate::featmap::{FeatMapConfig, FeatMapNet};
use crate::graph::{CrfGraph, RelationSpec};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct PotentialNetsConfig {
    pub k: usize,
    pub unary_hidden: Vec<usize>,
    pub pairwise_hidden: Vec<usize>,
    pub featmap: FeatMapConfig,
    pub relations: Vec<RelationSpec>,
    /// Share one FeatMap-Net trunk across all potential types. Off by
    /// default: the paper trains one trunk per potential.
    pub share_trunk: bool,
}

impl Default for PotentialNetsConfig {
    fn default() -> Self {
        PotentialNetsConfig {
            k: 5,
            unary_hidden: vec![32],
            pairwise_hidden: vec![32],
            featmap: FeatMapConfig::default(),
            relations: vec![RelationSpec::surround(), RelationSpec::above_below()],
            share_trunk: false,
        }
    }
}

impl PotentialNetsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CtxError::InvalidConfig(format!("k: must be >= 2, got {}", self.k)));
        }
        if self.unary_hidden.iter().chain(&self.pairwise_hidden).any(|&w| w == 0) {
            return Err(CtxError::InvalidConfig("hidden widths must be positive".into()));
        }
        self.featmap.validate()
    }
}

/// Per-node K-vectors and per-edge KxK tables of net outputs z.
#[derive(Clone, Debug)]
pub struct PotentialTables<T> {
    pub k: usize,
    /// [N_nodes, K]
    pub unary: Tensor<T>,
    /// relation name -> [N_edges, K, K]; entry (y_p, y_q) in stored edge
    /// orientation.
    pub pairwise: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> PotentialTables<T> {
    pub fn unary_only(unary: Tensor<T>) -> Self {
        let k = unary.shape()[1];
        PotentialTables { k, unary, pairwise: Vec::new() }
    }

    pub fn relation(&self, name: &str) -> Result<&Tensor<T>> {
        self.pairwise
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CtxError::UnknownRelation(name.to_string()))
    }

    pub fn assert_finite(&self) -> Result<()> {
        self.unary.assert_finite("unary table")?;
        for (name, t) in &self.pairwise {
            t.assert_finite(&format!("pairwise table {name}"))?;
        }
        Ok(())
    }
}

fn init_head<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    hidden: &[usize],
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut din = d_in;
    let widths: Vec<usize> = hidden.iter().copied().chain([d_out]).collect();
    for (i, &dout) in widths.iter().enumerate() {
        let r = (6.0 / (din + dout) as f64).sqrt();
        let data = (0..dout * din).map(|_| T::from_f64(rng.gen_range(-r..r))).collect();
        store.insert(&format!("{prefix}head.fc{i}.w"), Tensor::new(vec![dout, din], data)?)?;
        store.insert(&format!("{prefix}head.fc{i}.b"), Tensor::zeros(vec![dout]))?;
        din = dout;
    }
    Ok(())
}

fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    mut x: Var,
) -> Result<Var> {
    let mut i = 0;
    loop {
        let wn = format!("{prefix}head.fc{i}.w");
        if !store.contains(&wn) {
            if i == 0 {
                return Err(CtxError::InvalidArgument(format!("no head under prefix {prefix}")));
            }
            return Ok(x);
        }
        if i > 0 {
            x = tape.relu(x);
        }
        let w = tape.param(store, &wn)?;
        let b = tape.param(store, &format!("{prefix}head.fc{i}.b"))?;
        x = tape.linear(x, w, b)?;
        i += 1;
    }
}

/// Unary head over a [d,h,w] feature map: row p of the result is the K-vector
/// z_{p,.} for node p (row-major spatial order).
pub fn unary_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    fmap: Var,
) -> Result<Var> {
    let rows = tape.chw_to_rows(fmap);
    head_forward(tape, store, "unary.", rows)
}

/// Pairwise head over edge features concat(feature(p), feature(q)) in stored
/// orientation order. Output is [E, K*K]; entry (y_p, y_q) at flat index
/// y_p*K + y_q.
pub fn pairwise_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    fmap: Var,
    edges: &[(usize, usize)],
) -> Result<Var> {
    let rows = tape.chw_to_rows(fmap);
    let ps: Vec<usize> = edges.iter().map(|&(p, _)| p).collect();
    let qs: Vec<usize> = edges.iter().map(|&(_, q)| q).collect();
    let fp = tape.gather_rows(rows, &ps)?;
    let fq = tape.gather_rows(rows, &qs)?;
    let ef = tape.concat_cols(fp, fq)?;
    head_forward(tape, store, prefix, ef)
}

/// The three potential networks: one FeatMap-Net plus head per potential type.
#[derive(Clone)]
pub struct PotentialNets<T: Scalar> {
    pub config: PotentialNetsConfig,
    pub trunk: FeatMapNet,
    /// Store holding the unary trunk + unary head (and, when the trunk is
    /// shared, the only trunk).
    pub unary_store: ParamStore<T>,
    /// Per pairwise relation: (name, store with trunk + head).
    pub pairwise_stores: Vec<(String, ParamStore<T>)>,
}

impl<T: Scalar> PotentialNets<T> {
    pub fn new(config: PotentialNetsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let trunk = FeatMapNet::new(config.featmap.clone())?;
        let d = config.featmap.d_total();
        let k = config.k;

        let mut unary_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        trunk.init_params(&mut unary_store, "fm.", &mut rng)?;
        init_head(&mut unary_store, "unary.", d, &config.unary_hidden, k, &mut rng)?;

        let mut pairwise_stores = Vec::new();
        for (ri, rel) in config.relations.iter().enumerate() {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + ri as u64));
            if !config.share_trunk {
                trunk.init_params(&mut store, "fm.", &mut rng)?;
            }
            init_head(&mut store, &format!("{}.", rel.name), 2 * d, &config.pairwise_hidden, k * k, &mut rng)?;
            pairwise_stores.push((rel.name.clone(), store));
        }
        Ok(PotentialNets { config, trunk, unary_store, pairwise_stores })
    }

    pub fn graph_for(&self, h: usize, w: usize) -> Result<CrfGraph> {
        let (mh, mw) = self.config.featmap.map_dims(h, w);
        crate::graph::build_graph(mh, mw, &self.config.relations)
    }

    /// Unary table for an image: trunk forward then unary head.
    pub fn unary_table(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let fmap = self.trunk.forward(tape, &self.unary_store, "fm.", image)?;
        unary_forward(tape, &self.unary_store, fmap)
    }

    /// Pairwise table [E, K*K] for relation index `ri`.
    pub fn pairwise_table(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        ri: usize,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let (name, store) = &self.pairwise_stores[ri];
        let trunk_store = if self.config.share_trunk { &self.unary_store } else { store };
        let fmap = self.trunk.forward(tape, trunk_store, "fm.", image)?;
        pairwise_forward(tape, store, &format!("{name}."), fmap, edges)
    }

    /// Evaluate all tables for one image (inference path; values only).
    pub fn tables_for(&self, image: &Tensor<T>, graph: &CrfGraph) -> Result<PotentialTables<T>> {
        let k = self.config.k;
        let n = graph.num_nodes();
        let mut tape = Tape::new();
        let img = tape.input(image.clone());
        let unary_var = self.unary_table(&mut tape, img)?;
        let unary = tape.value(unary_var).clone();
        if unary.shape() != [n, k] {
            return Err(CtxError::ShapeMismatch(format!(
                "unary table shape {:?} != [{n},{k}] implied by graph",
                unary.shape()
            )));
        }
        let mut pairwise = Vec::new();
        for (ri, (name, _)) in self.pairwise_stores.iter().enumerate() {
            let edges = graph.edge_feature_indices(name)?;
            if edges.is_empty() {
                pairwise.push((name.clone(), Tensor::zeros(vec![1, k, k])));
                continue;
            }
            let mut tape = Tape::new();
            let img = tape.input(image.clone());
            let v = self.pairwise_table(&mut tape, img, ri, edges)?;
            pairwise.push((name.clone(), tape.value(v).reshaped(vec![edges.len(), k, k])?));
        }
        Ok(PotentialTables { k, unary, pairwise })
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = vec![&mut self.unary_store];
        v.extend(self.pairwise_stores.iter_mut().map(|(_, s)| s));
        v
    }

    pub fn cast<U: Scalar>(&self) -> PotentialNets<U> {
        PotentialNets {
            config: self.config.clone(),
            trunk: self.trunk.clone(),
            unary_store: self.unary_store.cast(),
            pairwise_stores: self
                .pairwise_stores
                .iter()
                .map(|(n, s)| (n.clone(), s.cast()))
                .collect(),
        }
    }
}

/// E(y) = sum_p U(y_p) + sum_rel sum_(p,q) V(y_p, y_q), with U = -unary z and
/// V = -pairwise z.
pub fn energy<T: Scalar>(
    graph: &CrfGraph,
    tables: &PotentialTables<T>,
    labeling: &[usize],
) -> Result<T> {
    let k = tables.k;
    if labeling.len() != graph.num_nodes() {
        return Err(CtxError::ShapeMismatch(format!(
            "energy: labeling has {} entries, graph has {} nodes",
            labeling.len(),
            graph.num_nodes()
        )));
    }
    if let Some(&y) = labeling.iter().find(|&&y| y >= k) {
        return Err(CtxError::InvalidArgument(format!("energy: label {y} out of range [0,{k})")));
    }
    let mut e = T::zero();
    for (p, &y) in labeling.iter().enumerate() {
        e -= tables.unary.at2(p, y);
    }
    for es in graph.relations() {
        let table = tables.relation(&es.spec.name)?;
        for (ei, &(p, q)) in es.edges.iter().enumerate() {
            e -= table.data()[(ei * k + labeling[p]) * k + labeling[q]];
        }
    }
    Ok(e)
}
