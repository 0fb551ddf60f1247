//! CRF graph construction: one node per feature-map location, typed edge
//! lists from spatial range boxes.

use crate::error::{CtxError, Result};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxKind {
    /// Symmetric box centered on the node.
    Surround,
    /// Box directly below the node; edges are oriented p-above-q.
    AboveBelow,
}

#[derive(Clone, Debug)]
pub struct RelationSpec {
    pub name: String,
    pub box_kind: BoxKind,
    pub box_ratio: f64,
}

impl RelationSpec {
    pub fn surround() -> Self {
        RelationSpec { name: "surround".into(), box_kind: BoxKind::Surround, box_ratio: 0.4 }
    }

    pub fn above_below() -> Self {
        RelationSpec { name: "above_below".into(), box_kind: BoxKind::AboveBelow, box_ratio: 0.4 }
    }

    pub fn symmetric(&self) -> bool {
        self.box_kind == BoxKind::Surround
    }

    fn validate(&self) -> Result<()> {
        if !(self.box_ratio > 0.0 && self.box_ratio <= 1.0) {
            return Err(CtxError::InvalidConfig(format!(
                "relation {}: box_ratio {} not in (0,1]",
                self.name, self.box_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub spec: RelationSpec,
    /// Lexicographically sorted (p,q) pairs; p < q for symmetric relations,
    /// row(p) < row(q) for above/below.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct CrfGraph {
    pub height: usize,
    pub width: usize,
    edge_sets: Vec<EdgeSet>,
}

/// Range-box side length: round-half-up of ratio * short edge, floored at 1.
pub fn box_side(height: usize, width: usize, ratio: f64) -> usize {
    let a = height.min(width) as f64;
    ((ratio * a).round() as usize).max(1)
}

pub fn build_graph(height: usize, width: usize, relations: &[RelationSpec]) -> Result<CrfGraph> {
    if height < 1 || width < 1 {
        return Err(CtxError::InvalidArgument("build_graph: dims must be >= 1".into()));
    }
    let mut edge_sets = Vec::with_capacity(relations.len());
    for spec in relations {
        spec.validate()?;
        let s = box_side(height, width, spec.box_ratio);
        let half = (s / 2) as isize;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for r in 0..height as isize {
            for c in 0..width as isize {
                let p = (r as usize) * width + c as usize;
                match spec.box_kind {
                    BoxKind::Surround => {
                        for dr in -half..=half {
                            for dc in -half..=half {
                                let (nr, nc) = (r + dr, c + dc);
                                if nr < 0 || nr >= height as isize || nc < 0 || nc >= width as isize {
                                    continue;
                                }
                                let q = (nr as usize) * width + nc as usize;
                                if q > p {
                                    edges.push((p, q));
                                }
                            }
                        }
                    }
                    BoxKind::AboveBelow => {
                        for dr in 1..=s as isize {
                            for dc in -half..=half {
                                let (nr, nc) = (r + dr, c + dc);
                                if nr >= height as isize || nc < 0 || nc >= width as isize {
                                    continue;
                                }
                                let q = (nr as usize) * width + nc as usize;
                                edges.push((p, q));
                            }
                        }
                    }
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edge_sets.push(EdgeSet { spec: spec.clone(), edges });
    }
    Ok(CrfGraph { height, width, edge_sets })
}

impl CrfGraph {
    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn relations(&self) -> &[EdgeSet] {
        &self.edge_sets
    }

    pub fn relation(&self, name: &str) -> Result<&EdgeSet> {
        self.edge_sets
            .iter()
            .find(|e| e.spec.name == name)
            .ok_or_else(|| CtxError::UnknownRelation(name.to_string()))
    }

    pub fn edge_feature_indices(&self, name: &str) -> Result<&[(usize, usize)]> {
        Ok(&self.relation(name)?.edges)
    }

    pub fn row(&self, p: usize) -> usize {
        p / self.width
    }

    /// One edge per line: relation, p, q.
    pub fn dump_text<W: Write>(&self, mut w: W) -> Result<()> {
        for es in &self.edge_sets {
            for &(p, q) in &es.edges {
                writeln!(w, "{} {} {}", es.spec.name, p, q)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force oracle: test every node pair against box membership.
    fn brute_force_surround(h: usize, w: usize, s: usize) -> Vec<(usize, usize)> {
        let half = (s / 2) as isize;
        let mut edges = Vec::new();
        for p in 0..h * w {
            for q in (p + 1)..h * w {
                let (pr, pc) = ((p / w) as isize, (p % w) as isize);
                let (qr, qc) = ((q / w) as isize, (q % w) as isize);
                if (qr - pr).abs() <= half && (qc - pc).abs() <= half {
                    edges.push((p, q));
                }
            }
        }
        edges
    }

    #[test]
    fn single_node_no_edges() {
        let g = build_graph(1, 1, &[RelationSpec::surround(), RelationSpec::above_below()]).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert!(g.relations().iter().all(|e| e.edges.is_empty()));
    }

    #[test]
    fn empty_relations_is_valid() {
        let g = build_graph(3, 3, &[]).unwrap();
        assert_eq!(g.num_nodes(), 9);
        assert!(g.relations().is_empty());
    }

    #[test]
    fn surround_4x4_matches_brute_force() {
        // box_ratio 0.5 on a 4x4 map: s = 2, effective offsets +-1 (8-connected).
        let spec = RelationSpec { box_ratio: 0.5, ..RelationSpec::surround() };
        let g = build_graph(4, 4, &[spec]).unwrap();
        let edges = &g.relation("surround").unwrap().edges;
        let oracle = brute_force_surround(4, 4, 2);
        assert_eq!(edges, &oracle);
        assert_eq!(edges.len(), 42);
    }

    #[test]
    fn box_side_paper_ratio() {
        // 10x20 map, ratio 0.4: a = 10, s = 4.
        assert_eq!(box_side(10, 20, 0.4), 4);
    }

    #[test]
    fn orientation_invariants() {
        let g = build_graph(5, 6, &[RelationSpec::surround(), RelationSpec::above_below()]).unwrap();
        for &(p, q) in &g.relation("surround").unwrap().edges {
            assert!(p < q);
        }
        for &(p, q) in &g.relation("above_below").unwrap().edges {
            assert!(g.row(p) < g.row(q));
        }
    }

    #[test]
    fn deterministic_and_no_duplicates() {
        let g1 = build_graph(6, 6, &[RelationSpec::surround()]).unwrap();
        let g2 = build_graph(6, 6, &[RelationSpec::surround()]).unwrap();
        let e1 = g1.edge_feature_indices("surround").unwrap();
        assert_eq!(e1, g2.edge_feature_indices("surround").unwrap());
        let mut d = e1.to_vec();
        d.dedup();
        assert_eq!(d.len(), e1.len());
        assert!(e1.iter().all(|&(p, q)| p != q));
    }

    #[test]
    fn unknown_relation_rejected() {
        let g = build_graph(2, 2, &[RelationSpec::surround()]).unwrap();
        assert!(g.edge_feature_indices("nope").is_err());
    }

    #[test]
    fn degree_bounded_by_box() {
        let g = build_graph(8, 8, &[RelationSpec::surround()]).unwrap();
        let s = box_side(8, 8, 0.4) as isize; // 3
        for &(p, q) in &g.relation("surround").unwrap().edges {
            let (pr, pc) = ((p / 8) as isize, (p % 8) as isize);
            let (qr, qc) = ((q / 8) as isize, (q % 8) as isize);
            assert!((qr - pr).abs() <= s && (qc - pc).abs() <= s);
        }
    }
}
