//! Toy knowledge graph, TransE embeddings and a single graph-attention layer.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MlipError, Result};
use crate::numerics::{Mat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    num_entities: usize,
    num_relations: usize,
    /// Undirected, sorted, without self entries.
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn new(triples: Vec<Triple>, num_entities: usize, num_relations: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_entities];
        for tr in &triples {
            if tr.head >= num_entities || tr.tail >= num_entities || tr.relation >= num_relations {
                return Err(invalid(format!("triple {tr:?} outside {num_entities} entities / {num_relations} relations")));
            }
            if tr.head == tr.tail {
                return Err(invalid(format!("triple {tr:?} links an entity to itself")));
            }
            if !seen.insert(*tr) {
                return Err(invalid(format!("duplicate triple {tr:?}")));
            }
            adj[tr.head].insert(tr.tail);
            adj[tr.tail].insert(tr.head);
        }
        let adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { triples, num_entities, num_relations, adjacency })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn neighbors(&self, e: usize) -> &[usize] {
        &self.adjacency[e]
    }

    pub fn degree(&self, e: usize) -> usize {
        self.adjacency[e].len()
    }

    pub fn contains(&self, tr: &Triple) -> bool {
        self.triples.contains(tr)
    }

    pub fn is_connected(&self) -> bool {
        if self.num_entities == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_entities];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(e) = stack.pop() {
            for &n in &self.adjacency[e] {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// One `head<TAB>relation<TAB>tail` line per triple.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for tr in &self.triples {
            writeln!(w, "{}\t{}\t{}", tr.head, tr.relation, tr.tail)?;
        }
        Ok(())
    }

    /// Parse the TSV form; entity and relation counts are inferred from the
    /// largest ids.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut triples = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(invalid(format!("graph line {}: expected 3 tab-separated ids", lineno + 1)));
            }
            let parse = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| invalid(format!("graph line {}: bad id {s:?}", lineno + 1)))
            };
            triples.push(Triple { head: parse(fields[0])?, relation: parse(fields[1])?, tail: parse(fields[2])? });
        }
        let n_e = triples.iter().map(|t| t.head.max(t.tail) + 1).max().unwrap_or(0);
        let n_r = triples.iter().map(|t| t.relation + 1).max().unwrap_or(0);
        Self::new(triples, n_e, n_r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tsv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_tsv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Entity id of the disease entity for latent class `c`.
pub fn disease_entity(c: usize) -> usize {
    c
}

/// Finding `j` of class `c` in a toy graph over `classes` classes.
pub fn finding_entity(classes: usize, relations_per_class: usize, c: usize, j: usize) -> usize {
    classes + c * relations_per_class + j
}

/// Per class: one disease entity linked to `relations_per_class` findings by
/// typed relations. Consecutive classes are chained through their first
/// finding, and each class is additionally linked to one seeded finding of
/// another class with a shared "associated" relation.
pub fn build_toy_graph(class_count: usize, relations_per_class: usize, seed: u64) -> Result<KnowledgeGraph> {
    if class_count < 2 {
        return Err(invalid("the toy graph needs at least two classes"));
    }
    if relations_per_class == 0 {
        return Err(invalid("relations_per_class must be positive"));
    }
    let k = class_count;
    let r = relations_per_class;
    let finding = |c: usize, j: usize| finding_entity(k, r, c, j);
    let assoc = r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::new();
    for c in 0..k {
        for j in 0..r {
            triples.push(Triple { head: disease_entity(c), relation: j, tail: finding(c, j) });
        }
    }
    for c in 0..k - 1 {
        triples.push(Triple { head: finding(c, 0), relation: assoc, tail: disease_entity(c + 1) });
    }
    for c in 0..k {
        let other = (c + 1 + rng.random_range(0..k - 1)) % k;
        let tr = Triple { head: disease_entity(c), relation: assoc, tail: finding(other, rng.random_range(0..r)) };
        let reverse_exists = triples.iter().any(|t| t.head == tr.tail && t.tail == tr.head);
        if !triples.contains(&tr) && !reverse_exists {
            triples.push(tr);
        }
    }
    KnowledgeGraph::new(triples, k + k * r, r + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddings {
    /// `N_e × d_e`, unit-norm rows after training.
    pub entities: Mat,
    /// `N_r × d_e`
    pub relations: Mat,
    /// `N_e × d_e` graph-attention output.
    pub contextual: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self { dim: 32, margin: 1.0, epochs: 100, lr: 0.01, seed: 0 }
    }
}

/// `‖h + r − t‖₂`
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((a, b), c)| (a + b - c).powi(2)).sum::<f64>().sqrt()
}

/// `max(0, margin + d_pos − d_neg)`
pub fn margin_ranking_loss(pos_score: f64, neg_score: f64, margin: f64) -> f64 {
    (margin + pos_score - neg_score).max(0.0)
}

fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Result of [`transe_train`]: embeddings plus the mean hinge loss per epoch.
#[derive(Debug, Clone)]
pub struct TransEFit {
    pub embeddings: EntityEmbeddings,
    pub epoch_losses: Vec<f64>,
}

fn corrupt(graph: &KnowledgeGraph, tr: &Triple, rng: &mut impl Rng) -> Triple {
    let n = graph.num_entities();
    for _ in 0..64 {
        let e = rng.random_range(0..n);
        let cand = if rng.random::<bool>() { Triple { head: e, ..*tr } } else { Triple { tail: e, ..*tr } };
        if cand.head != cand.tail && !graph.contains(&cand) {
            return cand;
        }
    }
    // every nearby corruption is a true triple; fall back to an unfiltered one
    Triple { tail: (tr.tail + 1) % n, ..*tr }
}

/// Stochastic margin-ranking training with uniform head/tail corruption
/// (true triples filtered). Entity rows are renormalized after every epoch.
pub fn transe_train(graph: &KnowledgeGraph, cfg: &TransEConfig) -> Result<TransEFit> {
    if graph.triples().is_empty() {
        return Err(invalid("cannot train TransE on an empty graph"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut ent = Mat::from_shape_fn((graph.num_entities(), cfg.dim), |_| rng.random_range(-bound..bound));
    let mut rel = Mat::from_shape_fn((graph.num_relations(), cfg.dim), |_| rng.random_range(-bound..bound));
    normalize_rows(&mut ent);
    normalize_rows(&mut rel);
    let mut order: Vec<usize> = (0..graph.triples().len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let pos = graph.triples()[i];
            let neg = corrupt(graph, &pos, &mut rng);
            let dp = &ent.row(pos.head) + &rel.row(pos.relation) - ent.row(pos.tail);
            let dn = &ent.row(neg.head) + &rel.row(neg.relation) - ent.row(neg.tail);
            let (np, nn) = (dp.dot(&dp).sqrt(), dn.dot(&dn).sqrt());
            let loss = margin_ranking_loss(np, nn, cfg.margin);
            total += loss;
            if loss <= 0.0 {
                continue;
            }
            let gp = if np > 0.0 { &dp / np } else { dp.clone() * 0.0 };
            let gn = if nn > 0.0 { &dn / nn } else { dn.clone() * 0.0 };
            let step = cfg.lr;
            ent.row_mut(pos.head).scaled_add(-step, &gp);
            ent.row_mut(pos.tail).scaled_add(step, &gp);
            rel.row_mut(pos.relation).scaled_add(-step, &gp);
            ent.row_mut(neg.head).scaled_add(step, &gn);
            ent.row_mut(neg.tail).scaled_add(-step, &gn);
            rel.row_mut(neg.relation).scaled_add(step, &gn);
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(MlipError::Diverged(format!("TransE loss became {mean} at epoch {epoch}")));
        }
        normalize_rows(&mut ent);
        epoch_losses.push(mean);
    }
    let contextual = ent.clone();
    Ok(TransEFit { embeddings: EntityEmbeddings { entities: ent, relations: rel, contextual }, epoch_losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    /// `d_e × d_e` feature transform.
    pub w: Mat,
    /// Attention vector halves for the centre and neighbour nodes.
    pub a_self: Vec<f64>,
    pub a_neigh: Vec<f64>,
    pub leaky_slope: f64,
    /// Include each node in its own neighbourhood.
    pub self_loops: bool,
}

impl GatParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(vec![dim, dim], 1.0 / (dim as f64).sqrt(), &mut rng).to_matrix();
        let a_self = Tensor::randn(vec![dim], 1.0 / (dim as f64).sqrt(), &mut rng).data().to_vec();
        let a_neigh = Tensor::randn(vec![dim], 1.0 / (dim as f64).sqrt(), &mut rng).data().to_vec();
        Self { w, a_self, a_neigh, leaky_slope: 0.2, self_loops: true }
    }
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    pub contextual: Mat,
    /// Per node: `(neighbour, coefficient)` pairs.
    pub coefficients: Vec<Vec<(usize, f64)>>,
}

/// Neighbourhood used by the attention layer for node `i`.
pub fn gat_neighborhood(graph: &KnowledgeGraph, i: usize, self_loops: bool) -> Vec<usize> {
    let mut n: Vec<usize> = graph.neighbors(i).to_vec();
    if self_loops || n.is_empty() {
        n.insert(0, i);
    }
    n
}

/// `h'_i = Σ_j α_ij W h_j`, `α_i· = softmax_j LeakyReLU(a_selfᵀWh_i + a_neighᵀWh_j)`.
pub fn gat_layer(embeddings: &Mat, graph: &KnowledgeGraph, params: &GatParams) -> Result<GatOutput> {
    if embeddings.nrows() != graph.num_entities() {
        return Err(crate::error::shape(format!(
            "{} embedding rows for {} entities",
            embeddings.nrows(),
            graph.num_entities()
        )));
    }
    if params.w.dim() != (embeddings.ncols(), embeddings.ncols()) {
        return Err(crate::error::shape("GAT transform does not match embedding width"));
    }
    let wh = embeddings.dot(&params.w);
    let score_self: Vec<f64> = wh.rows().into_iter().map(|r| r.iter().zip(&params.a_self).map(|(a, b)| a * b).sum()).collect();
    let score_neigh: Vec<f64> = wh.rows().into_iter().map(|r| r.iter().zip(&params.a_neigh).map(|(a, b)| a * b).sum()).collect();
    let mut contextual = Mat::zeros(wh.dim());
    let mut coefficients = Vec::with_capacity(graph.num_entities());
    for i in 0..graph.num_entities() {
        let hood = gat_neighborhood(graph, i, params.self_loops);
        let logits: Vec<f64> = hood
            .iter()
            .map(|&j| {
                let e = score_self[i] + score_neigh[j];
                if e > 0.0 {
                    e
                } else {
                    params.leaky_slope * e
                }
            })
            .collect();
        let alpha = crate::numerics::softmax(&logits, 1.0)?;
        for (&j, &a) in hood.iter().zip(&alpha) {
            contextual.row_mut(i).scaled_add(a, &wh.row(j));
        }
        coefficients.push(hood.into_iter().zip(alpha).collect());
    }
    Ok(GatOutput { contextual, coefficients })
}

/// Top-`rows` entities by degree (ties by id), repeated cyclically when the
/// graph has fewer entities than rows.
pub fn entity_selection(graph: &KnowledgeGraph, rows: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..graph.num_entities()).collect();
    ids.sort_by(|&a, &b| graph.degree(b).cmp(&graph.degree(a)).then(a.cmp(&b)));
    (0..rows).map(|i| ids[i % ids.len().min(rows).max(1)]).collect()
}

/// Selected contextual rows projected `d_e → d`: `contextual[selection] · projection`.
pub fn map_entities(contextual: &Mat, selection: &[usize], projection: &Mat) -> Result<Mat> {
    if projection.nrows() != contextual.ncols() {
        return Err(crate::error::shape(format!(
            "projection has {} rows for entity width {}",
            projection.nrows(),
            contextual.ncols()
        )));
    }
    if let Some(&bad) = selection.iter().find(|&&i| i >= contextual.nrows()) {
        return Err(invalid(format!("entity {bad} out of range")));
    }
    if contextual.iter().any(|v| !v.is_finite()) {
        return Err(MlipError::NonFinite("contextual embeddings".into()));
    }
    Ok(contextual.select(ndarray::Axis(0), selection).dot(projection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimal_toy_graph() {
        let g = build_toy_graph(2, 1, 0).unwrap();
        assert_eq!(g.num_entities(), 4);
        assert!(g.is_connected());
        assert_eq!(build_toy_graph(2, 1, 0).unwrap(), g);
        assert!(build_toy_graph(1, 3, 0).is_err());
    }

    #[test]
    fn default_toy_graph_is_connected_and_deterministic() {
        for seed in 0..10 {
            let g = build_toy_graph(4, 4, seed).unwrap();
            assert!(g.is_connected());
            assert_eq!(g.num_entities(), 20);
            assert_eq!(g, build_toy_graph(4, 4, seed).unwrap());
        }
    }

    #[test]
    fn graph_validation() {
        let t = |h, r, tl| Triple { head: h, relation: r, tail: tl };
        assert!(KnowledgeGraph::new(vec![t(0, 0, 0)], 2, 1).is_err());
        assert!(KnowledgeGraph::new(vec![t(0, 0, 1), t(0, 0, 1)], 2, 1).is_err());
        assert!(KnowledgeGraph::new(vec![t(0, 1, 1)], 2, 1).is_err());
        let g = KnowledgeGraph::new(vec![t(0, 0, 1), t(2, 0, 1)], 3, 1).unwrap();
        assert_eq!(g.neighbors(1), &[0, 2]);
    }

    #[test]
    fn tsv_round_trip() {
        let g = build_toy_graph(3, 2, 5).unwrap();
        let mut buf = Vec::new();
        g.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
        assert_eq!(KnowledgeGraph::read_tsv(&buf[..]).unwrap(), g);
        assert!(KnowledgeGraph::read_tsv(&b"0 1 2\n"[..]).is_err());
    }

    #[test]
    fn transe_score_and_hinge() {
        let h = [0.1, 0.2];
        let r = [0.3, -0.1];
        let t = [0.4, 0.1];
        assert!(transe_score(&h, &r, &t) < 1e-15);
        assert_eq!(margin_ranking_loss(0.2, 1.5, 1.0), 0.0);
        assert!((margin_ranking_loss(0.5, 1.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transe_separates_true_from_corrupted() {
        let g = build_toy_graph(4, 4, 1).unwrap();
        let fit = transe_train(&g, &TransEConfig::default()).unwrap();
        let (e, r) = (&fit.embeddings.entities, &fit.embeddings.relations);
        let score = |t: &Triple| transe_score(e.row(t.head).as_slice().unwrap(), r.row(t.relation).as_slice().unwrap(), e.row(t.tail).as_slice().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut pos, mut neg) = (0.0, 0.0);
        for t in g.triples() {
            pos += score(t);
            neg += score(&corrupt(&g, t, &mut rng));
        }
        assert!(pos < neg, "{pos} vs {neg}");
        let l = &fit.epoch_losses;
        assert!(l[l.len() - 1] < l[0], "{l:?}");
    }

    #[test]
    fn transe_rows_unit_norm() {
        let g = build_toy_graph(4, 4, 1).unwrap();
        let fit = transe_train(&g, &TransEConfig { epochs: 5, ..Default::default() }).unwrap();
        for row in fit.embeddings.entities.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(fit.epoch_losses.len(), 5);
    }

    #[test]
    fn gat_single_neighbour_and_isolated_nodes() {
        let g = KnowledgeGraph::new(vec![Triple { head: 0, relation: 0, tail: 1 }], 3, 1).unwrap();
        let mut p = GatParams::init(4, 0);
        p.self_loops = false;
        let emb = Mat::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let out = gat_layer(&emb, &g, &p).unwrap();
        assert_eq!(out.coefficients[0], vec![(1, 1.0)]);
        // entity 2 has no edges: implicit self-loop
        assert_eq!(out.coefficients[2], vec![(2, 1.0)]);
    }

    #[test]
    fn gat_star_symmetry() {
        let t = |tl| Triple { head: 0, relation: 0, tail: tl };
        let g = KnowledgeGraph::new(vec![t(1), t(2), t(3)], 4, 1).unwrap();
        let mut p = GatParams::init(3, 1);
        let mut emb = Mat::from_elem((4, 3), 0.5);
        emb.row_mut(0).assign(&array![1.0, -2.0, 0.3]);
        p.self_loops = false;
        let out = gat_layer(&emb, &g, &p).unwrap();
        for &(_, a) in &out.coefficients[0] {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        p.self_loops = true;
        let same = Mat::from_elem((4, 3), 0.5);
        let out = gat_layer(&same, &g, &p).unwrap();
        for &(_, a) in &out.coefficients[0] {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_path_graph_matches_dense_oracle() {
        // 0 - 1 - 2
        let g = KnowledgeGraph::new(
            vec![Triple { head: 0, relation: 0, tail: 1 }, Triple { head: 1, relation: 0, tail: 2 }],
            3,
            1,
        )
        .unwrap();
        let p = GatParams {
            w: array![[1.0, 0.5], [-0.5, 1.0]],
            a_self: vec![0.3, -0.2],
            a_neigh: vec![0.7, 0.1],
            leaky_slope: 0.2,
            self_loops: true,
        };
        let emb = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let out = gat_layer(&emb, &g, &p).unwrap();
        // dense oracle with an explicit adjacency mask
        let adj = [[1, 1, 0], [1, 1, 1], [0, 1, 1]];
        let wh: Vec<[f64; 2]> = (0..3)
            .map(|i| {
                let (x, y) = (emb[[i, 0]], emb[[i, 1]]);
                [x * 1.0 + y * -0.5, x * 0.5 + y * 1.0]
            })
            .collect();
        for i in 0..3 {
            let mut num = [0.0f64; 2];
            let mut z = 0.0;
            let mut coef = vec![0.0; 3];
            for j in 0..3 {
                if adj[i][j] == 0 {
                    continue;
                }
                let e = 0.3 * wh[i][0] - 0.2 * wh[i][1] + 0.7 * wh[j][0] + 0.1 * wh[j][1];
                let e = if e > 0.0 { e } else { 0.2 * e };
                coef[j] = e.exp();
                z += e.exp();
            }
            for j in 0..3 {
                coef[j] /= z;
                num[0] += coef[j] * wh[j][0];
                num[1] += coef[j] * wh[j][1];
            }
            assert!((out.contextual[[i, 0]] - num[0]).abs() < 1e-12);
            assert!((out.contextual[[i, 1]] - num[1]).abs() < 1e-12);
            let total: f64 = out.coefficients[i].iter().map(|c| c.1).sum();
            assert!((total - 1.0).abs() < 1e-9);
            for &(j, a) in &out.coefficients[i] {
                assert!((a - coef[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entity_mapping_rules() {
        let g = build_toy_graph(2, 1, 0).unwrap();
        let contextual = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let all = entity_selection(&g, 4);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let tiled = entity_selection(&g, 10);
        for (i, e) in tiled.iter().enumerate() {
            assert_eq!(*e, all[i % 4]);
        }
        let id = Mat::eye(3);
        let mapped = map_entities(&contextual, &all, &id).unwrap();
        for (r, &e) in all.iter().enumerate() {
            assert_eq!(mapped.row(r), contextual.row(e));
        }
        assert!(map_entities(&contextual, &[7], &id).is_err());
        assert!(map_entities(&contextual, &all, &Mat::eye(2)).is_err());
    }
}
