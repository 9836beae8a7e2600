//! The scene graph: posed image nodes, keypoint-match edges, pruning,
//! confidence scoring and updating, and confidence-weighted sampling.
//!
//! Confidence scores form a probability distribution over nodes and drive
//! the per-epoch sampling of training images. They are initialized from
//! match counts (mean match count over incident edges, normalized) and
//! updated each epoch by fusing normalized rendering PSNR.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_between, Intrinsics, Pose};
use crate::img::Image;
use crate::rng;

/// One keypoint match between the two endpoint images of an edge.
/// `a` belongs to the edge's lower node id, `b` to the higher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub matches: Vec<Match>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: usize,
    pub pose: Pose,
    pub image: Image,
    pub confidence: f64,
    /// Ground-truth pose, present for synthetic data (evaluation-side only).
    pub gt_pose: Option<Pose>,
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub intrinsics: Intrinsics,
}

/// A match incident to a particular node, as returned by
/// [`SceneGraph::incident_matches`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncidentMatch {
    pub edge_index: usize,
    pub match_index: usize,
    /// Keypoint on the queried node.
    pub own_kp: (f64, f64),
    /// The matched node id and its keypoint.
    pub other_node: usize,
    pub other_kp: (f64, f64),
}

impl SceneGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, intrinsics: Intrinsics) -> Result<Self> {
        let graph = SceneGraph {
            nodes,
            edges,
            intrinsics,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen_ids = std::collections::BTreeSet::new();
        for node in &self.nodes {
            if !seen_ids.insert(node.id) {
                return Err(Error::input(format!("duplicate node id {}", node.id)));
            }
            if node.confidence < 0.0 {
                return Err(Error::input(format!(
                    "negative confidence on node {}",
                    node.id
                )));
            }
        }
        let mut seen_edges = std::collections::BTreeSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            if e.i >= e.j {
                return Err(Error::input(format!("edge {k}: requires i < j")));
            }
            if !seen_ids.contains(&e.i) || !seen_ids.contains(&e.j) {
                return Err(Error::input(format!("edge {k}: unknown endpoint")));
            }
            if !seen_edges.insert((e.i, e.j)) {
                return Err(Error::input(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
            if e.matches.is_empty() {
                return Err(Error::input(format!("edge ({}, {}) is empty", e.i, e.j)));
            }
            for m in &e.matches {
                if !self.intrinsics.contains_pixel(m.a.0, m.a.1)
                    || !self.intrinsics.contains_pixel(m.b.0, m.b.1)
                {
                    return Err(Error::input(format!(
                        "edge ({}, {}): keypoint outside image bounds",
                        e.i, e.j
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn node_index(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[self.node_index(id).expect("node id exists")]
    }

    /// Node ids with no incident edges.
    pub fn isolated_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| {
                !self
                    .edges
                    .iter()
                    .any(|e| e.i == n.id || e.j == n.id)
            })
            .map(|n| n.id)
            .collect()
    }

    pub fn confidence_vector(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.confidence).collect()
    }

    /// Remove every edge whose endpoint poses differ by a relative rotation
    /// larger than `tau` degrees. Nodes are untouched and edge order is
    /// preserved; nodes left without edges stay in the graph and take raw
    /// confidence zero at the next confidence initialization.
    pub fn prune(&self, tau_deg: f64) -> Result<SceneGraph> {
        if !(tau_deg > 0.0 && tau_deg <= 180.0) {
            return Err(Error::input(format!("tau must be in (0, 180], got {tau_deg}")));
        }
        let mut out = self.clone();
        out.edges.retain(|e| {
            let a = &self.node(e.i).pose;
            let b = &self.node(e.j).pose;
            rotation_angle_between(a, b) <= tau_deg
        });
        Ok(out)
    }

    /// Initialize confidence from match counts: each node takes the mean
    /// match count over its incident edges (zero when isolated), then the
    /// scores are normalized into a distribution.
    pub fn init_confidence(&mut self) -> Result<()> {
        let raw = self.raw_confidence();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::config(
                "all nodes isolated: cannot form a confidence distribution",
            ));
        }
        for (node, r) in self.nodes.iter_mut().zip(&raw) {
            node.confidence = r / total;
        }
        Ok(())
    }

    /// Unnormalized confidence scores (mean match count over incident edges).
    pub fn raw_confidence(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| {
                let mut count = 0usize;
                let mut total = 0usize;
                for e in &self.edges {
                    if e.i == n.id || e.j == n.id {
                        count += 1;
                        total += e.matches.len();
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    total as f64 / count as f64
                }
            })
            .collect()
    }

    /// Fuse normalized PSNR into the confidence scores
    /// (`cs_i <- cs_i + lambda * psnr_i`), sharpen with an elementwise power
    /// `gamma >= 1`, and re-normalize into a distribution. Non-finite PSNR
    /// entries are treated as the epoch's minimum finite value.
    pub fn update_confidence(&mut self, psnr: &[f64], lambda: f64, gamma: f64) -> Result<()> {
        if psnr.len() != self.nodes.len() {
            return Err(Error::input("update_confidence: psnr length mismatch"));
        }
        if lambda < 0.0 {
            return Err(Error::input("update_confidence: lambda must be >= 0"));
        }
        if gamma < 1.0 {
            return Err(Error::input("update_confidence: gamma must be >= 1"));
        }
        let min_finite = psnr
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        if !min_finite.is_finite() {
            return Err(Error::input("update_confidence: no finite psnr values"));
        }
        let cleaned: Vec<f64> = psnr
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    v
                } else {
                    log::warn!("non-finite psnr replaced with epoch minimum {min_finite}");
                    min_finite
                }
            })
            .collect();
        let psnr_total: f64 = cleaned.iter().sum();
        let mut fused: Vec<f64> = self
            .nodes
            .iter()
            .zip(&cleaned)
            .map(|(n, &p)| {
                let p_norm = if psnr_total > 0.0 { p / psnr_total } else { 0.0 };
                n.confidence + lambda * p_norm
            })
            .collect();
        for v in fused.iter_mut() {
            *v = v.max(0.0).powf(gamma);
        }
        let total: f64 = fused.iter().sum();
        if total <= 0.0 {
            return Err(Error::input("update_confidence: degenerate scores"));
        }
        for (node, v) in self.nodes.iter_mut().zip(&fused) {
            node.confidence = v / total;
        }
        Ok(())
    }

    /// `count` i.i.d. draws (with replacement) from the categorical
    /// distribution given by confidence. Deterministic for a fixed seed.
    pub fn sample_training_set(&self, count: usize, seed: u64) -> Vec<usize> {
        let mut cumulative = Vec::with_capacity(self.nodes.len());
        let mut acc = 0.0;
        for n in &self.nodes {
            acc += n.confidence;
            cumulative.push(acc);
        }
        let total = acc;
        let mut r = rng::rng_from_seed(seed);
        (0..count)
            .map(|_| {
                let x: f64 = r.gen::<f64>() * total;
                let pos = cumulative.partition_point(|&c| c <= x);
                self.nodes[pos.min(self.nodes.len() - 1)].id
            })
            .collect()
    }

    /// Every match in every edge incident to the node, with the endpoint
    /// keypoints oriented so `own_kp` belongs to the queried node.
    pub fn incident_matches(&self, node_id: usize) -> Vec<IncidentMatch> {
        let mut out = Vec::new();
        for (ei, e) in self.edges.iter().enumerate() {
            let own_is_i = e.i == node_id;
            if !own_is_i && e.j != node_id {
                continue;
            }
            for (mi, m) in e.matches.iter().enumerate() {
                let (own_kp, other_kp, other_node) = if own_is_i {
                    (m.a, m.b, e.j)
                } else {
                    (m.b, m.a, e.i)
                };
                out.push(IncidentMatch {
                    edge_index: ei,
                    match_index: mi,
                    own_kp,
                    other_node,
                    other_kp,
                });
            }
        }
        out
    }
}
