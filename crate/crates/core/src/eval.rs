//! Mesh and pose evaluation: 7-DoF alignment, Chamfer distance, F-score,
//! per-node pose errors, and the SG-W / SG-H summaries.
//!
//! Protocol: align the estimated poses to ground truth with the similarity
//! fit (cameras whose *initial* pose error exceeds 20 cm / 20 degrees are
//! masked out), apply the transform to the reconstructed mesh and poses,
//! scale both meshes by 10, sample 100k points per surface, and compute
//! point metrics under the L1 norm with F-score threshold d = 0.64.
//! One world unit is one meter, so "20 cm" is 0.2 units.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{align_similarity, rotation_angle_between, Pose};
use crate::mesh::Mesh;
use crate::rng;
use crate::scene_graph::SceneGraph;

/// Initial-error gate for both the alignment mask and the ground-truth
/// outlier label, in world units (0.2 = 20 cm) and degrees.
pub const OUTLIER_TRANSLATION_UNITS: f64 = 0.2;
pub const OUTLIER_ROTATION_DEG: f64 = 20.0;

pub const DEFAULT_FSCORE_D: f64 = 0.64;
pub const DEFAULT_SAMPLE_COUNT: usize = 100_000;
pub const DEFAULT_MESH_SCALE: f64 = 10.0;

/// Uniform-grid spatial hash for exact nearest-neighbor queries under L1.
pub struct PointGrid {
    cell: f64,
    points: Vec<Vector3<f64>>,
    buckets: HashMap<(i32, i32, i32), Vec<u32>>,
    key_lo: [i32; 3],
    key_hi: [i32; 3],
}

impl PointGrid {
    pub fn build(points: &[Vector3<f64>]) -> PointGrid {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        let cell = (extent / (points.len() as f64).cbrt()).max(1e-9);
        let mut buckets: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
        let mut key_lo = [i32::MAX; 3];
        let mut key_hi = [i32::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = Self::key(p, cell);
            let karr = [key.0, key.1, key.2];
            for a in 0..3 {
                key_lo[a] = key_lo[a].min(karr[a]);
                key_hi[a] = key_hi[a].max(karr[a]);
            }
            buckets.entry(key).or_default().push(i as u32);
        }
        PointGrid {
            cell,
            points: points.to_vec(),
            buckets,
            key_lo,
            key_hi,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i32, i32, i32) {
        (
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        )
    }

    /// Exact minimum L1 distance from `q` to the point set. Rings of cells
    /// are scanned outward; a ring at Chebyshev cell distance m cannot hold
    /// a point closer than `(m - 1) * cell`, which bounds the scan. Once the
    /// rings cover the populated key box every point has been seen.
    pub fn nearest_l1(&self, q: &Vector3<f64>) -> f64 {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let center = [cx, cy, cz];
        let max_ring = (0..3)
            .map(|a| {
                (center[a] - self.key_lo[a])
                    .abs()
                    .max((center[a] - self.key_hi[a]).abs())
            })
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        let mut ring = 0i32;
        loop {
            if ring > 0 && best <= (ring - 1) as f64 * self.cell {
                return best;
            }
            if ring > max_ring {
                return best;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in bucket {
                                let p = &self.points[i as usize];
                                let d = (p.x - q.x).abs()
                                    + (p.y - q.y).abs()
                                    + (p.z - q.z).abs();
                                best = best.min(d);
                            }
                        }
                    }
                }
            }
            ring += 1;
        }
    }
}

/// Accuracy (rec -> gt), completeness (gt -> rec), and their mean, all
/// mean nearest-neighbor L1 distances.
pub fn chamfer(points_rec: &[Vector3<f64>], points_gt: &[Vector3<f64>]) -> (f64, f64, f64) {
    let grid_gt = PointGrid::build(points_gt);
    let grid_rec = PointGrid::build(points_rec);
    let acc = points_rec
        .iter()
        .map(|p| grid_gt.nearest_l1(p))
        .sum::<f64>()
        / points_rec.len() as f64;
    let com = points_gt
        .iter()
        .map(|p| grid_rec.nearest_l1(p))
        .sum::<f64>()
        / points_gt.len() as f64;
    (acc, com, 0.5 * (acc + com))
}

/// Precision / recall of points within L1 distance `d`, and their harmonic
/// mean (zero when both vanish).
pub fn fscore(
    points_rec: &[Vector3<f64>],
    points_gt: &[Vector3<f64>],
    d: f64,
) -> (f64, f64, f64) {
    let grid_gt = PointGrid::build(points_gt);
    let grid_rec = PointGrid::build(points_rec);
    let pre = points_rec
        .iter()
        .filter(|p| grid_gt.nearest_l1(p) < d)
        .count() as f64
        / points_rec.len() as f64;
    let rec = points_gt
        .iter()
        .filter(|p| grid_rec.nearest_l1(p) < d)
        .count() as f64
        / points_gt.len() as f64;
    let f = if pre + rec > 0.0 {
        2.0 * pre * rec / (pre + rec)
    } else {
        0.0
    };
    (pre, rec, f)
}

#[derive(Debug, Clone, Serialize)]
pub struct PoseErrorEntry {
    pub node: usize,
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub confidence: f64,
    /// Initial pose error exceeded the 20 cm / 20 degree gate.
    pub gt_outlier: bool,
    /// Not sampled in the final epoch (hard-rejected).
    pub rejected: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub mean_rotation_deg: f64,
    pub mean_translation_cm: f64,
    /// Confidence-weighted mean pose errors.
    pub sg_w_rotation_deg: f64,
    pub sg_w_translation_cm: f64,
    /// Mean pose errors over nodes sampled in the final epoch.
    pub sg_h_rotation_deg: f64,
    pub sg_h_translation_cm: f64,
    /// Rejection classifier vs the ground-truth outlier label.
    pub outlier_precision: f64,
    pub outlier_recall: f64,
    pub pose_errors: Vec<PoseErrorEntry>,
}

pub struct EvalInputs<'a> {
    pub mesh_rec: &'a Mesh,
    pub mesh_gt: &'a Mesh,
    /// Trained graph: current poses, confidences, and gt_pose on each node.
    pub graph: &'a SceneGraph,
    /// Poses as loaded by the trainer, before any optimization (per node,
    /// in node order). These define the alignment mask and outlier labels.
    pub initial_poses: &'a [Pose],
    /// Node ids sampled in the final epoch (SG-H keeps these).
    pub final_epoch_nodes: &'a [usize],
    pub k_samples: usize,
    pub fscore_d: f64,
    pub mesh_scale: f64,
    pub seed: u64,
}

impl<'a> EvalInputs<'a> {
    pub fn with_defaults(
        mesh_rec: &'a Mesh,
        mesh_gt: &'a Mesh,
        graph: &'a SceneGraph,
        initial_poses: &'a [Pose],
        final_epoch_nodes: &'a [usize],
    ) -> Self {
        EvalInputs {
            mesh_rec,
            mesh_gt,
            graph,
            initial_poses,
            final_epoch_nodes,
            k_samples: DEFAULT_SAMPLE_COUNT,
            fscore_d: DEFAULT_FSCORE_D,
            mesh_scale: DEFAULT_MESH_SCALE,
            seed: 0,
        }
    }
}

/// True when a pose error pair exceeds the 20 cm / 20 degree gate.
pub fn exceeds_outlier_gate(rotation_deg: f64, translation_units: f64) -> bool {
    rotation_deg > OUTLIER_ROTATION_DEG || translation_units > OUTLIER_TRANSLATION_UNITS
}

pub fn evaluate(inputs: &EvalInputs) -> Result<EvalReport> {
    let graph = inputs.graph;
    let n = graph.nodes.len();
    if inputs.initial_poses.len() != n {
        return Err(Error::input("evaluate: initial pose count mismatch"));
    }
    if inputs.mesh_rec.is_empty() || inputs.mesh_gt.is_empty() {
        return Err(Error::input("evaluate: empty mesh"));
    }
    let gt_poses: Vec<Pose> = graph
        .nodes
        .iter()
        .map(|node| {
            node.gt_pose
                .ok_or_else(|| Error::input(format!("node {} lacks gt_pose", node.id)))
        })
        .collect::<Result<_>>()?;

    // Ground-truth outlier labels and alignment mask from initial errors.
    let gt_outlier: Vec<bool> = (0..n)
        .map(|i| {
            let rot = rotation_angle_between(&inputs.initial_poses[i], &gt_poses[i]);
            let trans = (inputs.initial_poses[i].translation - gt_poses[i].translation).norm();
            exceeds_outlier_gate(rot, trans)
        })
        .collect();
    let mask: Vec<bool> = gt_outlier.iter().map(|&o| !o).collect();

    let est_centers: Vec<Vector3<f64>> = graph.nodes.iter().map(|nd| nd.pose.translation).collect();
    let gt_centers: Vec<Vector3<f64>> = gt_poses.iter().map(|p| p.translation).collect();
    let est_rotations: Vec<_> = graph.nodes.iter().map(|nd| nd.pose.rotation).collect();
    let gt_rotations: Vec<_> = gt_poses.iter().map(|p| p.rotation).collect();
    let sim = align_similarity(
        &est_centers,
        &gt_centers,
        &est_rotations,
        &gt_rotations,
        &mask,
    )?;

    // Mesh metrics in the aligned, x10 frame.
    let rec_aligned = inputs
        .mesh_rec
        .transformed(&sim)
        .scaled(inputs.mesh_scale);
    let gt_scaled = inputs.mesh_gt.scaled(inputs.mesh_scale);
    let pts_rec = rec_aligned.sample_surface(inputs.k_samples, rng::mix(inputs.seed, 101))?;
    let pts_gt = gt_scaled.sample_surface(inputs.k_samples, rng::mix(inputs.seed, 202))?;
    let (accuracy, completeness, cd) = chamfer(&pts_rec, &pts_gt);
    let (precision, recall, f) = fscore(&pts_rec, &pts_gt, inputs.fscore_d);

    // Pose errors after alignment. Translation reported in cm-equivalent
    // units (1 world unit = 1 m).
    let accepted: std::collections::BTreeSet<usize> =
        inputs.final_epoch_nodes.iter().copied().collect();
    let mut pose_errors = Vec::with_capacity(n);
    for (i, node) in graph.nodes.iter().enumerate() {
        let aligned = sim.apply_to_pose(&node.pose);
        let rot = rotation_angle_between(&aligned, &gt_poses[i]);
        let trans_units = (aligned.translation - gt_poses[i].translation).norm();
        pose_errors.push(PoseErrorEntry {
            node: node.id,
            rotation_deg: rot,
            translation_cm: trans_units * 100.0,
            confidence: node.confidence,
            gt_outlier: gt_outlier[i],
            rejected: !accepted.contains(&node.id),
        });
    }

    let nf = n as f64;
    let mean_rotation_deg = pose_errors.iter().map(|e| e.rotation_deg).sum::<f64>() / nf;
    let mean_translation_cm = pose_errors.iter().map(|e| e.translation_cm).sum::<f64>() / nf;
    let conf_total: f64 = pose_errors.iter().map(|e| e.confidence).sum();
    let (sg_w_rotation_deg, sg_w_translation_cm) = if conf_total > 0.0 {
        (
            pose_errors
                .iter()
                .map(|e| e.confidence * e.rotation_deg)
                .sum::<f64>()
                / conf_total,
            pose_errors
                .iter()
                .map(|e| e.confidence * e.translation_cm)
                .sum::<f64>()
                / conf_total,
        )
    } else {
        (mean_rotation_deg, mean_translation_cm)
    };

    let kept: Vec<&PoseErrorEntry> = pose_errors.iter().filter(|e| !e.rejected).collect();
    let (sg_h_rotation_deg, sg_h_translation_cm) = if kept.is_empty() {
        (mean_rotation_deg, mean_translation_cm)
    } else {
        (
            kept.iter().map(|e| e.rotation_deg).sum::<f64>() / kept.len() as f64,
            kept.iter().map(|e| e.translation_cm).sum::<f64>() / kept.len() as f64,
        )
    };

    let rejected: Vec<&PoseErrorEntry> = pose_errors.iter().filter(|e| e.rejected).collect();
    let n_outliers = pose_errors.iter().filter(|e| e.gt_outlier).count();
    let true_rejections = rejected.iter().filter(|e| e.gt_outlier).count();
    let outlier_precision = if rejected.is_empty() {
        0.0
    } else {
        true_rejections as f64 / rejected.len() as f64
    };
    let outlier_recall = if n_outliers == 0 {
        1.0
    } else {
        true_rejections as f64 / n_outliers as f64
    };

    Ok(EvalReport {
        accuracy,
        completeness,
        chamfer: cd,
        precision,
        recall,
        fscore: f,
        mean_rotation_deg,
        mean_translation_cm,
        sg_w_rotation_deg,
        sg_w_translation_cm,
        sg_h_rotation_deg,
        sg_h_translation_cm,
        outlier_precision,
        outlier_recall,
        pose_errors,
    })
}

impl EvalReport {
    /// Aligned plain-text table with the headline metric names.
    pub fn to_table(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("Chamfer distance", format!("{:.4}", self.chamfer)),
            ("F-score", format!("{:.4}", self.fscore)),
            ("Accuracy", format!("{:.4}", self.accuracy)),
            ("Completeness", format!("{:.4}", self.completeness)),
            ("Precision", format!("{:.4}", self.precision)),
            ("Recall", format!("{:.4}", self.recall)),
            ("Mean rot err (deg)", format!("{:.4}", self.mean_rotation_deg)),
            ("Mean trans err (cm)", format!("{:.4}", self.mean_translation_cm)),
            ("SG-W rot err (deg)", format!("{:.4}", self.sg_w_rotation_deg)),
            ("SG-W trans err (cm)", format!("{:.4}", self.sg_w_translation_cm)),
            ("SG-H rot err (deg)", format!("{:.4}", self.sg_h_rotation_deg)),
            ("SG-H trans err (cm)", format!("{:.4}", self.sg_h_translation_cm)),
            ("Outlier precision", format!("{:.4}", self.outlier_precision)),
            ("Outlier recall", format!("{:.4}", self.outlier_recall)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}
