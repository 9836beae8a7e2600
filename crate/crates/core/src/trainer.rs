//! The joint-optimization loop: prune and score the scene graph, then
//! alternate field-pose steps and confidence steps across epochs under the
//! coarse-to-fine blur schedule, emitting checkpoints and reports.
//!
//! Determinism and resume: every random stream is keyed by (seed, epoch,
//! step), the optimizer state resets at epoch boundaries, and grids are
//! rounded through f32 exactly where checkpoints store them, so resuming
//! from `epoch_E/` reproduces an uninterrupted run bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetBundle;
use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField};
use crate::geometry::Pose;
use crate::img::{gaussian_blur, psnr, Image};
use crate::optim::{evaluate_batch, BatchOutput, BatchPlan, LossWeights, ModelOptimizer};
use crate::rng;
use crate::scene_graph::SceneGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_rays: usize,
    pub keypoint_rays: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau_deg: f64,
    pub sigma0_factor: f64,
    pub sigma_decay: f64,
    pub gamma_step: f64,
    pub psnr_stride: usize,
    pub seed: u64,
    pub resolution: usize,
    pub n_samples: usize,
    pub lr_field: f64,
    pub lr_s: f64,
    pub lr_pose: f64,
    pub background: [f64; 3],
    pub sdf_init_radius: f64,
    pub s_init: f64,
    /// Sample images uniformly and skip confidence updates.
    pub uniform_sampling: bool,
    /// Never update poses (upper-bound runs).
    pub freeze_poses: bool,
    /// Start from ground-truth poses (upper-bound runs).
    pub init_gt_poses: bool,
    /// Marching-cubes resolution used at evaluation time.
    pub mesh_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            steps_per_epoch: 500,
            batch_rays: 512,
            keypoint_rays: 16,
            alpha: 0.1,
            beta: 0.2,
            lambda: 1.0,
            tau_deg: 70.0,
            sigma0_factor: 0.02,
            sigma_decay: 0.7,
            gamma_step: 0.1,
            psnr_stride: 4,
            seed: 0,
            resolution: 64,
            n_samples: 64,
            lr_field: 1e-2,
            lr_s: 1e-3,
            lr_pose: 1e-3,
            background: [1.0, 1.0, 1.0],
            sdf_init_radius: 0.6,
            s_init: 10.0,
            uniform_sampling: false,
            freeze_poses: false,
            init_gt_poses: false,
            mesh_resolution: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_rays == 0 {
            return Err(Error::config("steps_per_epoch and batch_rays must be positive"));
        }
        if self.keypoint_rays > self.batch_rays {
            return Err(Error::config("keypoint_rays must be <= batch_rays"));
        }
        if !(self.tau_deg > 0.0 && self.tau_deg <= 180.0) {
            return Err(Error::config("tau_deg must be in (0, 180]"));
        }
        if self.n_samples < 2 {
            return Err(Error::config("n_samples must be >= 2"));
        }
        if self.resolution < 2 || self.mesh_resolution < 8 {
            return Err(Error::config("resolution too small"));
        }
        if self.psnr_stride == 0 {
            return Err(Error::config("psnr_stride must be >= 1"));
        }
        for v in [
            self.alpha,
            self.beta,
            self.lambda,
            self.sigma0_factor,
            self.sigma_decay,
            self.gamma_step,
            self.lr_field,
            self.lr_s,
            self.lr_pose,
            self.sdf_init_radius,
            self.s_init,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config("numeric fields must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Flat `key=value` text form mirroring the field names.
    pub fn to_config_string(&self) -> String {
        format!(
            "epochs={}\nsteps_per_epoch={}\nbatch_rays={}\nkeypoint_rays={}\n\
             alpha={}\nbeta={}\nlambda={}\ntau_deg={}\nsigma0_factor={}\n\
             sigma_decay={}\ngamma_step={}\npsnr_stride={}\nseed={}\n\
             resolution={}\nn_samples={}\nlr_field={}\nlr_s={}\nlr_pose={}\n\
             background={},{},{}\nsdf_init_radius={}\ns_init={}\n\
             uniform_sampling={}\nfreeze_poses={}\ninit_gt_poses={}\n\
             mesh_resolution={}\n",
            self.epochs,
            self.steps_per_epoch,
            self.batch_rays,
            self.keypoint_rays,
            self.alpha,
            self.beta,
            self.lambda,
            self.tau_deg,
            self.sigma0_factor,
            self.sigma_decay,
            self.gamma_step,
            self.psnr_stride,
            self.seed,
            self.resolution,
            self.n_samples,
            self.lr_field,
            self.lr_s,
            self.lr_pose,
            self.background[0],
            self.background[1],
            self.background[2],
            self.sdf_init_radius,
            self.s_init,
            self.uniform_sampling,
            self.freeze_poses,
            self.init_gt_poses,
            self.mesh_resolution,
        )
    }

    pub fn from_config_string(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::config(format!("line {}: bad {what} value '{value}'", lineno + 1))
            };
            macro_rules! parse {
                ($field:ident, $what:expr) => {
                    cfg.$field = value.parse().map_err(|_| bad($what))?
                };
            }
            match key {
                "epochs" => parse!(epochs, "usize"),
                "steps_per_epoch" => parse!(steps_per_epoch, "usize"),
                "batch_rays" => parse!(batch_rays, "usize"),
                "keypoint_rays" => parse!(keypoint_rays, "usize"),
                "alpha" => parse!(alpha, "float"),
                "beta" => parse!(beta, "float"),
                "lambda" => parse!(lambda, "float"),
                "tau_deg" => parse!(tau_deg, "float"),
                "sigma0_factor" => parse!(sigma0_factor, "float"),
                "sigma_decay" => parse!(sigma_decay, "float"),
                "gamma_step" => parse!(gamma_step, "float"),
                "psnr_stride" => parse!(psnr_stride, "usize"),
                "seed" => parse!(seed, "u64"),
                "resolution" => parse!(resolution, "usize"),
                "n_samples" => parse!(n_samples, "usize"),
                "lr_field" => parse!(lr_field, "float"),
                "lr_s" => parse!(lr_s, "float"),
                "lr_pose" => parse!(lr_pose, "float"),
                "sdf_init_radius" => parse!(sdf_init_radius, "float"),
                "s_init" => parse!(s_init, "float"),
                "uniform_sampling" => parse!(uniform_sampling, "bool"),
                "freeze_poses" => parse!(freeze_poses, "bool"),
                "init_gt_poses" => parse!(init_gt_poses, "bool"),
                "mesh_resolution" => parse!(mesh_resolution, "usize"),
                "background" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(bad("background (r,g,b)"));
                    }
                    for (i, p) in parts.iter().enumerate() {
                        cfg.background[i] =
                            p.trim().parse().map_err(|_| bad("background component"))?;
                    }
                }
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Blur standard deviation for an epoch:
/// `max(H, W) * sigma0_factor * decay^epoch`, clamped to 0 (disabled) once
/// it falls below one pixel.
pub fn sigma_schedule(
    epoch: usize,
    height: usize,
    width: usize,
    sigma0_factor: f64,
    decay: f64,
) -> f64 {
    let sigma = height.max(width) as f64 * sigma0_factor * decay.powi(epoch as i32);
    if sigma < 1.0 {
        0.0
    } else {
        sigma
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub sigma: f64,
    pub mean_photo: f64,
    pub mean_eikonal: f64,
    pub mean_iou: f64,
    pub mean_total: f64,
    pub iou_pairs_used: usize,
    pub iou_pairs_skipped: usize,
    pub per_node_psnr: Vec<f64>,
    pub confidence_before: Vec<f64>,
    pub confidence_after: Vec<f64>,
    pub sampled_nodes: Vec<usize>,
    /// Not serialized: differs between otherwise identical runs.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub field: VoxelField,
    pub graph: SceneGraph,
    pub reports: Vec<EpochReport>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointGraph {
    version: u32,
    nodes: Vec<CheckpointNode>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointNode {
    id: usize,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    confidence: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub graph: SceneGraph,
    pub field: VoxelField,
    start_epoch: usize,
    reports: Vec<EpochReport>,
}

impl Trainer {
    /// Build the initial training state from a dataset bundle: prune the
    /// graph at tau, initialize confidence (uniform when confidence-driven
    /// sampling is disabled), and initialize the field to a sphere SDF.
    pub fn new(bundle: &DatasetBundle, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut graph = bundle.to_scene_graph()?;
        if cfg.init_gt_poses {
            for node in graph.nodes.iter_mut() {
                node.pose = node.gt_pose.ok_or_else(|| {
                    Error::input("init_gt_poses requires ground-truth poses in the bundle")
                })?;
            }
        }
        let mut graph = graph.prune(cfg.tau_deg)?;
        if graph.edges.is_empty() && cfg.keypoint_rays > 0 {
            log::warn!("pruned graph has no edges; IoU term will be inactive");
        }
        if cfg.uniform_sampling {
            let n = graph.nodes.len() as f64;
            for node in graph.nodes.iter_mut() {
                node.confidence = 1.0 / n;
            }
        } else {
            graph.init_confidence()?;
        }
        let field = VoxelField::sphere_init(
            Aabb::unit(),
            [cfg.resolution; 3],
            cfg.sdf_init_radius,
            cfg.s_init,
        );
        Ok(Trainer {
            cfg,
            graph,
            field,
            start_epoch: 0,
            reports: Vec::new(),
        })
    }

    /// Resume from a checkpoint directory (`.../epoch_E`): restores the
    /// field, poses, and confidences, and continues at epoch E + 1.
    pub fn resume(bundle: &DatasetBundle, cfg: TrainConfig, ckpt: &Path) -> Result<Trainer> {
        let mut trainer = Trainer::new(bundle, cfg)?;
        let name = ckpt
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::input(format!("bad checkpoint path {}", ckpt.display())))?;
        let epoch: usize = name
            .strip_prefix("epoch_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::input(format!("checkpoint dir '{name}' is not of the form epoch_E"))
            })?;
        trainer.field = VoxelField::load_checkpoint(&ckpt.join("field.bin"))?;
        if trainer.field.resolution != [trainer.cfg.resolution; 3] {
            return Err(Error::config(
                "checkpoint resolution differs from configured resolution",
            ));
        }
        let graph_path = ckpt.join("graph.json");
        let text =
            std::fs::read_to_string(&graph_path).map_err(|e| Error::io(&graph_path, e))?;
        let saved: CheckpointGraph = serde_json::from_str(&text)
            .map_err(|e| Error::format(&graph_path, format!("bad checkpoint graph: {e}")))?;
        if saved.version != 1 {
            return Err(Error::format(&graph_path, "unsupported checkpoint version"));
        }
        let by_id: BTreeMap<usize, &CheckpointNode> =
            saved.nodes.iter().map(|n| (n.id, n)).collect();
        for node in trainer.graph.nodes.iter_mut() {
            let rec = by_id.get(&node.id).ok_or_else(|| {
                Error::format(&graph_path, format!("missing node {} in checkpoint", node.id))
            })?;
            node.pose = crate::dataset::pose_from_parts(
                rec.qw,
                rec.qx,
                rec.qy,
                rec.qz,
                Vector3::new(rec.tx, rec.ty, rec.tz),
                &format!("checkpoint node {}", node.id),
            )?;
            node.confidence = rec.confidence;
        }
        trainer.start_epoch = epoch + 1;
        Ok(trainer)
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        rng::mix2(self.cfg.seed, 0xE70C, epoch as u64)
    }

    /// Draw the epoch's training multiset (size = node count).
    fn sample_epoch_multiset(&self, epoch: usize) -> Vec<usize> {
        let n = self.graph.nodes.len();
        let seed = rng::mix(self.epoch_seed(epoch), 0x5A3);
        if self.cfg.uniform_sampling {
            let mut r = rng::rng_from_seed(seed);
            (0..n)
                .map(|_| self.graph.nodes[r.gen_range(0..n)].id)
                .collect()
        } else {
            self.graph.sample_training_set(n, seed)
        }
    }

    fn blur_all(&self, sigma: f64) -> Vec<Image> {
        self.graph
            .nodes
            .par_iter()
            .map(|node| gaussian_blur(&node.image, sigma))
            .collect()
    }

    /// One gradient step over a planned batch. Exposed for tests and the
    /// validation harness.
    pub fn field_pose_step(
        &mut self,
        optimizer: &mut ModelOptimizer,
        blurred: &[Image],
        multiset: &[usize],
        step_seed: u64,
    ) -> BatchOutput {
        let plan = BatchPlan::build(
            &self.field,
            &self.graph,
            blurred,
            multiset,
            self.cfg.batch_rays,
            self.cfg.keypoint_rays,
            self.cfg.n_samples,
            self.cfg.background,
            step_seed,
        );
        let mut poses: Vec<Pose> = self.graph.nodes.iter().map(|n| n.pose).collect();
        let out = evaluate_batch(
            &self.field,
            &poses,
            &plan,
            LossWeights::training(self.cfg.alpha, self.cfg.beta),
            true,
        );
        let grads = out.grads.as_ref().expect("grads requested");
        if out.iou_pairs_skipped > 0 {
            log::debug!(
                "step skipped {} of {} keypoint pairs (uninformative rays)",
                out.iou_pairs_skipped,
                out.iou_pairs_skipped + out.iou_pairs_used
            );
        }
        let outcome = optimizer.step(
            &mut self.field,
            &mut poses,
            grads,
            self.cfg.freeze_poses,
        );
        for group in &outcome.rejected {
            log::warn!("rejected step for parameter group {group}");
        }
        for (node, pose) in self.graph.nodes.iter_mut().zip(poses) {
            node.pose = pose;
        }
        out
    }

    /// Render every node at the configured stride against the epoch's
    /// blurred reference and fuse normalized PSNR into the confidences.
    pub fn confidence_step(&mut self, blurred: &[Image], epoch: usize) -> Result<Vec<f64>> {
        let stride = self.cfg.psnr_stride;
        let psnrs: Vec<f64> = self
            .graph
            .nodes
            .par_iter()
            .enumerate()
            .map(|(i, node)| {
                let rendered = self.field.render_image(
                    &node.pose,
                    &self.graph.intrinsics,
                    stride,
                    self.cfg.n_samples,
                    self.cfg.background,
                );
                let reference = subsample(&blurred[i], stride);
                psnr(&rendered, &reference).unwrap_or(f64::NAN)
            })
            .collect();
        let gamma = 1.0 + self.cfg.gamma_step * epoch as f64;
        self.graph
            .update_confidence(&psnrs, self.cfg.lambda, gamma)?;
        Ok(psnrs)
    }

    /// Run the remaining epochs, optionally writing `epoch_E/` checkpoints.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutput> {
        let intr = self.graph.intrinsics;
        for epoch in self.start_epoch..self.cfg.epochs {
            let t0 = Instant::now();
            let sigma = sigma_schedule(
                epoch,
                intr.height,
                intr.width,
                self.cfg.sigma0_factor,
                self.cfg.sigma_decay,
            );
            let blurred = self.blur_all(sigma);
            let multiset = self.sample_epoch_multiset(epoch);
            let confidence_before = self.graph.confidence_vector();

            let mut optimizer = ModelOptimizer::new(
                &self.field,
                self.cfg.lr_field,
                self.cfg.lr_s,
                self.cfg.lr_pose,
            );
            let mut sums = [0.0f64; 4];
            let mut pairs_used = 0usize;
            let mut pairs_skipped = 0usize;
            for step in 0..self.cfg.steps_per_epoch {
                let step_seed = rng::mix2(self.epoch_seed(epoch), 0x57E9, step as u64);
                let out = self.field_pose_step(&mut optimizer, &blurred, &multiset, step_seed);
                sums[0] += out.losses.photo;
                sums[1] += out.losses.eikonal;
                sums[2] += out.losses.iou;
                sums[3] += out.losses.total;
                pairs_used += out.iou_pairs_used;
                pairs_skipped += out.iou_pairs_skipped;
            }
            let steps = self.cfg.steps_per_epoch as f64;

            let per_node_psnr = if self.cfg.uniform_sampling {
                Vec::new()
            } else {
                self.confidence_step(&blurred, epoch)?
            };

            // Checkpoints hold f32 grids; adopting the rounded state here
            // keeps resumed runs identical to uninterrupted ones.
            self.field.quantize_to_f32();

            let report = EpochReport {
                epoch,
                sigma,
                mean_photo: sums[0] / steps,
                mean_eikonal: sums[1] / steps,
                mean_iou: sums[2] / steps,
                mean_total: sums[3] / steps,
                iou_pairs_used: pairs_used,
                iou_pairs_skipped: pairs_skipped,
                per_node_psnr,
                confidence_before,
                confidence_after: self.graph.confidence_vector(),
                sampled_nodes: multiset,
                wall_time_secs: t0.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: sigma {sigma:.2}, photo {:.4}, eikonal {:.4}, iou {:.4} ({:.1}s)",
                report.mean_photo,
                report.mean_eikonal,
                report.mean_iou,
                report.wall_time_secs
            );
            if let Some(dir) = out_dir {
                self.write_checkpoint(dir, &report)?;
            }
            self.reports_push(report);
        }
        Ok(TrainOutput {
            field: self.field,
            graph: self.graph,
            reports: self.reports,
        })
    }

    fn write_checkpoint(&self, out_dir: &Path, report: &EpochReport) -> Result<()> {
        let dir = out_dir.join(format!("epoch_{}", report.epoch));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.field.save_checkpoint(&dir.join("field.bin"))?;
        let graph = CheckpointGraph {
            version: 1,
            nodes: self
                .graph
                .nodes
                .iter()
                .map(|n| {
                    let q = n.pose.rotation.quaternion();
                    CheckpointNode {
                        id: n.id,
                        qw: q.w,
                        qx: q.i,
                        qy: q.j,
                        qz: q.k,
                        tx: n.pose.translation.x,
                        ty: n.pose.translation.y,
                        tz: n.pose.translation.z,
                        confidence: n.confidence,
                    }
                })
                .collect(),
        };
        let graph_path = dir.join("graph.json");
        std::fs::write(
            &graph_path,
            serde_json::to_string_pretty(&graph).expect("serializable"),
        )
        .map_err(|e| Error::io(&graph_path, e))?;
        let report_path = dir.join("report.json");
        std::fs::write(
            &report_path,
            serde_json::to_string_pretty(report).expect("serializable"),
        )
        .map_err(|e| Error::io(&report_path, e))?;
        Ok(())
    }

    // Reports accumulate across run(); kept out of the struct's public
    // surface so resume construction stays simple.
    fn reports_push(&mut self, report: EpochReport) {
        self.reports.push(report);
    }
}

/// Every `stride`-th pixel of an image (matches `render_image` indexing).
pub fn subsample(img: &Image, stride: usize) -> Image {
    if stride <= 1 {
        return img.clone();
    }
    let w = img.width.div_ceil(stride);
    let h = img.height.div_ceil(stride);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(x * stride, y * stride));
        }
    }
    out
}

/// Locate the highest-numbered `epoch_E` directory under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let Some(epoch) = name
            .to_str()
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(e, _)| epoch > *e) {
            best = Some((epoch, entry.path()));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::input(format!("no epoch_E checkpoints in {}", run_dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_schedule_values() {
        let s0 = sigma_schedule(0, 256, 256, 0.02, 0.7);
        assert!((s0 - 5.12).abs() < 1e-12);

        let s5 = sigma_schedule(5, 256, 256, 0.02, 0.7);
        assert_eq!(s5, 0.0); // 5.12 * 0.7^5 = 0.8605 < 1 -> disabled

        let mut prev = f64::INFINITY;
        for e in 0..10 {
            let s = sigma_schedule(e, 256, 256, 0.02, 0.7);
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn subsample_matches_expected_indexing() {
        let mut img = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [x as f64, y as f64, 0.0]);
            }
        }
        let sub = subsample(&img, 4);
        assert_eq!(sub.width, 2);
        assert_eq!(sub.get(1, 1), [4.0, 4.0, 0.0]);
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let cfg = TrainConfig {
            epochs: 7,
            beta: 0.33,
            uniform_sampling: true,
            ..TrainConfig::default()
        };
        let text = cfg.to_config_string();
        let back = TrainConfig::from_config_string(&text).unwrap();
        assert_eq!(back, cfg);

        let err = TrainConfig::from_config_string("bogus_key=1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");

        let err = TrainConfig::from_config_string("epochs=notanumber\n").unwrap_err();
        assert!(err.to_string().contains("epochs") || err.to_string().contains("usize"));
    }
}
