//! Bundle file layout and round-trip I/O.
//!
//! ```text
//! <dir>/
//!   graph.json        scene graph (schema below)
//!   gt_poses.json     ground-truth camera poses
//!   labels.txt        injected outlier node ids, one per line
//!   gt_mesh.obj       ground-truth surface (ASCII OBJ, v/f records)
//!   images/node_XXX.png
//! ```
//!
//! graph.json schema (camera-to-world poses, tx/ty/tz = camera center):
//! `{version, intrinsics:{fx,fy,cx,cy,width,height},
//!   nodes:[{id,image,qw,qx,qy,qz,tx,ty,tz}],
//!   edges:[{i,j,matches:[[ui,vi,uj,vj],...]}]}`

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::img::Image;
use crate::mesh::Mesh;
use crate::scene_graph::{Edge, Match};

use super::{BundleNode, DatasetBundle};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    intrinsics: IntrinsicsRecord,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    image: String,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    i: usize,
    j: usize,
    matches: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct GtPosesFile {
    version: u32,
    poses: Vec<PoseRecord>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    id: usize,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

fn pose_to_parts(pose: &Pose) -> (f64, f64, f64, f64, Vector3<f64>) {
    let q = pose.rotation.quaternion();
    (q.w, q.i, q.j, q.k, pose.translation)
}

/// Accept quaternions within 1e-6 of unit norm; renormalize only when the
/// deviation is visible beyond f64 roundoff so freshly written poses load
/// back bit-identically.
pub fn pose_from_parts(
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    t: Vector3<f64>,
    context: &str,
) -> Result<Pose> {
    let q = Quaternion::new(qw, qx, qy, qz);
    let norm = q.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!(
            "{context}: quaternion norm {norm} outside unit tolerance"
        )));
    }
    let rotation = if (norm - 1.0).abs() > 1e-12 {
        UnitQuaternion::from_quaternion(q)
    } else {
        UnitQuaternion::new_unchecked(q)
    };
    Ok(Pose {
        rotation,
        translation: t,
    })
}

fn image_name(id: usize) -> String {
    format!("node_{id:03}.png")
}

/// Parse JSON, mapping failures to a format error that names the byte
/// offset of the failure.
fn parse_json<T: for<'de> Deserialize<'de>>(raw: &str, path: &Path) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| {
        let offset: usize = raw
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len())
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(
            path,
            format!("json parse error at byte offset {offset}: {e}"),
        )
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;

    let graph = GraphFile {
        version: SCHEMA_VERSION,
        intrinsics: IntrinsicsRecord {
            fx: bundle.intrinsics.fx,
            fy: bundle.intrinsics.fy,
            cx: bundle.intrinsics.cx,
            cy: bundle.intrinsics.cy,
            width: bundle.intrinsics.width,
            height: bundle.intrinsics.height,
        },
        nodes: bundle
            .nodes
            .iter()
            .map(|n| {
                let (qw, qx, qy, qz, t) = pose_to_parts(&n.pose);
                NodeRecord {
                    id: n.id,
                    image: image_name(n.id),
                    qw,
                    qx,
                    qy,
                    qz,
                    tx: t.x,
                    ty: t.y,
                    tz: t.z,
                }
            })
            .collect(),
        edges: bundle
            .edges
            .iter()
            .map(|e| EdgeRecord {
                i: e.i,
                j: e.j,
                matches: e
                    .matches
                    .iter()
                    .map(|m| [m.a.0, m.a.1, m.b.0, m.b.1])
                    .collect(),
            })
            .collect(),
    };
    let graph_path = dir.join("graph.json");
    let text = serde_json::to_string_pretty(&graph).expect("serializable");
    std::fs::write(&graph_path, text).map_err(|e| Error::io(&graph_path, e))?;

    let gt = GtPosesFile {
        version: SCHEMA_VERSION,
        poses: bundle
            .nodes
            .iter()
            .map(|n| {
                let (qw, qx, qy, qz, t) = pose_to_parts(&n.gt_pose);
                PoseRecord {
                    id: n.id,
                    qw,
                    qx,
                    qy,
                    qz,
                    tx: t.x,
                    ty: t.y,
                    tz: t.z,
                }
            })
            .collect(),
    };
    let gt_path = dir.join("gt_poses.json");
    let text = serde_json::to_string_pretty(&gt).expect("serializable");
    std::fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;

    let labels_path = dir.join("labels.txt");
    let labels: String = bundle
        .outlier_labels
        .iter()
        .map(|id| format!("{id}\n"))
        .collect();
    std::fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    bundle.gt_mesh.write_obj(&dir.join("gt_mesh.obj"))?;

    for n in &bundle.nodes {
        n.image.save_png(&dir.join("images").join(image_name(n.id)))?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let graph_path = dir.join("graph.json");
    let graph: GraphFile = parse_json(&read_to_string(&graph_path)?, &graph_path)?;
    if graph.version != SCHEMA_VERSION {
        return Err(Error::format(
            &graph_path,
            format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                graph.version
            ),
        ));
    }
    let intrinsics = Intrinsics {
        fx: graph.intrinsics.fx,
        fy: graph.intrinsics.fy,
        cx: graph.intrinsics.cx,
        cy: graph.intrinsics.cy,
        width: graph.intrinsics.width,
        height: graph.intrinsics.height,
    };
    intrinsics.validate()?;

    let gt_path = dir.join("gt_poses.json");
    let gt: GtPosesFile = parse_json(&read_to_string(&gt_path)?, &gt_path)?;
    if gt.version != SCHEMA_VERSION {
        return Err(Error::format(
            &gt_path,
            format!("schema version {} unsupported", gt.version),
        ));
    }
    let mut gt_by_id = std::collections::BTreeMap::new();
    for p in &gt.poses {
        let pose = pose_from_parts(
            p.qw,
            p.qx,
            p.qy,
            p.qz,
            Vector3::new(p.tx, p.ty, p.tz),
            &format!("gt pose {}", p.id),
        )?;
        gt_by_id.insert(p.id, pose);
    }

    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for rec in &graph.nodes {
        let pose = pose_from_parts(
            rec.qw,
            rec.qx,
            rec.qy,
            rec.qz,
            Vector3::new(rec.tx, rec.ty, rec.tz),
            &format!("node {}", rec.id),
        )?;
        let gt_pose = *gt_by_id.get(&rec.id).ok_or_else(|| {
            Error::format(&gt_path, format!("missing gt pose for node {}", rec.id))
        })?;
        let image = Image::load_png(&dir.join("images").join(&rec.image))?;
        nodes.push(BundleNode {
            id: rec.id,
            image,
            pose,
            gt_pose,
        });
    }

    let edges = graph
        .edges
        .iter()
        .map(|e| Edge {
            i: e.i,
            j: e.j,
            matches: e
                .matches
                .iter()
                .map(|m| Match {
                    a: (m[0], m[1]),
                    b: (m[2], m[3]),
                })
                .collect(),
        })
        .collect();

    let labels_path = dir.join("labels.txt");
    let labels_text = read_to_string(&labels_path)?;
    let mut outlier_labels = Vec::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: usize = line.parse().map_err(|_| {
            Error::format(
                &labels_path,
                format!("bad node id '{line}' at line {}", lineno + 1),
            )
        })?;
        outlier_labels.push(id);
    }

    let gt_mesh = Mesh::read_obj(&dir.join("gt_mesh.obj"))?;

    let bundle = DatasetBundle {
        intrinsics,
        nodes,
        edges,
        gt_mesh,
        outlier_labels,
    };
    // Surface structural problems (duplicate edges, out-of-bounds
    // keypoints) at load time.
    bundle.to_scene_graph()?;
    Ok(bundle)
}
