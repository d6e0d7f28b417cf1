//! URDF subset parser producing [`SkeletonGraph`]s.
//!
//! Supported elements: `robot`, `link`, `joint` with types `revolute`,
//! `continuous`, `fixed`, plus at most one `floating` joint attached to
//! the root link; `origin` (xyz/rpy), `axis` (xyz), `parent`, `child`.
//! Fixed joints are merged into their parent by composing origin
//! transforms; continuous joints are treated as revolute. Meshes,
//! inertia, limits, and collision data are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use roxmltree::{Document, Node};

use super::{KeyLabel, SkeletonGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum JointKind {
    Revolute,
    Fixed,
    Floating,
}

#[derive(Debug, Clone)]
struct RawJoint {
    name: String,
    kind: JointKind,
    origin_xyz: [f64; 3],
    origin_rpy: [f64; 3],
    axis: [f64; 3],
    parent_link: String,
    child_link: String,
}

/// Parse a URDF document into a skeleton graph.
///
/// The base becomes joint 0. Axes and link vectors come out expressed in
/// the zero-pose world frame, so the graph's forward kinematics
/// reproduces the URDF joint origins exactly.
pub fn parse_urdf(urdf_text: &str) -> Result<SkeletonGraph> {
    let doc = Document::parse(urdf_text).map_err(|e| {
        let pos = e.pos();
        Error::Parse {
            line: pos.row as usize,
            col: pos.col as usize,
            msg: e.to_string(),
        }
    })?;
    let robot = doc.root_element();
    if robot.tag_name().name() != "robot" {
        return Err(parse_err(&doc, &robot, "root element must be <robot>"));
    }

    let mut links: Vec<String> = Vec::new();
    let mut joints: Vec<RawJoint> = Vec::new();
    for node in robot.children().filter(Node::is_element) {
        match node.tag_name().name() {
            "link" => {
                links.push(required_attr(&doc, &node, "name")?.to_string());
            }
            "joint" => {
                joints.push(parse_joint(&doc, &node)?);
            }
            _ => {} // materials, gazebo tags, ... are ignored
        }
    }
    if links.is_empty() {
        return Err(Error::Structure("URDF defines no links".into()));
    }

    for j in &joints {
        for link in [&j.parent_link, &j.child_link] {
            if !links.iter().any(|l| l == link) {
                return Err(Error::Structure(format!(
                    "joint '{}' references undefined link '{}'",
                    j.name, link
                )));
            }
        }
    }

    // Root link: never a child of any joint.
    let roots: Vec<&String> = links
        .iter()
        .filter(|l| !joints.iter().any(|j| &j.child_link == *l))
        .collect();
    if roots.len() != 1 {
        return Err(Error::Structure(format!(
            "expected exactly one root link, found {}: [{}]",
            roots.len(),
            roots.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut root_link = roots[0].clone();

    // At most one floating joint, and it must hang the base off the root.
    let floating: Vec<&RawJoint> = joints.iter().filter(|j| j.kind == JointKind::Floating).collect();
    match floating.len() {
        0 => {}
        1 => {
            let f = floating[0];
            if f.parent_link != root_link {
                return Err(Error::Structure(format!(
                    "floating joint '{}' must attach to the root link",
                    f.name
                )));
            }
            let children_of_root = joints.iter().filter(|j| j.parent_link == root_link).count();
            if children_of_root != 1 {
                return Err(Error::Structure(
                    "the root link of a floating-base robot may carry only the floating joint"
                        .into(),
                ));
            }
            // The floating child becomes the base; its offset is carried by
            // motion data, not by the graph.
            root_link = f.child_link.clone();
        }
        n => {
            return Err(Error::Structure(format!("found {n} floating joints, at most 1 allowed")));
        }
    }

    let mut builder = GraphBuilder {
        joints: &joints,
        joint_names: vec![root_link.clone()],
        parent_index: vec![-1],
        axes: vec![[0.0; 3]],
        link_vectors: vec![[0.0; 3]],
        visited_links: vec![root_link.clone()],
    };
    builder.descend(&root_link, 0, Transform::identity(), Mat3::identity())?;

    let visited = builder.visited_links.len();
    let reachable_total = if floating.len() == 1 { links.len() - 1 } else { links.len() };
    if visited != reachable_total {
        return Err(Error::Structure(format!(
            "{} of {} links are unreachable from the root",
            reachable_total - visited,
            reachable_total
        )));
    }

    SkeletonGraph::new(
        builder.joint_names,
        builder.parent_index,
        builder.axes,
        builder.link_vectors,
        BTreeMap::new(),
    )
}

/// Parse a URDF document and attach key joints by joint name.
///
/// `key_joints` maps a semantic label to a graph joint name (the URDF
/// joint name for non-base joints). Unknown names are an error; the base
/// may be referenced by the root link's name.
pub fn parse_urdf_with_key_joints(
    urdf_text: &str,
    key_joints: &BTreeMap<String, String>,
) -> Result<SkeletonGraph> {
    let mut graph = parse_urdf(urdf_text)?;
    let mut resolved = BTreeMap::new();
    for (label, joint_name) in key_joints {
        let label = KeyLabel::from_str(label)?;
        let idx = graph
            .joint_names
            .iter()
            .position(|n| n == joint_name)
            .ok_or_else(|| {
                Error::Config(format!("key joint '{label}': no joint named '{joint_name}'"))
            })?;
        resolved.insert(label, idx as i64);
    }
    graph.key_joints = resolved;
    graph.validate()?;
    Ok(graph)
}

struct GraphBuilder<'a> {
    joints: &'a [RawJoint],
    joint_names: Vec<String>,
    parent_index: Vec<i64>,
    axes: Vec<[f64; 3]>,
    link_vectors: Vec<[f64; 3]>,
    visited_links: Vec<String>,
}

impl GraphBuilder<'_> {
    /// Walk the links below `link`, which sits at transform `acc` relative
    /// to graph joint `parent` whose zero-pose world rotation is `world`.
    fn descend(&mut self, link: &str, parent: usize, acc: Transform, world: Mat3) -> Result<()> {
        for joint in self.joints.iter().filter(|j| j.parent_link == link) {
            if joint.kind == JointKind::Floating {
                continue; // consumed as the base above
            }
            if self.visited_links.iter().any(|l| l == &joint.child_link) {
                return Err(Error::Structure(format!(
                    "link '{}' is reachable through more than one path",
                    joint.child_link
                )));
            }
            self.visited_links.push(joint.child_link.clone());
            let frame = acc.compose(&Transform::from_origin(joint.origin_xyz, joint.origin_rpy));
            match joint.kind {
                JointKind::Fixed => {
                    self.descend(&joint.child_link, parent, frame, world)?;
                }
                JointKind::Revolute => {
                    let rot_world = world.mul(&frame.rot);
                    let axis = rot_world.apply(joint.axis);
                    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                    if norm < 1e-12 {
                        return Err(Error::Structure(format!(
                            "joint '{}' has a zero axis",
                            joint.name
                        )));
                    }
                    let axis = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
                    let offset = world.apply(frame.trans);
                    let idx = self.joint_names.len();
                    self.joint_names.push(joint.name.clone());
                    self.parent_index.push(parent as i64);
                    self.axes.push(axis);
                    self.link_vectors.push(offset);
                    self.descend(&joint.child_link, idx, Transform::identity(), rot_world)?;
                }
                JointKind::Floating => unreachable!(),
            }
        }
        Ok(())
    }
}

fn parse_joint(doc: &Document, node: &Node) -> Result<RawJoint> {
    let name = required_attr(doc, node, "name")?.to_string();
    let kind = match required_attr(doc, node, "type")? {
        "revolute" | "continuous" => JointKind::Revolute,
        "fixed" => JointKind::Fixed,
        "floating" => JointKind::Floating,
        _ => return Err(Error::UnsupportedJoint(name)),
    };
    let mut origin_xyz = [0.0; 3];
    let mut origin_rpy = [0.0; 3];
    let mut axis = [1.0, 0.0, 0.0]; // URDF default
    let mut parent_link = None;
    let mut child_link = None;
    for child in node.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "origin" => {
                if let Some(v) = child.attribute("xyz") {
                    origin_xyz = parse_vec3(doc, &child, v)?;
                }
                if let Some(v) = child.attribute("rpy") {
                    origin_rpy = parse_vec3(doc, &child, v)?;
                }
            }
            "axis" => {
                axis = parse_vec3(doc, &child, required_attr(doc, &child, "xyz")?)?;
            }
            "parent" => parent_link = Some(required_attr(doc, &child, "link")?.to_string()),
            "child" => child_link = Some(required_attr(doc, &child, "link")?.to_string()),
            _ => {}
        }
    }
    let parent_link =
        parent_link.ok_or_else(|| parse_err(doc, node, &format!("joint '{name}' has no <parent>")))?;
    let child_link =
        child_link.ok_or_else(|| parse_err(doc, node, &format!("joint '{name}' has no <child>")))?;
    Ok(RawJoint { name, kind, origin_xyz, origin_rpy, axis, parent_link, child_link })
}

fn required_attr<'a>(doc: &Document, node: &Node<'a, '_>, attr: &str) -> Result<&'a str> {
    node.attribute(attr)
        .ok_or_else(|| parse_err(doc, node, &format!("missing attribute '{attr}'")))
}

fn parse_vec3(doc: &Document, node: &Node, text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(doc, node, &format!("expected 3 numbers, got '{text}'")));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<f64>()
            .map_err(|_| parse_err(doc, node, &format!("bad number '{p}'")))?;
    }
    Ok(out)
}

fn parse_err(doc: &Document, node: &Node, msg: &str) -> Error {
    let pos = doc.text_pos_at(node.range().start);
    Error::Parse { line: pos.row as usize, col: pos.col as usize, msg: msg.to_string() }
}

// ---------------------------------------------------------------------------
// Minimal 3D transform helpers (zero-pose composition only)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Mat3([f64; 9]);

impl Mat3 {
    fn identity() -> Self {
        Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// URDF rpy: extrinsic X-Y-Z, i.e. `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    fn from_rpy(rpy: [f64; 3]) -> Self {
        let (sr, cr) = rpy[0].sin_cos();
        let (sp, cp) = rpy[1].sin_cos();
        let (sy, cy) = rpy[2].sin_cos();
        Mat3([
            cy * cp,
            cy * sp * sr - sy * cr,
            cy * sp * cr + sy * sr,
            sy * cp,
            sy * sp * sr + cy * cr,
            sy * sp * cr - cy * sr,
            -sp,
            cp * sr,
            cp * cr,
        ])
    }

    fn mul(&self, other: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &other.0;
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] =
                    a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Mat3(out)
    }

    fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Transform {
    rot: Mat3,
    trans: [f64; 3],
}

impl Transform {
    fn identity() -> Self {
        Self { rot: Mat3::identity(), trans: [0.0; 3] }
    }

    fn from_origin(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self { rot: Mat3::from_rpy(rpy), trans: xyz }
    }

    fn compose(&self, other: &Transform) -> Transform {
        let rotated = self.rot.apply(other.trans);
        Transform {
            rot: self.rot.mul(&other.rot),
            trans: [
                self.trans[0] + rotated[0],
                self.trans[1] + rotated[1],
                self.trans[2] + rotated[2],
            ],
        }
    }
}
