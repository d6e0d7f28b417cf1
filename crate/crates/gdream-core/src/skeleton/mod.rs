//! Robot skeleton graphs and inter-skeleton joint correspondence.
//!
//! A [`SkeletonGraph`] is the kinematic tree of one robot reduced to the
//! quantities retargeting needs: per-joint rotation axes, parent-to-joint
//! link vectors at the zero pose, a 4-code relation matrix over joint
//! pairs, and a table of semantically named key joints. A [`JointMap`]
//! pairs the key joints of two skeletons.
//!
//! All types are immutable after construction and safe to share across
//! threads.

pub mod urdf;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Relation codes stored in the skeleton relation matrix.
pub const REL_NONE: u8 = 0;
pub const REL_SELF: u8 = 1;
pub const REL_PARENT: u8 = 2;
pub const REL_CHILD: u8 = 3;

// ---------------------------------------------------------------------------
// Key-joint semantics
// ---------------------------------------------------------------------------

/// Semantic roles a key joint can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Semantic {
    Hip,
    Knee,
    Ankle,
    Toe,
    Shoulder,
    Elbow,
    Hand,
}

impl Semantic {
    pub const ALL: [Semantic; 7] = [
        Semantic::Hip,
        Semantic::Knee,
        Semantic::Ankle,
        Semantic::Toe,
        Semantic::Shoulder,
        Semantic::Elbow,
        Semantic::Hand,
    ];

    /// End-effector semantics keep their correspondences under augmentation.
    pub fn is_end_effector(self) -> bool {
        matches!(self, Semantic::Toe | Semantic::Hand)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Semantic::Hip => "hip",
            Semantic::Knee => "knee",
            Semantic::Ankle => "ankle",
            Semantic::Toe => "toe",
            Semantic::Shoulder => "shoulder",
            Semantic::Elbow => "elbow",
            Semantic::Hand => "hand",
        }
    }
}

impl FromStr for Semantic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hip" => Ok(Semantic::Hip),
            "knee" => Ok(Semantic::Knee),
            "ankle" => Ok(Semantic::Ankle),
            "toe" => Ok(Semantic::Toe),
            "shoulder" => Ok(Semantic::Shoulder),
            "elbow" => Ok(Semantic::Elbow),
            "hand" => Ok(Semantic::Hand),
            other => Err(Error::Config(format!("unknown key-joint semantic '{other}'"))),
        }
    }
}

/// Side qualifier for key joints; left and right are distinct semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Center,
    Left,
    Right,
}

/// A side-qualified key-joint label such as `left_hip` or `toe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeyLabel {
    pub side: Side,
    pub semantic: Semantic,
}

impl KeyLabel {
    pub fn new(side: Side, semantic: Semantic) -> Self {
        Self { side, semantic }
    }

    pub fn center(semantic: Semantic) -> Self {
        Self::new(Side::Center, semantic)
    }

    pub fn left(semantic: Semantic) -> Self {
        Self::new(Side::Left, semantic)
    }

    pub fn right(semantic: Semantic) -> Self {
        Self::new(Side::Right, semantic)
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::Center => write!(f, "{}", self.semantic.as_str()),
            Side::Left => write!(f, "left_{}", self.semantic.as_str()),
            Side::Right => write!(f, "right_{}", self.semantic.as_str()),
        }
    }
}

impl FromStr for KeyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("left_") {
            Ok(Self::new(Side::Left, rest.parse()?))
        } else if let Some(rest) = s.strip_prefix("right_") {
            Ok(Self::new(Side::Right, rest.parse()?))
        } else {
            Ok(Self::new(Side::Center, s.parse()?))
        }
    }
}

impl TryFrom<String> for KeyLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KeyLabel> for String {
    fn from(l: KeyLabel) -> String {
        l.to_string()
    }
}

// ---------------------------------------------------------------------------
// SkeletonGraph
// ---------------------------------------------------------------------------

/// The kinematic DAG of one robot.
///
/// Joint 0 is always the floating base. For every non-base joint `j`,
/// `axes[j]` is the unit rotation axis and `link_vectors[j]` the zero-pose
/// offset from the parent joint origin to `j`'s origin, both expressed in
/// the zero-pose world frame (meters). `relation_matrix[i][j]` holds one
/// of the four relation codes: 0 none, 1 self, 2 `i` is the parent of `j`,
/// 3 `i` is the child of `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub joint_names: Vec<String>,
    pub parent_index: Vec<i64>,
    pub axes: Vec<[f64; 3]>,
    pub link_vectors: Vec<[f64; 3]>,
    pub relation_matrix: Vec<Vec<u8>>,
    pub key_joints: BTreeMap<KeyLabel, i64>,
}

impl SkeletonGraph {
    /// Build a graph from its raw parts, deriving and validating the
    /// relation matrix.
    pub fn new(
        joint_names: Vec<String>,
        parent_index: Vec<i64>,
        axes: Vec<[f64; 3]>,
        link_vectors: Vec<[f64; 3]>,
        key_joints: BTreeMap<KeyLabel, i64>,
    ) -> Result<Self> {
        let relation_matrix = build_relation_matrix(&parent_index)?;
        let graph = Self {
            joint_names,
            parent_index,
            axes,
            link_vectors,
            relation_matrix,
            key_joints,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    /// Index of the key joint carrying `label`, if present.
    pub fn key_joint(&self, label: KeyLabel) -> Option<usize> {
        match self.key_joints.get(&label) {
            Some(&idx) if idx >= 0 => Some(idx as usize),
            _ => None,
        }
    }

    /// Non-base joint indices in topological (parent-first) order.
    /// Joints are stored parent-first already; this is `1..J`.
    pub fn topo_order(&self) -> impl Iterator<Item = usize> + '_ {
        1..self.joint_count()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::Structure("graph has no joints".into()));
        }
        for v in [
            self.parent_index.len(),
            self.axes.len(),
            self.link_vectors.len(),
            self.relation_matrix.len(),
        ] {
            if v != j {
                return Err(Error::Shape(format!(
                    "field length {v} does not match joint count {j}"
                )));
            }
        }
        let expected = build_relation_matrix(&self.parent_index)?;
        if expected != self.relation_matrix {
            return Err(Error::Structure(
                "relation matrix is inconsistent with parent_index".into(),
            ));
        }
        for (idx, axis) in self.axes.iter().enumerate().skip(1) {
            let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Structure(format!(
                    "axis of joint {idx} has norm {norm}, expected 1"
                )));
            }
        }
        for (&label, &idx) in &self.key_joints {
            if idx < -1 || idx >= j as i64 {
                return Err(Error::Config(format!(
                    "key joint {label} index {idx} out of range for {j} joints"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let graph: SkeletonGraph = serde_json::from_str(text)?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Relation matrix
// ---------------------------------------------------------------------------

/// Derive the 4-code relation matrix from parent indices.
///
/// `parent_index[0]` must be −1 (the base); every other entry must point
/// at an earlier-validated parent forming a single tree.
pub fn build_relation_matrix(parent_index: &[i64]) -> Result<Vec<Vec<u8>>> {
    let j = parent_index.len();
    if j == 0 {
        return Err(Error::Structure("empty parent_index".into()));
    }
    let mut roots = 0;
    for (idx, &p) in parent_index.iter().enumerate() {
        if p == -1 {
            roots += 1;
        } else if p < 0 || p as usize >= j {
            return Err(Error::Structure(format!(
                "joint {idx} has out-of-range parent {p}"
            )));
        } else if p as usize == idx {
            return Err(Error::Structure(format!("joint {idx} is its own parent")));
        }
    }
    if roots != 1 || parent_index[0] != -1 {
        return Err(Error::Structure(format!(
            "expected exactly one root at index 0, found {roots} root(s)"
        )));
    }
    // Cycle check: every joint must reach the root in at most J hops.
    for start in 0..j {
        let mut cur = start;
        let mut hops = 0;
        while parent_index[cur] != -1 {
            cur = parent_index[cur] as usize;
            hops += 1;
            if hops > j {
                return Err(Error::Structure(format!(
                    "cycle detected in parent chain of joint {start}"
                )));
            }
        }
    }
    let mut psi = vec![vec![REL_NONE; j]; j];
    for (i, row) in psi.iter_mut().enumerate() {
        for (jj, cell) in row.iter_mut().enumerate() {
            *cell = if i == jj {
                REL_SELF
            } else if parent_index[jj] == i as i64 {
                REL_PARENT
            } else if parent_index[i] == jj as i64 {
                REL_CHILD
            } else {
                REL_NONE
            };
        }
    }
    Ok(psi)
}

// ---------------------------------------------------------------------------
// JointMap
// ---------------------------------------------------------------------------

/// One key-joint correspondence between a source and a target skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapPair {
    pub label: KeyLabel,
    pub src: usize,
    pub dst: usize,
}

/// Binary correspondence matrix between the key joints of two skeletons.
///
/// `eta[i][j] = 1` means source joint `i` corresponds to target joint `j`.
/// Every row and column sums to at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMap {
    eta: Vec<u8>,
    source_joint_count: usize,
    target_joint_count: usize,
    pairs: Vec<MapPair>,
}

/// On-disk record of one semantic pairing; −1 encodes absence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRecord {
    pub semantic: KeyLabel,
    pub src_index: i64,
    pub dst_index: i64,
}

impl JointMap {
    /// Empty map between two skeletons of the given sizes.
    pub fn empty(source_joint_count: usize, target_joint_count: usize) -> Self {
        Self {
            eta: vec![0; source_joint_count * target_joint_count],
            source_joint_count,
            target_joint_count,
            pairs: Vec::new(),
        }
    }

    fn from_pairs(
        source_joint_count: usize,
        target_joint_count: usize,
        pairs: Vec<MapPair>,
    ) -> Self {
        let mut map = Self::empty(source_joint_count, target_joint_count);
        for pair in &pairs {
            map.eta[pair.src * target_joint_count + pair.dst] = 1;
        }
        map.pairs = pairs;
        map
    }

    pub fn source_joint_count(&self) -> usize {
        self.source_joint_count
    }

    pub fn target_joint_count(&self) -> usize {
        self.target_joint_count
    }

    #[inline]
    pub fn eta(&self, src: usize, dst: usize) -> bool {
        self.eta[src * self.target_joint_count + dst] == 1
    }

    pub fn pairs(&self) -> &[MapPair] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// Records for the map file, one per semantic present on either side.
    pub fn to_records(&self, src: &SkeletonGraph, dst: &SkeletonGraph) -> Vec<MapRecord> {
        let mut labels: Vec<KeyLabel> = src
            .key_joints
            .keys()
            .chain(dst.key_joints.keys())
            .copied()
            .collect();
        labels.sort();
        labels.dedup();
        labels
            .into_iter()
            .map(|label| MapRecord {
                semantic: label,
                src_index: src.key_joints.get(&label).copied().unwrap_or(-1),
                dst_index: dst.key_joints.get(&label).copied().unwrap_or(-1),
            })
            .collect()
    }

    /// Rebuild a map from file records; records with −1 on either side
    /// contribute no correspondence.
    pub fn from_records(
        records: &[MapRecord],
        source_joint_count: usize,
        target_joint_count: usize,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        for rec in records {
            if rec.src_index < 0 || rec.dst_index < 0 {
                continue;
            }
            let (src, dst) = (rec.src_index as usize, rec.dst_index as usize);
            if src >= source_joint_count || dst >= target_joint_count {
                return Err(Error::Config(format!(
                    "map record {} references joint out of range",
                    rec.semantic
                )));
            }
            pairs.push(MapPair { label: rec.semantic, src, dst });
        }
        let map = Self::from_pairs(source_joint_count, target_joint_count, pairs);
        map.validate()?;
        Ok(map)
    }

    /// Write the record list to a joint-map file.
    pub fn save_records(records: &[MapRecord], path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(records)?)?;
        Ok(())
    }

    /// Read a record list from a joint-map file.
    pub fn load_records(path: &Path) -> Result<Vec<MapRecord>> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<MapRecord> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("joint-map file {}: {e}", path.display())))?;
        Ok(records)
    }

    /// Row/column uniqueness of the correspondence matrix.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.source_joint_count {
            let sum: u32 = (0..self.target_joint_count)
                .map(|j| self.eta[i * self.target_joint_count + j] as u32)
                .sum();
            if sum > 1 {
                return Err(Error::Config(format!("source joint {i} paired more than once")));
            }
        }
        for j in 0..self.target_joint_count {
            let sum: u32 = (0..self.source_joint_count)
                .map(|i| self.eta[i * self.target_joint_count + j] as u32)
                .sum();
            if sum > 1 {
                return Err(Error::Config(format!("target joint {j} paired more than once")));
            }
        }
        Ok(())
    }
}

/// Pair the key joints of two skeletons by shared semantics.
///
/// A semantic contributes a pair exactly when both graphs list it with a
/// non-negative index. A joint index already claimed by an earlier
/// semantic (in label order) is skipped so the row/column invariant holds.
pub fn build_joint_map(src: &SkeletonGraph, dst: &SkeletonGraph) -> JointMap {
    let mut pairs = Vec::new();
    let mut used_src = vec![false; src.joint_count()];
    let mut used_dst = vec![false; dst.joint_count()];
    let mut labels: Vec<KeyLabel> = src.key_joints.keys().copied().collect();
    labels.sort();
    for label in labels {
        let (Some(s), Some(d)) = (src.key_joint(label), dst.key_joint(label)) else {
            continue;
        };
        if used_src[s] || used_dst[d] {
            continue;
        }
        used_src[s] = true;
        used_dst[d] = true;
        pairs.push(MapPair { label, src: s, dst: d });
    }
    JointMap::from_pairs(src.joint_count(), dst.joint_count(), pairs)
}

/// Temporally extended joint map `η̄` of shape `(T·J_dst) x (T·J_src)`.
///
/// Correspondence holds only within the same frame:
/// `η̄[(t·J_dst + i)][(t'·J_src + j)] = η[j][i]` iff `t = t'`.
pub fn extend_joint_map(map: &JointMap, frames: usize) -> Tensor {
    assert!(frames >= 1, "temporal extension needs at least one frame");
    let (js, jd) = (map.source_joint_count(), map.target_joint_count());
    let mut out = Tensor::zeros(frames * jd, frames * js);
    for t in 0..frames {
        for pair in map.pairs() {
            out.set(t * jd + pair.dst, t * js + pair.src, 1.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Link-length scaling policy.
///
/// Key links (by default the thigh and calf: the links entering the knee
/// and ankle key joints) scale in `key_range`; every other non-base link
/// scales in `other_range`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub key_range: (f64, f64),
    pub other_range: (f64, f64),
    /// Joint indices whose incoming links count as key links; when empty,
    /// the knee and ankle key joints of every side are used.
    #[serde(default)]
    pub key_links: Vec<usize>,
    /// Probability that a non-end-effector correspondence is dropped.
    #[serde(default)]
    pub drop_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            key_range: (0.5, 2.0),
            other_range: (0.67, 1.5),
            key_links: Vec::new(),
            drop_prob: 0.0,
        }
    }
}

impl AugmentPolicy {
    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.key_range, self.other_range] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!(
                    "scale range [{lo}, {hi}] must be positive and ordered"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop_prob {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }

    /// Joints whose incoming link is treated as a key link.
    fn key_link_set(&self, g: &SkeletonGraph) -> Vec<bool> {
        let mut is_key = vec![false; g.joint_count()];
        if self.key_links.is_empty() {
            for (&label, &idx) in &g.key_joints {
                if idx >= 0 && matches!(label.semantic, Semantic::Knee | Semantic::Ankle) {
                    is_key[idx as usize] = true;
                }
            }
        } else {
            for &idx in &self.key_links {
                if idx < g.joint_count() {
                    is_key[idx] = true;
                }
            }
        }
        is_key
    }
}

/// Scale link lengths at random within the policy ranges.
///
/// Only link-vector norms change; directions, axes, topology, and the
/// relation matrix are untouched. Deterministic for a given seed.
pub fn augment_skeleton(g: &SkeletonGraph, seed: u64, policy: &AugmentPolicy) -> Result<SkeletonGraph> {
    policy.validate()?;
    let is_key = policy.key_link_set(g);
    let mut rng = rng_from_seed(seed);
    let mut out = g.clone();
    for j in 1..g.joint_count() {
        let (lo, hi) = if is_key[j] { policy.key_range } else { policy.other_range };
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        for c in 0..3 {
            out.link_vectors[j][c] *= scale;
        }
    }
    Ok(out)
}

/// Randomly drop non-end-effector correspondences with probability
/// `drop_prob`. Toe and hand pairs always survive. Deterministic per seed.
pub fn augment_correspondence(map: &JointMap, seed: u64, drop_prob: f64) -> Result<JointMap> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::Config(format!("drop_prob {drop_prob} outside [0, 1]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut pairs = Vec::new();
    for pair in map.pairs() {
        let drop = !pair.label.semantic.is_end_effector() && rng.random_range(0.0..1.0) < drop_prob;
        if !drop {
            pairs.push(*pair);
        }
    }
    Ok(JointMap::from_pairs(
        map.source_joint_count(),
        map.target_joint_count(),
        pairs,
    ))
}

#[cfg(test)]
mod tests;
