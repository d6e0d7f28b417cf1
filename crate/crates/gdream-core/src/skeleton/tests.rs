use std::collections::BTreeMap;

use proptest::prelude::*;

use super::urdf::{parse_urdf, parse_urdf_with_key_joints};
use super::*;

const TWO_LINK_CHAIN: &str = r#"
<robot name="two_link">
  <link name="base"/>
  <link name="lower"/>
  <joint name="j1" type="revolute">
    <parent link="base"/>
    <child link="lower"/>
    <origin xyz="0 0 -0.5"/>
    <axis xyz="0 1 0"/>
  </joint>
</robot>
"#;

fn leg_graph() -> SkeletonGraph {
    // base -> hip -> knee -> ankle -> toe
    let mut key = BTreeMap::new();
    key.insert(KeyLabel::center(Semantic::Hip), 1);
    key.insert(KeyLabel::center(Semantic::Knee), 2);
    key.insert(KeyLabel::center(Semantic::Ankle), 3);
    key.insert(KeyLabel::center(Semantic::Toe), 4);
    SkeletonGraph::new(
        vec!["base".into(), "hip".into(), "knee".into(), "ankle".into(), "toe".into()],
        vec![-1, 0, 1, 2, 3],
        vec![[0.0; 3], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        vec![
            [0.0; 3],
            [0.0, 0.1, -0.1],
            [0.0, 0.0, -0.4],
            [0.0, 0.0, -0.4],
            [0.1, 0.0, -0.05],
        ],
        key,
    )
    .unwrap()
}

fn arm_and_leg_graph() -> SkeletonGraph {
    // base -> {hip chain, shoulder chain}
    let mut key = BTreeMap::new();
    key.insert(KeyLabel::center(Semantic::Hip), 1);
    key.insert(KeyLabel::center(Semantic::Knee), 2);
    key.insert(KeyLabel::center(Semantic::Ankle), 3);
    key.insert(KeyLabel::center(Semantic::Toe), 4);
    key.insert(KeyLabel::center(Semantic::Shoulder), 5);
    key.insert(KeyLabel::center(Semantic::Elbow), 6);
    key.insert(KeyLabel::center(Semantic::Hand), 7);
    SkeletonGraph::new(
        vec![
            "base".into(),
            "hip".into(),
            "knee".into(),
            "ankle".into(),
            "toe".into(),
            "shoulder".into(),
            "elbow".into(),
            "hand".into(),
        ],
        vec![-1, 0, 1, 2, 3, 0, 5, 6],
        vec![
            [0.0; 3],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ],
        vec![
            [0.0; 3],
            [0.0, 0.1, -0.1],
            [0.0, 0.0, -0.4],
            [0.0, 0.0, -0.4],
            [0.1, 0.0, -0.05],
            [0.0, 0.2, 0.3],
            [0.0, 0.0, -0.3],
            [0.0, 0.0, -0.25],
        ],
        key,
    )
    .unwrap()
}

// -- parse_urdf -------------------------------------------------------------

#[test]
fn parses_two_link_chain() {
    let g = parse_urdf(TWO_LINK_CHAIN).unwrap();
    assert_eq!(g.joint_count(), 2);
    assert_eq!(g.link_vectors[1], [0.0, 0.0, -0.5]);
    assert_eq!(g.axes[1], [0.0, 1.0, 0.0]);
    assert_eq!(g.relation_matrix, vec![vec![1, 2], vec![3, 1]]);
    assert_eq!(g.parent_index, vec![-1, 0]);
}

#[test]
fn merges_fixed_wrist_joint() {
    let urdf = r#"
<robot name="arm">
  <link name="base"/>
  <link name="forearm"/>
  <link name="wrist"/>
  <link name="hand"/>
  <joint name="elbow" type="revolute">
    <parent link="base"/>
    <child link="forearm"/>
    <origin xyz="0 0 0.3"/>
    <axis xyz="0 1 0"/>
  </joint>
  <joint name="wrist_fixed" type="fixed">
    <parent link="forearm"/>
    <child link="wrist"/>
    <origin xyz="0 0 0.25" rpy="0 0 1.5707963267948966"/>
  </joint>
  <joint name="hand_joint" type="revolute">
    <parent link="wrist"/>
    <child link="hand"/>
    <origin xyz="0.1 0 0.05"/>
    <axis xyz="1 0 0"/>
  </joint>
</robot>
"#;
    let g = parse_urdf(urdf).unwrap();
    // Fixed joint merged away: base, elbow, hand_joint.
    assert_eq!(g.joint_count(), 3);
    assert_eq!(g.joint_names, vec!["base", "elbow", "hand_joint"]);
    // Composed by hand: wrist offset (0,0,0.25), then hand offset (0.1,0,0.05)
    // rotated by Rz(pi/2) -> (0,0.1,0.05); total (0,0.1,0.30).
    let e = g.link_vectors[2];
    assert!((e[0] - 0.0).abs() < 1e-12);
    assert!((e[1] - 0.1).abs() < 1e-12);
    assert!((e[2] - 0.3).abs() < 1e-12);
    // Axis (1,0,0) rotated by Rz(pi/2) -> (0,1,0).
    let a = g.axes[2];
    assert!((a[0]).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12 && a[2].abs() < 1e-12);
}

#[test]
fn rejects_prismatic_joints() {
    let urdf = r#"
<robot name="bad">
  <link name="base"/>
  <link name="slider"/>
  <joint name="slide" type="prismatic">
    <parent link="base"/>
    <child link="slider"/>
    <axis xyz="0 0 1"/>
  </joint>
</robot>
"#;
    match parse_urdf(urdf) {
        Err(Error::UnsupportedJoint(name)) => assert_eq!(name, "slide"),
        other => panic!("expected UnsupportedJoint, got {other:?}"),
    }
}

#[test]
fn rejects_multiple_roots() {
    let urdf = r#"
<robot name="forest">
  <link name="a"/>
  <link name="b"/>
  <link name="c"/>
  <joint name="j" type="revolute">
    <parent link="a"/>
    <child link="c"/>
    <axis xyz="0 0 1"/>
  </joint>
</robot>
"#;
    assert!(matches!(parse_urdf(urdf), Err(Error::Structure(_))));
}

#[test]
fn malformed_xml_reports_position() {
    match parse_urdf("<robot><link name=\"a\"") {
        Err(Error::Parse { line, .. }) => assert!(line >= 1),
        other => panic!("expected Parse error, got {other:?}"),
    }
}

#[test]
fn floating_base_joint_is_consumed() {
    let urdf = r#"
<robot name="floaty">
  <link name="world"/>
  <link name="pelvis"/>
  <link name="leg"/>
  <joint name="float" type="floating">
    <parent link="world"/>
    <child link="pelvis"/>
  </joint>
  <joint name="hip" type="continuous">
    <parent link="pelvis"/>
    <child link="leg"/>
    <origin xyz="0 0 -0.2"/>
    <axis xyz="0 1 0"/>
  </joint>
</robot>
"#;
    let g = parse_urdf(urdf).unwrap();
    assert_eq!(g.joint_count(), 2);
    assert_eq!(g.joint_names[0], "pelvis");
    assert_eq!(g.joint_names[1], "hip");
}

#[test]
fn key_joints_resolve_by_name() {
    let mut map = BTreeMap::new();
    map.insert("knee".to_string(), "j1".to_string());
    let g = parse_urdf_with_key_joints(TWO_LINK_CHAIN, &map).unwrap();
    assert_eq!(g.key_joint(KeyLabel::center(Semantic::Knee)), Some(1));
    let mut bad = BTreeMap::new();
    bad.insert("knee".to_string(), "nope".to_string());
    assert!(matches!(
        parse_urdf_with_key_joints(TWO_LINK_CHAIN, &bad),
        Err(Error::Config(_))
    ));
}

// -- relation matrix ----------------------------------------------------------

#[test]
fn relation_matrix_chain() {
    let psi = build_relation_matrix(&[-1, 0, 1]).unwrap();
    assert_eq!(psi, vec![vec![1, 2, 0], vec![3, 1, 2], vec![0, 3, 1]]);
}

#[test]
fn relation_matrix_single_joint() {
    assert_eq!(build_relation_matrix(&[-1]).unwrap(), vec![vec![1]]);
}

#[test]
fn relation_matrix_star_siblings_unrelated() {
    let psi = build_relation_matrix(&[-1, 0, 0]).unwrap();
    assert_eq!(psi[1][2], REL_NONE);
    assert_eq!(psi[2][1], REL_NONE);
    assert_eq!(psi[0][1], REL_PARENT);
    assert_eq!(psi[1][0], REL_CHILD);
}

#[test]
fn relation_matrix_rejects_bad_structures() {
    assert!(matches!(build_relation_matrix(&[-1, 2, 1]), Err(Error::Structure(_))));
    assert!(matches!(build_relation_matrix(&[-1, -1]), Err(Error::Structure(_))));
    assert!(matches!(build_relation_matrix(&[0]), Err(Error::Structure(_))));
    assert!(matches!(build_relation_matrix(&[-1, 5]), Err(Error::Structure(_))));
}

// -- joint maps ---------------------------------------------------------------

#[test]
fn joint_map_pairs_shared_semantics() {
    let a = arm_and_leg_graph();
    let b = arm_and_leg_graph();
    let map = build_joint_map(&a, &b);
    assert_eq!(map.len(), 7);
    map.validate().unwrap();
    for pair in map.pairs() {
        assert_eq!(pair.src, pair.dst);
        assert!(map.eta(pair.src, pair.dst));
    }
}

#[test]
fn joint_map_drops_missing_semantics() {
    let humanoid = arm_and_leg_graph();
    let biped = leg_graph(); // no arms
    let map = build_joint_map(&humanoid, &biped);
    assert_eq!(map.len(), 4); // hip, knee, ankle, toe only
    assert!(map
        .pairs()
        .iter()
        .all(|p| !matches!(p.label.semantic, Semantic::Shoulder | Semantic::Elbow | Semantic::Hand)));
}

#[test]
fn joint_map_empty_when_all_absent() {
    let mut a = arm_and_leg_graph();
    for (_, idx) in a.key_joints.iter_mut() {
        *idx = -1;
    }
    let b = arm_and_leg_graph();
    let map = build_joint_map(&a, &b);
    assert!(map.is_empty());
    for i in 0..map.source_joint_count() {
        for j in 0..map.target_joint_count() {
            assert!(!map.eta(i, j));
        }
    }
}

#[test]
fn joint_map_records_round_trip() {
    let a = arm_and_leg_graph();
    let b = leg_graph();
    let map = build_joint_map(&a, &b);
    let records = map.to_records(&a, &b);
    // Absent-on-one-side semantics appear with -1.
    assert!(records.iter().any(|r| r.src_index >= 0 && r.dst_index == -1));
    let back = JointMap::from_records(&records, a.joint_count(), b.joint_count()).unwrap();
    assert_eq!(back, map);
}

#[test]
fn joint_map_file_round_trip() {
    let a = arm_and_leg_graph();
    let b = leg_graph();
    let map = build_joint_map(&a, &b);
    let records = map.to_records(&a, &b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.json");
    JointMap::save_records(&records, &path).unwrap();
    let loaded = JointMap::load_records(&path).unwrap();
    let back = JointMap::from_records(&loaded, a.joint_count(), b.joint_count()).unwrap();
    assert_eq!(back, map);
    // Corrupt files surface as format errors.
    std::fs::write(&path, "[{broken").unwrap();
    assert!(matches!(JointMap::load_records(&path), Err(Error::Format(_))));
}

// -- temporal extension ---------------------------------------------------------

#[test]
fn extend_single_frame_is_transpose() {
    let a = arm_and_leg_graph();
    let b = leg_graph();
    let map = build_joint_map(&a, &b);
    let ext = extend_joint_map(&map, 1);
    assert_eq!(ext.rows(), b.joint_count());
    assert_eq!(ext.cols(), a.joint_count());
    for i in 0..map.source_joint_count() {
        for j in 0..map.target_joint_count() {
            assert_eq!(ext.get(j, i) == 1.0, map.eta(i, j));
        }
    }
}

#[test]
fn extend_identity_is_block_diagonal() {
    let records = vec![
        MapRecord { semantic: KeyLabel::center(Semantic::Hip), src_index: 0, dst_index: 0 },
        MapRecord { semantic: KeyLabel::center(Semantic::Knee), src_index: 1, dst_index: 1 },
    ];
    let map = JointMap::from_records(&records, 2, 2).unwrap();
    let ext = extend_joint_map(&map, 2);
    let expect = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    for (i, row) in expect.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(ext.get(i, j), v);
        }
    }
}

#[test]
fn extend_zero_map_stays_zero() {
    let map = JointMap::empty(3, 2);
    let ext = extend_joint_map(&map, 4);
    assert!(ext.as_slice().iter().all(|&v| v == 0.0));
}

// -- augmentation -----------------------------------------------------------------

#[test]
fn degenerate_range_is_identity() {
    let g = arm_and_leg_graph();
    let policy = AugmentPolicy {
        key_range: (1.0, 1.0),
        other_range: (1.0, 1.0),
        ..Default::default()
    };
    let out = augment_skeleton(&g, 42, &policy).unwrap();
    assert_eq!(out, g);
}

#[test]
fn calf_scaling_doubles_norm_only() {
    let g = leg_graph();
    let policy = AugmentPolicy {
        key_range: (2.0, 2.0),
        other_range: (1.0, 1.0),
        ..Default::default()
    };
    let out = augment_skeleton(&g, 7, &policy).unwrap();
    // Knee and ankle links (thigh and calf) scale by exactly 2.
    for j in [2usize, 3] {
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!((norm(out.link_vectors[j]) - 2.0 * norm(g.link_vectors[j])).abs() < 1e-12);
        // direction preserved
        for c in 0..3 {
            assert!((out.link_vectors[j][c] - 2.0 * g.link_vectors[j][c]).abs() < 1e-12);
        }
    }
    assert_eq!(out.axes, g.axes);
    assert_eq!(out.relation_matrix, g.relation_matrix);
    assert_eq!(out.parent_index, g.parent_index);
}

#[test]
fn augment_is_deterministic_per_seed() {
    let g = arm_and_leg_graph();
    let policy = AugmentPolicy::default();
    let a = augment_skeleton(&g, 5, &policy).unwrap();
    let b = augment_skeleton(&g, 5, &policy).unwrap();
    let c = augment_skeleton(&g, 6, &policy).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn augment_rejects_bad_ranges() {
    let g = leg_graph();
    let policy = AugmentPolicy { key_range: (0.0, 2.0), ..Default::default() };
    assert!(matches!(augment_skeleton(&g, 1, &policy), Err(Error::Config(_))));
    let policy = AugmentPolicy { other_range: (2.0, 1.0), ..Default::default() };
    assert!(matches!(augment_skeleton(&g, 1, &policy), Err(Error::Config(_))));
}

#[test]
fn correspondence_drop_zero_keeps_all() {
    let a = arm_and_leg_graph();
    let map = build_joint_map(&a, &a);
    let out = augment_correspondence(&map, 3, 0.0).unwrap();
    assert_eq!(out, map);
}

#[test]
fn correspondence_drop_one_keeps_end_effectors() {
    let a = arm_and_leg_graph();
    let map = build_joint_map(&a, &a);
    let out = augment_correspondence(&map, 3, 1.0).unwrap();
    assert_eq!(out.len(), 2); // toe and hand survive
    assert!(out.pairs().iter().all(|p| p.label.semantic.is_end_effector()));
}

#[test]
fn correspondence_drop_is_deterministic() {
    let a = arm_and_leg_graph();
    let map = build_joint_map(&a, &a);
    let x = augment_correspondence(&map, 11, 0.5).unwrap();
    let y = augment_correspondence(&map, 11, 0.5).unwrap();
    assert_eq!(x, y);
    assert!(matches!(augment_correspondence(&map, 1, 1.5), Err(Error::Config(_))));
}

// -- serialization ------------------------------------------------------------

#[test]
fn graph_json_round_trip() {
    let g = arm_and_leg_graph();
    let text = g.to_json().unwrap();
    let back = SkeletonGraph::from_json(&text).unwrap();
    assert_eq!(back, g);
    // Field names are part of the format contract.
    for field in [
        "joint_names",
        "parent_index",
        "axes",
        "link_vectors",
        "relation_matrix",
        "key_joints",
    ] {
        assert!(text.contains(field), "graph JSON missing field {field}");
    }
}

#[test]
fn urdf_parse_serialize_parse_identity() {
    let g = parse_urdf(TWO_LINK_CHAIN).unwrap();
    let back = SkeletonGraph::from_json(&g.to_json().unwrap()).unwrap();
    assert_eq!(back, g);
}

// -- properties ---------------------------------------------------------------

/// Random tree parent vector with parents preceding children.
fn arb_parent_index(max_joints: usize) -> impl Strategy<Value = Vec<i64>> {
    (1..=max_joints).prop_flat_map(|n| {
        let parents: Vec<BoxedStrategy<i64>> = (0..n)
            .map(|i| {
                if i == 0 {
                    Just(-1i64).boxed()
                } else {
                    (0..i as i64).boxed()
                }
            })
            .collect();
        parents
    })
}

proptest! {
    #[test]
    fn relation_matrix_codes_match_definition(parents in arb_parent_index(8)) {
        let psi = build_relation_matrix(&parents).unwrap();
        let j = parents.len();
        for i in 0..j {
            prop_assert_eq!(psi[i][i], REL_SELF);
            for k in 0..j {
                if i != k {
                    let expected = if parents[k] == i as i64 {
                        REL_PARENT
                    } else if parents[i] == k as i64 {
                        REL_CHILD
                    } else {
                        REL_NONE
                    };
                    prop_assert_eq!(psi[i][k], expected);
                    // parent/child codes are mutually transposed
                    if psi[i][k] == REL_PARENT {
                        prop_assert_eq!(psi[k][i], REL_CHILD);
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_changes_norms_within_range(seed in 0u64..1000) {
        let g = arm_and_leg_graph();
        let policy = AugmentPolicy::default();
        let out = augment_skeleton(&g, seed, &policy).unwrap();
        let is_key = [false, false, true, true, false, false, false, false];
        for j in 1..g.joint_count() {
            let norm = |v: [f64; 3]| (v[0]*v[0] + v[1]*v[1] + v[2]*v[2]).sqrt();
            let ratio = norm(out.link_vectors[j]) / norm(g.link_vectors[j]);
            let (lo, hi) = if is_key[j] { policy.key_range } else { policy.other_range };
            prop_assert!(ratio >= lo - 1e-12 && ratio <= hi + 1e-12);
        }
        prop_assert_eq!(out.axes, g.axes);
        prop_assert_eq!(out.relation_matrix, g.relation_matrix);
    }

    #[test]
    fn extension_has_t_times_ones(frames in 1usize..6) {
        let a = arm_and_leg_graph();
        let b = leg_graph();
        let map = build_joint_map(&a, &b);
        let ext = extend_joint_map(&map, frames);
        let ones = ext.as_slice().iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(ones, frames * map.len());
    }

    #[test]
    fn graph_round_trip_identity(seed in 0u64..500) {
        let g = augment_skeleton(&arm_and_leg_graph(), seed, &AugmentPolicy::default()).unwrap();
        let back = SkeletonGraph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }
}
