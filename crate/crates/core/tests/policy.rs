use proptest::prelude::*;
use stratopt::policy_tree::{train_policy, PolicyNode, TreeConfig};

/// Rewards on a 1/64 grid so sums stay exact under shifts.
fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<(f64, f64)>)> {
    (20usize..80, 1usize..4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec((0i32..20).prop_map(f64::from), d), n),
            prop::collection::vec((0u32..32, 0u32..32).prop_map(|(a, b)| (a as f64 / 64.0, b as f64 / 64.0)), n),
        )
    })
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

fn config(depth: usize, minbucket: usize) -> TreeConfig {
    TreeConfig {
        max_depth: depth,
        minbucket,
        ..TreeConfig::default()
    }
}

fn leaf_counts(node: &PolicyNode, out: &mut Vec<usize>) {
    match node {
        PolicyNode::Leaf { count, .. } => out.push(*count),
        PolicyNode::Split { left, right, .. } => {
            leaf_counts(left, out);
            leaf_counts(right, out);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_patient_shift_keeps_the_tree((x, r) in instance(), shifts in prop::collection::vec(0u32..32, 80), depth in 1usize..4) {
        let d = x[0].len();
        let a = train_policy(&x, &r, &names(d), &config(depth, 5)).unwrap();
        let shifted: Vec<(f64, f64)> = r
            .iter()
            .zip(&shifts)
            .map(|(&(r0, r1), &s)| (r0 + s as f64 / 64.0, r1 + s as f64 / 64.0))
            .collect();
        let b = train_policy(&x, &shifted, &names(d), &config(depth, 5)).unwrap();
        for row in &x {
            prop_assert_eq!(a.prescribe(row).unwrap(), b.prescribe(row).unwrap());
        }
    }

    #[test]
    fn leaves_partition_the_training_set((x, r) in instance(), depth in 1usize..5, minbucket in 1usize..10) {
        let d = x[0].len();
        let tree = train_policy(&x, &r, &names(d), &config(depth, minbucket)).unwrap();
        prop_assert!(tree.depth() <= depth);
        let mut counts = Vec::new();
        leaf_counts(&tree.root, &mut counts);
        prop_assert_eq!(counts.iter().sum::<usize>(), x.len());
        prop_assert!(counts.iter().all(|&c| c >= minbucket));
        let effects = tree.leaf_effects(&x, &r).unwrap();
        prop_assert_eq!(effects.iter().map(|e| e.count).sum::<usize>(), x.len());
    }

    #[test]
    fn never_worse_than_a_uniform_policy((x, r) in instance(), depth in 1usize..4) {
        let d = x[0].len();
        let tree = train_policy(&x, &r, &names(d), &config(depth, 5)).unwrap();
        let got = tree.objective(&x, &r).unwrap();
        let all0: f64 = r.iter().map(|p| p.0).sum();
        let all1: f64 = r.iter().map(|p| p.1).sum();
        prop_assert!(got <= all0.min(all1) + 1e-9);
    }

    #[test]
    fn dot_output_is_well_formed((x, r) in instance(), depth in 1usize..4) {
        let d = x[0].len();
        let tree = train_policy(&x, &r, &names(d), &config(depth, 5)).unwrap();
        check_dot(&tree.to_dot(None), tree.leaf_count());
    }
}

/// Checks the subset of DOT the tree writer emits: a `digraph` block of node
/// and labelled edge statements forming a binary tree rooted at `n0`.
fn check_dot(dot: &str, leaves: usize) {
    let lines: Vec<&str> = dot.lines().collect();
    assert!(lines[0].starts_with("digraph ") && lines[0].ends_with('{'));
    assert_eq!(*lines.last().unwrap(), "}");
    let mut nodes = std::collections::BTreeMap::new();
    let mut parents = std::collections::BTreeMap::new();
    let mut children: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for line in &lines[1..lines.len() - 1] {
        let s = line.trim();
        assert!(s.ends_with(';'), "statement without `;`: {s}");
        if s.starts_with("node ") {
            continue;
        }
        let (head, attrs) = s.split_once(" [").expect("attribute list");
        assert!(attrs.starts_with("label=\"") && attrs.ends_with("\"];"), "bad attributes: {s}");
        let label = &attrs["label=\"".len()..attrs.len() - "\"];".len()];
        assert!(!label.contains('"'), "unescaped quote in {s}");
        if let Some((from, to)) = head.split_once(" -> ") {
            assert!(label == "yes" || label == "no");
            assert!(parents.insert(to.to_string(), from.to_string()).is_none(), "{to} has two parents");
            children.entry(from.to_string()).or_default().push(label.to_string());
        } else {
            assert!(head.starts_with('n') && head[1..].parse::<usize>().is_ok(), "bad node id {head}");
            assert!(nodes.insert(head.to_string(), label.to_string()).is_none(), "duplicate node {head}");
        }
    }
    assert!(!parents.contains_key("n0"));
    assert_eq!(parents.len() + 1, nodes.len());
    for (from, to) in &parents {
        assert!(nodes.contains_key(from) && nodes.contains_key(to));
    }
    let leaf_labels = nodes.values().filter(|l| l.starts_with("treat = ")).count();
    assert_eq!(leaf_labels, leaves);
    for (id, labels) in &children {
        let mut l = labels.clone();
        l.sort();
        assert_eq!(l, ["no", "yes"], "node {id} children");
    }
}
