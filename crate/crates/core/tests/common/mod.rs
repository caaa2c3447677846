#![allow(dead_code)]

use medood::{ClassList, DatasetManifest, Patch, Role};

pub fn patch(id: &str, size: usize, labelmap: Vec<u8>, role: Role) -> Patch {
    Patch {
        id: id.to_string(),
        region_id: format!("region_{id}"),
        offset: (0, 0),
        pad: (0, 0),
        size,
        image: vec![128; size * size * 3],
        labelmap,
        role,
    }
}

/// 2x2 patches: `pos_only` fully labelled, `neg_only` fully background,
/// `mixed` one labelled pixel, and `ood` background-only OoD patches.
pub fn counted_sets(pos_only: usize, neg_only: usize, mixed: usize, ood: usize) -> (DatasetManifest, DatasetManifest) {
    let classes = ClassList::numbered(1).unwrap();
    let mut id = Vec::new();
    for i in 0..pos_only {
        id.push(patch(&format!("p{i}"), 2, vec![1; 4], Role::Id));
    }
    for i in 0..neg_only {
        id.push(patch(&format!("n{i}"), 2, vec![0; 4], Role::Id));
    }
    for i in 0..mixed {
        id.push(patch(&format!("m{i}"), 2, vec![1, 0, 0, 0], Role::Id));
    }
    let oods = (0..ood).map(|i| patch(&format!("o{i}"), 2, vec![0; 4], Role::Ood)).collect();
    (
        DatasetManifest::from_patches(classes.clone(), 2, id).unwrap(),
        DatasetManifest::from_patches(classes, 2, oods).unwrap(),
    )
}
