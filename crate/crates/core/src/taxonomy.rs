//! Object classes, semantic part types, and part-tree validation.
//!
//! The taxonomy is the shared label space: an ordered list of class names and
//! an ordered global list of part types, with each class owning a subset of
//! the part types plus the set of part-type pairs that may touch. Everything
//! downstream (priors, model heads, metrics) addresses parts by their dense
//! global index, so indices must be stable across save/load.
//!
//! The default taxonomy covers six desk-scale furniture classes with 45 part
//! types; cabinet and bookshelf deliberately share one part-type set.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::voxelgrid::{GridSemantics, OccupancyGrid};

/// Upper bound on parts per object; the tree decoder emits exactly this many
/// candidate children.
pub const MAX_PARTS_PER_OBJECT: usize = 10;

const DOC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to parse taxonomy document: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported taxonomy document version {0} (expected {DOC_VERSION})")]
    BadVersion(u32),
    #[error("duplicate part type {0:?}")]
    DuplicatePartType(String),
    #[error("duplicate class {0:?}")]
    DuplicateClass(String),
    #[error("class {class:?} lists unknown part type {part:?}")]
    UnknownPart { class: String, part: String },
    #[error("class {class:?} lists part type {part:?} twice")]
    RepeatedPart { class: String, part: String },
    #[error("class {0:?} has no part types")]
    EmptyClass(String),
    #[error("no classes declared")]
    NoClasses,
    #[error("part type {0:?} belongs to no class")]
    OrphanPartType(String),
    #[error("class {class:?} allows adjacency with {part:?}, which is not in its part set")]
    AdjacencyOutsideClass { class: String, part: String },
}

/// On-disk taxonomy document (TOML).
#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyDoc {
    version: u32,
    part_types: Vec<String>,
    classes: Vec<ClassDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassDoc {
    name: String,
    parts: Vec<String>,
    #[serde(default)]
    adjacent: Vec<[String; 2]>,
}

/// One object class: its name, the part types it may contain (global
/// indices, in document order), and the unordered part-type pairs allowed to
/// be adjacent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpec {
    name: String,
    part_types: Vec<usize>,
    adjacency_allowed: BTreeSet<(usize, usize)>,
}

impl ClassSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Global indices of the part types legal for this class.
    pub fn part_types(&self) -> &[usize] {
        &self.part_types
    }

    pub fn allows_part(&self, part_type: usize) -> bool {
        self.part_types.contains(&part_type)
    }

    /// Whether parts of these two global types may touch in this class.
    pub fn allows_adjacency(&self, a: usize, b: usize) -> bool {
        self.adjacency_allowed
            .contains(&(a.min(b), a.max(b)))
    }

    pub fn adjacency_allowed(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency_allowed.iter().copied()
    }
}

/// Validated label space shared by priors, model, and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    part_types: Vec<String>,
    part_index: HashMap<String, usize>,
    classes: Vec<ClassSpec>,
    class_index: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn part_count(&self) -> usize {
        self.part_types.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn part_name(&self, part_type: usize) -> &str {
        &self.part_types[part_type]
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_types
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.part_index.get(name).copied()
    }

    pub fn class(&self, class: usize) -> &ClassSpec {
        &self.classes[class]
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.classes[class].name
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_index.get(name).copied()
    }

    /// SHA-256 of the canonical document; recorded next to checkpoints so a
    /// model is never evaluated against a different label space.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_document().as_bytes());
        hasher.finalize().into()
    }

    pub fn content_hash_hex(&self) -> String {
        self.content_hash()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Serializes back to the document format; `load_taxonomy` of the result
    /// reproduces this taxonomy exactly (same names, same indices).
    pub fn to_document(&self) -> String {
        let doc = TaxonomyDoc {
            version: DOC_VERSION,
            part_types: self.part_types.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassDoc {
                    name: c.name.clone(),
                    parts: c
                        .part_types
                        .iter()
                        .map(|&i| self.part_types[i].clone())
                        .collect(),
                    adjacent: c
                        .adjacency_allowed
                        .iter()
                        .map(|&(a, b)| {
                            [self.part_types[a].clone(), self.part_types[b].clone()]
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("taxonomy document serialization cannot fail")
    }

    /// The built-in default: six furniture classes, 45 part types.
    pub fn builtin() -> Taxonomy {
        load_taxonomy(DEFAULT_TAXONOMY_DOC).expect("built-in taxonomy document is valid")
    }
}

/// Parses and validates a taxonomy document.
///
/// Rejects duplicate names, empty or missing classes, references to unknown
/// part types, and part types that belong to no class.
pub fn load_taxonomy(document: &str) -> Result<Taxonomy, TaxonomyError> {
    let doc: TaxonomyDoc = toml::from_str(document)?;
    if doc.version != DOC_VERSION {
        return Err(TaxonomyError::BadVersion(doc.version));
    }
    if doc.classes.is_empty() {
        return Err(TaxonomyError::NoClasses);
    }

    let mut part_index = HashMap::new();
    for (i, name) in doc.part_types.iter().enumerate() {
        if part_index.insert(name.clone(), i).is_some() {
            return Err(TaxonomyError::DuplicatePartType(name.clone()));
        }
    }

    let mut class_index = HashMap::new();
    let mut classes = Vec::with_capacity(doc.classes.len());
    let mut referenced = vec![false; doc.part_types.len()];
    for (ci, class) in doc.classes.iter().enumerate() {
        if class_index.insert(class.name.clone(), ci).is_some() {
            return Err(TaxonomyError::DuplicateClass(class.name.clone()));
        }
        if class.parts.is_empty() {
            return Err(TaxonomyError::EmptyClass(class.name.clone()));
        }
        let mut part_types = Vec::with_capacity(class.parts.len());
        for part in &class.parts {
            let &idx = part_index
                .get(part)
                .ok_or_else(|| TaxonomyError::UnknownPart {
                    class: class.name.clone(),
                    part: part.clone(),
                })?;
            if part_types.contains(&idx) {
                return Err(TaxonomyError::RepeatedPart {
                    class: class.name.clone(),
                    part: part.clone(),
                });
            }
            part_types.push(idx);
            referenced[idx] = true;
        }
        let mut adjacency_allowed = BTreeSet::new();
        for [a, b] in &class.adjacent {
            let mut pair = [0usize; 2];
            for (slot, name) in pair.iter_mut().zip([a, b]) {
                let &idx =
                    part_index
                        .get(name)
                        .ok_or_else(|| TaxonomyError::UnknownPart {
                            class: class.name.clone(),
                            part: name.clone(),
                        })?;
                if !part_types.contains(&idx) {
                    return Err(TaxonomyError::AdjacencyOutsideClass {
                        class: class.name.clone(),
                        part: name.clone(),
                    });
                }
                *slot = idx;
            }
            adjacency_allowed.insert((pair[0].min(pair[1]), pair[0].max(pair[1])));
        }
        classes.push(ClassSpec {
            name: class.name.clone(),
            part_types,
            adjacency_allowed,
        });
    }

    if let Some(orphan) = referenced.iter().position(|&r| !r) {
        return Err(TaxonomyError::OrphanPartType(doc.part_types[orphan].clone()));
    }

    Ok(Taxonomy {
        part_types: doc.part_types,
        part_index,
        classes,
        class_index,
    })
}

/// One ground-truth or predicted part instance: its semantic type and its
/// binary occupancy mask. Several instances may share a type (four legs).
#[derive(Debug, Clone)]
pub struct PartInstance {
    pub part_type: usize,
    pub mask: OccupancyGrid,
}

/// A flat part decomposition: the instances plus a symmetric adjacency
/// matrix over them (false diagonal).
#[derive(Debug, Clone)]
pub struct PartTreeTarget {
    pub parts: Vec<PartInstance>,
    pub adjacency: Vec<Vec<bool>>,
}

impl PartTreeTarget {
    pub fn empty() -> Self {
        Self {
            parts: Vec::new(),
            adjacency: Vec::new(),
        }
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }
}

/// A structural problem found by [`validate_tree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    /// `parts[part]` has a type outside the class's legal subset.
    IllegalPartType { part: usize, part_type: usize },
    /// More parts than the decoder can represent.
    TooManyParts { count: usize, max: usize },
    /// Adjacency matrix is not `len(parts)` square.
    AdjacencyShape { rows: usize, parts: usize },
    /// `adjacency[i][j] != adjacency[j][i]`.
    AsymmetricAdjacency { i: usize, j: usize },
    /// `adjacency[i][i]` is true.
    SelfAdjacency { i: usize },
    /// Mask is not a binary grid or disagrees on resolution.
    BadMask { part: usize },
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::IllegalPartType { part, part_type } => {
                write!(f, "part {part} has type {part_type} not allowed for this class")
            }
            TreeViolation::TooManyParts { count, max } => {
                write!(f, "part count {count} exceeds limit {max}")
            }
            TreeViolation::AdjacencyShape { rows, parts } => {
                write!(f, "adjacency matrix has {rows} rows for {parts} parts")
            }
            TreeViolation::AsymmetricAdjacency { i, j } => {
                write!(f, "adjacency between parts {i} and {j} is one-sided")
            }
            TreeViolation::SelfAdjacency { i } => {
                write!(f, "part {i} marked adjacent to itself")
            }
            TreeViolation::BadMask { part } => {
                write!(f, "part {part} mask is not binary or has a mismatched resolution")
            }
        }
    }
}

/// Checks a part tree against a class's schema. Returns every violation
/// found; an empty list means the tree is valid.
pub fn validate_tree(
    tree: &PartTreeTarget,
    class: usize,
    taxonomy: &Taxonomy,
) -> Vec<TreeViolation> {
    let mut violations = Vec::new();
    let spec = taxonomy.class(class);
    let n = tree.parts.len();

    if n > MAX_PARTS_PER_OBJECT {
        violations.push(TreeViolation::TooManyParts {
            count: n,
            max: MAX_PARTS_PER_OBJECT,
        });
    }
    for (i, part) in tree.parts.iter().enumerate() {
        if part.part_type >= taxonomy.part_count() || !spec.allows_part(part.part_type) {
            violations.push(TreeViolation::IllegalPartType {
                part: i,
                part_type: part.part_type,
            });
        }
        if part.mask.semantics() != GridSemantics::Binary
            || part.mask.resolution() != tree.parts[0].mask.resolution()
        {
            violations.push(TreeViolation::BadMask { part: i });
        }
    }

    if tree.adjacency.len() != n || tree.adjacency.iter().any(|row| row.len() != n) {
        violations.push(TreeViolation::AdjacencyShape {
            rows: tree.adjacency.len(),
            parts: n,
        });
        return violations;
    }
    for i in 0..n {
        if tree.adjacency[i][i] {
            violations.push(TreeViolation::SelfAdjacency { i });
        }
        for j in (i + 1)..n {
            if tree.adjacency[i][j] != tree.adjacency[j][i] {
                violations.push(TreeViolation::AsymmetricAdjacency { i, j });
            }
        }
    }
    violations
}

/// Default label space: six desk-scale furniture classes, 45 part types.
/// Cabinet and bookshelf intentionally share one part-type set.
pub const DEFAULT_TAXONOMY_DOC: &str = r#"
version = 1

part_types = [
    # chair
    "chair_seat",
    "chair_back",
    "chair_arm",
    "chair_leg",
    "chair_leg_bar",
    "chair_base",
    "chair_wheel",
    "chair_headrest",
    "chair_footrest",
    "chair_seat_frame",
    # table
    "table_top",
    "table_leg",
    "table_leg_bar",
    "table_base",
    "table_drawer",
    "table_shelf",
    "table_side_panel",
    "table_back_panel",
    "table_wheel",
    # storage furniture (cabinet and bookshelf)
    "storage_frame",
    "storage_shelf",
    "storage_door",
    "storage_drawer",
    "storage_back_panel",
    "storage_side_panel",
    "storage_top_panel",
    "storage_bottom_panel",
    "storage_base",
    "storage_leg",
    "storage_handle",
    "storage_divider",
    # bed
    "bed_frame",
    "bed_mattress",
    "bed_headboard",
    "bed_footboard",
    "bed_leg",
    "bed_slat",
    "bed_post",
    "bed_side_rail",
    # bin
    "bin_body",
    "bin_base",
    "bin_rim",
    "bin_lid",
    "bin_wheel",
    "bin_handle",
]

[[classes]]
name = "chair"
parts = [
    "chair_seat",
    "chair_back",
    "chair_arm",
    "chair_leg",
    "chair_leg_bar",
    "chair_base",
    "chair_wheel",
    "chair_headrest",
    "chair_footrest",
    "chair_seat_frame",
]
adjacent = [
    ["chair_seat", "chair_back"],
    ["chair_seat", "chair_arm"],
    ["chair_seat", "chair_leg"],
    ["chair_seat", "chair_base"],
    ["chair_seat", "chair_seat_frame"],
    ["chair_back", "chair_arm"],
    ["chair_back", "chair_headrest"],
    ["chair_leg", "chair_leg_bar"],
    ["chair_leg", "chair_wheel"],
    ["chair_leg_bar", "chair_leg_bar"],
    ["chair_leg_bar", "chair_footrest"],
    ["chair_base", "chair_wheel"],
    ["chair_base", "chair_footrest"],
    ["chair_seat_frame", "chair_leg"],
]

[[classes]]
name = "table"
parts = [
    "table_top",
    "table_leg",
    "table_leg_bar",
    "table_base",
    "table_drawer",
    "table_shelf",
    "table_side_panel",
    "table_back_panel",
    "table_wheel",
]
adjacent = [
    ["table_top", "table_leg"],
    ["table_top", "table_base"],
    ["table_top", "table_drawer"],
    ["table_top", "table_side_panel"],
    ["table_top", "table_back_panel"],
    ["table_leg", "table_leg_bar"],
    ["table_leg", "table_wheel"],
    ["table_leg_bar", "table_leg_bar"],
    ["table_base", "table_wheel"],
    ["table_drawer", "table_side_panel"],
    ["table_shelf", "table_leg"],
    ["table_shelf", "table_side_panel"],
    ["table_shelf", "table_back_panel"],
    ["table_side_panel", "table_back_panel"],
]

[[classes]]
name = "cabinet"
parts = [
    "storage_frame",
    "storage_shelf",
    "storage_door",
    "storage_drawer",
    "storage_back_panel",
    "storage_side_panel",
    "storage_top_panel",
    "storage_bottom_panel",
    "storage_base",
    "storage_leg",
    "storage_handle",
    "storage_divider",
]
adjacent = [
    ["storage_frame", "storage_shelf"],
    ["storage_frame", "storage_door"],
    ["storage_frame", "storage_drawer"],
    ["storage_frame", "storage_back_panel"],
    ["storage_frame", "storage_side_panel"],
    ["storage_frame", "storage_top_panel"],
    ["storage_frame", "storage_bottom_panel"],
    ["storage_frame", "storage_base"],
    ["storage_shelf", "storage_side_panel"],
    ["storage_shelf", "storage_back_panel"],
    ["storage_shelf", "storage_divider"],
    ["storage_door", "storage_handle"],
    ["storage_door", "storage_side_panel"],
    ["storage_drawer", "storage_handle"],
    ["storage_side_panel", "storage_top_panel"],
    ["storage_side_panel", "storage_back_panel"],
    ["storage_side_panel", "storage_bottom_panel"],
    ["storage_top_panel", "storage_back_panel"],
    ["storage_bottom_panel", "storage_back_panel"],
    ["storage_bottom_panel", "storage_leg"],
    ["storage_bottom_panel", "storage_base"],
    ["storage_divider", "storage_top_panel"],
    ["storage_divider", "storage_bottom_panel"],
]

[[classes]]
name = "bookshelf"
parts = [
    "storage_frame",
    "storage_shelf",
    "storage_door",
    "storage_drawer",
    "storage_back_panel",
    "storage_side_panel",
    "storage_top_panel",
    "storage_bottom_panel",
    "storage_base",
    "storage_leg",
    "storage_handle",
    "storage_divider",
]
adjacent = [
    ["storage_frame", "storage_shelf"],
    ["storage_frame", "storage_door"],
    ["storage_frame", "storage_drawer"],
    ["storage_frame", "storage_back_panel"],
    ["storage_frame", "storage_side_panel"],
    ["storage_frame", "storage_top_panel"],
    ["storage_frame", "storage_bottom_panel"],
    ["storage_frame", "storage_base"],
    ["storage_shelf", "storage_side_panel"],
    ["storage_shelf", "storage_back_panel"],
    ["storage_shelf", "storage_divider"],
    ["storage_door", "storage_handle"],
    ["storage_door", "storage_side_panel"],
    ["storage_drawer", "storage_handle"],
    ["storage_side_panel", "storage_top_panel"],
    ["storage_side_panel", "storage_back_panel"],
    ["storage_side_panel", "storage_bottom_panel"],
    ["storage_top_panel", "storage_back_panel"],
    ["storage_bottom_panel", "storage_back_panel"],
    ["storage_bottom_panel", "storage_leg"],
    ["storage_bottom_panel", "storage_base"],
    ["storage_divider", "storage_top_panel"],
    ["storage_divider", "storage_bottom_panel"],
]

[[classes]]
name = "bed"
parts = [
    "bed_frame",
    "bed_mattress",
    "bed_headboard",
    "bed_footboard",
    "bed_leg",
    "bed_slat",
    "bed_post",
    "bed_side_rail",
]
adjacent = [
    ["bed_frame", "bed_mattress"],
    ["bed_frame", "bed_headboard"],
    ["bed_frame", "bed_footboard"],
    ["bed_frame", "bed_leg"],
    ["bed_frame", "bed_slat"],
    ["bed_frame", "bed_side_rail"],
    ["bed_mattress", "bed_headboard"],
    ["bed_mattress", "bed_footboard"],
    ["bed_mattress", "bed_slat"],
    ["bed_headboard", "bed_post"],
    ["bed_footboard", "bed_post"],
    ["bed_leg", "bed_headboard"],
    ["bed_leg", "bed_footboard"],
    ["bed_side_rail", "bed_headboard"],
    ["bed_side_rail", "bed_footboard"],
]

[[classes]]
name = "bin"
parts = [
    "bin_body",
    "bin_base",
    "bin_rim",
    "bin_lid",
    "bin_wheel",
    "bin_handle",
]
adjacent = [
    ["bin_body", "bin_base"],
    ["bin_body", "bin_rim"],
    ["bin_body", "bin_handle"],
    ["bin_rim", "bin_lid"],
    ["bin_base", "bin_wheel"],
    ["bin_lid", "bin_handle"],
]
"#;

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_mask(part_type: usize) -> PartInstance {
        let mut mask = OccupancyGrid::zeros_binary(2);
        mask.set(0, 0, 0, 1.0);
        PartInstance { part_type, mask }
    }

    #[test]
    fn builtin_layout() {
        let tax = Taxonomy::builtin();
        assert_eq!(tax.class_count(), 6);
        assert_eq!(tax.part_count(), 45);
        let names: Vec<&str> = tax.classes().iter().map(|c| c.name()).collect();
        assert_eq!(
            names,
            ["chair", "table", "cabinet", "bookshelf", "bed", "bin"]
        );
    }

    #[test]
    fn cabinet_and_bookshelf_share_parts() {
        let tax = Taxonomy::builtin();
        let cabinet = tax.class(tax.class_index("cabinet").unwrap());
        let bookshelf = tax.class(tax.class_index("bookshelf").unwrap());
        assert_eq!(cabinet.part_types(), bookshelf.part_types());
    }

    #[test]
    fn part_name_index_bijection() {
        let tax = Taxonomy::builtin();
        for i in 0..tax.part_count() {
            assert_eq!(tax.part_index(tax.part_name(i)), Some(i));
        }
    }

    #[test]
    fn document_roundtrip_preserves_indices() {
        let tax = Taxonomy::builtin();
        let back = load_taxonomy(&tax.to_document()).unwrap();
        assert_eq!(back, tax);
        assert_eq!(back.content_hash(), tax.content_hash());
    }

    #[test]
    fn toy_single_class_counts() {
        let doc = r#"
            version = 1
            part_types = ["seat", "back", "leg"]
            [[classes]]
            name = "chair"
            parts = ["seat", "back", "leg"]
        "#;
        let tax = load_taxonomy(doc).unwrap();
        assert_eq!(tax.part_count(), 3);
        assert_eq!(tax.class_count(), 1);
    }

    #[test]
    fn duplicate_part_name_rejected() {
        let doc = r#"
            version = 1
            part_types = ["seat", "seat"]
            [[classes]]
            name = "chair"
            parts = ["seat"]
        "#;
        match load_taxonomy(doc) {
            Err(TaxonomyError::DuplicatePartType(name)) => assert_eq!(name, "seat"),
            other => panic!("expected duplicate-part error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_part_in_class_rejected() {
        let doc = r#"
            version = 1
            part_types = ["seat"]
            [[classes]]
            name = "chair"
            parts = ["seat", "wing"]
        "#;
        assert!(matches!(
            load_taxonomy(doc),
            Err(TaxonomyError::UnknownPart { .. })
        ));
    }

    #[test]
    fn orphan_part_rejected() {
        let doc = r#"
            version = 1
            part_types = ["seat", "wing"]
            [[classes]]
            name = "chair"
            parts = ["seat"]
        "#;
        match load_taxonomy(doc) {
            Err(TaxonomyError::OrphanPartType(name)) => assert_eq!(name, "wing"),
            other => panic!("expected orphan-part error, got {other:?}"),
        }
    }

    #[test]
    fn empty_class_rejected() {
        let doc = r#"
            version = 1
            part_types = ["seat"]
            [[classes]]
            name = "chair"
            parts = ["seat"]
            [[classes]]
            name = "stool"
            parts = []
        "#;
        assert!(matches!(
            load_taxonomy(doc),
            Err(TaxonomyError::EmptyClass(name)) if name == "stool"
        ));
    }

    #[test]
    fn adjacency_outside_class_rejected() {
        let doc = r#"
            version = 1
            part_types = ["seat", "top"]
            [[classes]]
            name = "chair"
            parts = ["seat"]
            adjacent = [["seat", "top"]]
            [[classes]]
            name = "table"
            parts = ["top"]
        "#;
        assert!(matches!(
            load_taxonomy(doc),
            Err(TaxonomyError::AdjacencyOutsideClass { .. })
        ));
    }

    #[test]
    fn empty_tree_is_valid() {
        let tax = Taxonomy::builtin();
        assert!(validate_tree(&PartTreeTarget::empty(), 0, &tax).is_empty());
    }

    #[test]
    fn foreign_part_type_flagged() {
        let tax = Taxonomy::builtin();
        let chair = tax.class_index("chair").unwrap();
        let table_top = tax.part_index("table_top").unwrap();
        let tree = PartTreeTarget {
            parts: vec![unit_mask(table_top)],
            adjacency: vec![vec![false]],
        };
        let violations = validate_tree(&tree, chair, &tax);
        assert_eq!(
            violations,
            vec![TreeViolation::IllegalPartType {
                part: 0,
                part_type: table_top
            }]
        );
    }

    #[test]
    fn part_count_limit_enforced() {
        let tax = Taxonomy::builtin();
        let chair = tax.class_index("chair").unwrap();
        let seat = tax.part_index("chair_seat").unwrap();
        let n = 11;
        let tree = PartTreeTarget {
            parts: (0..n).map(|_| unit_mask(seat)).collect(),
            adjacency: vec![vec![false; n]; n],
        };
        let violations = validate_tree(&tree, chair, &tax);
        assert!(violations.contains(&TreeViolation::TooManyParts { count: 11, max: 10 }));
        assert_eq!(violations.len(), 1);
    }

    #[test]
    fn asymmetric_adjacency_flagged() {
        let tax = Taxonomy::builtin();
        let seat = tax.part_index("chair_seat").unwrap();
        let back = tax.part_index("chair_back").unwrap();
        let mut adjacency = vec![vec![false; 2]; 2];
        adjacency[0][1] = true;
        let tree = PartTreeTarget {
            parts: vec![unit_mask(seat), unit_mask(back)],
            adjacency,
        };
        let violations = validate_tree(&tree, 0, &tax);
        assert_eq!(
            violations,
            vec![TreeViolation::AsymmetricAdjacency { i: 0, j: 1 }]
        );
    }

    #[test]
    fn self_adjacency_flagged() {
        let tax = Taxonomy::builtin();
        let seat = tax.part_index("chair_seat").unwrap();
        let tree = PartTreeTarget {
            parts: vec![unit_mask(seat)],
            adjacency: vec![vec![true]],
        };
        assert_eq!(
            validate_tree(&tree, 0, &tax),
            vec![TreeViolation::SelfAdjacency { i: 0 }]
        );
    }

    #[test]
    fn allowed_adjacency_lookup_is_symmetric() {
        let tax = Taxonomy::builtin();
        let chair = tax.class(0);
        let seat = tax.part_index("chair_seat").unwrap();
        let back = tax.part_index("chair_back").unwrap();
        let wheel = tax.part_index("chair_wheel").unwrap();
        assert!(chair.allows_adjacency(seat, back));
        assert!(chair.allows_adjacency(back, seat));
        assert!(!chair.allows_adjacency(seat, wheel));
    }
}
