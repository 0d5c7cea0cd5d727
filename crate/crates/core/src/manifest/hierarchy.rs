use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ManifestError, BOY, GIRL, MAN, PERSON, WOMAN};

/// Node of a class tree, in the Open Images `bbox_labels_hierarchy.json` shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassNode {
    #[serde(rename = "LabelName")]
    pub name: String,
    #[serde(rename = "Subcategory", default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ClassNode>,
}

impl ClassNode {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self { name: name.into(), children: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassHierarchy {
    root: ClassNode,
    // name -> direct children, across every occurrence of the name
    children: BTreeMap<String, BTreeSet<String>>,
}

impl ClassHierarchy {
    pub fn new(root: ClassNode) -> Self {
        let mut children = BTreeMap::new();
        index(&root, &mut children);
        Self { root, children }
    }

    /// `Person` with `Man`, `Woman`, `Boy` and `Girl` beneath it.
    pub fn person_default() -> Self {
        Self::new(ClassNode {
            name: PERSON.into(),
            children: [MAN, WOMAN, BOY, GIRL].into_iter().map(ClassNode::leaf).collect(),
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
        let root: ClassNode = serde_json::from_str(&text)
            .map_err(|e| ManifestError::Schema { line: e.line(), reason: e.to_string() })?;
        Ok(Self::new(root))
    }

    pub fn root(&self) -> &ClassNode {
        &self.root
    }

    /// Rename every node through `names`; names missing from the map are kept.
    pub fn renamed(&self, names: &BTreeMap<String, String>) -> Self {
        fn walk(node: &ClassNode, names: &BTreeMap<String, String>) -> ClassNode {
            ClassNode {
                name: names.get(&node.name).cloned().unwrap_or_else(|| node.name.clone()),
                children: node.children.iter().map(|c| walk(c, names)).collect(),
            }
        }
        Self::new(walk(&self.root, names))
    }

    pub fn contains(&self, class_name: &str) -> bool {
        self.children.contains_key(class_name)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.children.keys().map(String::as_str)
    }

    /// All transitive descendants of `class_name`, excluding itself.
    pub fn subordinates(&self, class_name: &str) -> Result<BTreeSet<String>, ManifestError> {
        if !self.contains(class_name) {
            return Err(ManifestError::UnknownClass(class_name.to_string()));
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![class_name.to_string()];
        while let Some(name) = stack.pop() {
            for child in self.children.get(&name).into_iter().flatten() {
                if out.insert(child.clone()) {
                    stack.push(child.clone());
                }
            }
        }
        out.remove(class_name);
        Ok(out)
    }
}

fn index(node: &ClassNode, children: &mut BTreeMap<String, BTreeSet<String>>) {
    let entry = children.entry(node.name.clone()).or_default();
    entry.extend(node.children.iter().map(|c| c.name.clone()));
    for child in &node.children {
        index(child, children);
    }
}

/// Free-function form of [`ClassHierarchy::subordinates`].
pub fn hierarchy_subordinates(
    class_name: &str,
    hierarchy: &ClassHierarchy,
) -> Result<BTreeSet<String>, ManifestError> {
    hierarchy.subordinates(class_name)
}
