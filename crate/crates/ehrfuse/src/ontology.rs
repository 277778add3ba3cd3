//! Two-level diagnosis-code hierarchy: leaf codes, parent categories, and the
//! multi-hot label vectors built from them.
//!
//! Edge files are plain UTF-8 text, one record per line:
//!
//! ```text
//! # comment
//! P01            <- declares a parent (used by the canonical emitter)
//! D0001 P01      <- leaf -> parent edge
//! ```
//!
//! Indices are dense and assigned by first appearance, so parsing the
//! canonical emitted form reproduces the ontology exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: leaf {leaf:?} maps to both {first:?} and {second:?}")]
    ConflictingParent {
        line: usize,
        leaf: String,
        first: String,
        second: String,
    },
    #[error("line {line}: expected `leaf parent` or a bare parent id, got {got:?}")]
    Malformed { line: usize, got: String },
    #[error("ontology is empty")]
    Empty,
    #[error("leaf index {index} out of range (|C| = {leaves})")]
    LeafOutOfRange { index: usize, leaves: usize },
}

/// Which label space a multi-hot vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSpace {
    Leaf,
    Parent,
}

/// Multi-hot 0/1 vector over one of the two label spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub bits: Vec<u8>,
    pub space: LabelSpace,
}

impl LabelVector {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|b| *b as f64).collect()
    }
}

/// Immutable two-level code hierarchy with dense index spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Ontology {
    leaf_codes: Vec<String>,
    parent_codes: Vec<String>,
    parent_of: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl Ontology {
    /// Builds an ontology from `(leaf, parent)` string pairs, assigning
    /// indices by first appearance. Duplicate identical edges are idempotent;
    /// a leaf with two distinct parents is an error.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self, OntologyError> {
        let mut builder = Builder::default();
        for (line, (leaf, parent)) in edges.iter().enumerate() {
            builder.edge(line + 1, leaf.as_ref(), parent.as_ref())?;
        }
        builder.finish()
    }

    pub fn parse_str(text: &str) -> Result<Self, OntologyError> {
        let mut builder = Builder::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let mut fields = stripped.split_whitespace();
            match (fields.next(), fields.next(), fields.next()) {
                (None, _, _) => {}
                (Some(parent), None, _) => builder.declare_parent(parent),
                (Some(leaf), Some(parent), None) => builder.edge(line, leaf, parent)?,
                _ => {
                    return Err(OntologyError::Malformed {
                        line,
                        got: raw.to_string(),
                    })
                }
            }
        }
        builder.finish()
    }

    pub fn parse_file(path: &Path) -> Result<Self, OntologyError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form: parent declarations in index order, then one edge
    /// per leaf in leaf-index order. `parse_str(emit(o)) == o`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for p in &self.parent_codes {
            let _ = writeln!(out, "{p}");
        }
        for (i, leaf) in self.leaf_codes.iter().enumerate() {
            let _ = writeln!(out, "{leaf} {}", self.parent_codes[self.parent_of[i]]);
        }
        out
    }

    pub fn emit_file(&self, path: &Path) -> Result<(), OntologyError> {
        std::fs::write(path, self.emit())?;
        Ok(())
    }

    pub fn leaves(&self) -> usize {
        self.leaf_codes.len()
    }

    pub fn parents(&self) -> usize {
        self.parent_codes.len()
    }

    pub fn leaf_code(&self, index: usize) -> &str {
        &self.leaf_codes[index]
    }

    pub fn parent_code(&self, index: usize) -> &str {
        &self.parent_codes[index]
    }

    pub fn parent_of(&self, leaf: usize) -> usize {
        self.parent_of[leaf]
    }

    pub fn children_of(&self, parent: usize) -> &[usize] {
        &self.children[parent]
    }

    /// Multi-hot vector over the leaf space with exactly `codes.len()` ones
    /// (for deduplicated inputs).
    pub fn leaf_label_vector(&self, codes: &[usize]) -> Result<LabelVector, OntologyError> {
        let mut bits = vec![0u8; self.leaves()];
        for &c in codes {
            if c >= self.leaves() {
                return Err(OntologyError::LeafOutOfRange {
                    index: c,
                    leaves: self.leaves(),
                });
            }
            bits[c] = 1;
        }
        Ok(LabelVector {
            bits,
            space: LabelSpace::Leaf,
        })
    }

    /// Multi-hot vector over the parent space: bit `j` is set iff some code
    /// in the set has parent `j`.
    pub fn ancestor_label_vector(&self, codes: &[usize]) -> Result<LabelVector, OntologyError> {
        let mut bits = vec![0u8; self.parents()];
        for &c in codes {
            if c >= self.leaves() {
                return Err(OntologyError::LeafOutOfRange {
                    index: c,
                    leaves: self.leaves(),
                });
            }
            bits[self.parent_of[c]] = 1;
        }
        Ok(LabelVector {
            bits,
            space: LabelSpace::Parent,
        })
    }
}

#[derive(Default)]
struct Builder {
    leaf_ids: HashMap<String, usize>,
    parent_ids: HashMap<String, usize>,
    leaf_codes: Vec<String>,
    parent_codes: Vec<String>,
    parent_of: Vec<usize>,
}

impl Builder {
    fn declare_parent(&mut self, parent: &str) {
        if !self.parent_ids.contains_key(parent) {
            self.parent_ids
                .insert(parent.to_string(), self.parent_codes.len());
            self.parent_codes.push(parent.to_string());
        }
    }

    fn edge(&mut self, line: usize, leaf: &str, parent: &str) -> Result<(), OntologyError> {
        self.declare_parent(parent);
        let pid = self.parent_ids[parent];
        match self.leaf_ids.get(leaf) {
            Some(&lid) => {
                if self.parent_of[lid] != pid {
                    return Err(OntologyError::ConflictingParent {
                        line,
                        leaf: leaf.to_string(),
                        first: self.parent_codes[self.parent_of[lid]].clone(),
                        second: parent.to_string(),
                    });
                }
            }
            None => {
                self.leaf_ids.insert(leaf.to_string(), self.leaf_codes.len());
                self.leaf_codes.push(leaf.to_string());
                self.parent_of.push(pid);
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Ontology, OntologyError> {
        if self.leaf_codes.is_empty() {
            return Err(OntologyError::Empty);
        }
        let mut children = vec![Vec::new(); self.parent_codes.len()];
        for (leaf, &p) in self.parent_of.iter().enumerate() {
            children[p].push(leaf);
        }
        for (p, kids) in children.iter().enumerate() {
            if kids.is_empty() {
                log::warn!(
                    "parent {:?} has no children; retained",
                    self.parent_codes[p]
                );
            }
        }
        Ok(Ontology {
            leaf_codes: self.leaf_codes,
            parent_codes: self.parent_codes,
            parent_of: self.parent_of,
            children,
        })
    }
}
