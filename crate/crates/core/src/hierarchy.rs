//! High-level concepts, the low-level attribute pool and the membership
//! matrix `B` (L_all×H) that links them.
//!
//! Both layouts share the same runtime form. In the general layout each
//! high concept owns a private block of `L` attributes, so `B[l,h] = 1` iff
//! `l / L == h`; in the shared layout `B` is any binary matrix whose columns
//! are non-empty.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfcbmError, Result};
use crate::numerics::Matrix;
use crate::store::ConceptEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    General,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHierarchy {
    pub high_names: Vec<String>,
    pub low_names: Vec<String>,
    /// L_all×H, entries in {0, 1}.
    pub membership: Matrix,
    pub layout: Layout,
    /// `L` for the general layout.
    pub per_concept_arity: Option<usize>,
}

/// On-disk manifest: concept names plus, for each high concept, the indices
/// of the low-level attributes it owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub high: Vec<String>,
    pub low: Vec<String>,
    pub layout: Layout,
    pub membership: Vec<Vec<usize>>,
}

impl ConceptHierarchy {
    pub fn n_high(&self) -> usize {
        self.high_names.len()
    }

    pub fn n_low(&self) -> usize {
        self.low_names.len()
    }

    pub fn build_general(
        high_names: Vec<String>,
        per_concept_attributes: Vec<Vec<String>>,
    ) -> Result<Self> {
        if per_concept_attributes.len() != high_names.len() {
            return Err(CfcbmError::Arity(format!(
                "{} attribute lists for {} high-level concepts",
                per_concept_attributes.len(),
                high_names.len()
            )));
        }
        let arity = per_concept_attributes.first().map_or(0, Vec::len);
        if arity == 0 {
            return Err(CfcbmError::Arity(
                "high-level concepts need at least one attribute".into(),
            ));
        }
        if let Some((h, list)) = per_concept_attributes
            .iter()
            .enumerate()
            .find(|(_, l)| l.len() != arity)
        {
            return Err(CfcbmError::Arity(format!(
                "concept {h} has {} attributes, expected {arity}",
                list.len()
            )));
        }
        let h_count = high_names.len();
        let mut membership = Matrix::zeros(h_count * arity, h_count);
        for h in 0..h_count {
            for j in 0..arity {
                membership[(h * arity + j, h)] = 1.0;
            }
        }
        Ok(ConceptHierarchy {
            high_names,
            low_names: per_concept_attributes.into_iter().flatten().collect(),
            membership,
            layout: Layout::General,
            per_concept_arity: Some(arity),
        })
    }

    pub fn build_shared(
        high_names: Vec<String>,
        low_names: Vec<String>,
        class_to_attrs: &BTreeMap<usize, BTreeSet<usize>>,
    ) -> Result<Self> {
        let (h_count, l_count) = (high_names.len(), low_names.len());
        if let Some(&h) = class_to_attrs.keys().find(|&&h| h >= h_count) {
            return Err(CfcbmError::Index(format!(
                "high-level index {h} with {h_count} concepts"
            )));
        }
        let mut membership = Matrix::zeros(l_count, h_count);
        for h in 0..h_count {
            let attrs = match class_to_attrs.get(&h) {
                Some(a) if !a.is_empty() => a,
                _ => {
                    return Err(CfcbmError::Coverage(format!(
                        "high-level concept {h} ({}) has no attributes",
                        high_names[h]
                    )))
                }
            };
            for &l in attrs {
                if l >= l_count {
                    return Err(CfcbmError::Index(format!(
                        "attribute index {l} for concept {h} with {l_count} attributes"
                    )));
                }
                membership[(l, h)] = 1.0;
            }
        }
        Ok(ConceptHierarchy {
            high_names,
            low_names,
            membership,
            layout: Layout::Shared,
            per_concept_arity: None,
        })
    }

    /// Reads the attribute sets back out of `B`.
    pub fn class_to_attrs(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        (0..self.n_high())
            .map(|h| {
                let set = (0..self.n_low())
                    .filter(|&l| self.membership[(l, h)] == 1.0)
                    .collect();
                (h, set)
            })
            .collect()
    }

    /// Checks the structural invariants on their own.
    pub fn check(&self) -> Result<()> {
        let (h_count, l_count) = (self.n_high(), self.n_low());
        if self.membership.shape() != (l_count, h_count) {
            return Err(CfcbmError::Validation(format!(
                "membership is {}x{}, expected {l_count}x{h_count}",
                self.membership.rows(),
                self.membership.cols()
            )));
        }
        if let Some(&x) = self
            .membership
            .data()
            .iter()
            .find(|&&x| x != 0.0 && x != 1.0)
        {
            return Err(CfcbmError::Validation(format!(
                "membership entry {x} is not binary"
            )));
        }
        for h in 0..h_count {
            if (0..l_count).all(|l| self.membership[(l, h)] == 0.0) {
                return Err(CfcbmError::Validation(format!(
                    "high-level concept {h} has no attributes"
                )));
            }
        }
        if self.layout == Layout::General {
            let arity = self.per_concept_arity.ok_or_else(|| {
                CfcbmError::Validation("general layout without per-concept arity".into())
            })?;
            if l_count != h_count * arity {
                return Err(CfcbmError::Validation(format!(
                    "general layout needs {h_count}x{arity} attributes, found {l_count}"
                )));
            }
            for l in 0..l_count {
                for h in 0..h_count {
                    let expected = if l / arity == h { 1.0 } else { 0.0 };
                    if self.membership[(l, h)] != expected {
                        return Err(CfcbmError::Validation(format!(
                            "general layout is not block structured at ({l}, {h})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self, concepts: &ConceptEmbeddings) -> Result<()> {
        if concepts.high.rows() != self.n_high() {
            return Err(CfcbmError::Validation(format!(
                "{} high-level names but {} high-level embeddings",
                self.n_high(),
                concepts.high.rows()
            )));
        }
        if concepts.low.rows() != self.n_low() {
            return Err(CfcbmError::Validation(format!(
                "{} low-level names but {} low-level embeddings",
                self.n_low(),
                concepts.low.rows()
            )));
        }
        self.check()
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest {
            high: self.high_names.clone(),
            low: self.low_names.clone(),
            layout: self.layout,
            membership: self
                .class_to_attrs()
                .into_values()
                .map(|s| s.into_iter().collect())
                .collect(),
        }
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        if m.membership.len() != m.high.len() {
            return Err(CfcbmError::Validation(format!(
                "manifest lists membership for {} of {} high-level concepts",
                m.membership.len(),
                m.high.len()
            )));
        }
        let map: BTreeMap<usize, BTreeSet<usize>> = m
            .membership
            .iter()
            .enumerate()
            .map(|(h, ls)| (h, ls.iter().copied().collect()))
            .collect();
        let mut hierarchy = Self::build_shared(m.high.clone(), m.low.clone(), &map)?;
        if m.layout == Layout::General {
            if m.high.is_empty() || !m.low.len().is_multiple_of(m.high.len()) {
                return Err(CfcbmError::Validation(format!(
                    "general layout with {} attributes over {} concepts",
                    m.low.len(),
                    m.high.len()
                )));
            }
            hierarchy.layout = Layout::General;
            hierarchy.per_concept_arity = Some(m.low.len() / m.high.len());
            hierarchy.check()?;
        }
        Ok(hierarchy)
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CfcbmError::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Self::from_manifest(&manifest)
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_manifest())?;
        fs::write(path, text).map_err(|e| CfcbmError::io(path, e))
    }
}
