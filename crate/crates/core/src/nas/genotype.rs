//! Discretized cell descriptions and their on-disk container.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Fpn,
    Cpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRule {
    /// Concatenate every intermediate node.
    CatAll,
    /// Concatenate only the sink nodes.
    CatLeaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenoEdge {
    /// Source id: 0 is the cell input, 1..=N are intermediate nodes.
    pub input: usize,
    /// Index into the candidate op set's declared order.
    pub op: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenoNode {
    pub id: usize,
    pub inputs: Vec<GenoEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub cell_kind: CellKind,
    pub width: usize,
    pub nodes: Vec<GenoNode>,
    pub output_rule: OutputRule,
}

impl Genotype {
    /// DAG + connectivity checks.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::config("genotype has no nodes"));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i + 1 {
                return Err(Error::config(format!(
                    "node ids must be 1..=N in order, got {} at position {i}",
                    node.id
                )));
            }
            if node.inputs.is_empty() {
                return Err(Error::config(format!("node {} is disconnected", node.id)));
            }
            for e in &node.inputs {
                if e.input >= node.id {
                    return Err(Error::config(format!(
                        "node {} input {} is not strictly smaller",
                        node.id, e.input
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nodes that feed no other node.
    pub fn leaves(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(|e| e.input))
            .collect();
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|id| !used.contains(id))
            .collect()
    }

    /// Node ids concatenated at the output under the configured rule.
    pub fn output_nodes(&self) -> Vec<usize> {
        match self.output_rule {
            OutputRule::CatAll => self.nodes.iter().map(|n| n.id).collect(),
            OutputRule::CatLeaf => self.leaves(),
        }
    }

    /// Channel width of the concatenation before the 1x1 projection.
    pub fn concat_width(&self) -> usize {
        self.output_nodes().len() * self.width
    }

    /// A deterministic fallback cell: a chain of 3x3 convs with a skip
    /// from the cell input on every node. Used when no search result is
    /// available (e.g. cost accounting for the scale family).
    pub fn default_chain(
        cell_kind: CellKind,
        n_nodes: usize,
        width: usize,
        output_rule: OutputRule,
        conv_op: usize,
        skip_op: usize,
    ) -> Self {
        let nodes = (1..=n_nodes)
            .map(|id| GenoNode {
                id,
                inputs: if id == 1 {
                    vec![GenoEdge {
                        input: 0,
                        op: conv_op,
                    }]
                } else {
                    vec![
                        GenoEdge {
                            input: id - 1,
                            op: conv_op,
                        },
                        GenoEdge {
                            input: 0,
                            op: skip_op,
                        },
                    ]
                },
            })
            .collect();
        Self {
            cell_kind,
            width,
            nodes,
            output_rule,
        }
    }
}

/// On-disk container for one genotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeFile {
    pub version: u32,
    pub op_set_signature: String,
    pub genotype: Genotype,
}

pub const GENOTYPE_FILE_VERSION: u32 = 1;

impl GenotypeFile {
    pub fn new(genotype: Genotype, op_set_signature: String) -> Self {
        Self {
            version: GENOTYPE_FILE_VERSION,
            op_set_signature,
            genotype,
        }
    }

    pub fn to_string_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string_pretty()?)?;
        Ok(())
    }

    /// Load and check the op-set signature against the expected one.
    pub fn load(path: &Path, expected_signature: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GenotypeFile = serde_json::from_str(&text)?;
        if file.op_set_signature != expected_signature {
            return Err(Error::data(format!(
                "genotype {} was produced with a different op set",
                path.display()
            )));
        }
        file.genotype.validate()?;
        Ok(file)
    }
}
