//! Model persistence: the binary tensor container and the text graph manifest.

pub mod container;
pub mod graph;

pub use container::{
    decode_container, encode_container, load_container, pack_ternary, save_container, unpack_ternary, DType,
    TensorRecord, TensorStore,
};
pub use graph::{load_graph, BnRefs, InputSpec, LayerKind, LayerShape, LayerSpec, ModelGraph, WeightQuant};

use std::path::Path;

use crate::error::Result;

/// A graph together with the tensors it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: ModelGraph,
    pub tensors: TensorStore,
}

impl Model {
    /// Build and validate.
    pub fn new(graph: ModelGraph, tensors: TensorStore) -> Result<Self> {
        graph.validate(&tensors)?;
        Ok(Self { graph, tensors })
    }

    pub fn load(manifest: impl AsRef<Path>, container: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_graph(manifest)?, TensorStore::load(container)?)
    }

    pub fn save(&self, manifest: impl AsRef<Path>, container: impl AsRef<Path>) -> Result<()> {
        self.graph.save(manifest)?;
        self.tensors.save(container)
    }

    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        self.graph.shapes()
    }
}
