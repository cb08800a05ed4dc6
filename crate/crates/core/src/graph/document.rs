use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Edge, GraphNode, NetworkGraph, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tensor};

pub const GRAPH_DOCUMENT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub label: String,
    pub scale: i32,
    pub insertion_index: usize,
    pub out_shape: Vec<usize>,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
}

/// Structure of a graph. Tensor values live in a companion [`Checkpoint`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub version: u32,
    pub nodes: Vec<NodeDocument>,
    pub edges: Vec<Edge>,
    /// File stem of the parameter checkpoint, relative to the document.
    pub parameters: String,
}

fn param_name(id: NodeId, key: &str) -> String {
    format!("n{id}.{key}")
}

fn buffer_name(id: NodeId, key: &str) -> String {
    format!("n{id}.buffer.{key}")
}

pub fn serialize(g: &NetworkGraph) -> (GraphDocument, Checkpoint) {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let nodes = g
        .ordered()
        .into_iter()
        .map(|n| {
            for (k, t) in &n.params {
                tensors.push((param_name(n.id, k), t));
            }
            for (k, t) in &n.buffers {
                tensors.push((buffer_name(n.id, k), t));
            }
            NodeDocument {
                id: n.id,
                kind: n.kind.clone(),
                label: n.label.clone(),
                scale: n.scale,
                insertion_index: n.insertion_index,
                out_shape: n.out_shape.clone(),
                params: n.params.keys().cloned().collect(),
                buffers: n.buffers.keys().cloned().collect(),
            }
        })
        .collect();
    let doc = GraphDocument {
        version: GRAPH_DOCUMENT_VERSION,
        nodes,
        edges: g.edges().to_vec(),
        parameters: String::new(),
    };
    (doc, Checkpoint::from_tensors(tensors))
}

pub fn deserialize(doc: &GraphDocument, ck: &Checkpoint) -> Result<NetworkGraph> {
    if doc.version != GRAPH_DOCUMENT_VERSION {
        return Err(Error::VersionMismatch {
            found: doc.version,
            expected: GRAPH_DOCUMENT_VERSION,
        });
    }
    let mut tensors: BTreeMap<String, Tensor> = ck.tensors()?.into_iter().collect();
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")));
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        let mut params = BTreeMap::new();
        for k in &nd.params {
            params.insert(k.clone(), take(param_name(nd.id, k))?);
        }
        let mut buffers = BTreeMap::new();
        for k in &nd.buffers {
            buffers.insert(k.clone(), take(buffer_name(nd.id, k))?);
        }
        nodes.push(GraphNode {
            id: nd.id,
            kind: nd.kind.clone(),
            label: nd.label.clone(),
            params,
            buffers,
            scale: nd.scale,
            insertion_index: nd.insertion_index,
            out_shape: nd.out_shape.clone(),
        });
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Malformed(format!("tensor `{name}` belongs to no node")));
    }
    NetworkGraph::from_parts(nodes, doc.edges.clone())
}

fn document_path(stem: &Path) -> PathBuf {
    PathBuf::from(format!("{}.graph.json", stem.as_os_str().to_string_lossy()))
}

/// Writes `<stem>.graph.json` plus the `<stem>.params.*` checkpoint.
pub fn save_graph(g: &NetworkGraph, stem: &Path) -> Result<()> {
    let (mut doc, ck) = serialize(g);
    doc.parameters = stem
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let path = document_path(stem);
    fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
    ck.save(stem)
}

pub fn load_graph(stem: &Path) -> Result<NetworkGraph> {
    let path = document_path(stem);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let doc: GraphDocument = serde_json::from_slice(&text)?;
    let params_stem = match stem.parent() {
        Some(dir) if !doc.parameters.is_empty() => dir.join(&doc.parameters),
        _ => stem.to_path_buf(),
    };
    deserialize(&doc, &Checkpoint::load(&params_stem)?)
}
