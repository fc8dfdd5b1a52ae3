//! Sparse object-centric scene graph: one node per object carrying its
//! embedding, edges between centroids closer than a distance threshold.

use nalgebra::Point3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::SceneBundle;

/// Default centroid distance below which two objects are connected (m).
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub object_id: String,
    pub centroid: Point3<f64>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    /// Node indices with `endpoints.0 < endpoints.1`.
    pub endpoints: (usize, usize),
    pub length: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub edge_threshold: f64,
    // dense n×n lookup into `edges`
    adjacency: Vec<Option<usize>>,
}

impl SceneGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&GraphEdge> {
        let n = self.nodes.len();
        if a >= n || b >= n {
            return None;
        }
        self.adjacency[a * n + b].map(|e| &self.edges[e])
    }

    pub fn node_index(&self, object_id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.object_id == object_id)
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.nodes.len();
        (0..n).filter(move |&j| self.adjacency[node * n + j].is_some())
    }

    /// JSON debug dump of node ids/centroids and edge index pairs/lengths.
    pub fn debug_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct NodeDump<'a> {
            id: &'a str,
            centroid: [f64; 3],
        }
        #[derive(Serialize)]
        struct EdgeDump {
            endpoints: [usize; 2],
            length: f64,
        }
        serde_json::json!({
            "edge_threshold": self.edge_threshold,
            "nodes": self.nodes.iter().map(|n| NodeDump {
                id: &n.object_id,
                centroid: [n.centroid.x, n.centroid.y, n.centroid.z],
            }).collect::<Vec<_>>(),
            "edges": self.edges.iter().map(|e| EdgeDump {
                endpoints: [e.endpoints.0, e.endpoints.1],
                length: e.length,
            }).collect::<Vec<_>>(),
        })
    }
}

/// Builds the scene graph. Nodes follow scene object order; an edge joins
/// two objects iff their centroid distance is strictly below
/// `edge_threshold`, and its feature is the mean of the endpoint embeddings.
pub fn build_graph(scene: &SceneBundle, edge_threshold: f64) -> Result<SceneGraph> {
    if !(edge_threshold > 0.0) {
        return Err(Error::invalid(format!("edge threshold must be positive, got {edge_threshold}")));
    }
    let nodes: Vec<GraphNode> = scene
        .objects
        .iter()
        .map(|o| GraphNode {
            object_id: o.object_id.clone(),
            centroid: o.centroid,
            feature: o.embedding.clone(),
        })
        .collect();

    let n = nodes.len();
    let mut edges = Vec::new();
    let mut adjacency = vec![None; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let length = (nodes[i].centroid - nodes[j].centroid).norm();
            if length < edge_threshold {
                let feature = nodes[i]
                    .feature
                    .iter()
                    .zip(&nodes[j].feature)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                adjacency[i * n + j] = Some(edges.len());
                adjacency[j * n + i] = Some(edges.len());
                edges.push(GraphEdge {
                    endpoints: (i, j),
                    length,
                    feature,
                });
            }
        }
    }
    Ok(SceneGraph {
        nodes,
        edges,
        edge_threshold,
        adjacency,
    })
}
