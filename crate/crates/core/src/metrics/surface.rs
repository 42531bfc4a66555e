use super::TriMesh;
use crate::error::{Error, Result};
use crate::registration::KdTree;

/// Directed vertex-to-vertex surface distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistance {
    /// One entry per vertex of the `from` mesh (mm).
    pub per_vertex: Vec<f64>,
    /// Unweighted mean over `per_vertex`.
    pub mean: f64,
}

/// For each vertex of `from`, the distance to the closest vertex of `to`.
/// Directional: call twice for the symmetric pair.
pub fn surface_distance(from: &TriMesh, to: &TriMesh) -> Result<SurfaceDistance> {
    if from.vertices.is_empty() || from.is_empty() {
        return Err(Error::EmptyInput("surface distance source mesh"));
    }
    if to.vertices.is_empty() || to.is_empty() {
        return Err(Error::EmptyInput("surface distance target mesh"));
    }
    let tree = KdTree::build(&to.vertices);
    let per_vertex: Vec<f64> = from
        .vertices
        .iter()
        .map(|&p| tree.nearest(p).expect("non-empty").1.sqrt())
        .collect();
    let mean = per_vertex.iter().sum::<f64>() / per_vertex.len() as f64;
    Ok(SurfaceDistance { per_vertex, mean })
}
