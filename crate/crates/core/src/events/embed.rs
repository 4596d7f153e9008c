use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Splits `grid: [S, S, C]` into row-major non-overlapping patches, projects
/// each with `w_e: [patch·patch·C, D]` and adds `pos: [(S/patch)², D]`.
pub fn patch_embed(g: &mut Graph, grid: Var, patch: usize, w_e: Var, pos: Var) -> Result<Var> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 3 || patch == 0 || shape[0] % patch != 0 {
        return Err(Error::Param(format!(
            "patch size {patch} does not divide grid {shape:?}"
        )));
    }
    let patches = g.patchify(grid, patch)?;
    let tokens = g.matmul(patches, w_e)?;
    if g.shape(pos) != g.shape(tokens) {
        return Err(Error::shape("patch_embed", g.shape(tokens), g.shape(pos)));
    }
    g.add(tokens, pos)
}
