//! Layer mappings, projections and the distillation losses.

mod losses;
mod mapping;
mod projection;
mod spec;

pub use losses::{
    concat_resplit, cosine_hs_loss, direct_minilm_loss, gram_mse_loss, hs_loss, minilmv2_loss, od_loss, projected_mse,
    relation_logits, relation_matrix, Objective,
};
pub use mapping::{LayerMapping, MappingStrategy};
pub use projection::{orthonormalize_rows, BoundProjections, ProjectionBank, ProjectionKey};
pub use spec::{
    DistillSpec, Method, OdPositions, ProjectionInit, TeacherLayer, EXPLORED_TEACHER_OFFSETS, MINILMV2_RELATION_HEADS,
};
