//! Attention maps, t-SNE and confidence-driven capture feedback.

mod attention;
mod boundary;
mod feedback;
mod tsne;

pub use attention::{
    occlusion_cells, occlusion_map, radial_focus, radial_report, AttentionMap, FocusMode, GroupComparison, MapSource,
    OcclusionConfig, RadialFocus, RadialGroup, RadialReport, DEGENERATE_EPSILON, RADIAL_BINS,
};
pub use boundary::{boundary_distance_report, BoundaryReport};
pub use feedback::{
    fit_feedback_rules, generate_feedback, median_split, no_eye_feedback, verdict_feedback, Direction, FeedbackConfig,
    FeedbackItem, FeedbackRule, FEEDBACK_PROPERTIES, GENERIC_SUGGESTION,
};
pub use tsne::{conditional_affinities, nearest_neighbor_agreement, tsne_embed, TsneConfig, TsneResult};
