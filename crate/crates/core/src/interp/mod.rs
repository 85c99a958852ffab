//! Analyses of a frozen model: attention statistics, direct logit
//! attribution, OV/QK circuits, linearity and subspace measurements,
//! ablations, eigenvalue scores and the QK pseudoinverse intervention.

mod ablation;
mod attention;
mod circuits;
mod dla;
mod intervention;
mod linearity;
mod projection;
pub mod report;
mod scores;
mod subspace;

pub use ablation::{ablate, evaluate_ablated, head_means, AblationMode, AblationReport};
pub use attention::{
    attention_patterns, attention_stats, mean_patterns, HeadAttentionStats, CHECKERBOARD_THRESHOLD,
};
pub use circuits::{circuits, layer_ov, summarize, CircuitMatrices, CircuitSummary};
pub use dla::{dla, dla_heads, dla_mlp, references, DlaResult, DlaRow, DlaUnit, DlaVariant};
pub use intervention::{apply_qk_pinv, qk_pinv_intervention, qk_product, ProjectorCheck, QkPinvReport};
pub use linearity::{fit_ov, ov_linearity, probe_vectors, LinearityReport, OvScope, VectorKind};
pub use projection::{
    crude_estimate_report, project_stage, resid_projection, stage_similarities, CrudeReport, CrudeRow,
    Stage, StageSimilarity, SERIES_NAMES,
};
pub use scores::{eig_scores_all, eigenvalue_score, CircuitKind, EigScore};
pub use subspace::{layer_orthogonal_fraction, orthogonal_fraction, EmbeddingSubspace, OrthoFractionReport};

/// Slope of the layer-0 OV map in the trained reference model.
pub const DEFAULT_ALPHA: f64 = 2.3;
