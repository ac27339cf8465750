//! The MoE feed-forward layer and the multi-layer model built from it.

pub mod checkpoint;
mod expert;
mod layer;
mod model;
mod router;

pub use expert::{expert_forward_taped, ExpertParams};
pub use layer::{LayerNodeIds, MoEConfig, MoeLayer, TapedLayerOut};
pub use model::{
    for_each_param_pair, LayerGrads, ModelBinding, ModelConfig, ModelForward, ModelGrads,
    MoeModel, TapedModelOut,
};
pub use router::{decide, RouterDecision, RouterParams};
