//! The detector: table-driven backbone, SharedNeck, decoupled head, and
//! grid decoding.

pub mod backbone;
pub mod config;
pub mod decode;
pub mod head;
pub mod model;
pub mod neck;

pub use backbone::{build_backbone, Backbone, Block, Spatial};
pub use config::{make_empty_config, BackboneRow, ModelConfig, StageShape};
pub use decode::{cell_box, decode_boxes, iou, nms, Detection};
pub use head::{head_forward, DetectHead, HeadOutput, HeadVars};
pub use model::{count_params, FemtoDet, ParamReport};
pub use neck::{shared_neck, SharedNeck};
