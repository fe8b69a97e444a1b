pub mod appearance_projection;
pub mod async_editor;
pub mod backend;
pub mod concept_learning;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod layout;
pub mod layout_guidance;
pub mod noise_init;
pub mod pipeline;
pub mod rng;
pub mod scene;
