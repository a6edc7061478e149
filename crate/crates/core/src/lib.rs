pub mod contrastive;
pub mod diffusion;
pub mod go;
pub mod metrics;
pub mod motion;
pub mod norm;
pub mod planner;
pub mod planning;
pub mod posture;
pub mod script;
pub mod synth;
