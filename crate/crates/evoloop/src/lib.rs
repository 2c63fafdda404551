//! Process-level companion to `evoloop-core`: concurrent rollout
//! orchestration, the experience pool, on-disk formats, the end-to-end
//! pipeline and the trajectory inspector.

pub mod config;
pub mod formats;
pub mod inspect;
pub mod orchestrator;
pub mod pipeline;
pub mod policy_spec;
pub mod pool;
