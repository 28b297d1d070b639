//! File formats: PLY clouds, quantization-step sidecars, checkpoints and
//! run configuration.

mod checkpoint;
mod config;
mod ply;
mod qsteps;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{GradCheckConfig, PathsConfig, RunConfig};
pub use ply::{parse_ply, read_ply, render_ply, write_ply, PlyFormat};
pub use qsteps::{parse_qsteps, read_qsteps, write_qsteps};
