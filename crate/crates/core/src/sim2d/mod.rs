//! Deterministic 2D articulated locomotion world with parameterized terrain.

mod body;
mod terrain;
mod world;

use thiserror::Error;

use crate::morphology::Violation;

pub use body::{denormalize, Body, BodyConfig, Link};
pub use terrain::{
    generate_terrain, roughness, EnvBounds, EnvKind, EnvParams, GapLayout, Heightfield,
    TerrainConfig,
};
pub use world::{
    step_reward, KindConfig, LinkState, SimConfig, StepInfo, StepResult, Termination, World,
    WorldState, OBS_DIM,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("invalid morphology: {0:?}")]
    InvalidMorphology(Vec<Violation>),
    #[error("terrain contains non-finite heights")]
    InvalidTerrain,
    #[error("body hangs {depth:.2} below the head, too tall to place")]
    Placement { depth: f64 },
    #[error("expected {expected} torques, got {got}")]
    ActionShape { expected: usize, got: usize },
    #[error("non-finite torque")]
    NonFiniteAction,
    #[error("episode already terminated")]
    Terminated,
}
