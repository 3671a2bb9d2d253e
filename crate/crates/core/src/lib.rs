//! Morphology and environment co-evolution: a control policy, a morphology
//! policy and an environment policy trained jointly on a 2D articulated
//! locomotion world.

pub mod coevo;
pub mod harness;
pub mod morphology;
pub mod nets;
pub mod policies;
pub mod ppo;
pub mod rng;
pub mod sim2d;
