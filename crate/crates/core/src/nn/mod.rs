//! Network building blocks, the generator and the discriminator.

pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod pan;
pub mod partial;
pub mod planes;

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorNet};
pub use generator::{GenInputs, GenOutput, Generator, GeneratorConfig, GeneratorNet, Variant};
pub use pan::{Branch, Modulation, ModulationParams, PanContext, PlaneAwareNorm, RunningStats, StatsMode};
pub use partial::{partial_conv, PartialConv};
pub use planes::{one_hot, plane_broadcast, plane_count, plane_pool, StyleCodes};
