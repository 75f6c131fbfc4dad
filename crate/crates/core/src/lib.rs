pub mod blocks;
pub mod datagen;
pub mod decouple;
pub mod error;
pub mod features;
pub mod flopsmeter;
pub mod mathcore;
pub mod trainer;

pub use error::{Error, Result};
