#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod construction;
pub mod datagen;
pub mod dd;
pub mod error;
pub mod linalg;
pub mod locpol;
pub mod relu;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
