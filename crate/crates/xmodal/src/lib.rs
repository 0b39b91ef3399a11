//! Cross-modal retrieval toolkit: aligns pre-extracted audio and text
//! embedding sequences in a shared space through small learned adapters, and
//! evaluates text-to-audio retrieval on the result.

pub mod adapter;
pub mod cli;
pub mod data;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod retrieval;
pub mod text;
pub mod training;
