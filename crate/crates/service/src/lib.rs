//! Live simulation over websockets.

pub mod pick;
pub mod protocol;
pub mod server;

pub use pick::pick_kernels;
pub use server::{start, ServeOptions, ServerHandle};
