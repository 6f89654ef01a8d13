pub mod error;
pub mod asymptotics;
pub mod cache;
pub mod cones;
pub mod grid;
pub mod map;
pub mod observable;
pub mod orbit;
pub mod par;
pub mod response;
pub mod stats;
pub mod stencil;
pub mod transfer;

pub use error::{Error, Result};
pub use map::MapParams;
pub use observable::Observable;
