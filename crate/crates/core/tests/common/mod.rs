pub mod oracles;
#[allow(unused_imports)]
pub use oracles::*;
