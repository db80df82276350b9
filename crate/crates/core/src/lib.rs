pub mod fixed;
pub mod par;
pub mod phe;
pub mod wire;
pub mod codec;
pub mod nn;
pub mod protocol;
pub mod transport;
pub mod harness;
