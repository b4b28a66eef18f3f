//! Toy-scale spiking optical flow network.

pub mod checkpoint;
pub mod gru;
pub mod lif;
pub mod net;
pub mod tape;
pub mod train;

pub use net::{conv_params, NetState, Network, NetworkConfig, OpCount, SpikeRecord};
