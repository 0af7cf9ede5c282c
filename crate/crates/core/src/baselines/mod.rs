//! Comparison layers: a TLS-style pairwise handshake model and TESLA-style
//! broadcast authentication with delayed key disclosure.

pub mod tesla;
pub mod tls;

pub use tesla::{TeslaChain, TeslaError, TeslaPacket, TeslaReceiver, TeslaSender};
pub use tls::{Handshake, KeyExchange, Scheduling, TlsProfile, TlsSession};
