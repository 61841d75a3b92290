//! A small RFB 3.8 implementation: message codec, a Raw-only client that
//! works over TCP or WebSocket, and a synthetic server whose response delay
//! is known in advance.

mod client;
pub mod codec;
mod fixture;
mod ws;

pub use client::{Handshake, RfbClient, RfbError, SECURITY_NONE, VERSION};
pub use codec::{ClientMessage, CodecError, PixelFormat, Rect, Rectangle, ServerMessage, ENCODING_RAW};
pub use fixture::{
    parse_delays, serve_connection, serve_fixture, serve_fixture_ws, Background, Fixture, FixtureConfigError,
    FixtureCounters, ResponseDelay, ServerFixtureConfig,
};
pub use ws::{accept_ws, connect_ws, WsStream, SUBPROTOCOL};
