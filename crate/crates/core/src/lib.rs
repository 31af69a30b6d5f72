//! Bizur: a key-value consensus protocol without a distributed log.
//!
//! Keys hash into a fixed set of long-lived buckets. Each bucket is replicated
//! like a single-writer register owned by the elected leader, so operations on
//! different buckets never wait on each other. Recovery after a leader change
//! happens lazily, one bucket at a time, on first access.
//!
//! Everything in this crate is sans-IO: [`node::Node`] and [`client::Router`]
//! consume messages and timer events and emit [`node::Output`]s; a driver (the
//! `bizur-sim` crate, or a real transport) moves the envelopes around.

pub mod bucket;
pub mod client;
pub mod hash;
pub mod kv;
pub mod message;
pub mod node;
pub mod reconfig;
pub mod time;
pub mod types;

pub use bucket::{Bucket, DecodeError};
pub use hash::{hash_key, hash_key_seeded};
pub use kv::{KvRequest, KvResponse};
pub use message::{Endpoint, Envelope, MsgId, Payload};
pub use time::SimTime;
pub use types::{BucketVersion, ClientId, ElectId, InstanceId, ServerId};
