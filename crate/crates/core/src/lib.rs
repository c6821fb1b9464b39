pub mod bridge;
pub mod chansim;
pub mod clock;
pub mod controller;
pub mod crtp;
pub mod drone;
pub mod harness;
pub mod link;
pub mod serial;
pub mod tracelab;
pub mod transport;
