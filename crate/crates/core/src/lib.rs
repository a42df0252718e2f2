pub mod cache;
pub mod clock;
pub mod controller;
pub mod fabric;
pub mod flow;
pub mod harness;
pub mod http;
pub mod proxy;
