pub mod backends;
pub mod dataset;
pub mod engine;
pub mod judge;
pub mod policy;
pub mod prefix_verify;
pub mod profiles;
pub mod refdecoder;
pub mod selftest;
