//! Benchmark-only crate; see `benches/qge.rs`. Run with
//! `cargo bench -p qge-bench`.
