//! Criterion benchmarks live in `benches/`. Run with `cargo bench -p cleandift-bench`.
