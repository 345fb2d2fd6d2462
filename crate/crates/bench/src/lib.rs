//! Benchmarks for the seqct pipeline live in `benches/`.
