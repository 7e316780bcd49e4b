//! Criterion benchmarks for the solver, codec, cache, and calibration paths live in `benches/`.
