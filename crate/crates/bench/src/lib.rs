//! Criterion benchmarks for the segmenter; see `benches/`.
