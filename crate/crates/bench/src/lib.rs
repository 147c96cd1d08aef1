//! Empty on purpose: this package only exists to host the criterion
//! benchmarks in `benches/`.
