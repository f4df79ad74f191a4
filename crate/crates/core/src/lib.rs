//! Image dehazing with multi-scale iterative dehazing networks, plus the
//! supporting pieces: a small autograd tensor engine, haze synthesis,
//! quality metrics and a dark channel prior baseline.

pub mod dcp;
pub mod hazegen;
pub mod io;
pub mod metrics;
pub mod net;
pub mod plane;
pub mod tensor;
pub mod trainer;
