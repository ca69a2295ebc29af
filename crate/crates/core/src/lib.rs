pub mod autograd;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod schedule;
pub mod search_space;
pub mod tensor;
pub mod net;
pub mod eval;
pub mod io;
pub mod losses;
pub mod darts;
pub mod kd;
pub mod gradcheck;
pub mod cli;
