pub mod classical;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod penalty;
pub mod problem;
pub mod projection;
pub mod train;
