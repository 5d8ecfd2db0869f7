pub mod optim;
pub mod losses;
pub mod state;
pub mod step;
pub mod log;
pub mod stages;
