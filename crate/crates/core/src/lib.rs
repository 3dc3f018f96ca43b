pub mod diffgno;
pub mod federation;
pub mod linalg;
pub mod optim;
pub mod runner;
pub mod sglt;
pub mod spdp;
pub mod tasks;
