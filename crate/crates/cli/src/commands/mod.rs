pub mod analysis;
pub mod demo;
pub mod route;
