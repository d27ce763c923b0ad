pub mod sweep;
pub mod train;
