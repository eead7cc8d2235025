pub mod fit;
pub mod gradcheck;
pub mod init;
pub mod overflow;
pub mod probe;
pub mod train;
