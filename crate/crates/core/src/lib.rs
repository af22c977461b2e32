pub mod data;
pub mod describe;
pub mod encode;
pub mod eval;
pub mod gradcheck;
pub mod linearize;
pub mod model;
pub mod pipeline;
pub mod simulate;
pub mod temporal;
pub mod tensor;
pub mod train;
