pub mod gen;
pub mod stub;
