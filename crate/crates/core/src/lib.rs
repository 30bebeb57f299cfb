pub mod dsl;
pub mod env;
pub mod error;
pub mod neural;
pub mod policy;
pub mod seed;
pub mod tree;
pub mod project;
pub mod propel;
pub mod harness;
