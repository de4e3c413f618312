pub mod dedup;
pub mod filter;
pub mod gen_qa;
pub mod prism;
pub mod score;
pub mod serve;
