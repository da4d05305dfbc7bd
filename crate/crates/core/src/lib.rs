pub mod interp;
pub mod minilang;
pub mod corpus;
