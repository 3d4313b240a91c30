pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod lexicon;
pub mod masking;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod vocab;
