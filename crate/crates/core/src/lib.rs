//! Explanation-based reliability checks and calibration for few-shot
//! prompted language models.

pub mod backend;
pub mod calibration;
pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod parsing;
pub mod prompting;
pub mod reliability;
pub mod selection;
pub mod synthgen;
