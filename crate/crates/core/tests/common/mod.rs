pub mod grading;
pub mod scenarios;
