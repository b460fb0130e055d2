//! Reference implementations and fixtures shared by integration tests.
//! Each test target uses a different subset.
#![allow(dead_code)]

pub mod agent;
pub mod alignment;
pub mod retrieval;
