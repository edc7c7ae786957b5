//! Dual-control code-action agent runtime.
//!
//! A run alternates between a planning policy and an acting policy, each with
//! its own system prompt. The tools and examples shown to the model are
//! retrieved per step, and every piece of generated code passes a reviewer
//! before it reaches the sandbox.

pub mod agent;
pub mod config;
pub mod conversation;
pub mod llm;
pub mod policy;
pub mod replay;
pub mod rag;
pub mod reviewer;
pub mod executor;
pub mod stub;
