//! The analysis agent: it plans a question into steps, writes code for each
//! step, and runs that code in a sandboxed kernel over a line-delimited JSON
//! protocol.

pub mod codegen;
pub mod demo;
pub mod kernel;
pub mod planner;
pub mod questions;
pub mod session;

pub use codegen::{
    CgQuery, CodeCell, CodeGenerator, CodegenError, PluginDescriptor, PluginRegistry,
};
pub use planner::{Plan, Planner, PlannerError, SubTask};
pub use session::{Agent, AgentResponse, ArtifactRegistry, Session, SessionError, TurnStatus};
