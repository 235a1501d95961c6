pub mod aco;
pub mod bench;
pub mod chaos;
pub mod ids;
pub mod mbt;
pub mod orbit;
pub mod placement;
pub mod runtime;
pub mod semantics;
pub mod sgroup;

pub use ids::{GroupName, Name, NodeId, NodeType, Pid};
