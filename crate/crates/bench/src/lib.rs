//! Workspace benchmark crate; see benches/core_hotpaths.rs.
