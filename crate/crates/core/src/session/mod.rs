//! Session graphs, their file format and the finetuning dataset builders.

mod dataset;
mod graph;
mod io;
mod validate;

pub use dataset::{
    build_task_dataset, without_last_query, without_purchase, DatasetError, Label, Split,
    SplitRatios, TaskDataset, TaskExample, TaskSplits, Variant,
};
pub use graph::{
    derive_query_chain_edges, Action, Attribute, Edge, ItemRef, Product, Purchase, Query,
    Relation, SessionGraph, UnknownAction, PRODUCT_SEQUENCE,
};
pub use io::{
    read_sessions, session_from_line, session_to_line, write_sessions, write_sessions_to,
    FormatError, SessionReader, SESSIONS_HEADER,
};
pub use validate::{validate_session, Violation};
