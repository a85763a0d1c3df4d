pub mod catalog;
pub mod columns;
pub mod config;
pub mod coord;
pub mod ctx;
pub mod datanode;
pub mod deletes;
pub mod indexnode;
pub mod logger;
pub mod meta;
pub mod proxy;
pub mod querynode;
