//! File formats, pipeline commands and the command-line front end of
//! `fireseg`.

pub mod app;
pub mod commands;
pub mod config;
pub mod exec;
pub mod formats;
pub mod records;
pub mod render;

pub use app::run;
