pub mod cli;
pub mod commands;
pub mod config;
pub mod model;
pub mod train;

pub use cli::{run, Cli};

/// Category of the first library error in the chain; "io" for bare I/O
/// failures and "error" for anything else.
pub fn error_category(err: &anyhow::Error) -> &'static str {
    for e in err.chain() {
        if let Some(lib) = e.downcast_ref::<tcyolo::Error>() {
            return lib.category();
        }
        if e.is::<std::io::Error>() || e.is::<image::ImageError>() || e.is::<glob::GlobError>() {
            return "io";
        }
    }
    "error"
}

/// One-line rendering of an error and its causes. Library errors already
/// print their own source, so the chain stops there.
pub fn error_line(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for e in err.chain() {
        if let Some(lib) = e.downcast_ref::<tcyolo::Error>() {
            let text = lib.to_string();
            let prefix = format!("{} error: ", lib.category());
            parts.push(text.strip_prefix(&prefix).map_or(text.clone(), str::to_owned));
            break;
        }
        parts.push(e.to_string());
    }
    let line = format!("error[{}]: {}", error_category(err), parts.join(": "));
    line.replace('\n', " ")
}
