//! Landmark problems as JSON.

use std::path::Path;

use crate::error::{Error, Position, Result};
use crate::optimization::BaProblem;

pub fn parse_ba_problem(text: &str) -> Result<BaProblem> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        position: Position::Line(e.line()),
        message: e.to_string(),
    })
}

pub fn read_ba_problem(path: impl AsRef<Path>) -> Result<BaProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ba_problem(&text)
}

pub fn write_ba_problem(path: impl AsRef<Path>, problem: &BaProblem) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(problem).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
