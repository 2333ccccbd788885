//! Flat `key = value` configuration files. `#` starts a comment.
//!
//! Recognized keys: `provisional_threshold`, `final_threshold`,
//! `max_iterations`, `grid`, `order`, `smoothing`, `k_min`, `k_max`.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::search::SearchConfig;

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

/// Apply the settings in `text` on top of `base` and validate the result.
pub fn parse_config(text: &str, base: SearchConfig) -> Result<SearchConfig> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, val) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: "expected key = value".into(),
        })?;
        let (key, val) = (key.trim(), val.trim());
        match key {
            "provisional_threshold" => cfg.provisional_threshold = value(key, val, line)?,
            "final_threshold" => cfg.final_threshold = value(key, val, line)?,
            "max_iterations" => cfg.max_iterations = value(key, val, line)?,
            "grid" => cfg.grid_resolution = value(key, val, line)?,
            "order" => cfg.order = value(key, val, line)?,
            "smoothing" => cfg.smooth_sigma_cells = value(key, val, line)?,
            "k_min" => cfg.k_range.0 = value(key, val, line)?,
            "k_max" => cfg.k_range.1 = value(key, val, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, base: SearchConfig) -> Result<SearchConfig> {
    parse_config(&std::fs::read_to_string(path)?, base)
}
