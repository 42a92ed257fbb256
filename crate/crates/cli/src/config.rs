//! Config loading and `key=value` overrides.

use std::path::Path;

use fedsim::{Error, ExperimentConfig};
use serde_json::Value;

/// Top-level config fields without a dedicated flag; `--<field> value` is
/// accepted for these as shorthand for `--set <field>=value`.
const BARE_FIELDS: [&str; 6] = [
    "name",
    "master_seed",
    "eval_every",
    "checkpoint_every",
    "validation_fraction",
    "accuracy_threshold",
];

/// Rewrites `--a.b value`, `--a.b=value` and `--<bare field> value` into
/// `--set a.b=value` so that every config field can be set from the command
/// line. Hyphens in keys become underscores.
pub fn rewrite_overrides(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        if arg == "--" {
            out.push(arg);
            out.extend(it);
            break;
        }
        let Some(body) = arg.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.replace('-', "_"), Some(v.to_string())),
            None => (body.replace('-', "_"), None),
        };
        let is_override = key.contains('.') || BARE_FIELDS.contains(&key.as_str());
        if !is_override {
            out.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => Some(v),
            None => it.next_if(|next| !next.starts_with("--")),
        };
        match value {
            Some(v) => {
                out.push("--set".into());
                out.push(format!("{key}={v}"));
            }
            // let clap report the dangling flag
            None => out.push(arg),
        }
    }
    out
}

pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::BadConfig(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::BadConfig(format!("{}: {e}", p.display())))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

/// Applies `path=value` overrides. The value is read as JSON when it parses
/// and as a plain string otherwise, so `aggregation.strategy=fedavg` and
/// `rounds=5` both work.
pub fn apply_overrides(
    cfg: ExperimentConfig,
    overrides: &[String],
) -> Result<ExperimentConfig, Error> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("override `{item}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, path, value)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::BadConfig(format!("after overrides: {e}")))
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::BadConfig(format!("`{}` is not a section", parts[..i].join(".")))
        })?;
        if !map.contains_key(*part) {
            return Err(Error::BadConfig(format!("unknown config key `{path}`")));
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    Err(Error::BadConfig("empty override key".into()))
}
