//! `key = value` run configuration files.

use crate::error::{Error, Result};

/// Parses `key = value` lines; `#` starts a comment. Keys are normalised to
/// flag spelling (`_` → `-`). Repeated keys are rejected.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            reason: format!("expected `key = value`, got {line:?}"),
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("bad key {:?}", k.trim()),
            });
        }
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("key {key:?} given twice"),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Appends `--key value` for every config entry whose flag is not already
/// on the command line, so explicit flags win and unknown keys surface as
/// argument errors.
pub fn merge_into_args(args: &[String], config: &[(String, String)]) -> Vec<String> {
    let present = |key: &str| {
        let flag = format!("--{key}");
        let prefix = format!("--{key}=");
        args.iter().any(|a| *a == flag || a.starts_with(&prefix))
    };
    let mut out = args.to_vec();
    for (k, v) in config {
        if !present(k) {
            out.push(format!("--{k}"));
            out.push(v.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_normalises() {
        let c = parse_config("# run\nepochs = 3\nkd_mode = multi-step # inline\n\n").unwrap();
        assert_eq!(
            c,
            vec![("epochs".into(), "3".into()), ("kd-mode".into(), "multi-step".into())]
        );
    }

    #[test]
    fn rejects_garbage_and_repeats() {
        assert!(parse_config("epochs 3").is_err());
        assert!(parse_config("a = 1\na = 2").is_err());
    }

    #[test]
    fn flags_override_file() {
        let args: Vec<String> = ["pocketnet", "search", "--epochs=7"].iter().map(|s| s.to_string()).collect();
        let merged = merge_into_args(&args, &[("epochs".into(), "3".into()), ("seed".into(), "9".into())]);
        assert_eq!(merged[2..], ["--epochs=7", "--seed", "9"]);
    }
}
