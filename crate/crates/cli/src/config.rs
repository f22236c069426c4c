//! `--config` files: flat `key=value` lines whose keys are long flag names
//! (`sample_rate` and `sample-rate` are equivalent). Blank lines and lines
//! starting with `#` are ignored. A key given on the command line keeps its
//! command-line value.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory};
use cmask::{Error, Result};

use crate::Cli;

/// Parses config text into ordered entries; a repeated key keeps its last value.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("config line {}: expected key=value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Param(format!("config line {}: empty key", i + 1)));
        }
        let value = v.trim().to_string();
        entries.retain(|(k, _)| *k != key);
        entries.push((key, value));
    }
    Ok(entries)
}

fn config_path(matches: &ArgMatches) -> Option<PathBuf> {
    matches
        .subcommand()
        .and_then(|(_, sub)| sub.get_one::<PathBuf>("config"))
        .or_else(|| matches.get_one::<PathBuf>("config"))
        .cloned()
}

fn from_command_line(matches: &ArgMatches, id: &str) -> bool {
    let sub = matches.subcommand().map(|(_, m)| m);
    [Some(matches), sub].into_iter().flatten().any(|m| {
        matches!(m.try_get_raw(id), Ok(Some(_)))
            && m.value_source(id) == Some(ValueSource::CommandLine)
    })
}

/// Returns the argument list extended with config-file values, or `None`
/// when no config file was given.
pub fn merge(matches: &ArgMatches, args: &[OsString]) -> Result<Option<Vec<OsString>>> {
    let Some(path) = config_path(matches) else {
        return Ok(None);
    };
    let entries = load(&path)?;
    let Some((name, _)) = matches.subcommand() else {
        return Ok(None);
    };
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut out = args.to_vec();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .filter(|_| !matches!(key.as_str(), "config" | "help" | "version"))
            .ok_or_else(|| {
                Error::Param(format!(
                    "{}: unknown key '{key}' for '{name}'",
                    path.display()
                ))
            })?;
        if from_command_line(matches, arg.get_id().as_str()) {
            continue;
        }
        if arg.get_action().takes_values() {
            out.push(format!("--{key}").into());
            out.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => {
                    return Err(Error::Param(format!(
                        "{}: '{key}' expects true or false, got '{other}'",
                        path.display()
                    )))
                }
            }
        }
    }
    Ok(Some(out))
}

fn load(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Param(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries() {
        let e = parse("# comment\n\nsample_rate = 16000\nsteps=5\nsteps=7\n").unwrap();
        assert_eq!(
            e,
            vec![
                ("sample-rate".to_string(), "16000".to_string()),
                ("steps".to_string(), "7".to_string())
            ]
        );
        assert!(parse("nonsense\n").is_err());
        assert!(parse("=3\n").is_err());
    }

    fn merged(argv: &[&str], config: &str) -> Result<Vec<String>> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, config).unwrap();
        let mut args: Vec<OsString> = argv.iter().map(Into::into).collect();
        args.push("--config".into());
        args.push(path.clone().into());
        let matches = Cli::command().try_get_matches_from(&args).unwrap();
        let out = merge(&matches, &args)?.unwrap();
        Ok(out[args.len()..]
            .iter()
            .map(|s| s.to_string_lossy().into_owned())
            .collect())
    }

    #[test]
    fn flags_win_over_config() {
        let extra = merged(
            &["cmask", "--seed", "3", "synth", "--outdir", "x"],
            "seed=9\nduration=1.5\nhop=128\n",
        )
        .unwrap();
        assert_eq!(extra, ["--duration", "1.5", "--hop", "128"]);
    }

    #[test]
    fn boolean_flags() {
        let argv = ["cmask", "evaluate", "--reference", "a", "--estimate", "b"];
        assert_eq!(merged(&argv, "json=true\n").unwrap(), ["--json"]);
        assert!(merged(&argv, "json=false\n").unwrap().is_empty());
        assert!(merged(&argv, "json=maybe\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let argv = ["cmask", "synth", "--outdir", "x"];
        assert!(matches!(merged(&argv, "bogus=1\n"), Err(Error::Param(_))));
        // valid for another command only
        assert!(merged(&argv, "steps=1\n").is_err());
        assert!(merged(&argv, "config=other\n").is_err());
    }
}
