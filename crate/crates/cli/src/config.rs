//! `--config FILE` support: the file's `key = value` lines become long flags
//! placed before the ones given on the command line. Keys also given as
//! flags are dropped from the file, so explicit flags win.

use std::ffi::OsString;

use anyhow::{bail, Context};
use clap::ArgAction;

pub fn expand(cmd: &clap::Command, argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|i| i + 1) else {
        return Ok(argv);
    };
    let sub_name = argv[sub_pos].to_string_lossy().into_owned();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(argv);
    };

    let rest = &argv[sub_pos + 1..];
    let mut path = None;
    let mut kept = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let arg = rest[i].to_string_lossy();
        if arg == "--config" {
            path = Some(rest.get(i + 1).context("--config needs a file path")?.clone());
            i += 2;
            continue;
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            kept.push(rest[i].clone());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv);
    };

    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config file {}", path.to_string_lossy()))?;
    let pairs = gradmatch::kv::parse_key_values(&text).with_context(|| format!("in config file {}", path.to_string_lossy()))?;
    let given: Vec<String> = kept
        .iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--").map(|k| k.split('=').next().unwrap_or(k).to_string()))
        .collect();
    let mut from_file = Vec::new();
    for (key, (value, line)) in pairs {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("config line {line}: `{key}` is not an option of `{sub_name}`");
        };
        if given.contains(&key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => from_file.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => bail!("config line {line}: `{key}` expects true or false, got `{other}`"),
            },
            ArgAction::Append => {
                for v in value.split_whitespace() {
                    from_file.push(OsString::from(format!("--{key}={v}")));
                }
            }
            _ => from_file.push(OsString::from(format!("--{key}={value}"))),
        }
    }

    let mut out: Vec<OsString> = argv[..=sub_pos].to_vec();
    out.extend(from_file);
    out.extend(kept);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, Command};

    fn cmd() -> Command {
        Command::new("tool").subcommand(
            Command::new("run")
                .arg(Arg::new("rate").long("rate"))
                .arg(Arg::new("list").long("list").action(ArgAction::Append))
                .arg(Arg::new("fast").long("fast").action(ArgAction::SetTrue)),
        )
    }

    fn expand_with(file: &str, args: &[&str]) -> anyhow::Result<Vec<String>> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.kv");
        std::fs::write(&path, file).unwrap();
        let mut argv: Vec<OsString> = ["tool", "run", "--config"].iter().map(OsString::from).collect();
        argv.push(path.into_os_string());
        argv.extend(args.iter().map(OsString::from));
        Ok(expand(&cmd(), argv)?.into_iter().map(|a| a.into_string().unwrap()).collect())
    }

    #[test]
    fn file_keys_become_flags_before_cli_flags() {
        let out = expand_with("rate = 2\nlist = a b\nfast = true\n", &["--list", "c"]).unwrap();
        let mut from_file = out[2..4].to_vec();
        from_file.sort();
        assert_eq!(from_file, ["--fast", "--rate=2"]);
        assert_eq!(out[4..], ["--list", "c"]);

        let out = expand_with("list = a b\n", &[]).unwrap();
        assert_eq!(out, ["tool", "run", "--list=a", "--list=b"]);
    }

    #[test]
    fn false_switch_is_dropped() {
        let out = expand_with("fast = false\n", &[]).unwrap();
        assert_eq!(out, ["tool", "run"]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = expand_with("speed = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("`speed`"));
    }

    #[test]
    fn bad_switch_value_is_rejected() {
        assert!(expand_with("fast = maybe\n", &[]).is_err());
    }

    #[test]
    fn no_config_leaves_argv_alone() {
        let argv: Vec<OsString> = ["tool", "run", "--rate", "1"].iter().map(OsString::from).collect();
        assert_eq!(expand(&cmd(), argv.clone()).unwrap(), argv);
    }
}
