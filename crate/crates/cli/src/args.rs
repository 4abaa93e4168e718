//! Clap glue that exposes every configuration key as a `--key` flag backed
//! by a `KRLM_KEY` environment variable.

use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};

use crate::config::{env_var, parse_config, Resolved, KEYS};
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    /// `(key, value, origin)` in application order: environment first, then flags.
    pub overrides: Vec<(String, String, String)>,
}

impl ConfigArgs {
    /// Reads the config file (if any) and applies the overrides.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let text = match &self.file {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let file = self.file.as_deref().zip(text.as_deref());
        Ok(parse_config(file, &self.overrides)?)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Self {
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides: Vec::new(),
        };
        let mut env = Vec::new();
        let mut flags = Vec::new();
        for (key, _) in KEYS {
            let Some(value) = m.get_one::<String>(key) else { continue };
            match m.value_source(key) {
                Some(ValueSource::EnvVariable) => env.push((key.to_string(), value.clone(), env_var(key))),
                Some(ValueSource::CommandLine) => flags.push((key.to_string(), value.clone(), format!("--{key}"))),
                _ => {}
            }
        }
        out.overrides.extend(env);
        out.overrides.extend(flags);
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("flat `key = value` configuration file"),
        );
        KEYS.iter().fold(cmd, |cmd, (key, help)| {
            cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .env(env_var(key))
                    .help(*help)
                    .help_heading("Configuration"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
