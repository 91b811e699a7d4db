use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arbiter_core::hal::{load_fixture, Backend, EchoBackend};

use crate::BackendArgs;

/// Which backend a run talks to. Stored in checkpoints as a string so
/// `resume` can rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    Echo,
    Remote,
    Scripted(PathBuf),
}

impl BackendChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "echo" => Ok(BackendChoice::Echo),
            "remote" => Ok(BackendChoice::Remote),
            _ => match s.strip_prefix("scripted:") {
                Some(p) if !p.is_empty() => Ok(BackendChoice::Scripted(PathBuf::from(p))),
                _ => bail!("unknown backend `{s}` (expected echo, remote or scripted:<fixture>)"),
            },
        }
    }

    /// From flags; `None` when neither `--backend` nor `--fixture` was given.
    pub fn from_args(args: &BackendArgs) -> Result<Option<Self>> {
        match (&args.backend, &args.fixture) {
            (Some(b), None) => Self::parse(b).map(Some),
            (None, Some(f)) => Ok(Some(BackendChoice::Scripted(f.clone()))),
            (None, None) => Ok(None),
            (Some(_), Some(_)) => bail!("choose exactly one of --backend and --fixture"),
        }
    }

    /// Relative fixture paths become absolute so the string stays valid
    /// from another working directory.
    pub fn to_session(&self) -> String {
        match self {
            BackendChoice::Echo => "echo".into(),
            BackendChoice::Remote => "remote".into(),
            BackendChoice::Scripted(p) => format!("scripted:{}", absolute(p).display()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendChoice::Echo => Ok(Box::new(EchoBackend)),
            BackendChoice::Remote => remote(),
            BackendChoice::Scripted(p) => {
                Ok(Box::new(load_fixture(p).with_context(|| format!("loading fixture {}", p.display()))?))
            }
        }
    }
}

#[cfg(feature = "remote")]
fn remote() -> Result<Box<dyn Backend>> {
    Ok(Box::new(arbiter_core::hal::RemoteBackend::from_env()?))
}

#[cfg(not(feature = "remote"))]
fn remote() -> Result<Box<dyn Backend>> {
    bail!("this build has no remote backend")
}

pub fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()))
}
