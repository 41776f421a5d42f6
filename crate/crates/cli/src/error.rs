use std::path::Path;

use moe_workbench::model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Config could not be parsed or failed validation.
    #[error("{message}")]
    Config { code: String, message: String },
    /// Flag values that cannot work together.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] moe_workbench::Error),
    #[error("{context}: {message}")]
    Io { code: &'static str, context: String, message: String },
}

impl CliError {
    pub fn config(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { code: code.into(), message: message.into() }
    }

    pub fn io(code: &'static str, path: &Path, err: impl ToString) -> Self {
        CliError::Io { code, context: path.display().to_string(), message: err.to_string() }
    }

    pub fn code(&self) -> String {
        match self {
            CliError::Config { code, .. } => code.clone(),
            CliError::Usage(_) => "cli.usage".into(),
            CliError::Core(e) => e.code(),
            CliError::Io { code, .. } => (*code).into(),
        }
    }

    /// 2 config, 3 numeric or contract, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Core(moe_workbench::Error::Model(ModelError::Io(_))) => 4,
            CliError::Core(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

macro_rules! from_module {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_module!(
    moe_workbench::routing::RoutingError,
    moe_workbench::kv_attention::KvError,
    moe_workbench::expert_lr::LrError,
    moe_workbench::scaling::ScalingError,
    ModelError
);

#[cfg(test)]
mod tests {
    use super::*;
    use moe_workbench::scaling::ScalingError;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::config("config.parse", "x").exit_code(), 2);
        assert_eq!(CliError::from(ScalingError::ZeroExponent).exit_code(), 3);
        assert_eq!(CliError::from(ModelError::Io("gone".into())).exit_code(), 4);
        assert_eq!(CliError::io("io.read", Path::new("a"), "missing").exit_code(), 4);
    }

    #[test]
    fn module_codes_pass_through() {
        assert_eq!(CliError::from(ScalingError::ZeroExponent).code(), "scaling_laws.zero_exponent");
    }
}
