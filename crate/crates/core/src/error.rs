//! Crate-level error type.
//!
//! Every module owns a narrow error enum; [`Error`] wraps them so callers that
//! stitch modules together (the model, the CLI) can propagate with `?` and still
//! report a module-qualified code such as `routing.invalid_input`.

use thiserror::Error;

use crate::expert_lr::LrError;
use crate::kv_attention::KvError;
use crate::model::ModelError;
use crate::routing::RoutingError;
use crate::scaling::ScalingError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Lr(#[from] LrError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl Error {
    /// Module-qualified, machine-parsable error code.
    pub fn code(&self) -> String {
        match self {
            Error::Routing(e) => format!("routing.{}", e.code()),
            Error::Kv(e) => format!("kv_attention.{}", e.code()),
            Error::Lr(e) => format!("expert_lr.{}", e.code()),
            Error::Scaling(e) => format!("scaling_laws.{}", e.code()),
            Error::Model(ModelError::Routing(e)) => format!("routing.{}", e.code()),
            Error::Model(ModelError::Kv(e)) => format!("kv_attention.{}", e.code()),
            Error::Model(ModelError::Lr(e)) => format!("expert_lr.{}", e.code()),
            Error::Model(e) => format!("micro_model.{}", e.code()),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_errors_keep_their_module() {
        let e: Error = ModelError::Routing(RoutingError::InvalidConfig("x".into())).into();
        assert_eq!(e.code(), "routing.invalid_config");
        let e: Error = ModelError::EmptyBatch.into();
        assert_eq!(e.code(), "micro_model.empty_batch");
        let e: Error = ScalingError::ZeroExponent.into();
        assert_eq!(e.code(), "scaling_laws.zero_exponent");
    }
}
