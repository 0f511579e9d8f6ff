//! Exit-code classification: 2 for problems with the user's inputs,
//! 1 for everything else.

use seampatch::Error;

#[derive(Debug)]
pub enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::User(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::User(e) | Failure::Internal(e) => e,
        }
    }
}

pub fn user(e: impl Into<anyhow::Error>) -> Failure {
    Failure::User(e.into())
}

pub fn internal(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Internal(e.into())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(_)
            | Error::Io { .. }
            | Error::Load(_)
            | Error::Config(_)
            | Error::CorruptVocab(_)
            | Error::TokenRange { .. }
            | Error::BoundaryNotFound
            | Error::AmbiguousBoundary { .. }
            | Error::EmptySegment
            | Error::EmptyInput(_)
            | Error::Param(_)
            | Error::Range(_)
            | Error::MissingEmbedding(_)
            | Error::Analysis(_)
            | Error::Compatibility { .. } => Failure::User(e.into()),
            _ => Failure::Internal(e.into()),
        }
    }
}
