use std::fmt;

use evfi::edi::EdiError;
use evfi::events::EventError;
use evfi::frame::FrameError;
use evfi::net::NetError;
use evfi::pipeline::PipelineError;
use evfi::sim::SimError;
use evfi::tensor::TensorError;

/// Exit status classes shared by every command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Io = 1,
    Config = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Io => "i/o error",
            Kind::Config => "config error",
            Kind::Numeric => "numeric error",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

fn with_kind(kind: Kind, e: impl fmt::Display) -> CliError {
    CliError {
        kind,
        message: e.to_string(),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        with_kind(Kind::Io, e)
    }
}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        let kind = match e {
            FrameError::Io { .. } | FrameError::Format(_) => Kind::Io,
            _ => Kind::Config,
        };
        with_kind(kind, e)
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        let kind = match e {
            EventError::Io { .. } | EventError::Parse { .. } | EventError::BadStack(_) => Kind::Io,
            _ => Kind::Config,
        };
        with_kind(kind, e)
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let kind = match e {
            TensorError::Io { .. } | TensorError::Checkpoint(_) => Kind::Io,
            TensorError::NonFinite { .. } => Kind::Numeric,
            _ => Kind::Config,
        };
        with_kind(kind, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Events(e) => e.into(),
            e => with_kind(Kind::Config, e),
        }
    }
}

impl From<EdiError> for CliError {
    fn from(e: EdiError) -> Self {
        match e {
            EdiError::Frame(e) => e.into(),
            e => with_kind(Kind::Config, e),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Tensor(e) => e.into(),
            NetError::Events(e) => e.into(),
            NetError::Frame(e) => e.into(),
            e => with_kind(Kind::Config, e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFiniteLoss { .. } => with_kind(Kind::Numeric, e),
            PipelineError::Io(e) => e.into(),
            PipelineError::Net(e) => e.into(),
            PipelineError::Sim(e) => e.into(),
            PipelineError::Events(e) => e.into(),
            PipelineError::Frame(e) => e.into(),
            PipelineError::Tensor(e) => e.into(),
            e => with_kind(Kind::Config, e),
        }
    }
}
