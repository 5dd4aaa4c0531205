//! Exit codes: 2 validation, 3 numeric failure, 4 resource refusal.

use std::fmt;

use pspin_core::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_RESOURCE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    /// Pipeline stage that failed, when there is one.
    pub stage: Option<&'static str>,
    pub message: String,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self { code: EXIT_VALIDATION, stage: None, message }
    }

    pub fn numeric(message: String) -> Self {
        Self { code: EXIT_NUMERIC, stage: None, message }
    }

    pub fn resource(message: String) -> Self {
        Self { code: EXIT_RESOURCE, stage: None, message }
    }

    pub fn at(mut self, stage: &'static str) -> Self {
        self.stage.get_or_insert(stage);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BudgetExceeded { .. } | Error::TooLargeForEnumeration { .. } => EXIT_RESOURCE,
            Error::Calibration { .. } | Error::Overflow { .. } | Error::ZeroVector => EXIT_NUMERIC,
            Error::Io(_) => EXIT_RESOURCE,
            _ => EXIT_VALIDATION,
        };
        Self { code, stage: None, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::resource(format!("i/o: {e}"))
    }
}
