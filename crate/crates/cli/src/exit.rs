//! Exit codes. These are part of the command-line contract.

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const VERIFICATION: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: USAGE, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: DATA, msg: msg.into() }
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Self { code: VERIFICATION, msg: msg.into() }
    }
}

/// Flags are validated before the library is called, so anything the library
/// rejects is either a numerical failure or a problem with the input data.
impl From<spgp::Error> for CliError {
    fn from(e: spgp::Error) -> Self {
        let code = match e {
            spgp::Error::Numerical(_) => NUMERICAL,
            _ => DATA,
        };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_codes() {
        assert_eq!(CliError::from(spgp::Error::Numerical("x".into())).code, NUMERICAL);
        assert_eq!(CliError::from(spgp::Error::Parse { line: 2, msg: "x".into() }).code, DATA);
        assert_eq!(CliError::from(spgp::Error::ModelFile("x".into())).code, DATA);
        assert_eq!(CliError::usage("x").code, 2);
        assert_eq!(CliError::verification("x").code, 5);
    }
}
