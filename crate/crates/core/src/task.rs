use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Which conditional generation problem a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Canny,
    Depth,
    Subject,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Canny, Task::Depth, Task::Subject];

    pub fn name(self) -> &'static str {
        match self {
            Task::Canny => "canny",
            Task::Depth => "depth",
            Task::Subject => "subject",
        }
    }

    /// Guidance weight used when sampling this task.
    pub fn default_omega(self) -> f64 {
        match self {
            Task::Subject => 6.0,
            Task::Canny | Task::Depth => 2.0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}
