//! Objective direction shared across the detector, aggregation, optimizer,
//! and analysis code.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// True when `a` is strictly better than `b` in this direction.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }

    /// The less favorable of two values.
    pub fn worst(&self, a: f64, b: f64) -> f64 {
        if self.better(a, b) {
            b
        } else {
            a
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maximize" | "max" => Ok(Direction::Maximize),
            "minimize" | "min" => Ok(Direction::Minimize),
            other => Err(format!("unknown direction '{other}'")),
        }
    }
}

/// The tuning objective. Fixed for the lifetime of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: String,
    pub direction: Direction,
}

impl ObjectiveSpec {
    pub fn maximize(name: &str) -> Self {
        Self {
            name: name.to_string(),
            direction: Direction::Maximize,
        }
    }

    pub fn minimize(name: &str) -> Self {
        Self {
            name: name.to_string(),
            direction: Direction::Minimize,
        }
    }
}
