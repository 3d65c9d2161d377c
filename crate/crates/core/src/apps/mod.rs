//! The three benchmark applications: fishery harvest control, an electrostatic separator and
//! gas-network pressure design.

pub mod fishing;
pub mod gas;
pub mod separator;

/// Flat numeric view of a scenario for CSV export.
pub trait ScenarioRecord {
    fn field_names(&self) -> Vec<String>;
    fn to_row(&self) -> Vec<f64>;
}
