//! Data containers, model parameters, and the variational state shared by
//! both inference engines.

mod design;
mod params;
mod state;
mod table;

pub use design::{dense_reindex, GroupedDesign, MultiTaskData, Standardization, TaskData};
pub use params::{clamp_prob, floor_var, FittedParams, ModelParams, MultiTaskParams, TaskParams, PROB_EPS, VAR_FLOOR};
pub use state::VariationalState;
pub use table::{validate_design, validate_task, ColumnRoles, GroupSource, RawTable};
