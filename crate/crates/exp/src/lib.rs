//! Experiment harness: parameter sweeps, transferability runs and
//! WMMSE-relative comparison tables on top of `mdgnn`.

pub mod error;
pub mod report;
pub mod run;
pub mod selftest;
pub mod spec;

pub use error::{ExpError, Result};
pub use report::{compare_table, format_percent, percent_delta, plot_script, read_csv, write_csv};
pub use run::{run, ResultRow};
pub use spec::{Axis, Budget, ExperimentSpec, Task};

/// Overlays the keys of a JSON object onto `spec`; nested objects merge
/// key by key.
pub fn apply_overrides(spec: &ExperimentSpec, overrides: &serde_json::Value) -> Result<ExperimentSpec> {
    fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
        match (base, over) {
            (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
                for (k, v) in o {
                    merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
                }
            }
            (b, o) => *b = o.clone(),
        }
    }
    if !overrides.is_object() {
        return Err(ExpError::InvalidSpec("config file must hold a JSON object".into()));
    }
    let mut value = serde_json::to_value(spec)?;
    merge(&mut value, overrides);
    let out: ExperimentSpec = serde_json::from_value(value)?;
    out.validate()?;
    Ok(out)
}
