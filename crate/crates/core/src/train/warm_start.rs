use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Float;

/// Which arrays a warm start copied and which kept their fresh values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmStartReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    /// Arrays of the source model with no counterpart in the target.
    pub ignored: Vec<String>,
}

/// Copies every array `target` shares with `source` bit-exactly; arrays the
/// source lacks keep their (fresh) initialization.
pub fn warm_start<T: Float>(target: &mut Model<T>, source: &Model<T>) -> Result<WarmStartReport> {
    target.config().compatible_with(source.config())?;
    let mut report = WarmStartReport::default();
    let ids: Vec<_> = target.params().ids().collect();
    for id in ids {
        let name = target.params().name(id).to_string();
        if !source.params().contains(&name) {
            report.fresh.push(name);
            continue;
        }
        let src = source.params().by_name(&name)?;
        let dst = target.params_mut().get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Incompatible(format!(
                "{name}: shape {:?} vs {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        report.copied.push(name);
    }
    for (_, name, _) in source.params().iter() {
        if !target.params().contains(name) {
            report.ignored.push(name.to_string());
        }
    }
    Ok(report)
}
