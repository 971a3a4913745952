//! Run reports: one JSON document per command invocation.
//!
//! Schema (keys in this order, all required unless marked optional):
//!
//! | key            | type                                              |
//! |----------------|---------------------------------------------------|
//! | `format`       | `"mvft-report"`                                   |
//! | `version`      | integer                                           |
//! | `command`      | array of argv strings                             |
//! | `config`       | training config object                            |
//! | `data`         | `{path, content_hash, windows, label_names}`      |
//! | `split`        | optional split object                             |
//! | `metrics`      | map of split name to metrics object               |
//! | `history`      | array of `{epoch, train_loss, val_acc}`           |
//! | `ablation`     | array of `{model, views, status, accuracy, error}` |
//! | `wall_clock_s` | number                                            |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ModelKind;
use crate::data::DatasetSplit;
use crate::error::{MvftError, Result};
use crate::mask::ViewMask;
use crate::train::{EpochRecord, Metrics, TrainConfig};

pub const REPORT_FORMAT: &str = "mvft-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub path: String,
    pub content_hash: String,
    pub windows: usize,
    pub label_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One (model, view subset) cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub model: ModelKind,
    pub views: ViewMask,
    pub status: CellStatus,
    /// Test accuracy in `[0, 1]`; absent for failed cells.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub command: Vec<String>,
    pub config: TrainConfig,
    pub data: DataInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<DatasetSplit>,
    pub metrics: BTreeMap<String, Metrics>,
    pub history: Vec<EpochRecord>,
    pub ablation: Vec<AblationRow>,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn new(command: Vec<String>, config: TrainConfig, data: DataInfo) -> Self {
        RunReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            command,
            config,
            data,
            split: None,
            metrics: BTreeMap::new(),
            history: Vec::new(),
            ablation: Vec::new(),
            wall_clock_s: 0.0,
        }
    }
}

/// Deserializes JSON, reporting schema violations with the path of the
/// offending value.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() || inner.is_io() {
            MvftError::Json(inner)
        } else {
            MvftError::Schema {
                path,
                message: inner.to_string(),
            }
        }
    })
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let report: RunReport = from_json_str(&fs::read_to_string(path)?)?;
    if report.format != REPORT_FORMAT {
        return Err(MvftError::Schema {
            path: "format".into(),
            message: format!("expected `{REPORT_FORMAT}`, found `{}`", report.format),
        });
    }
    if report.version != REPORT_VERSION {
        return Err(MvftError::Version {
            found: report.version,
            expected: REPORT_VERSION,
        });
    }
    Ok(report)
}
