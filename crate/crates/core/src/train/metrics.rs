use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::embed::EmbedMode;

pub const METRICS_MAGIC: &str = "# lumvit metrics v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub mean_d_ops: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub embed_mode: EmbedMode,
}

fn mode_name(m: EmbedMode) -> &'static str {
    match m {
        EmbedMode::FullPrecision => "full_precision",
        EmbedMode::Binarized => "binarized",
    }
}

pub fn metrics_csv(stage: u8, rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_MAGIC} stage={stage}\nepoch,train_loss,val_oa,mean_d_ops,lr,embed_mode\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.10},{:.10},{:.10},{:.10e},{}",
            r.epoch,
            r.train_loss,
            r.val_oa,
            r.mean_d_ops,
            r.lr,
            mode_name(r.embed_mode)
        )
        .expect("write to string");
    }
    s
}
