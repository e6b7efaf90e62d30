//! Whole-volume inference, thresholding and evaluation statistics.

mod report;
mod stats;
mod tile;

pub(crate) use report::{csv_error, write_json};
pub use report::{
    evaluate_dirs, evaluate_network, summarize, write_histogram, EvalReport, EvalSettings,
    ImageRow, Summary,
};
pub use stats::{
    absolute_dice, dice, hist2d_equal_count, icc, mean, paired_ttest, quarter_dice,
    quarter_partition, sample_sd, volume_mm3, Hist2d, Overlap, TTest,
};
pub(crate) use tile::{extract, tile_average};
pub use tile::{
    segment, segment_default, tile_corners, tile_predict, tile_predict_checkpoint, Prediction,
    Provenance,
};
