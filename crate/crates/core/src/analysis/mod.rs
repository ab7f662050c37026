pub mod report;
pub mod stats;
pub mod synth;

pub use report::{
    dice_scores, margin_items, mdn_mean_box, report_text, rows_csv, run_report, summarize, AnalysisReport, DiceSource,
    ReportConfig, ReportRow, ReportSummary,
};
pub use stats::{
    mean_sem, median, pearson, pearson_p_value, pearson_permutation, quadrant_classes, ranks, spearman, Correlation,
    MeanSem, Quadrant, QuadrantSummary, QuadrantTable,
};
pub use synth::{generate_synthetic_dataset, scene_embedding, synth_scenes, SynthConfig, SynthScene, SynthSummary};
