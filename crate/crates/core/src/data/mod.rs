//! Dataset ingestion, sample construction, augmentation and fold splits.

mod fold;
mod geometry;
mod normalize;
mod points;
mod raster;
mod sampling;
mod synth;

pub use fold::{build_fold, FoldData, FoldFile, FoldReport, FoldSpec};
pub use geometry::PatchGeometry;
pub use normalize::{ChannelStats, Normalization, StatsAccumulator};
pub use points::{
    find_frame, load_sequence, load_sequence_dir, read_points, write_points, FramePair, GroundTruthPoint, Sequence,
    GT_HEADER,
};
pub use raster::Raster;
pub use sampling::{
    cross_duplicate, make_negative, make_positives, mirror_augment, mirror_point, mirror_points, shuffle, AugmentOptions,
    AugmentReport, Batch, Corpus, JitterPolicy, NegativePolicy, Neighborhood, Provenance, SampleRef,
};
pub use synth::{synth_corpus, synth_folds, synth_generate, write_synth_dataset, SynthConfig, SynthFrame, SynthSequence};
