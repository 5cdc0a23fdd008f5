//! Puzzle records, manifest I/O, the root-level split, and the synthetic
//! generator.

mod instance;
mod manifest;
mod pixmap;
mod split;
mod synth;

pub use instance::{letter_to_index, PuzzleInstance};
pub use manifest::{
    load_manifest, manifest_path, parse_manifest, read_manifest, write_dataset, ManifestRecord, MANIFEST_FILE,
    MANIFEST_HEADER,
};
pub use pixmap::{decode_ppm, encode_ppm, read_image, write_ppm};
pub use split::{puzzle_split, split_counts, Split, SplitSpec, TRAIN_FRACTION, VAL_FRACTION};
pub use synth::{
    render, root_noun, synth_instance, synth_iter, synth_puzzles, QuestionKind, BACKGROUND, CANVAS, CELL, GLYPH_INSET,
    GRID, MAX_COUNT, NOUNS, PALETTE,
};
