//! The visual and textual towers plus their input preprocessing.

mod config;
mod image;
mod text;
mod towers;

pub use config::EncoderConfig;
pub use image::{patchify, preprocess_image, unpatchify, RgbImage, PIXEL_MEAN, PIXEL_STD};
pub use text::{
    render_option, render_prompt, split_words, tokenize, tokenize_option, TokenSequence, Vocab, BOS_ID,
    OPTION_LETTERS, PAD_ID, UNK_ID,
};
pub use towers::{TextEncoder, VisionEncoder};
