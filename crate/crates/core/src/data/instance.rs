use crate::encoders::{RgbImage, OPTION_LETTERS};
use crate::error::{Error, Result};

/// One puzzle: an image, a question, five candidate answers and the index of
/// the correct one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuzzleInstance {
    pub root_id: u32,
    pub instance_id: u32,
    pub image: RgbImage,
    pub question: String,
    pub options: [String; 5],
    pub answer: usize,
}

impl PuzzleInstance {
    pub fn new(
        root_id: u32,
        instance_id: u32,
        image: RgbImage,
        question: String,
        options: Vec<String>,
        answer: usize,
    ) -> Result<Self> {
        let n = options.len();
        let options: [String; 5] = options
            .try_into()
            .map_err(|_| Error::Input(format!("puzzle {root_id}/{instance_id}: expected 5 options, got {n}")))?;
        if answer >= 5 {
            return Err(Error::Input(format!("puzzle {root_id}/{instance_id}: answer index {answer} out of range")));
        }
        Ok(Self {
            root_id,
            instance_id,
            image,
            question,
            options,
            answer,
        })
    }

    pub fn answer_letter(&self) -> char {
        OPTION_LETTERS[self.answer]
    }

    /// Copy whose option `i` is this puzzle's option `order[i]`, with the
    /// answer index following the gold option.
    pub fn with_option_order(&self, order: [usize; 5]) -> Result<Self> {
        let mut seen = [false; 5];
        for &o in &order {
            if o >= 5 || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Input(format!("{order:?} is not a permutation of 0..5")));
            }
        }
        Ok(Self {
            options: order.map(|o| self.options[o].clone()),
            answer: order.iter().position(|&o| o == self.answer).expect("permutation"),
            ..self.clone()
        })
    }
}

pub fn letter_to_index(s: &str) -> Option<usize> {
    let mut chars = s.trim().chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() {
        return None;
    }
    OPTION_LETTERS.iter().position(|&l| l == c)
}
