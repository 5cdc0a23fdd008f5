//! Procedural counting puzzles.
//!
//! Every image is a 32×32 white canvas divided into a 4×4 grid of 8×8 cells;
//! `k ∈ 1..=9` cells hold a 6×6 filled square of one colour. A root puzzle
//! fixes the noun used in the question; each instance draws the colour, the
//! count, the question kind and the options. The answer is recoverable from
//! the pixels plus the question, so a small model can learn the task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::RgbImage;
use crate::error::{Error, Result};

use super::instance::PuzzleInstance;

pub const CANVAS: usize = 32;
pub const GRID: usize = 4;
pub const CELL: usize = CANVAS / GRID;
/// Gap between a cell border and its glyph.
pub const GLYPH_INSET: usize = 1;
pub const MAX_COUNT: usize = 9;
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Glyph colours. Channel sums are all 255 so "ink" has the same total
/// intensity whichever colour is drawn.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("olive", [128, 127, 0]),
    ("purple", [128, 0, 127]),
    ("teal", [0, 128, 127]),
    ("gray", [85, 85, 85]),
    ("brown", [150, 75, 30]),
];

pub const NOUNS: [&str; 8] = ["squares", "blocks", "tiles", "boxes", "cells", "cubes", "bricks", "chips"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    /// Answer is the number of drawn glyphs.
    Count,
    /// Answer is one more than the number of drawn glyphs.
    CountPlusOne,
}

impl QuestionKind {
    pub fn question(self, color: &str, noun: &str) -> String {
        match self {
            QuestionKind::Count => format!("How many {color} {noun} are in the figure?"),
            QuestionKind::CountPlusOne => {
                format!("How many {color} {noun} after adding one more?")
            }
        }
    }

    /// Recovers the kind from question text produced by [`QuestionKind::question`].
    pub fn parse(question: &str) -> Option<Self> {
        if question.ends_with("after adding one more?") {
            Some(QuestionKind::CountPlusOne)
        } else if question.ends_with("are in the figure?") {
            Some(QuestionKind::Count)
        } else {
            None
        }
    }

    pub fn answer(self, count: usize) -> usize {
        match self {
            QuestionKind::Count => count,
            QuestionKind::CountPlusOne => count + 1,
        }
    }
}

pub fn root_noun(root_id: u32) -> &'static str {
    NOUNS[root_id as usize % NOUNS.len()]
}

fn instance_rng(seed: u64, root_id: u32, instance_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((root_id as u64) << 32) | instance_id as u64);
    rng
}

/// Four distinct non-negative values within ±3 of `answer`, excluding it.
fn distractors(rng: &mut impl Rng, answer: usize) -> Vec<usize> {
    let lo = answer.saturating_sub(3);
    let mut pool: Vec<usize> = (lo..=answer + 3).filter(|&v| v != answer).collect();
    pool.shuffle(rng);
    pool.truncate(4);
    pool
}

/// Draws `count` glyphs of `rgb` into the given grid cells.
pub fn render(cells: &[usize], rgb: [u8; 3]) -> RgbImage {
    let mut img = RgbImage::filled(CANVAS, CANVAS, BACKGROUND).expect("canvas");
    for &c in cells {
        let (x0, y0) = ((c % GRID) * CELL, (c / GRID) * CELL);
        for y in y0 + GLYPH_INSET..y0 + CELL - GLYPH_INSET {
            for x in x0 + GLYPH_INSET..x0 + CELL - GLYPH_INSET {
                img.put(x, y, rgb);
            }
        }
    }
    img
}

/// Generates one instance; identical arguments always give identical output.
pub fn synth_instance(seed: u64, root_id: u32, instance_id: u32) -> PuzzleInstance {
    let mut rng = instance_rng(seed, root_id, instance_id);
    let (color, rgb) = PALETTE[rng.random_range(0..PALETTE.len())];
    let count = rng.random_range(1..=MAX_COUNT);
    let kind = if rng.random_bool(0.5) {
        QuestionKind::CountPlusOne
    } else {
        QuestionKind::Count
    };
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    cells.truncate(count);
    cells.sort_unstable();
    let image = render(&cells, rgb);

    let answer_value = kind.answer(count);
    let mut values = distractors(&mut rng, answer_value);
    let gold = rng.random_range(0..5);
    values.insert(gold, answer_value);
    let options = values.iter().map(|v| v.to_string()).collect();
    PuzzleInstance::new(
        root_id,
        instance_id,
        image,
        kind.question(color, root_noun(root_id)),
        options,
        gold,
    )
    .expect("generator emits valid instances")
}

/// Lazily yields `n_per_root` instances for each root `0..n_roots`, ordered by
/// `(root_id, instance_id)`.
pub fn synth_iter(seed: u64, n_roots: u32, n_per_root: u32) -> impl Iterator<Item = PuzzleInstance> {
    (0..n_roots).flat_map(move |r| (0..n_per_root).map(move |i| synth_instance(seed, r, i)))
}

pub fn synth_puzzles(seed: u64, n_roots: u32, n_per_root: u32) -> Result<Vec<PuzzleInstance>> {
    if n_roots < 3 {
        return Err(Error::Input(format!("need at least 3 synthetic roots, got {n_roots}")));
    }
    Ok(synth_iter(seed, n_roots, n_per_root).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distractors_stay_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for answer in 1..=10 {
            for _ in 0..50 {
                let d = distractors(&mut rng, answer);
                assert_eq!(d.len(), 4);
                let mut sorted = d.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), 4);
                assert!(d.iter().all(|&v| v != answer && v.abs_diff(answer) <= 3));
            }
        }
    }

    #[test]
    fn question_kind_round_trips() {
        for kind in [QuestionKind::Count, QuestionKind::CountPlusOne] {
            assert_eq!(QuestionKind::parse(&kind.question("red", "tiles")), Some(kind));
        }
    }

    #[test]
    fn question_kinds_tokenise_to_equal_length() {
        use crate::encoders::split_words;
        let a = split_words(&QuestionKind::Count.question("red", "tiles"));
        let b = split_words(&QuestionKind::CountPlusOne.question("red", "tiles"));
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
    }

    #[test]
    fn too_few_roots() {
        assert!(synth_puzzles(0, 2, 5).is_err());
    }

    fn recount(img: &RgbImage) -> usize {
        (0..GRID * GRID)
            .filter(|c| img.get((c % GRID) * CELL + CELL / 2, (c / GRID) * CELL + CELL / 2) != BACKGROUND)
            .count()
    }

    #[test]
    fn same_seed_same_instances() {
        assert_eq!(synth_puzzles(7, 4, 20).unwrap(), synth_puzzles(7, 4, 20).unwrap());
        assert_ne!(synth_puzzles(7, 4, 20).unwrap(), synth_puzzles(8, 4, 20).unwrap());
    }

    #[test]
    fn gold_option_equals_a_recount_of_the_image() {
        for p in synth_iter(3, 8, 200) {
            let kind = QuestionKind::parse(&p.question).expect("known question");
            let gold: usize = p.options[p.answer].parse().unwrap();
            let n = recount(&p.image);
            assert!((1..=MAX_COUNT).contains(&n));
            assert_eq!(gold, kind.answer(n), "{}", p.question);
            let mut values: Vec<usize> = p.options.iter().map(|o| o.parse().unwrap()).collect();
            assert!(values.iter().all(|v| v.abs_diff(gold) <= 3));
            values.sort_unstable();
            values.dedup();
            assert_eq!(values.len(), 5);
        }
    }

    #[test]
    fn gold_position_is_uniform() {
        let mut hist = [0usize; 5];
        for p in synth_iter(0, 10, 1000) {
            hist[p.answer] += 1;
        }
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // df = 4, p = 0.001
        assert!(chi2 < 18.47, "chi2 {chi2} for {hist:?}");
    }

    #[test]
    fn glyphs_fill_whole_cells() {
        let img = render(&[0, 5], [10, 20, 30]);
        assert_eq!((img.width(), img.height()), (CANVAS, CANVAS));
        assert_eq!(img.get(1, 1), [10, 20, 30]);
        assert_eq!(img.get(0, 0), BACKGROUND);
        assert_eq!(img.get(CELL + 3, CELL + 3), [10, 20, 30]);
        assert_eq!(recount(&img), 2);
    }
}
