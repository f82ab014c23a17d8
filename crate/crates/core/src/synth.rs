// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic grid-image tasks.
//!
//! Images are `rows x cols` grids of cells. Every cell carries
//! [`CELL_FEATURES`] values in `[0, 1]`: an RGB colour followed by a one-hot
//! shape code. Each object class has its own colour and shape and occupies
//! 1 to 4 edge-connected cells. Two tasks are derived from an image:
//!
//! - object-presence QA with the fixed prompt
//!   `is there a <obj> in the image ? please answer this question with one word ( yes or no ) .`
//! - captioning with the prompt `describe the image .` and the canonical
//!   caption `a <obj> . a <obj> . <stop>` listing objects in raster order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::model::{Category, SequenceInput};
use crate::numerics::{Matrix, Rng};

/// Number of object classes.
pub const N_CLASSES: usize = 8;
/// RGB + one-hot shape.
pub const CELL_FEATURES: usize = 3 + N_CLASSES;
/// Width of the early-textual category.
pub const EARLY_TEXTUAL: usize = 2;
/// Background cell colour.
pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];

const OBJECT_NAMES: [&str; N_CLASSES] = ["dog", "cat", "car", "ball", "tree", "cup", "bird", "book"];
const OBJECT_COLORS: [[f64; 3]; N_CLASSES] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.2, 0.2, 0.9],
    [0.9, 0.9, 0.2],
    [0.9, 0.2, 0.9],
    [0.2, 0.9, 0.9],
    [0.9, 0.6, 0.3],
    [0.6, 0.6, 0.6],
];

const FUNCTION_WORDS: [&str; 21] = [
    "<stop>", "yes", "no", "is", "there", "a", "in", "the", "image", "?", "please", "answer", "this",
    "question", "with", "one", "word", "(", "or", ")", ".",
];
const EXTRA_WORDS: [&str; 2] = ["describe", "nothing"];

const QA_TEMPLATE: [&str; 21] = [
    "is", "there", "a", "<obj>", "in", "the", "image", "?", "please", "answer", "this", "question", "with",
    "one", "word", "(", "yes", "or", "no", ")", ".",
];
const CAPTION_PROMPT: [&str; 4] = ["describe", "the", "image", "."];

/// The toy vocabulary: function words, then object names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut words: Vec<&'static str> = FUNCTION_WORDS.to_vec();
        words.extend_from_slice(&EXTRA_WORDS);
        words.extend_from_slice(&OBJECT_NAMES);
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| *w == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    fn must(&self, word: &str) -> usize {
        self.id(word).expect("word in standard vocabulary")
    }

    pub fn yes(&self) -> usize {
        self.must("yes")
    }

    pub fn no(&self) -> usize {
        self.must("no")
    }

    pub fn stop(&self) -> usize {
        self.must("<stop>")
    }

    pub fn period(&self) -> usize {
        self.must(".")
    }

    /// Token id naming object class `class`.
    pub fn object_token(&self, class: usize) -> usize {
        self.must(OBJECT_NAMES[class])
    }

    /// Object class named by `token`, if any.
    pub fn object_class(&self, token: usize) -> Option<usize> {
        let w = self.word(token)?;
        OBJECT_NAMES.iter().position(|n| *n == w)
    }

    /// Space-joined rendering of a token list.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.word(*id).unwrap_or("<unk>"));
        }
        s
    }

    /// Inverse of [`Vocab::render`].
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| invalid("text", format!("unknown word `{w}`"))))
            .collect()
    }
}

/// Placed object: class id plus the raster indices of its cells (ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedObject {
    pub class: usize,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub rows: usize,
    pub cols: usize,
    /// `rows*cols x CELL_FEATURES`, raster order.
    pub cells: Matrix,
    pub objects: Vec<PlacedObject>,
}

impl GridImage {
    pub fn blank(rows: usize, cols: usize) -> Self {
        let mut cells = Matrix::zeros(rows * cols, CELL_FEATURES);
        for r in 0..rows * cols {
            cells.row_mut(r)[..3].copy_from_slice(&BACKGROUND);
        }
        Self {
            rows,
            cols,
            cells,
            objects: Vec::new(),
        }
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    fn paint(&mut self, class: usize, cells: &[usize]) {
        for &c in cells {
            let row = self.cells.row_mut(c);
            row.iter_mut().for_each(|v| *v = 0.0);
            row[..3].copy_from_slice(&OBJECT_COLORS[class]);
            row[3 + class] = 1.0;
        }
    }
}

/// Canonical feature vector of an object cell.
pub fn object_features(class: usize) -> [f64; CELL_FEATURES] {
    let mut f = [0.0; CELL_FEATURES];
    f[..3].copy_from_slice(&OBJECT_COLORS[class]);
    f[3 + class] = 1.0;
    f
}

/// Places `n_objects` objects of distinct classes on disjoint cells.
pub fn gen_image(rng: &mut Rng, grid: (usize, usize), n_objects: usize, max_cells: usize) -> Result<GridImage> {
    let (rows, cols) = grid;
    if n_objects > N_CLASSES {
        return Err(Error::Infeasible(format!("{n_objects} objects but only {N_CLASSES} classes")));
    }
    if max_cells == 0 {
        return Err(invalid("max_cells", "objects need at least one cell"));
    }
    if n_objects > rows * cols {
        return Err(Error::Infeasible(format!("{n_objects} objects on {} cells", rows * cols)));
    }
    let mut classes: Vec<usize> = (0..N_CLASSES).collect();
    rng.shuffle(&mut classes);
    let mut image = GridImage::blank(rows, cols);
    let mut occupied = vec![false; rows * cols];
    for &class in classes.iter().take(n_objects) {
        let target = 1 + rng.below(max_cells);
        let mut placed = None;
        for _attempt in 0..64 {
            let start = rng.below(rows * cols);
            if occupied[start] {
                continue;
            }
            let mut cells = vec![start];
            while cells.len() < target {
                let mut frontier: Vec<usize> = Vec::new();
                for &c in &cells {
                    let (r, col) = (c / cols, c % cols);
                    let mut push = |n: usize| {
                        if !occupied[n] && !cells.contains(&n) && !frontier.contains(&n) {
                            frontier.push(n);
                        }
                    };
                    if r > 0 {
                        push(c - cols);
                    }
                    if r + 1 < rows {
                        push(c + cols);
                    }
                    if col > 0 {
                        push(c - 1);
                    }
                    if col + 1 < cols {
                        push(c + 1);
                    }
                }
                if frontier.is_empty() {
                    break;
                }
                frontier.sort_unstable();
                cells.push(frontier[rng.below(frontier.len())]);
            }
            cells.sort_unstable();
            placed = Some(cells);
            break;
        }
        let cells = placed.ok_or_else(|| Error::Infeasible(format!("no free cell for class {class}")))?;
        for &c in &cells {
            occupied[c] = true;
        }
        image.paint(class, &cells);
        image.objects.push(PlacedObject { class, cells });
    }
    Ok(image)
}

/// Object-presence question with its token-category annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct QASample {
    pub image: GridImage,
    pub question: Vec<usize>,
    pub queried: usize,
    pub answer: bool,
    /// One entry per position, visual then textual.
    pub categories: Vec<Category>,
    /// Queried object's cells are not one raster-contiguous run, so some
    /// positions between its first and last cell are annotated `Other`.
    pub non_contiguous: bool,
}

impl QASample {
    pub fn to_input(&self) -> SequenceInput {
        SequenceInput {
            cells: self.image.cells.clone(),
            text: self.question.clone(),
            categories: self.categories.clone(),
        }
    }

    /// Same sample with its image replaced (e.g. by a corrupted copy).
    pub fn input_with_image(&self, image: &GridImage) -> SequenceInput {
        SequenceInput {
            cells: image.cells.clone(),
            text: self.question.clone(),
            categories: self.categories.clone(),
        }
    }

    /// Negative samples have no object-visual tokens and act as a control.
    pub fn is_control(&self) -> bool {
        !self.answer
    }

    pub fn answer_token(&self, vocab: &Vocab) -> usize {
        if self.answer {
            vocab.yes()
        } else {
            vocab.no()
        }
    }
}

/// Question tokens for class `class`.
pub fn question_tokens(vocab: &Vocab, class: usize) -> Vec<usize> {
    QA_TEMPLATE
        .iter()
        .map(|w| {
            if *w == "<obj>" {
                vocab.object_token(class)
            } else {
                vocab.id(w).expect("template word")
            }
        })
        .collect()
}

/// Seven-way annotation for an image of `n_visual` cells, the queried
/// object's cells and the question tokens. Returns `(categories, non_contiguous)`.
pub fn annotate(n_visual: usize, object_cells: &[usize], question: &[usize], object_token: usize) -> (Vec<Category>, bool) {
    let n = question.len();
    let mut cats = vec![Category::Other; n_visual + n];
    let mut non_contiguous = false;
    match (object_cells.iter().min(), object_cells.iter().max()) {
        (Some(&first), Some(&last)) => {
            for (p, c) in cats.iter_mut().enumerate().take(n_visual) {
                *c = if object_cells.contains(&p) {
                    Category::ObjectVisual
                } else if p < first {
                    Category::EarlyVisual
                } else if p > last {
                    Category::LateVisual
                } else {
                    non_contiguous = true;
                    Category::Other
                };
            }
        }
        _ => {
            for c in cats.iter_mut().take(n_visual) {
                *c = Category::EarlyVisual;
            }
        }
    }
    let obj_pos = question.iter().position(|t| *t == object_token);
    for i in 0..n {
        let p = n_visual + i;
        cats[p] = if i + 1 == n {
            Category::Last
        } else if Some(i) == obj_pos {
            Category::TextualObject
        } else if obj_pos.is_some_and(|o| i > o) {
            Category::LateTextual
        } else if i < EARLY_TEXTUAL {
            Category::EarlyTextual
        } else {
            Category::Other
        };
    }
    (cats, non_contiguous)
}

/// Builds a QA sample: with probability `positive_rate` (and when possible)
/// it asks about a present object, otherwise about an absent one.
pub fn gen_qa(rng: &mut Rng, image: &GridImage, positive_rate: f64, vocab: &Vocab) -> QASample {
    let present: Vec<usize> = image.objects.iter().map(|o| o.class).collect();
    let absent: Vec<usize> = (0..N_CLASSES).filter(|c| !present.contains(c)).collect();
    let want_positive = rng.uniform() < positive_rate;
    let positive = if present.is_empty() {
        false
    } else if absent.is_empty() {
        true
    } else {
        want_positive
    };
    let queried = if positive {
        present[rng.below(present.len())]
    } else {
        absent[rng.below(absent.len())]
    };
    let question = question_tokens(vocab, queried);
    let object_cells: &[usize] = image
        .objects
        .iter()
        .find(|o| o.class == queried)
        .map_or(&[], |o| &o.cells);
    let (categories, non_contiguous) =
        annotate(image.rows * image.cols, object_cells, &question, vocab.object_token(queried));
    QASample {
        image: image.clone(),
        question,
        queried,
        answer: positive,
        categories,
        non_contiguous,
    }
}

/// Prompt that precedes a caption.
pub fn caption_prompt(vocab: &Vocab) -> Vec<usize> {
    CAPTION_PROMPT.iter().map(|w| vocab.id(w).expect("prompt word")).collect()
}

/// Decoder input for captioning `image`: its cells followed by the prompt.
pub fn caption_input(image: &GridImage, vocab: &Vocab) -> SequenceInput {
    SequenceInput::unannotated(image.cells.clone(), caption_prompt(vocab))
}

/// Canonical caption: `a <obj> .` per object ordered by first cell, or
/// `nothing .` for an empty image, then `<stop>`.
pub fn gen_caption_target(image: &GridImage, vocab: &Vocab) -> Vec<usize> {
    let mut objs: Vec<&PlacedObject> = image.objects.iter().collect();
    objs.sort_by_key(|o| o.cells.first().copied().unwrap_or(usize::MAX));
    let a = vocab.must("a");
    let mut out = Vec::new();
    if objs.is_empty() {
        out.push(vocab.must("nothing"));
        out.push(vocab.period());
    }
    for o in objs {
        out.extend_from_slice(&[a, vocab.object_token(o.class), vocab.period()]);
    }
    out.push(vocab.stop());
    out
}

/// Shape of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub grid: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_object_cells: usize,
    pub positive_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: (6, 6),
            n_train: 4000,
            n_val: 400,
            n_test: 400,
            min_objects: 1,
            max_objects: 3,
            max_object_cells: 4,
            positive_rate: 0.5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(invalid("max_objects", "must be >= min_objects"));
        }
        if self.max_objects > N_CLASSES {
            return Err(invalid("max_objects", format!("at most {N_CLASSES}")));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(invalid("positive_rate", "must lie in [0, 1]"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(invalid("grid", "must be nonempty"));
        }
        if !(1..=4).contains(&self.max_object_cells) {
            return Err(invalid("max_object_cells", "must lie in 1..=4"));
        }
        Ok(())
    }
}

/// Train / validation / test splits of QA samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<QASample>,
    pub val: Vec<QASample>,
    pub test: Vec<QASample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[QASample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates one sample; a pure function of `(config, split, index)`.
pub fn gen_sample(config: &DatasetConfig, split: Split, index: usize, vocab: &Vocab) -> Result<QASample> {
    let mut rng = Rng::new(config.seed).split(split as u64 + 1).split(index as u64);
    let span = config.max_objects - config.min_objects + 1;
    let n_objects = config.min_objects + rng.below(span);
    let image = gen_image(&mut rng, config.grid, n_objects, config.max_object_cells)?;
    Ok(gen_qa(&mut rng, &image, config.positive_rate, vocab))
}

pub fn gen_dataset(config: &DatasetConfig, vocab: &Vocab) -> Result<Dataset> {
    config.validate()?;
    let make = |split, n| (0..n).map(|i| gen_sample(config, split, i, vocab)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: make(Split::Train, config.n_train)?,
        val: make(Split::Val, config.n_val)?,
        test: make(Split::Test, config.n_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::standard()
    }

    #[test]
    fn zero_objects_is_all_background() {
        let img = gen_image(&mut Rng::new(0), (6, 6), 0, 4).unwrap();
        assert!(img.objects.is_empty());
        for r in 0..36 {
            assert_eq!(&img.cells.row(r)[..3], &BACKGROUND);
            assert!(img.cells.row(r)[3..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_image() {
        let a = gen_image(&mut Rng::new(17), (6, 6), 3, 4).unwrap();
        let b = gen_image(&mut Rng::new(17), (6, 6), 3, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn object_cells_carry_their_code_and_are_disjoint() {
        for seed in 0..200 {
            let img = gen_image(&mut Rng::new(seed), (6, 6), 3, 4).unwrap();
            let mut seen = Vec::new();
            for o in &img.objects {
                assert!((1..=4).contains(&o.cells.len()));
                for &c in &o.cells {
                    assert!(!seen.contains(&c));
                    seen.push(c);
                    assert_eq!(img.cells.row(c), &object_features(o.class));
                }
            }
            assert!(img.cells.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn too_many_objects_is_infeasible() {
        assert!(gen_image(&mut Rng::new(0), (1, 2), 3, 1).is_err());
    }

    #[test]
    fn positive_and_negative_annotations() {
        let v = vocab();
        let img = gen_image(&mut Rng::new(4), (6, 6), 2, 4).unwrap();
        let pos = gen_qa(&mut Rng::new(1), &img, 1.0, &v);
        assert!(pos.answer);
        assert!(pos.categories.contains(&Category::ObjectVisual));
        let neg = gen_qa(&mut Rng::new(1), &img, 0.0, &v);
        assert!(!neg.answer);
        assert!(!neg.categories.contains(&Category::ObjectVisual));
        assert!(neg.categories.contains(&Category::TextualObject));
        assert!(neg.categories[..36].iter().all(|c| *c == Category::EarlyVisual));
    }

    #[test]
    fn question_layout() {
        let v = vocab();
        let q = question_tokens(&v, 2);
        assert_eq!(
            v.render(&q),
            "is there a car in the image ? please answer this question with one word ( yes or no ) ."
        );
        let (cats, _) = annotate(4, &[1], &q, v.object_token(2));
        assert_eq!(&cats[4..6], &[Category::EarlyTextual; 2]);
        assert_eq!(cats[6], Category::Other);
        assert_eq!(cats[7], Category::TextualObject);
        assert!(cats[8..cats.len() - 1].iter().all(|c| *c == Category::LateTextual));
        assert_eq!(*cats.last().unwrap(), Category::Last);
        assert_eq!(&cats[..4], &[Category::EarlyVisual, Category::ObjectVisual, Category::LateVisual, Category::LateVisual]);
    }

    #[test]
    fn annotation_soundness_over_many_samples() {
        let v = vocab();
        let cfg = DatasetConfig::default();
        for i in 0..1000 {
            let s = gen_sample(&cfg, Split::Train, i, &v).unwrap();
            let m = 36;
            assert_eq!(s.categories.len(), m + s.question.len());
            assert_eq!(s.answer, s.image.contains_class(s.queried));
            let last: Vec<usize> = (0..s.categories.len()).filter(|&p| s.categories[p] == Category::Last).collect();
            assert_eq!(last, [s.categories.len() - 1]);
            let obj: Vec<usize> = (0..m).filter(|&p| s.categories[p] == Category::ObjectVisual).collect();
            match s.image.objects.iter().find(|o| o.class == s.queried) {
                Some(o) => assert_eq!(obj, o.cells),
                None => assert!(obj.is_empty()),
            }
            if s.answer && !s.non_contiguous {
                assert!(s.categories[..m].iter().all(|c| matches!(
                    c,
                    Category::EarlyVisual | Category::ObjectVisual | Category::LateVisual
                )));
            }
            for (p, c) in s.categories.iter().enumerate() {
                let visual = p < m;
                match c {
                    Category::EarlyVisual | Category::ObjectVisual | Category::LateVisual => assert!(visual),
                    Category::EarlyTextual | Category::TextualObject | Category::LateTextual => assert!(!visual),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn captions() {
        let v = vocab();
        let empty = GridImage::blank(6, 6);
        assert_eq!(v.render(&gen_caption_target(&empty, &v)), "nothing . <stop>");
        let mut img = GridImage::blank(6, 6);
        img.paint(1, &[15]);
        img.objects.push(PlacedObject { class: 1, cells: vec![15] });
        img.paint(0, &[0]);
        img.objects.push(PlacedObject { class: 0, cells: vec![0] });
        assert_eq!(v.render(&gen_caption_target(&img, &v)), "a dog . a cat . <stop>");
    }

    #[test]
    fn caption_vocabulary_is_closed() {
        let v = vocab();
        let cfg = DatasetConfig::default();
        for i in 0..200 {
            let s = gen_sample(&cfg, Split::Val, i, &v).unwrap();
            assert!(gen_caption_target(&s.image, &v).iter().all(|t| *t < v.len()));
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let v = vocab();
        let cfg = DatasetConfig {
            n_train: 20,
            n_val: 5,
            n_test: 5,
            ..DatasetConfig::default()
        };
        assert_eq!(gen_dataset(&cfg, &v).unwrap(), gen_dataset(&cfg, &v).unwrap());
    }

    #[test]
    fn render_parse_roundtrip() {
        let v = vocab();
        let q = question_tokens(&v, 5);
        assert_eq!(v.parse(&v.render(&q)).unwrap(), q);
        assert!(v.parse("is there a unicorn").is_err());
    }
}
