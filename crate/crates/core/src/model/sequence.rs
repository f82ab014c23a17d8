// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Textual,
}

/// Positional/semantic role of a token for tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// (1) visual tokens before the queried object's region.
    EarlyVisual,
    /// (2) visual tokens of the queried object's cells.
    ObjectVisual,
    /// (3) visual tokens after the queried object's region.
    LateVisual,
    /// (4) first textual tokens after the modality boundary.
    EarlyTextual,
    /// (5) textual tokens naming the queried object.
    TextualObject,
    /// (6) remaining prompt tokens before the last one.
    LateTextual,
    /// (7) the final input position.
    Last,
    /// Anything outside the seven traced categories.
    Other,
}

impl Category {
    /// The seven traced categories in canonical order.
    pub const TRACED: [Category; 7] = [
        Category::EarlyVisual,
        Category::ObjectVisual,
        Category::LateVisual,
        Category::EarlyTextual,
        Category::TextualObject,
        Category::LateTextual,
        Category::Last,
    ];

    /// 0-based index into [`Category::TRACED`]; `None` for `Other`.
    pub fn index(self) -> Option<usize> {
        Category::TRACED.iter().position(|c| *c == self)
    }

    /// Stable snake-case label used in files.
    pub fn label(self) -> &'static str {
        match self {
            Category::EarlyVisual => "early_visual",
            Category::ObjectVisual => "object_visual",
            Category::LateVisual => "late_visual",
            Category::EarlyTextual => "early_textual",
            Category::TextualObject => "textual_object",
            Category::LateTextual => "late_textual",
            Category::Last => "last",
            Category::Other => "other",
        }
    }

    pub fn from_label(s: &str) -> Option<Category> {
        Category::TRACED
            .iter()
            .copied()
            .chain(core::iter::once(Category::Other))
            .find(|c| c.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub modality: Modality,
    /// Vocabulary index for text, raster cell index for visual tokens.
    pub id: usize,
    pub category: Category,
}

/// Raw model input: image cells (one row per cell) followed by text ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub cells: Matrix,
    pub text: Vec<usize>,
    /// One entry per position (`cells.rows() + text.len()`).
    pub categories: Vec<Category>,
}

impl SequenceInput {
    /// Input whose only annotation is `Last` on the final position.
    pub fn unannotated(cells: Matrix, text: Vec<usize>) -> Self {
        let len = cells.rows() + text.len();
        let mut categories = alloc::vec![Category::Other; len];
        if let Some(last) = categories.last_mut() {
            *last = Category::Last;
        }
        Self {
            cells,
            text,
            categories,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.rows() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An embedded sequence ready for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub(crate) tokens: Vec<Token>,
    pub(crate) visual_len: usize,
    /// Post-embedding residual stream `h(-1)`, one row per position.
    pub(crate) embeddings: Matrix,
    /// Cell features kept for the patch-projection gradient.
    pub(crate) cells: Matrix,
}

impl MultimodalSequence {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of visual positions `m`.
    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    /// Number of textual positions `n`.
    pub fn textual_len(&self) -> usize {
        self.tokens.len() - self.visual_len
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn text_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens[self.visual_len..].iter().map(|t| t.id)
    }

    /// Positions annotated with `category`, ascending.
    pub fn positions_of(&self, category: Category) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.category == category)
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn check_annotation(tokens: &[Token]) -> Result<()> {
        let n = tokens.len();
        let lasts: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.category == Category::Last)
            .map(|(i, _)| i)
            .collect();
        if n > 0 && lasts != [n - 1] {
            return Err(invalid(
                "categories",
                format!("exactly the final position must be Last, found {lasts:?}"),
            ));
        }
        for t in tokens {
            let visual_cat = matches!(
                t.category,
                Category::EarlyVisual | Category::ObjectVisual | Category::LateVisual
            );
            let textual_cat = matches!(
                t.category,
                Category::EarlyTextual | Category::TextualObject | Category::LateTextual
            );
            if (visual_cat && t.modality != Modality::Visual)
                || (textual_cat && t.modality != Modality::Textual)
            {
                return Err(invalid(
                    "categories",
                    format!("{:?} assigned to a {:?} token", t.category, t.modality),
                ));
            }
        }
        Ok(())
    }
}
