// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Patchable block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// MHSA output `a(l)`.
    Attn,
    /// FFN output `m(l)`.
    Ffn,
    /// Residual stream `h(l)`.
    Hidden,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Attn, Component::Ffn, Component::Hidden];

    pub fn label(self) -> &'static str {
        match self {
            Component::Attn => "attn",
            Component::Ffn => "ffn",
            Component::Hidden => "hidden",
        }
    }

    pub fn from_label(s: &str) -> Option<Component> {
        match s {
            "attn" | "mhsa" => Some(Component::Attn),
            "ffn" | "mlp" => Some(Component::Ffn),
            "hidden" => Some(Component::Hidden),
            _ => None,
        }
    }
}

/// Where in the forward pass a hook fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    /// Post-embedding residual stream `h(-1)`.
    Embed,
    Block { layer: usize, component: Component },
}

impl HookPoint {
    pub fn block(layer: usize, component: Component) -> Self {
        HookPoint::Block { layer, component }
    }

    /// Layer index with `Embed` mapped to `-1`.
    pub fn layer_index(self) -> isize {
        match self {
            HookPoint::Embed => -1,
            HookPoint::Block { layer, .. } => layer as isize,
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::Embed => f.write_str("hidden@-1"),
            HookPoint::Block { layer, component } => write!(f, "{}@{layer}", component.label()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    /// Overwrite the selected rows.
    Replace,
    /// Add to the selected rows.
    Add,
}

/// Row edit returned by an [`Intervener`]: `values` has one row per entry of
/// `positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub positions: Vec<usize>,
    pub kind: EditKind,
    pub values: Matrix,
}

impl Edit {
    pub fn replace(positions: Vec<usize>, values: Matrix) -> Self {
        Self {
            positions,
            kind: EditKind::Replace,
            values,
        }
    }

    pub fn add(positions: Vec<usize>, values: Matrix) -> Self {
        Self {
            positions,
            kind: EditKind::Add,
            values,
        }
    }

    pub(crate) fn apply(&self, point: HookPoint, act: &mut Matrix) -> Result<()> {
        let bad = |detail| Error::BadEdit {
            point: point.to_string(),
            detail,
        };
        if self.values.rows() != self.positions.len() || self.values.cols() != act.cols() {
            return Err(bad(format!(
                "{} positions with values {:?}, activation is {:?}",
                self.positions.len(),
                self.values.shape(),
                act.shape()
            )));
        }
        for (i, &p) in self.positions.iter().enumerate() {
            if p >= act.rows() {
                return Err(bad(format!("position {p} outside sequence of {}", act.rows())));
            }
            let src = self.values.row(i);
            let dst = act.row_mut(p);
            match self.kind {
                EditKind::Replace => dst.copy_from_slice(src),
                EditKind::Add => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
            }
        }
        Ok(())
    }
}

/// Read-only hook. Observers never influence the computation.
pub trait Observer {
    /// Called with the final (post-intervention) activation at `point`.
    fn observe(&mut self, point: HookPoint, act: &Matrix);

    /// Called once per layer with the per-head attention probabilities.
    fn observe_attention(&mut self, _layer: usize, _weights: &[Matrix]) {}
}

/// Hook that may rewrite activations before they enter the residual sum.
pub trait Intervener {
    /// Returns zero or more edits to apply to `act` at `point`, in order.
    fn intervene(&mut self, point: HookPoint, act: &Matrix) -> Result<Vec<Edit>>;
}

/// Observers and interveners attached to one forward pass (or one decode).
#[derive(Default)]
pub struct HookSet<'a> {
    observers: Vec<&'a mut dyn Observer>,
    interveners: Vec<&'a mut dyn Intervener>,
    owned: Vec<Box<dyn Intervener + 'a>>,
}

impl fmt::Debug for HookSet<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookSet")
            .field("observers", &self.observers.len())
            .field("interveners", &(self.interveners.len() + self.owned.len()))
            .finish()
    }
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(mut self, o: &'a mut dyn Observer) -> Self {
        self.observers.push(o);
        self
    }

    pub fn intervene(mut self, i: &'a mut dyn Intervener) -> Self {
        self.interveners.push(i);
        self
    }

    /// Attaches an intervener the set owns (useful for one-shot patches).
    pub fn intervene_owned(mut self, i: impl Intervener + 'a) -> Self {
        self.owned.push(Box::new(i));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.observers.is_empty() && self.interveners.is_empty() && self.owned.is_empty()
    }

    pub(crate) fn has_interveners(&self) -> bool {
        !(self.interveners.is_empty() && self.owned.is_empty())
    }

    /// Runs interveners (borrowed first, then owned) and then observers.
    pub(crate) fn fire(&mut self, point: HookPoint, act: &mut Matrix) -> Result<()> {
        if self.has_interveners() {
            for i in self.interveners.iter_mut() {
                for edit in i.intervene(point, act)? {
                    edit.apply(point, act)?;
                }
            }
            for i in self.owned.iter_mut() {
                for edit in i.intervene(point, act)? {
                    edit.apply(point, act)?;
                }
            }
        }
        for o in self.observers.iter_mut() {
            o.observe(point, act);
        }
        Ok(())
    }

    pub(crate) fn fire_attention(&mut self, layer: usize, weights: &[Matrix]) {
        for o in self.observers.iter_mut() {
            o.observe_attention(layer, weights);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn edit_replace_and_add() {
        let mut act = Matrix::zeros(3, 2);
        let p = HookPoint::block(0, Component::Attn);
        Edit::replace(vec![1], Matrix::row_vector(&[1.0, 2.0])).apply(p, &mut act).unwrap();
        Edit::add(vec![1, 2], Matrix::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]).unwrap())
            .apply(p, &mut act)
            .unwrap();
        assert_eq!(act.data(), &[0.0, 0.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn malformed_edits_are_errors() {
        let mut act = Matrix::zeros(3, 2);
        let p = HookPoint::Embed;
        assert!(Edit::replace(vec![0], Matrix::zeros(1, 3)).apply(p, &mut act).is_err());
        assert!(Edit::replace(vec![0, 1], Matrix::zeros(1, 2)).apply(p, &mut act).is_err());
        assert!(Edit::replace(vec![5], Matrix::zeros(1, 2)).apply(p, &mut act).is_err());
    }

    #[test]
    fn hook_point_display() {
        assert_eq!(HookPoint::Embed.to_string(), "hidden@-1");
        assert_eq!(HookPoint::block(3, Component::Ffn).to_string(), "ffn@3");
    }
}
