//! Trigger patches and their placement. A local trigger is one patch pasted
//! at a fixed anchor; the global trigger is the union of disjoint local
//! patches and is what evaluation always uses to fire the backdoor.

use crate::tensor::Tensor;
use crate::{CoreError, Result};
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    /// Patch pixels [h, w, C] in [0, 1].
    pub patch: Tensor,
    /// Top-left placement (row, col).
    pub row: usize,
    pub col: usize,
    pub id: String,
}

impl TriggerPattern {
    pub fn new(patch: Tensor, row: usize, col: usize, id: &str) -> Result<Self> {
        if patch.rank() != 3 {
            return Err(CoreError::ShapeMismatch("trigger patch must be [h,w,C]".into()));
        }
        Ok(Self {
            patch,
            row,
            col,
            id: id.into(),
        })
    }

    /// Solid white square of side `side` for `channels`-channel images.
    pub fn white_square(side: usize, row: usize, col: usize, channels: usize) -> Self {
        Self {
            patch: Tensor::filled(&[side, side, channels], 1.0),
            row,
            col,
            id: alloc::format!("white{side}x{side}@{row},{col}"),
        }
    }

    /// Zero-extent patch that leaves images unchanged. Test hook.
    pub fn noop() -> Self {
        Self {
            patch: Tensor::zeros(&[0, 0, 1]),
            row: 0,
            col: 0,
            id: "noop".into(),
        }
    }

    fn height(&self) -> usize {
        self.patch.shape()[0]
    }

    fn width(&self) -> usize {
        self.patch.shape()[1]
    }

    fn fits(&self, img_shape: &[usize]) -> Result<()> {
        let (h, w, c) = (img_shape[0], img_shape[1], img_shape[2]);
        if self.height() == 0 || self.width() == 0 {
            return Ok(());
        }
        if self.row + self.height() > h || self.col + self.width() > w {
            return Err(CoreError::TriggerPlacement(alloc::format!(
                "patch {}x{} at ({},{}) outside {}x{} image",
                self.height(),
                self.width(),
                self.row,
                self.col,
                h,
                w
            )));
        }
        if self.patch.shape()[2] != c {
            return Err(CoreError::TriggerPlacement("channel mismatch".into()));
        }
        Ok(())
    }

    fn overlaps(&self, other: &TriggerPattern) -> bool {
        if self.height() == 0 || other.height() == 0 {
            return false;
        }
        let r = self.row < other.row + other.height() && other.row < self.row + self.height();
        let c = self.col < other.col + other.width() && other.col < self.col + self.width();
        r && c
    }

    fn paint(&self, image: &mut Tensor, batch_index: usize) {
        let channels = image.shape()[3];
        for ph in 0..self.height() {
            for pw in 0..self.width() {
                for ch in 0..channels {
                    let src = (ph * self.width() + pw) * channels + ch;
                    let dst = image.idx4(batch_index, self.row + ph, self.col + pw, ch);
                    image.data_mut()[dst] = self.patch.data()[src];
                }
            }
        }
    }
}

/// Union of pairwise-disjoint local triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTrigger {
    locals: Vec<TriggerPattern>,
}

impl GlobalTrigger {
    pub fn new(locals: Vec<TriggerPattern>) -> Result<Self> {
        for i in 0..locals.len() {
            for j in i + 1..locals.len() {
                if locals[i].overlaps(&locals[j]) {
                    return Err(CoreError::TriggerPlacement(alloc::format!(
                        "local triggers {} and {} overlap",
                        locals[i].id,
                        locals[j].id
                    )));
                }
            }
        }
        Ok(Self { locals })
    }

    pub fn empty() -> Self {
        Self { locals: Vec::new() }
    }

    pub fn locals(&self) -> &[TriggerPattern] {
        &self.locals
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    /// Default single-pattern trigger: one white square in the bottom-right
    /// corner, one pixel in from the border.
    pub fn single_square(img_h: usize, img_w: usize, channels: usize, side: usize) -> Self {
        Self {
            locals: alloc::vec![TriggerPattern::white_square(
                side,
                img_h - side,
                img_w - side,
                channels
            )],
        }
    }

    /// Default coordinated trigger: four disjoint squares at the corners of
    /// the bottom-right quadrant.
    pub fn quadrant_corners(img_h: usize, img_w: usize, channels: usize, side: usize) -> Self {
        let (qh, qw) = (img_h / 2, img_w / 2);
        let anchors = [
            (qh, qw),
            (qh, img_w - side),
            (img_h - side, qw),
            (img_h - side, img_w - side),
        ];
        Self {
            locals: anchors
                .iter()
                .map(|&(r, c)| TriggerPattern::white_square(side, r, c, channels))
                .collect(),
        }
    }
}

/// A reference to either a single local trigger or the assembled pattern.
#[derive(Debug, Clone, Copy)]
pub enum TriggerRef<'a> {
    Local(&'a TriggerPattern),
    Global(&'a GlobalTrigger),
}

impl<'a> TriggerRef<'a> {
    /// Paste the trigger into every image of a [B, H, W, C] batch. The input
    /// is not mutated.
    pub fn apply_batch(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.rank() != 4 {
            return Err(CoreError::ShapeMismatch("trigger target must be [B,H,W,C]".into()));
        }
        let img_shape = [batch.shape()[1], batch.shape()[2], batch.shape()[3]];
        let mut out = batch.clone();
        match self {
            TriggerRef::Local(t) => {
                t.fits(&img_shape)?;
                for b in 0..batch.dim0() {
                    t.paint(&mut out, b);
                }
            }
            TriggerRef::Global(g) => {
                for t in &g.locals {
                    t.fits(&img_shape)?;
                }
                for b in 0..batch.dim0() {
                    for t in &g.locals {
                        t.paint(&mut out, b);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Paste into a single [H, W, C] image.
    pub fn apply_image(&self, image: &Tensor) -> Result<Tensor> {
        let batched = image.reshaped(&[
            1,
            image.shape()[0],
            image.shape()[1],
            image.shape()[2],
        ])?;
        let out = self.apply_batch(&batched)?;
        out.reshaped(image.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn patch_overwrites_exact_region() {
        // 4x4 zero image, 2x2 ones at (2,2): exactly the bottom-right block.
        let img = Tensor::zeros(&[1, 4, 4, 1]);
        let t = TriggerPattern::white_square(2, 2, 2, 1);
        let out = TriggerRef::Local(&t).apply_batch(&img).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                let expect = if h >= 2 && w >= 2 { 1.0 } else { 0.0 };
                assert_eq!(out.data()[out.idx4(0, h, w, 0)], expect);
            }
        }
        // Source untouched.
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_global_trigger_is_identity() {
        let img = Tensor::filled(&[2, 3, 3, 1], 0.5);
        let g = GlobalTrigger::empty();
        let out = TriggerRef::Global(&g).apply_batch(&img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn global_equals_sequential_locals() {
        let mut img = Tensor::zeros(&[1, 8, 8, 1]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let a = TriggerPattern::white_square(2, 0, 0, 1);
        let b = TriggerPattern::white_square(2, 5, 5, 1);
        let g = GlobalTrigger::new(vec![a.clone(), b.clone()]).unwrap();
        let via_global = TriggerRef::Global(&g).apply_batch(&img).unwrap();
        let via_seq = TriggerRef::Local(&b)
            .apply_batch(&TriggerRef::Local(&a).apply_batch(&img).unwrap())
            .unwrap();
        assert_eq!(via_global, via_seq);
    }

    #[test]
    fn trigger_application_is_idempotent() {
        let img = Tensor::filled(&[1, 6, 6, 1], 0.25);
        let t = TriggerPattern::white_square(3, 3, 3, 1);
        let once = TriggerRef::Local(&t).apply_batch(&img).unwrap();
        let twice = TriggerRef::Local(&t).apply_batch(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn out_of_bounds_anchor_is_an_error() {
        let img = Tensor::zeros(&[1, 4, 4, 1]);
        let t = TriggerPattern::white_square(2, 3, 3, 1);
        assert!(matches!(
            TriggerRef::Local(&t).apply_batch(&img),
            Err(CoreError::TriggerPlacement(_))
        ));
    }

    #[test]
    fn overlapping_locals_rejected() {
        let a = TriggerPattern::white_square(3, 0, 0, 1);
        let b = TriggerPattern::white_square(3, 2, 2, 1);
        assert!(GlobalTrigger::new(vec![a, b]).is_err());
    }

    #[test]
    fn quadrant_corner_locals_are_disjoint() {
        let g = GlobalTrigger::quadrant_corners(16, 16, 1, 2);
        assert_eq!(g.locals().len(), 4);
        // Constructor would have failed on overlap; double-check footprints.
        let again = GlobalTrigger::new(g.locals().to_vec());
        assert!(again.is_ok());
    }
}
