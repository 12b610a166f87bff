//! Token sequences that remember their spatial layout.

use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// `[B, T, d]` tokens laid out row-major over an `h × w` grid, optionally
/// preceded by one class token (`T = cls + h·w`).
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'g, T: Element = f32> {
    pub tokens: Var<'g, T>,
    pub h: usize,
    pub w: usize,
    pub cls: bool,
}

impl<'g, T: Element> TokenGrid<'g, T> {
    pub fn new(tokens: Var<'g, T>, h: usize, w: usize, cls: bool) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!(
                "token grid needs [B, T, d], got {shape:?}"
            )));
        }
        let expected = usize::from(cls) + h * w;
        if shape[1] != expected {
            return Err(Error::dim(format!(
                "{} tokens do not fit a {h}x{w} grid{}",
                shape[1],
                if cls { " plus class token" } else { "" }
            )));
        }
        Ok(TokenGrid { tokens, h, w, cls })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// The spatial tokens alone.
    pub fn strip_cls(&self) -> Result<TokenGrid<'g, T>> {
        if !self.cls {
            return Ok(*self);
        }
        let t = self.len();
        TokenGrid::new(self.tokens.slice(1, 1, t)?, self.h, self.w, false)
    }

    /// `[B, d, h, w]` feature map; the grid must not carry a class token.
    pub fn to_map(&self) -> Result<Var<'g, T>> {
        if self.cls {
            return Err(Error::contract(
                "feature map requested from a grid that still has its class token",
            ));
        }
        let (b, d) = (self.batch(), self.dim());
        self.tokens
            .permute(&[0, 2, 1])?
            .reshape(&[b, d, self.h, self.w])
    }

    /// Inverse of [`TokenGrid::to_map`].
    pub fn from_map(map: Var<'g, T>) -> Result<TokenGrid<'g, T>> {
        let s = map.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "feature map needs [B, d, h, w], got {s:?}"
            )));
        }
        let tokens = map
            .reshape(&[s[0], s[1], s[2] * s[3]])?
            .permute(&[0, 2, 1])?;
        TokenGrid::new(tokens, s[2], s[3], false)
    }
}
