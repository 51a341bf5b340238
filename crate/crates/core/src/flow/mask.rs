//! Image shapes and coupling-layer masks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `channels × height × width`, flattened channel-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.h + i) * self.w + j
    }

    /// Inverse of [`Shape3::index`].
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let j = idx % self.w;
        let i = (idx / self.w) % self.h;
        let c = idx / (self.w * self.h);
        (c, i, j)
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

impl FromStr for Shape3 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[c, h, w]) if c > 0 && h > 0 && w > 0 => Ok(Shape3 { c, h, w }),
            _ => Err(Error::config(format!(
                "shape must look like CxHxW with positive extents, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Checkerboard,
    Channelwise,
    Horizontal,
    Cycle,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::Checkerboard,
        MaskKind::Channelwise,
        MaskKind::Horizontal,
        MaskKind::Cycle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Checkerboard => "checkerboard",
            MaskKind::Channelwise => "channelwise",
            MaskKind::Horizontal => "horizontal",
            MaskKind::Cycle => "cycle",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mask kind {s:?} (expected checkerboard, channelwise, horizontal or cycle)"
                ))
            })
    }
}

/// Quadrants in cycle order: top-left, top-right, bottom-right, bottom-left.
fn quadrant_of(shape: &Shape3, i: usize, j: usize) -> usize {
    let top = i < shape.h / 2;
    let left = j < shape.w / 2;
    match (top, left) {
        (true, true) => 0,
        (true, false) => 1,
        (false, false) => 2,
        (false, true) => 3,
    }
}

/// Partition of a layer's input coordinates into the coordinates a
/// coupling layer rewrites (`change`) and those its st-network reads
/// (`condition`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub kind: MaskKind,
    pub phase: usize,
    pub shape: Shape3,
    pub change: Vec<bool>,
    pub condition: Vec<bool>,
    change_idx: Arc<[usize]>,
    condition_idx: Arc<[usize]>,
    keep_idx: Arc<[usize]>,
}

impl Mask {
    pub fn new(kind: MaskKind, shape: Shape3, phase: usize) -> Result<Self> {
        let fail = |why: &str| {
            Err(Error::config(format!(
                "{kind} mask cannot be built for shape {shape}: {why}"
            )))
        };
        match kind {
            MaskKind::Channelwise if shape.c % 2 != 0 => return fail("channel count must be even"),
            MaskKind::Horizontal | MaskKind::Cycle if shape.h % 2 != 0 || shape.w % 2 != 0 => {
                return fail("height and width must be even")
            }
            _ => {}
        }
        let n = shape.numel();
        let mut change = vec![false; n];
        let mut condition = vec![false; n];
        for idx in 0..n {
            let (c, i, j) = shape.coords(idx);
            match kind {
                MaskKind::Checkerboard => {
                    change[idx] = (i + j + phase) % 2 == 0;
                    condition[idx] = !change[idx];
                }
                MaskKind::Channelwise => {
                    let second_half = c >= shape.c / 2;
                    change[idx] = second_half == (phase % 2 == 0);
                    condition[idx] = !change[idx];
                }
                MaskKind::Horizontal => {
                    let bottom = i >= shape.h / 2;
                    change[idx] = bottom == (phase % 2 == 0);
                    condition[idx] = !change[idx];
                }
                MaskKind::Cycle => {
                    let q = quadrant_of(&shape, i, j);
                    change[idx] = q == phase % 4;
                    condition[idx] = q == (phase + 3) % 4;
                }
            }
        }
        let change_count = change.iter().filter(|&&b| b).count();
        if change_count == 0 || change_count == n || !condition.iter().any(|&b| b) {
            return fail("mask would leave nothing to change or nothing to condition on");
        }
        let pick = |flags: &[bool], want: bool| -> Arc<[usize]> {
            flags
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == want)
                .map(|(i, _)| i)
                .collect()
        };
        Ok(Mask {
            kind,
            phase,
            shape,
            change_idx: pick(&change, true),
            condition_idx: pick(&condition, true),
            keep_idx: pick(&change, false),
            change,
            condition,
        })
    }

    pub fn change_idx(&self) -> Arc<[usize]> {
        self.change_idx.clone()
    }

    pub fn condition_idx(&self) -> Arc<[usize]> {
        self.condition_idx.clone()
    }

    /// Every coordinate the layer leaves untouched (condition included).
    pub fn keep_idx(&self) -> Arc<[usize]> {
        self.keep_idx.clone()
    }

    pub fn change_count(&self) -> usize {
        self.change_idx.len()
    }

    pub fn condition_count(&self) -> usize {
        self.condition_idx.len()
    }

    /// Textual dump: one grid per channel with `C` for change, `o` for
    /// condition and `.` for pass-through coordinates, followed by the list
    /// of change coordinates.
    pub fn render(&self) -> String {
        let s = self.shape;
        let mut out = format!("mask {} shape {} phase {}\n", self.kind, s, self.phase);
        for c in 0..s.c {
            out.push_str(&format!("channel {c}\n"));
            for i in 0..s.h {
                let row: String = (0..s.w)
                    .map(|j| {
                        let idx = s.index(c, i, j);
                        if self.change[idx] {
                            'C'
                        } else if self.condition[idx] {
                            'o'
                        } else {
                            '.'
                        }
                    })
                    .collect();
                out.push_str(&row);
                out.push('\n');
            }
        }
        let coords: Vec<String> = self
            .change_idx
            .iter()
            .map(|&idx| {
                let (c, i, j) = s.coords(idx);
                if s.c == 1 {
                    format!("({i},{j})")
                } else {
                    format!("({c},{i},{j})")
                }
            })
            .collect();
        out.push_str(&format!("change={{{}}}\n", coords.join(",")));
        out
    }
}
