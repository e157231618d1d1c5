use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Excerpt geometry in timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub width: usize,
    pub stride: usize,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            width: 200,
            stride: 100,
        }
    }
}

/// Start offsets `0, s, 2s, ...` of every full window, plus one window
/// aligned to the end when the regular grid does not reach it.
pub fn window_starts(len: usize, width: usize, stride: usize) -> Result<Vec<usize>> {
    if width == 0 || stride == 0 {
        return Err(Error::domain("window width and stride must be positive"));
    }
    if width > len {
        return Err(Error::domain(format!(
            "window width {width} exceeds sequence length {len}"
        )));
    }
    let mut starts: Vec<usize> = (0..=len - width).step_by(stride).collect();
    let last = *starts.last().expect("at least one start");
    if last + width < len {
        starts.push(len - width);
    }
    Ok(starts)
}

pub fn window_excerpts(signal: &Matrix, width: usize, stride: usize) -> Result<Vec<Matrix>> {
    window_starts(signal.rows(), width, stride)?
        .into_iter()
        .map(|s| signal.slice_rows(s, width))
        .collect()
}
