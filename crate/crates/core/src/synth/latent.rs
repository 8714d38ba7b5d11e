use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 6;
pub const NUM_POSITIONS: usize = GRID_ROWS * GRID_COLS;
pub const GRID_SPACING_M: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    None,
}

impl Direction {
    /// `-1` for left, `+1` for right, `0` otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Left => -1.0,
            Direction::Right => 1.0,
            Direction::None => 0.0,
        }
    }

    pub fn flipped(self) -> Result<Self> {
        match self {
            Direction::Left => Ok(Direction::Right),
            Direction::Right => Ok(Direction::Left),
            Direction::None => Err(Error::domain("symmetric action has no mirror direction")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::None => "none",
        }
    }
}

/// Generative latent of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentClip {
    pub class_id: usize,
    pub direction: Direction,
    pub position_index: usize,
    pub seed: u64,
}

impl LatentClip {
    /// Floor coordinates in metres, grid centred on the origin.
    pub fn position_xy(&self) -> (f64, f64) {
        let row = self.position_index / GRID_COLS;
        let col = self.position_index % GRID_COLS;
        (
            (col as f64 - (GRID_COLS as f64 - 1.0) / 2.0) * GRID_SPACING_M,
            (row as f64 - (GRID_ROWS as f64 - 1.0) / 2.0) * GRID_SPACING_M,
        )
    }

    pub fn mirrored(&self) -> Result<Self> {
        Ok(Self {
            direction: self.direction.flipped()?,
            ..*self
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_centred() {
        let corner = LatentClip { class_id: 0, direction: Direction::Left, position_index: 0, seed: 0 };
        assert_eq!(corner.position_xy(), (-1.25, -0.75));
        let far = LatentClip { position_index: NUM_POSITIONS - 1, ..corner };
        assert_eq!(far.position_xy(), (1.25, 0.75));
    }

    #[test]
    fn flipping_twice_is_identity() {
        assert_eq!(Direction::Left.flipped().unwrap().flipped().unwrap(), Direction::Left);
        assert!(Direction::None.flipped().is_err());
    }
}
