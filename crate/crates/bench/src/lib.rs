//! Fixtures shared by the criterion benches.

use sat_core::maskops::{binarize, BinaryMask};
use sat_core::synthdata::{easy_script, render, SyntheticSequence};
use sat_core::{Grid, ProbabilityMap};

/// Soft disk of radius `side / 4` with a faint second blob in one corner.
pub fn blob_map(side: usize) -> ProbabilityMap {
    let c = side as f64 / 2.0;
    let r = side as f64 / 4.0;
    ProbabilityMap::from_grid_clamped(Grid::from_fn(side, side, |x, y| {
        let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        let corner = if x < side / 8 && y < side / 8 { 0.6 } else { 0.0 };
        (1.0 / (1.0 + ((d - r) / 1.5).exp())).max(corner)
    }))
}

pub fn blob_mask(side: usize) -> BinaryMask {
    binarize(&blob_map(side), 0.5)
}

/// A short 128² easy sequence.
pub fn scene(frames: usize) -> SyntheticSequence {
    render(&easy_script("bench", frames, 4)).expect("easy script renders")
}
