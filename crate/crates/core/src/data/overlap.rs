use crate::error::{Error, Result};

/// Reference tiles overlapping the query by more than this are positives.
pub const POSITIVE_IOU: f64 = 0.39;
/// Inclusive IoU range of semi-positive references.
pub const SEMI_POSITIVE_IOU: (f64, f64) = (1.0 / 7.0, 9.0 / 23.0);

/// Axis-aligned square footprint in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tile {
    pub origin: (f64, f64),
    pub size: f64,
}

impl Tile {
    pub fn new(origin: (f64, f64), size: f64) -> Self {
        Self { origin, size }
    }
}

/// Intersection over union of two tiles.
pub fn iou(a: &Tile, b: &Tile) -> Result<f64> {
    if !(a.size > 0.0 && b.size > 0.0) {
        return Err(Error::contract(format!(
            "tile sizes must be positive, got {} and {}",
            a.size, b.size
        )));
    }
    let overlap = |a0: f64, b0: f64| ((a0 + a.size).min(b0 + b.size) - a0.max(b0)).max(0.0);
    let inter = overlap(a.origin.0, b.origin.0) * overlap(a.origin.1, b.origin.1);
    Ok(inter / (a.size * a.size + b.size * b.size - inter))
}

/// Reference ids that count as positive or semi-positive for one query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverlapLabels {
    pub positives: Vec<u64>,
    pub semi_positives: Vec<u64>,
}

/// Labels every reference by its overlap with `query`. Positive wins over
/// semi-positive where the two ranges meet.
pub fn iou_label(query: &Tile, references: &[(u64, Tile)]) -> Result<OverlapLabels> {
    let mut out = OverlapLabels::default();
    for (id, tile) in references {
        let v = iou(query, tile)?;
        if v > POSITIVE_IOU {
            out.positives.push(*id);
        } else if v >= SEMI_POSITIVE_IOU.0 && v <= SEMI_POSITIVE_IOU.1 {
            out.semi_positives.push(*id);
        }
    }
    Ok(out)
}

/// Flattened `n x n` mask over a batch: entry `(i, j)` is set when aerial
/// tile `j` is a semi-positive for ground tile `i`. The diagonal is never set.
pub fn mask_for_batch(tiles: &[Tile]) -> Result<Vec<bool>> {
    let n = tiles.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = iou(&tiles[i], &tiles[j])?;
                mask[i * n + j] = v >= SEMI_POSITIVE_IOU.0 && v <= POSITIVE_IOU;
            }
        }
    }
    Ok(mask)
}
