use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts of a binary prediction against a binary reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[u8], reference: &[u8]) -> Result<Self> {
        if pred.len() != reference.len() {
            return Err(Error::shape("confusion", format!("{} vs {} pixels", pred.len(), reference.len())));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &r) in pred.iter().zip(reference) {
            match (p > 0, r > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// How directed boundary distances are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdMode {
    /// 95th percentile of both directed distance sets pooled together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background. Returned as `(row, col)`.
pub fn boundary(mask: &[u8], height: usize, width: usize) -> Vec<(usize, usize)> {
    let fg = |r: usize, c: usize| mask[r * width + c] > 0;
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if !fg(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == height
                || c + 1 == width
                || !fg(r - 1, c)
                || !fg(r + 1, c)
                || !fg(r, c - 1)
                || !fg(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Linear interpolation between order statistics, `q` in `[0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Nearest-point distances from every point of `from` to the set `to`.
///
/// `to` is bucketed by row; rows are scanned outward from the query row
/// and the scan stops once the row gap alone exceeds the best distance.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], height: usize, spacing: [f64; 2]) -> Vec<f64> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); height];
    for &(r, c) in to {
        rows[r].push(c);
    }
    let nearest_in_row = |cols: &[usize], c: usize| -> Option<usize> {
        // cols are ascending because boundary() scans row-major.
        let i = cols.partition_point(|&x| x < c);
        let mut best: Option<usize> = None;
        for k in [i.checked_sub(1), Some(i)].into_iter().flatten() {
            if let Some(&x) = cols.get(k) {
                let d = x.abs_diff(c);
                if best.map_or(true, |b| d < b) {
                    best = Some(d);
                }
            }
        }
        best
    };
    from.iter()
        .map(|&(r, c)| {
            let mut best_sq = f64::INFINITY;
            for gap in 0..height {
                let dy = gap as f64 * spacing[0];
                if dy * dy > best_sq {
                    break;
                }
                let candidates = [r.checked_sub(gap), if gap > 0 { Some(r + gap) } else { None }];
                for row in candidates.into_iter().flatten().filter(|&row| row < height) {
                    if let Some(dc) = nearest_in_row(&rows[row], c) {
                        let dx = dc as f64 * spacing[1];
                        best_sq = best_sq.min(dy * dy + dx * dx);
                    }
                }
            }
            best_sq.sqrt()
        })
        .collect()
}

/// 95th-percentile Hausdorff distance between two binary masks.
///
/// `spacing` is the physical size of a pixel along (rows, cols). Both
/// empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: &[u8], reference: &[u8], height: usize, width: usize, spacing: [f64; 2]) -> Result<f64> {
    hd95_with(pred, reference, height, width, spacing, HdMode::Pooled)
}

pub fn hd95_with(pred: &[u8], reference: &[u8], height: usize, width: usize, spacing: [f64; 2], mode: HdMode) -> Result<f64> {
    if pred.len() != height * width || reference.len() != height * width {
        return Err(Error::shape(
            "hd95",
            format!("{} and {} pixels for a {height}x{width} image", pred.len(), reference.len()),
        ));
    }
    let bp = boundary(pred, height, width);
    let br = boundary(reference, height, width);
    match (bp.is_empty(), br.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = (height as f64 * spacing[0], width as f64 * spacing[1]);
            return Ok((h * h + w * w).sqrt());
        }
        _ => {}
    }
    let mut ab = directed_distances(&bp, &br, height, spacing);
    let mut ba = directed_distances(&br, &bp, height, spacing);
    Ok(match mode {
        HdMode::Pooled => {
            ab.append(&mut ba);
            percentile(&mut ab, 0.95)
        }
        HdMode::MaxDirected => percentile(&mut ab, 0.95).max(percentile(&mut ba, 0.95)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let c = |tp, fp, fn_| ConfusionCounts { tp, fp, fn_, tn: 0 };
        assert_eq!(dice(&c(5, 0, 0)), 1.0);
        assert_eq!(dice(&c(0, 3, 0)), 0.0);
        assert_eq!(dice(&c(0, 0, 2)), 0.0);
        assert!((dice(&c(2, 1, 1)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&c(0, 0, 0)), 1.0);
    }

    #[test]
    fn counts_cover_every_pixel() {
        let c = ConfusionCounts::from_masks(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.total(), 4);
    }

    fn single(h: usize, w: usize, r: usize, c: usize) -> Vec<u8> {
        let mut m = vec![0; h * w];
        m[r * w + c] = 1;
        m
    }

    #[test]
    fn hd95_examples() {
        let a = single(5, 5, 2, 2);
        assert_eq!(hd95(&a, &a, 5, 5, [1.0, 1.0]).unwrap(), 0.0);
        let b = single(5, 5, 3, 2);
        assert_eq!(hd95(&a, &b, 5, 5, [1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(hd95(&a, &b, 5, 5, [2.0, 1.0]).unwrap(), 2.0);
        let empty = vec![0; 25];
        assert_eq!(hd95(&empty, &empty, 5, 5, [1.0, 1.0]).unwrap(), 0.0);
        assert!((hd95(&a, &empty, 5, 5, [1.0, 2.0]).unwrap() - (25.0f64 + 100.0).sqrt()).abs() < 1e-12);
        assert!(hd95(&a, &b[..24], 5, 5, [1.0, 1.0]).is_err());
    }

    #[test]
    fn boundary_excludes_interior() {
        let m = vec![1u8; 9];
        let b = boundary(&m, 3, 3);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![0.0, 10.0];
        assert!((percentile(&mut v, 0.95) - 9.5).abs() < 1e-12);
        let mut v = vec![3.0];
        assert_eq!(percentile(&mut v, 0.95), 3.0);
    }

    #[test]
    fn directed_modes_differ_on_asymmetric_masks() {
        let mut a = vec![0u8; 100];
        let mut b = vec![0u8; 100];
        for c in 0..10 {
            a[c] = 1;
        }
        b[5] = 1;
        let pooled = hd95_with(&a, &b, 10, 10, [1.0, 1.0], HdMode::Pooled).unwrap();
        let directed = hd95_with(&a, &b, 10, 10, [1.0, 1.0], HdMode::MaxDirected).unwrap();
        assert!(directed >= pooled);
    }
}
