//! Dice and HD95 of two overlapping squares, with isotropic and
//! anisotropic pixel spacing.

use graphstitch::evaluation::{dice, hd95, ConfusionCounts};

fn square(size: usize, top: usize, left: usize, side: usize) -> Vec<u8> {
    (0..size * size)
        .map(|q| {
            let (r, c) = (q / size, q % size);
            u8::from(r >= top && r < top + side && c >= left && c < left + side)
        })
        .collect()
}

fn main() -> graphstitch::Result<()> {
    let reference = square(16, 4, 4, 6);
    let pred = square(16, 5, 6, 6);
    let c = ConfusionCounts::from_masks(&pred, &reference)?;
    println!("tp {} fp {} fn {} -> Dice {:.4}", c.tp, c.fp, c.fn_, dice(&c));
    for spacing in [[1.0, 1.0], [2.0, 0.5]] {
        println!("HD95 at spacing {spacing:?}: {:.4}", hd95(&pred, &reference, 16, 16, spacing)?);
    }
    println!("HD95 with an empty prediction: {:.4}", hd95(&vec![0; 256], &reference, 16, 16, [1.0, 1.0])?);
    Ok(())
}
