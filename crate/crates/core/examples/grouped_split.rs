//! Splits video-like grouped data into five folds and a test split with
//! bin covering, keeping every group inside one split.

use graphstitch::evaluation::{bin_cover, split_dataset};

fn main() -> graphstitch::Result<()> {
    let sizes = [12, 9, 9, 8, 7, 7, 6, 5, 5, 4, 3, 3, 2, 2, 1];
    let bins = bin_cover(&sizes, 0);
    let mut fill = [0usize; 6];
    for (g, b) in bins.iter().enumerate() {
        fill[*b] += sizes[g];
    }
    println!("bin fills {fill:?}");
    let groups: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat(g).take(n)).collect();
    let plan = split_dataset(groups.len(), Some(&groups), 0)?;
    println!("fold sizes {:?}, test {}", plan.fold_sizes(), plan.test().len());
    Ok(())
}
