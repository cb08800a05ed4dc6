//! Builds a U-Net operator graph, round-trips it through its document
//! form and prints the longest-path progress of every activation.

use graphstitch::graph::{annotate_progress, build_unet_template, deserialize, serialize, NodeKind, UNetConfig};

fn main() -> graphstitch::Result<()> {
    let g = build_unet_template(&UNetConfig { image_size: 16, ..UNetConfig::default() })?;
    g.validate()?;
    let (doc, weights) = serialize(&g);
    let back = deserialize(&doc, &weights)?;
    println!("{} nodes, {} edges, document round trip exact: {}", g.len(), g.edges().len(), back == g);
    let p = annotate_progress(&g)?;
    for n in g.ordered() {
        if let NodeKind::Operator { op } = &n.kind {
            if op.is_activation() {
                println!("{:<12} scale {:>2}  d_in {:>2}  d_out {:>2}  progress {:.3}", n.label, n.scale, p.d_in[&n.id], p.d_out[&n.id], p.of(n.id)?);
            }
        }
    }
    Ok(())
}
