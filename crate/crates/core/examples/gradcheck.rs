//! Finite-difference gradient checks for every block, then the same check
//! with a corrupted matmul backward rule.
//!
//! cargo run --example gradcheck [-- block]

use himode::harness::{gradcheck_block, BLOCKS};
use himode_autograd::OpKind;

fn main() -> himode::Result<()> {
    let only = std::env::args().nth(1);
    for block in BLOCKS
        .iter()
        .filter(|b| only.as_deref().is_none_or(|o| o == **b))
    {
        let report = gradcheck_block(block, 7, None)?;
        println!("{report}");
        for p in &report.params {
            if p.checked < p.sampled || p.max_rel_err > 1e-7 {
                println!(
                    "    {:<48} {:.3e} compared {}/{}",
                    p.name, p.max_rel_err, p.checked, p.sampled
                );
            }
        }
    }
    let faulty = gradcheck_block("encoder", 7, Some(OpKind::MatMul))?;
    println!("fault injected into matmul backward:\n{faulty}");
    Ok(())
}
