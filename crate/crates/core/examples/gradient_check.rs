//! Finite-difference check of tape gradients for a small conv + norm + attention graph.

use talkdiff::numcore::gradcheck::check;
use talkdiff::numcore::{normal_tensor, seeded_rng};

fn main() -> talkdiff::Result<()> {
    let mut rng = seeded_rng(1, 0);
    let x = normal_tensor(&[1, 4, 4, 4], &mut rng);
    let k = normal_tensor(&[4, 4, 3, 3], &mut rng);
    let gamma = normal_tensor(&[4], &mut rng);
    let beta = normal_tensor(&[4], &mut rng);
    let ctx = normal_tensor(&[1, 5, 4], &mut rng);
    let r = check(&[x, k, gamma, beta, ctx], &mut rng, |t, v| {
        let h = t.conv2d(v[0], v[1], 1, 1)?;
        let h = t.group_norm(h, v[2], v[3], 2)?;
        let h = t.silu(h)?;
        let q = t.reshape(h, &[1, 4, 16])?;
        let q = t.permute(q, &[0, 2, 1])?;
        t.scaled_dot_attention(q, v[4], v[4])
    })?;
    println!("checked {} partial derivatives, max relative error {:.2e}", r.checked, r.max_rel_error);
    Ok(())
}
