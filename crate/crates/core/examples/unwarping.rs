//! Applies monotone time transforms: the identity, an analytic rate, and a
//! randomly initialized network.
//!
//! ```bash
//! cargo run --release --example unwarping
//! ```

use ctes_retrieval::datagen::{apply_warp, WarpFamily};
use ctes_retrieval::seed::rng;
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::EventSequence;

fn main() {
    let config = UnwarpConfig {
        hidden: (16, 16),
        ..UnwarpConfig::default()
    };
    let seq = EventSequence::from_parts("s", &[0.3, 0.8, 1.1, 1.9, 2.4], &[0, 1, 0, 2, 1], 3.0);
    let warped = apply_warp(&seq, WarpFamily::Affine { lo: 0.5, hi: 2.0 }, 1.5);
    println!("original: {:?}", seq.times());
    println!("warped:   {:?}", warped.times());

    let (same, _) = Unwarp::identity(config).unwarp_sequence(&warped);
    println!("identity unwarp: {:?}", same.times());

    // u(t) = 2t integrates to t^2.
    let square = Unwarp::with_hook(config, |t| 2.0 * t);
    for t in [0.5, 1.0, 2.0] {
        println!("U({t}) with u(t) = 2t: {:.6}", square.unwarp_time(t));
    }

    let mut net = Unwarp::new(config, &mut rng(3));
    for v in net.phi_mut().iter_mut() {
        *v *= 30.0;
    }
    let (out, ties) = net.unwarp_sequence(&warped);
    println!("network unwarp: {:?} (ties separated: {ties})", out.times());
    println!("deviation penalty on [0, 3]: {:.4}", net.penalty(3.0));
}
