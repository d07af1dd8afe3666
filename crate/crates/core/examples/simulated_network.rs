//! The seeded network: random per-link delays that keep each link FIFO,
//! and injected duplicates.

use elastream::simnet::{Delay, LinkConfig, NodeId, SimNet};

fn main() {
    let mut net = SimNet::new(3);
    for (from, to) in [(1, 3), (2, 3)] {
        net.configure(LinkConfig {
            from: NodeId(from),
            to: NodeId(to),
            delay: Delay::Uniform { lo: 1, hi: 5 },
            duplicate_prob: if from == 2 { 0.5 } else { 0.0 },
        })
        .unwrap();
    }
    for i in 0..5 {
        net.send(NodeId(1), NodeId(3), format!("a{i}")).unwrap();
        net.send(NodeId(2), NodeId(3), format!("b{i}")).unwrap();
    }
    while !net.is_idle() {
        for d in net.step() {
            println!(
                "step {:2}: {} -> {} {}{}",
                d.step,
                d.from,
                d.to,
                d.message,
                if d.duplicate { " (duplicate)" } else { "" }
            );
        }
    }
}
