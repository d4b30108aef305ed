//! Forward throughput of same-shape lmKAN layers across grid resolutions.
//!
//! `cargo run --release -p lmkan --example grid_throughput -- [width] [batch]`

use lmkan::bench::{bench_model, DEFAULT_TIMED, DEFAULT_WARMUP};
use lmkan::{Block, LmKanLayer, Model, PrecondBlock};

fn main() -> lmkan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).map_or(128, |s| s.parse().unwrap());
    let batch: usize = args.get(2).map_or(4096, |s| s.parse().unwrap());
    println!("G,rows_per_sec,dense_rows_per_sec,slowdown");
    for g in [4, 12, 40] {
        let mut layer = LmKanLayer::init(width, width, g, 1, Some(1.0))?;
        layer.set_gamma(1.0);
        let model = Model::new(vec![Block::LmKan {
            block: PrecondBlock::pure(layer),
            norm: None,
        }])?;
        let r = bench_model(&model, batch, DEFAULT_WARMUP, DEFAULT_TIMED, 0)?;
        println!("{g},{:.4e},{:.4e},{:.2}", r.median_rows_per_sec, r.reference_rows_per_sec, r.slowdown);
    }
    Ok(())
}
