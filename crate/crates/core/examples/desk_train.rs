//! Desk-scale training run: `cargo run --release --example desk_train -- [batch] [epochs] [lr]`.

use ncup::train::{train_loop, TrainConfig};

fn main() -> ncup::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::desk_scale(0);
    if let Some(b) = args.first() {
        cfg.batch_size = b.parse().expect("batch size");
    }
    if let Some(e) = args.get(1) {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(lr) = args.get(2) {
        cfg.lr = lr.parse().expect("learning rate");
    }
    let start = std::time::Instant::now();
    train_loop(&cfg, |e| {
        println!("{e} ({:.1}s)", start.elapsed().as_secs_f64())
    })?;
    Ok(())
}
