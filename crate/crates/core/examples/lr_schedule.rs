//! Prints the cosine warm-restart learning rate at every restart and at a
//! few points inside each period.
//!
//! cargo run --example lr_schedule

use banet::optim::LrSchedule;

fn main() -> banet::Result<()> {
    let s = LrSchedule::default();
    println!("periods {:?}, total {} epochs", s.periods, s.total_epochs);
    let bounds = s.boundaries();
    for w in bounds.windows(2) {
        let (start, end) = (w[0] as f64, w[1] as f64);
        let len = end - start;
        let row: Vec<String> = [0.0, 0.25, 0.5, 0.75]
            .iter()
            .map(|q| format!("{:.3e}", s.lr_at(start + q * len).unwrap()))
            .collect();
        println!("epochs {:>2}..{:<3} {}", w[0], w[1], row.join("  "));
    }
    println!(
        "tail from {}: {:.0e}",
        bounds.last().unwrap(),
        s.lr_at(s.total_epochs as f64 - 1.0)?
    );
    Ok(())
}
