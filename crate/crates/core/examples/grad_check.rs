//! Checks the analytic gradient of every network block against central
//! differences in 64-bit, the same run as `banet grad-check`.
//!
//! cargo run --example grad_check -- [seed] [coords per tensor]

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let per_param = args.get(1).copied().unwrap_or(4) as usize;
    let mut out = std::io::stdout();
    if let Err(e) = banet::cli::grad_check_command(seed, per_param, &mut out) {
        eprintln!("{e}");
        std::process::exit(2);
    }
}
