//! Print the KL weight produced by each annealing schedule.
//!
//! ```text
//! cargo run --release --example anneal_schedules
//! ```

use seqvae::AnnealSchedule;

fn main() -> seqvae::Result<()> {
    let total = 40;
    let schedules = [
        ("constant 1", AnnealSchedule::constant(1.0)?),
        ("linear 20", AnnealSchedule::linear(20)?),
        ("cyclical 4x", AnnealSchedule::cyclical(4, total, 0.5)?),
    ];
    print!("{:>5}", "step");
    for (name, _) in &schedules {
        print!("{name:>14}");
    }
    println!();
    for step in (0..=total).step_by(2) {
        print!("{step:>5}");
        for (_, s) in &schedules {
            print!("{:>14.3}", s.beta_at(step));
        }
        println!();
    }
    Ok(())
}
