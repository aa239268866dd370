//! Writes a coupled-sine drilling-style log, optionally with a regime shift.
//!
//! `cargo run --example synthetic_csv -- OUT.csv [ROWS] [SHIFT_ROW] [GAIN]`

use crossalarm_core::synthetic::{generate, RegimeShift, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().ok_or("usage: synthetic_csv OUT.csv [ROWS] [SHIFT_ROW] [GAIN]")?;
    let rows = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let shift_row: Option<usize> = args.next().map(|s| s.parse()).transpose()?;
    let gain = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2.5);
    let shift = shift_row.map(|start_row| RegimeShift {
        start_row,
        // torque, wob, rop
        channels: vec![3, 8, 9],
        ramp: 30,
        gain,
    });
    let frame = generate(&SyntheticSpec { rows, shift, ..Default::default() })?;
    frame.write_csv(std::path::Path::new(&out))?;
    println!("wrote {} rows to {out}", frame.rows());
    Ok(())
}
