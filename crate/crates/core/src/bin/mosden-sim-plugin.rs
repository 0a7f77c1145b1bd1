//! Reference simulated sensor plugin speaking the stdio plugin protocol.

use std::io;

use mosden_core::sim::{run_stdio, SimPlugin};

fn main() -> io::Result<()> {
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    run_stdio(stdin, stdout, SimPlugin::default())
}
