//! Serves the in-process stub kernel over stdin/stdout, one JSON message per
//! line, so the process client can be exercised without Python.

use std::io::{BufRead, Write};

use feedlens_agent::kernel::stub::StubKernel;
use feedlens_agent::kernel::KernelMessage;

fn main() {
    let mut kernel = StubKernel::new();
    let mut out = std::io::stdout().lock();
    for line in std::io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match KernelMessage::from_line(&line) {
            Ok(msg) => kernel.handle(msg),
            Err(e) => KernelMessage::failure("", None, &e),
        };
        if writeln!(out, "{}", reply.to_line())
            .and_then(|_| out.flush())
            .is_err()
        {
            break;
        }
    }
}
