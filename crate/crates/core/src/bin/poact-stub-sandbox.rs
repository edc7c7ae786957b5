//! Standalone stub sandbox speaking the executor wire protocol on stdio.

use std::time::Duration;

use clap::Parser;
use poact_core::stub::{ServeEnd, StdioIo, StubSandbox};

#[derive(Parser)]
#[command(about = "Stub code sandbox speaking NDJSON frames on stdin/stdout")]
struct Args {
    /// Comma-separated top-level modules code may import.
    #[arg(long, value_delimiter = ',', default_value = "")]
    whitelist: Vec<String>,
    /// Exit if no handshake arrives within this many milliseconds.
    #[arg(long, default_value_t = 10_000)]
    handshake_timeout_ms: u64,
}

fn main() {
    let args = Args::parse();
    let whitelist = args.whitelist.into_iter().filter(|m| !m.is_empty()).collect();
    let mut sandbox =
        StubSandbox::new(whitelist).with_handshake_timeout(Duration::from_millis(args.handshake_timeout_ms));
    let stdin = std::io::BufReader::new(std::io::stdin());
    let mut io = StdioIo::new(stdin, std::io::stdout());
    let code = match sandbox.serve(&mut io) {
        ServeEnd::HostClosed => 0,
        ServeEnd::Exited => 1,
        ServeEnd::HandshakeTimeout => 2,
    };
    std::process::exit(code);
}
