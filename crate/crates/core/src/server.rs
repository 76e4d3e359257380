//! Line transports for the request protocol.
//!
//! Each connection owns a fresh [`Session`]; nothing is shared between them.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread;

use crate::error::Result;
use crate::protocol::{Session, SessionConfig};

/// Serves one session over a reader/writer pair until end of input.
/// Blank lines are skipped; every other line gets exactly one response.
pub fn serve_lines<R: BufRead, W: Write>(
    cfg: &SessionConfig,
    input: R,
    mut output: W,
) -> Result<()> {
    let mut session = Session::new(cfg)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = session.handle_line(&line);
        output.write_all(resp.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

pub fn serve_stdio(cfg: &SessionConfig) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_lines(cfg, stdin.lock(), stdout.lock())
}

fn serve_conn(cfg: &SessionConfig, stream: TcpStream) -> Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_lines(cfg, reader, stream)
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(cfg: &SessionConfig, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let cfg = cfg.clone();
        thread::spawn(move || {
            if let Err(e) = serve_conn(&cfg, stream) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

pub fn bind(addr: impl ToSocketAddrs) -> Result<TcpListener> {
    Ok(TcpListener::bind(addr)?)
}
